"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is float64. Ops execute eagerly on numpy arrays and record a
backward closure, so the computation graph is the implicit DAG of Tensor
nodes built during the forward pass. `backward(loss)` topologically sorts
that DAG and visits each node exactly once, accumulating gradients into
`Tensor.grad`.

The op set is deliberately small: exactly what the backbone and the
mixture-of-Gaussians head need. No GPU, no fusion, no fancy broadcasting
beyond what numpy does (gradients are un-broadcast by summing over the
expanded axes).

Distinct graphs are independent and may run on distinct threads; a single
graph is single-threaded during a forward or backward pass.
"""

from __future__ import annotations

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


class Tensor:
    """A node in the computation graph.

    `data` is always a float64 ndarray. Leaf tensors created with
    `requires_grad=True` (parameters) receive gradients; constants do not.
    Interior nodes carry a backward closure mapping the upstream gradient
    to per-parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    """Named leaf tensor that participates in gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(data, parents, bwd):
    out = Tensor(data)
    for p in parents:
        if p.requires_grad:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
            break
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = constant(a), constant(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = constant(a), constant(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _node(ad * bd, (a, b), bwd)


def neg(a):
    a = constant(a)

    def bwd(g):
        return (-g,)

    return _node(-a.data, (a,), bwd)


def exp(a):
    a = constant(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node(out, (a,), bwd)


def log(a):
    a = constant(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _node(np.log(ad), (a,), bwd)


def tanh(a):
    a = constant(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bwd)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """Tanh-approximation GELU; derivative is exact for this approximation."""
    a = constant(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """2D@2D, 3D@3D (batched), or 3D@2D (linear map on the last axis)."""
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    _check(ad.ndim in (2, 3) and bd.ndim in (2, 3), "matmul",
           f"operands must be 2D or 3D, got {ad.ndim}D and {bd.ndim}D")
    _check(ad.shape[-1] == bd.shape[-2 if bd.ndim > 1 else 0], "matmul",
           f"inner dims disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3:
        _check(ad.shape[0] == bd.shape[0], "matmul",
               f"batch dims disagree: {ad.shape} @ {bd.shape}")

    out = ad @ bd

    def bwd(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 3 and bd.ndim == 3:
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g
        if ad.ndim == 3 and bd.ndim == 2:
            m, p = bd.shape
            ga = g @ bd.T
            gb = ad.reshape(-1, m).T @ g.reshape(-1, p)
            return ga, gb
        # 2D @ 3D
        ga = (g @ bd.transpose(0, 2, 1)).sum(axis=0)
        return ga, ad.T @ g

    return _node(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization / softmax family


def softmax(a):
    """Softmax over the last axis, max-subtracted for stability."""
    a = constant(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bwd)


def logsumexp(a, keepdims=False):
    """log-sum-exp over the last axis with max subtraction."""
    a = constant(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, -1)
        return (gk * soft,)

    return _node(out if keepdims else out.squeeze(-1), (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-6):
    """Affine normalization over the last axis: gain * (x - mu)/sd + bias."""
    a, gain, bias = constant(a), constant(gain), constant(bias)
    w = a.shape[-1]
    _check(gain.shape == (w,) and bias.shape == (w,), "layer_norm",
           f"gain/bias must be ({w},), got {gain.shape} and {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        ggain = (g * xhat).reshape(-1, w).sum(axis=0)
        gbias = g.reshape(-1, w).sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _node(out, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# indexing / shaping


def gather(table, idx):
    """Select rows of `table` (first axis) by an integer index array."""
    table = constant(table)
    idx = np.asarray(idx)
    _check(np.issubdtype(idx.dtype, np.integer), "gather", "indices must be integers")
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < table.shape[0]),
           "gather", f"index out of range for table with {table.shape[0]} rows")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _node(table.data[idx], (table,), bwd)


def reshape(a, shape):
    a = constant(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = constant(a)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), bwd)


def concat(parts, axis=-1):
    parts = [constant(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def sum_(a, axis=None, keepdims=False):
    a = constant(a)
    shp = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shp).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shp).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    a = constant(a)
    shp = a.shape
    count = a.data.size if axis is None else shp[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, shp).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / count, shp).copy(),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# ---------------------------------------------------------------------------
# squared-distance kernel


def lowrank_sqdist(z, mu, M, s):
    """Squared distances ||z_n - (M_k mu_{n,k} + s_k)||^2 -> (N, K).

    Forward uses the expanded identity with cached M^T M and M^T s so the
    cost stays O(N K h + K H h) instead of materializing the full means;
    backward recomputes the residual directly.

    Shapes: z (N, H), mu (N, K, h), M (K, H, h), s (K, H).
    """
    z, mu, M, s = constant(z), constant(mu), constant(M), constant(s)
    N, H = z.shape
    _check(mu.ndim == 3 and mu.shape[0] == N, "lowrank_sqdist",
           f"mu must be (N, K, h) with N={N}, got {mu.shape}")
    K, h = mu.shape[1], mu.shape[2]
    _check(M.shape == (K, H, h), "lowrank_sqdist",
           f"M must be ({K}, {H}, {h}), got {M.shape}")
    _check(s.shape == (K, H), "lowrank_sqdist",
           f"s must be ({K}, {H}), got {s.shape}")

    zd, mud, Md, sd = z.data, mu.data, M.data, s.data
    Mt = Md.transpose(0, 2, 1)                         # (K, h, H)
    MtM = Mt @ Md                                      # (K, h, h)
    Mts = (Mt @ sd[:, :, None]).squeeze(-1)            # (K, h)
    Mtz = (zd @ Md.transpose(1, 0, 2).reshape(H, K * h)).reshape(N, K, h)
    zz = (zd * zd).sum(axis=1)                         # (N,)
    ss = (sd * sd).sum(axis=1)                         # (K,)
    quad = ((mud.transpose(1, 0, 2) @ MtM).transpose(1, 0, 2) * mud).sum(axis=2)
    out = (zz[:, None] + quad + ss[None, :]
           - 2.0 * (Mtz * mud).sum(axis=2)
           - 2.0 * zd @ sd.T
           + 2.0 * (mud * Mts[None]).sum(axis=2))

    def bwd(g):
        full_mu = (Md @ mud.transpose(1, 2, 0)).transpose(2, 0, 1) + sd[None]
        diff = zd[:, None, :] - full_mu                # (N, K, H)
        gd = g[:, :, None] * diff
        gz = 2.0 * gd.sum(axis=1)
        gmu = -2.0 * (Mt @ gd.transpose(1, 2, 0)).transpose(2, 0, 1)
        gM = -2.0 * gd.transpose(1, 2, 0) @ mud.transpose(1, 0, 2)
        gs = -2.0 * gd.sum(axis=0)
        return gz, gmu, gM, gs

    return _node(out, (z, mu, M, s), bwd)


# ---------------------------------------------------------------------------
# backward pass


def topo_order(root):
    """Iterative post-order DFS; each node appears exactly once."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate gradients of a scalar `loss` into every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad)):
            if not parent.requires_grad:
                continue
            # first contribution is adopted as-is (backward closures never
            # mutate what they return), later ones allocate a fresh sum
            parent.grad = g if parent.grad is None else parent.grad + g


def grads(loss, params):
    """Run backward and return {name: grad} with exact zeros for unused leaves."""
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    return out


def finite_difference_check(f, params, h=1e-5):
    """Max relative error between analytic gradients of `f()` and central
    finite differences over every entry of every parameter in `params`.

    `f` must rebuild its graph from the current parameter data on each call.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    analytic = grads(f(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f().data)
            flat[i] = keep - h
            dn = float(f().data)
            flat[i] = keep
            numeric = (up - dn) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
