"""Mixture-of-Gaussians output head.

The head models a target vector z through an affine map z = a*z~ + b and a
K-component mixture over z~ with identity covariances and low-rank means
mu = M mu~ + s. The exact negative log-likelihood and its Jensen-decomposed
regression+classification surrogate are built on the autodiff engine; the
sampling-side helpers (component draws, nucleus truncation, guidance
combination) are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MoGParams:
    """Per-position head outputs. Fields are Tensors on the training path
    and ndarrays on the sampling path.

    logits (L, K); means (L, K, h) low-rank; log_scale (L,) with a=exp(.);
    shift (L, H).
    """

    logits: object
    means: object
    log_scale: object
    shift: object

    def detach(self):
        """Numpy view of the parameters (drops the graph)."""
        return MoGParams(_data(self.logits), _data(self.means),
                         _data(self.log_scale), _data(self.shift))


@dataclass
class LowRankBasis:
    """Per-component projection M (K, H, h) and offset s (K, H)."""

    M: object
    s: object


def _data(x):
    return x.data if isinstance(x, nm.Tensor) else np.asarray(x, dtype=np.float64)


def _tensor(x):
    return x if isinstance(x, nm.Tensor) else nm.constant(np.asarray(x, dtype=np.float64))


def mixture_weights(logits):
    """Softmax of the mixture logits (numpy)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# likelihoods (autodiff path)


def _whitened(params, z):
    """z~ = (z - b) / a with a = exp(log_scale), plus the pieces reused by
    both loss flavors."""
    logits = _tensor(params.logits)
    means = _tensor(params.means)
    log_scale = _tensor(params.log_scale)
    shift = _tensor(params.shift)
    z = _tensor(z)
    if np.any(_data(log_scale) == -np.inf):
        raise ValueError("scale a must be positive")
    H = z.shape[-1]
    inv_a = nm.exp(nm.neg(log_scale))                      # (L,)
    zt = nm.mul(nm.sub(z, shift), nm.reshape(inv_a, (-1, 1)))
    return logits, means, log_scale, zt, H


def component_log_density(zt, means, basis):
    """log N(z~; M mu~ + s, I) per component -> (L, K) Tensor."""
    d2 = nm.lowrank_sqdist(zt, means, _tensor(basis.M), _tensor(basis.s))
    H = zt.shape[-1]
    return nm.add(nm.mul(d2, -0.5), nm.constant(-0.5 * H * LOG_2PI))


def exact_nll(params, basis, z):
    """Exact mixture negative log-likelihood per position -> (L,) Tensor.

    -log p(z) = H*log a - logsumexp_k(log pi_k + log N(z~; mu_k, I)); the
    H*log a term is the Jacobian of the affine map (scalar a scales every
    one of the H dimensions).
    """
    logits, means, log_scale, zt, H = _whitened(params, z)
    log_pi = nm.sub(logits, nm.logsumexp(logits, keepdims=True))
    log_n = component_log_density(zt, means, basis)
    mix = nm.logsumexp(nm.add(log_pi, log_n))
    return nm.sub(nm.mul(log_scale, float(H)), mix)


def decomposed_loss(params, basis, z, differentiate_q=False):
    """Jensen surrogate split into (regression, classification) per position.

    q(k | z~, mu) ∝ N(z~; mu_k, I). regression = -sum_k q_k log N_k;
    classification = KL(q || pi). By default q is treated as a constant
    target (EM-style); set differentiate_q to also backprop through it.
    The total surrogate is H*log a + regression + classification and upper
    bounds exact_nll.
    """
    logits, means, log_scale, zt, H = _whitened(params, z)
    log_pi = nm.sub(logits, nm.logsumexp(logits, keepdims=True))
    log_n = component_log_density(zt, means, basis)
    if differentiate_q:
        log_q = nm.sub(log_n, nm.logsumexp(log_n, keepdims=True))
        q = nm.softmax(log_n)
    else:
        ld = _data(log_n)
        lq = ld - _logsumexp_np(ld)
        log_q = nm.constant(lq)
        q = nm.constant(np.exp(lq))
    regression = nm.neg(nm.sum_(nm.mul(q, log_n), axis=-1))
    classification = nm.sum_(nm.mul(q, nm.sub(log_q, log_pi)), axis=-1)
    return regression, classification


def surrogate_loss(params, basis, z, differentiate_q=False):
    """H*log a + regression + classification, per position -> (L,) Tensor."""
    reg, cls = decomposed_loss(params, basis, z, differentiate_q)
    log_scale = _tensor(params.log_scale)
    H = _data(z).shape[-1]
    return nm.add(nm.mul(log_scale, float(H)), nm.add(reg, cls))


def _logsumexp_np(x):
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def lowrank_sqdist(zt, mu_t, M, s):
    """Expanded squared distance ||z~ - (M mu~ + s)||^2 for a single
    component (numpy): z~ (H,), mu~ (h,), M (H, h), s (H,)."""
    zt = np.asarray(zt, dtype=np.float64)
    mu_t = np.asarray(mu_t, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    MtM = M.T @ M
    Mts = M.T @ s
    return float(zt @ zt + mu_t @ MtM @ mu_t + s @ s
                 - 2.0 * (M.T @ zt) @ mu_t - 2.0 * zt @ s + 2.0 * mu_t @ Mts)


# ---------------------------------------------------------------------------
# sampling (numpy path)


def nucleus(weights, top_p):
    """Indices of the smallest prefix (by descending weight) with cumulative
    mass >= top_p, and the renormalized restricted weights."""
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    order = np.argsort(-weights, kind="stable")
    csum = np.cumsum(weights[order])
    keep = int(np.searchsorted(csum, top_p * csum[-1] - 1e-15) + 1)
    idx = order[:keep]
    w = weights[idx]
    return idx, w / w.sum()


def full_means(means, basis):
    """Low-rank means to full H-dim means: (L, K, h) -> (L, K, H)."""
    M = _data(basis.M)
    s = _data(basis.s)
    return np.einsum("khj,lkj->lkh", M, _data(means)) + s[None]


def sample(params, basis, rng, top_p=1.0, temperature_pi=1.0, noise=None):
    """Draw z per position: nucleus-restricted component choice, then
    z = a * (mu + eps) + b with eps standard normal.

    `noise` overrides eps when given (used by the deterministic tests).
    """
    p = params.detach() if isinstance(params, MoGParams) else params
    logits = _data(p.logits)
    L, K = logits.shape
    mu = full_means(p.means, basis)
    a = np.exp(_data(p.log_scale)).reshape(L, 1)
    b = _data(p.shift)
    H = b.shape[-1]

    z = np.empty((L, H))
    for i in range(L):
        w = mixture_weights(logits[i])
        idx, w_r = nucleus(w, top_p)
        if temperature_pi != 1.0:
            lw = np.log(np.maximum(w_r, 1e-300)) / temperature_pi
            w_r = np.exp(lw - lw.max())
            w_r /= w_r.sum()
        comp = idx[rng.choice(len(idx), p=w_r)] if len(idx) > 1 else idx[0]
        eps = rng.standard_normal(H) if noise is None else np.asarray(noise)[i]
        z[i] = a[i] * (mu[i, comp] + eps) + b[i]
    return z


def cfg_combine(cond: MoGParams, uncond: MoGParams, w: float) -> MoGParams:
    """Classifier-free guidance on distribution parameters: extrapolate the
    mixture logits and low-rank means from the unconditional toward the
    conditional prediction; scale and shift come from the conditional.

    Written as cond + w*(cond - uncond) so w=0 and cond==uncond are exact.
    """
    c, u = cond.detach(), uncond.detach()
    if c.logits.shape != u.logits.shape or c.means.shape != u.means.shape:
        raise ValueError(f"cfg_combine: shape mismatch {c.logits.shape} vs {u.logits.shape}")
    if w == 0.0:
        return MoGParams(c.logits, c.means, c.log_scale, c.shift)
    return MoGParams(c.logits + w * (c.logits - u.logits),
                     c.means + w * (c.means - u.means),
                     c.log_scale, c.shift)
