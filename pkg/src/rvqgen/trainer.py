"""Training loop: draw a mask ratio, build a depth-suffix mask, regress the
masked cumulative embeddings under the MoG surrogate, step AdamW.

Also houses the variational-bound diagnostics (per-step KL terms against
the model's implied reverse kernel) and the simplified per-step loss the
training objective specializes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import masking as mk
from . import mog
from . import numerics as nm
from . import rvq
from .backbone import Backbone


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    schedule: str = "circle"
    label_dropout: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 100
    lr_decay: str = "cosine"   # "cosine" | "none"; cosine anneals to min_lr_frac
    min_lr_frac: float = 0.1
    clip_norm: float = 1.0     # global gradient-norm clip; 0 disables
    ema_decay: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0      # 0: only at the end
    differentiate_q: bool = False  # backprop through q in the KL term
    audit_steps: tuple = (0, 1000)

    def __post_init__(self):
        # the CLI contract allows --steps 0 (checkpoint == init) and lr 0
        # (bitwise null update), so only negatives are rejected
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["audit_steps"] = list(d["audit_steps"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["audit_steps"] = tuple(d.get("audit_steps", ()))
        return cls(**d)


def build_target(tokens, mask, book: rvq.Codebook):
    """Masked-embedding regression targets.

    z_i = sum of the codeword embeddings at the masked depths of position i
    (ground-truth tokens); `included` flags positions with at least one
    masked depth; only those enter the loss.
    """
    tokens = np.asarray(tokens)
    mask = np.asarray(mask)
    L, D = tokens.shape
    z = np.zeros((L, book.dim))
    for j in range(D):
        hid = mask[:, j] == 0
        if hid.any():
            z[hid] += book.table(j + 1)[tokens[hid, j] - 1]
    included = mask.sum(axis=1) < D
    return z, included


def gather_params(params: mog.MoGParams, rows):
    """Flatten (B, L, ...) head outputs and select the loss rows."""
    B, L, K = params.logits.shape
    h = params.means.shape[-1]
    H = params.shift.shape[-1]
    idx = np.asarray(rows, dtype=np.int64)
    return mog.MoGParams(
        logits=nm.gather(nm.reshape(params.logits, (B * L, K)), idx),
        means=nm.gather(nm.reshape(params.means, (B * L, K, h)), idx),
        log_scale=nm.gather(nm.reshape(params.log_scale, (B * L, 1)), idx),
        shift=nm.gather(nm.reshape(params.shift, (B * L, H)), idx),
    )


def masked_loss(model: Backbone, book, tokens, masks, labels, ratios,
                differentiate_q=False):
    """Shared loss path for training, auditing, and the simplified loss.

    Returns (surrogate mean Tensor, exact-NLL mean Tensor, n positions,
    head params) for the batch; surrogate/NLL are zero Tensors when no
    position has a masked depth.
    """
    tokens = np.asarray(tokens)
    masks = np.asarray(masks)
    if tokens.ndim == 2:
        tokens, masks = tokens[None], masks[None]
    B, L, D = tokens.shape

    targets = np.zeros((B, L, book.dim))
    for j in range(D):
        hid = masks[:, :, j] == 0
        if hid.any():
            targets[hid] += book.table(j + 1)[tokens[:, :, j][hid] - 1]
    included = masks.sum(axis=2) < D
    rows = np.flatnonzero(included.reshape(-1))

    visible = mk.apply_mask(tokens, masks)
    out = model.forward(visible, masks, book, labels, ratios)
    if rows.size == 0:
        zero = nm.constant(0.0)
        return zero, zero, 0, out

    sel = gather_params(out, rows)
    sel = mog.MoGParams(sel.logits, sel.means,
                        nm.reshape(sel.log_scale, (-1,)), sel.shift)
    z = targets.reshape(B * L, -1)[rows]
    sur = nm.mean_(mog.surrogate_loss(sel, model.basis, z, differentiate_q))
    nll = nm.mean_(mog.exact_nll(sel, model.basis, z))
    return sur, nll, rows.size, out


class Trainer:
    """Owns optimizer/EMA state and the training RNG stream.

    Every random decision (batch indices, mask ratios, masks, label
    dropout) flows from the single `rng`, so checkpointing its state makes
    resumed runs bit-identical to straight runs.
    """

    def __init__(self, model: Backbone, book: rvq.Codebook, grids, labels,
                 config: TrainConfig, rng=None):
        self.model = model
        self.book = book
        self.grids = np.asarray(grids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.config = config
        self.schedule = mk.parse_schedule(config.schedule)
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.step_count = 0
        self.opt_m = {k: np.zeros_like(p.data) for k, p in sorted(model.params.items())}
        self.opt_v = {k: np.zeros_like(p.data) for k, p in sorted(model.params.items())}
        self.ema = {k: p.data.copy() for k, p in sorted(model.params.items())}

    # -- one step ----------------------------------------------------------

    def _draw_batch(self):
        c = self.config
        N = self.grids.shape[0]
        L, D = self.grids.shape[1], self.grids.shape[2]
        idx = self.rng.integers(0, N, size=c.batch_size)
        ratios = self.rng.random(c.batch_size)
        n_per = np.ceil(mk.gamma(self.schedule, ratios) * L * D).astype(np.int64)
        n_per = np.clip(n_per, 0, L * D)
        k = mk.sample_counts_batch(np.full((c.batch_size, L), D, dtype=np.int64),
                                   n_per, self.rng)
        masks = (np.arange(D)[None, None, :] < (D - k)[:, :, None]).astype(np.int8)
        labels = self.labels[idx].copy()
        drops = self.rng.random(c.batch_size)
        labels[(labels != 0) & (drops < c.label_dropout)] = 0
        return idx, ratios, masks, labels

    def step(self):
        c = self.config
        idx, ratios, masks, labels = self._draw_batch()
        sur, nll, n_sel, _ = masked_loss(
            self.model, self.book, self.grids[idx], masks, labels, ratios,
            differentiate_q=c.differentiate_q)
        loss = float(sur.data)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at step {self.step_count}: loss={loss}, "
                f"batch indices {idx.tolist()}, ratios {np.round(ratios, 4).tolist()}")
        gap = float(sur.data - nll.data)
        if gap < -1e-9:
            raise RuntimeError(f"Jensen gap violated at step {self.step_count}: {gap}")

        if n_sel > 0:
            g = nm.grads(sur, self.model.params)
            if c.clip_norm > 0:
                total = np.sqrt(sum(float((gk * gk).sum()) for gk in g.values()))
                if total > c.clip_norm:
                    scale = c.clip_norm / total
                    g = {k: gk * scale for k, gk in g.items()}
            self._adamw(g)
        self.step_count += 1
        decay = c.ema_decay
        for k, p in self.model.params.items():
            self.ema[k] = decay * self.ema[k] + (1.0 - decay) * p.data
        return {"step": self.step_count, "loss": loss, "gap": gap,
                "positions": n_sel}

    def _learning_rate(self, t):
        c = self.config
        lr = c.lr * min(1.0, t / c.warmup) if c.warmup else c.lr
        if c.lr_decay == "cosine" and c.steps > c.warmup and t > c.warmup:
            frac = min(1.0, (t - c.warmup) / (c.steps - c.warmup))
            lo = c.lr * c.min_lr_frac
            lr = lo + 0.5 * (c.lr - lo) * (1.0 + np.cos(np.pi * frac))
        return lr

    def _adamw(self, g):
        c = self.config
        t = self.step_count + 1
        lr = self._learning_rate(t)
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for k in sorted(self.model.params):
            p = self.model.params[k]
            m, v = self.opt_m[k], self.opt_v[k]
            gk = g[k]
            m *= c.beta1
            m += (1 - c.beta1) * gk
            v *= c.beta2
            v += (1 - c.beta2) * (gk * gk)
            if lr == 0.0:
                continue  # bitwise null update; moments still advance
            upd = m / bc1
            upd /= np.sqrt(v / bc2) + c.eps
            if c.weight_decay:
                upd += c.weight_decay * p.data
            p.data = p.data - lr * upd

    def run(self, steps, log_fn=None):
        for _ in range(steps):
            audit_val = self.audit() if self.step_count in self.config.audit_steps \
                else None
            record = self.step()
            if audit_val is not None:
                record["grad_audit"] = audit_val
            if log_fn:
                log_fn(format_record(record))
        return self.step_count

    # -- finite-difference audit -------------------------------------------

    def audit(self, entries_per_tensor=2, h=1e-5):
        """FD audit of the exact-NLL loss path on a frozen micro-batch.

        The surrogate stop-gradients q, so its finite differences do not
        equal its autodiff gradient by construction; the exact NLL path
        exercises the identical parameter set end to end.
        """
        arng = np.random.default_rng(self.config.seed + 7919)
        L, D = self.grids.shape[1], self.grids.shape[2]
        take = min(2, self.grids.shape[0])
        tokens = self.grids[:take]
        masks = np.stack([
            mk.binary_mask(mk.mask_count(self.schedule, 0.4, L, D), L, D, arng).mask
            for _ in range(take)])
        labels = self.labels[:take]
        ratios = np.full(take, 0.4)

        def loss():
            _, nll, _, _ = masked_loss(self.model, self.book, tokens, masks,
                                       labels, ratios)
            return nll

        analytic = nm.grads(loss(), self.model.params)
        worst = 0.0
        for k in sorted(self.model.params):
            p = self.model.params[k]
            flat = p.data.reshape(-1)
            picks = arng.choice(flat.size, size=min(entries_per_tensor, flat.size),
                                replace=False)
            for i in picks:
                keep = flat[i]
                flat[i] = keep + h
                up = float(loss().data)
                flat[i] = keep - h
                dn = float(loss().data)
                flat[i] = keep
                numeric = (up - dn) / (2 * h)
                a = analytic[k].reshape(-1)[i]
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
        return worst


def format_record(record):
    parts = [f"step={record['step']}", f"loss={record['loss']:.6f}",
             f"gap={record['gap']:.6e}", f"positions={record['positions']}"]
    if "grad_audit" in record:
        parts.append(f"grad_audit={record['grad_audit']:.3e}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# simplified per-step loss (the objective train_step optimizes)


def simple_loss(tokens, model, book, t, T, schedule, rng=None, mask=None,
                label=0):
    """-log p(z | x_t) at diffusion time t in [1, T]; the mask is drawn from
    the schedule unless one is supplied."""
    if not 1 <= t <= T:
        raise ValueError(f"t must lie in [1, {T}]")
    tokens = np.asarray(tokens)
    L, D = tokens.shape
    if mask is None:
        n = mk.mask_count(schedule, 1.0 - t / T, L, D)
        mask = mk.binary_mask(n, L, D, rng).mask
    sur, _, n_sel, _ = masked_loss(model, book, tokens, mask, [label],
                                   [1.0 - t / T])
    return float(sur.data), mask


# ---------------------------------------------------------------------------
# variational-bound diagnostics


def _reverse_cumulative_counts(schedule, T, L, D):
    """Masked totals N_t visited by the forward chain aligned with the
    reverse schedule: N_0 = 0 (clean), N_T = L*D (fully masked)."""
    return [mk.mask_count(schedule, (T - t) / T, L, D) for t in range(T + 1)]


def _model_reconstructions(model, book, tokens, state, label, ratio, rng, samples):
    """Draw full-grid candidates x0_hat ~ p(x0 | x_t): sample z at masked
    positions, quantize the masked depths, keep revealed tokens."""
    visible = mk.apply_mask(tokens, state.mask)
    out = model.forward(visible, state.mask, book, [label], [ratio])
    flat = gather_params(out, np.arange(tokens.shape[0]))
    params = mog.MoGParams(flat.logits.data, flat.means.data,
                           flat.log_scale.data.reshape(-1), flat.shift.data)
    basis = mog.LowRankBasis(model.params["basis.M"].data,
                             model.params["basis.s"].data)
    start = np.asarray(state.unmasked_counts)
    cands = []
    for _ in range(samples):
        z = mog.sample(params, basis, rng)
        cands.append(rvq.quantize(z, book, start_depth=start, out=tokens))
    return cands


def vlb_diagnostic(tokens, model, book, T, schedule, rng, label=0,
                   model_samples=8, max_states=20000):
    """Monte-Carlo estimates of the variational bound terms.

    L_T is exactly zero (the terminal state is fully masked with
    probability one). Each L_t is the KL between the true posterior over
    the previous mask pattern and the model's implied reverse kernel,
    computed by enumerating count vectors; L_0 is the negative log of the
    model's probability of reconstructing the clean grid in one step.
    Only meant for small grids (the enumeration guard trips otherwise).
    """
    tokens = np.asarray(tokens)
    L, D = tokens.shape
    if (D + 1) ** L > max_states:
        raise ValueError("grid too large for exhaustive VLB enumeration")
    totals = _reverse_cumulative_counts(schedule, T, L, D)

    # forward-simulate the masking chain
    states = [mk.state_from_masked_counts(np.zeros(L, dtype=np.int64), D)]
    for t in range(1, T + 1):
        states.append(mk.mask_more(states[t - 1], totals[t] - totals[t - 1], rng))

    terms = {"L_T": 0.0, "L_t": [], "L_0": None}
    for t in range(1, T):
        st1 = states[t + 1]
        c1 = np.asarray(st1.masked_counts)
        n_step = totals[t + 1] - totals[t]
        cands = _model_reconstructions(model, book, tokens, st1, label,
                                       (T - (t + 1)) / T, rng, model_samples)
        kl = 0.0
        for k in itertools.product(*(range(min(ci, n_step) + 1) for ci in c1)):
            if sum(k) != n_step:
                continue
            ct = c1 - np.array(k)
            logq = mk.posterior_logprob(ct, c1, int(c1.sum()), n_step)
            if logq == mk.IMPOSSIBLE:
                continue
            # x_t reveals, relative to x_{t+1}, the shallowest k_i masked
            # depths with the TRUE tokens; a candidate x0_hat contributes
            # iff it matches those entries
            p_hat = 0.0
            for cand in cands:
                ok = True
                for i in range(L):
                    lo = D - c1[i]
                    for j in range(lo, lo + k[i]):
                        if cand[i, j] != tokens[i, j]:
                            ok = False
                            break
                    if not ok:
                        break
                if ok:
                    p_hat += np.exp(logq)
            p_hat /= len(cands)
            q = np.exp(logq)
            kl += q * (logq - np.log(p_hat)) if p_hat > 0 else np.inf
        terms["L_t"].append(kl)

    # reconstruction term from x_1
    st1 = states[1]
    cands = _model_reconstructions(model, book, tokens, st1, label,
                                   (T - 1) / T, rng, model_samples)
    hits = sum(1 for cand in cands if np.array_equal(cand, tokens))
    terms["L_0"] = -np.log(hits / len(cands)) if hits else np.inf
    return terms
