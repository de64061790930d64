"""Forward masking process over token grids.

Tokens live on an L x D grid. Masking always eats depth suffixes: at every
position the masked entries are exactly the deepest q_i depths, so finer
detail disappears before coarser structure. How many entries to mask comes
from a schedule gamma(r); how the masked count splits across positions is a
multivariate hypergeometric draw (n items without replacement from L*D
slots grouped D per position). The marginal, per-step, and posterior count
distributions all have closed forms in terms of binomial coefficients,
implemented here in log space.

Everything is pure given an explicit numpy Generator; callers own their
RNG streams, so parallel use with independent streams is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rvq import MASK


# ---------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class Schedule:
    kind: str            # "circle" | "cosine" | "exp"
    lam: float = 6.0     # exponential decay rate, used by "exp" only

    def __post_init__(self):
        if self.kind not in ("circle", "cosine", "exp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "exp" and self.lam <= 0:
            raise ValueError("exponential schedule needs lam > 0")


def parse_schedule(spec: str) -> Schedule:
    """Parse "circle" | "cosine" | "exp" | "exp:<lam>"."""
    if spec.startswith("exp"):
        _, _, lam = spec.partition(":")
        return Schedule("exp", float(lam) if lam else 6.0)
    return Schedule(spec)


def gamma(schedule: Schedule, r):
    """Masked fraction at normalized time r in [0, 1]; 1 at r=0, 0 at r=1."""
    r = np.asarray(r, dtype=np.float64)
    if np.any((r < 0) | (r > 1)):
        raise ValueError("r must lie in [0, 1]")
    if schedule.kind == "circle":
        out = np.sqrt(1.0 - r * r)
    elif schedule.kind == "cosine":
        out = np.cos(np.pi * r / 2.0)
    else:
        lam = schedule.lam
        out = (np.exp(-lam * r) - np.exp(-lam)) / (1.0 - np.exp(-lam))
    return float(out) if out.ndim == 0 else out


def mask_count(schedule: Schedule, r, L, D):
    """n = ceil(gamma(r) * L * D), clamped to [0, L*D].

    gamma(1) is 0 by contract, but cos(pi/2) evaluates to ~6e-17 and ceil
    would turn that into one stuck masked token; snap the boundary.
    """
    if r == 1:
        return 0
    n = math.ceil(gamma(schedule, r) * L * D)
    return max(0, min(n, L * D))


# ---------------------------------------------------------------------------
# mask state

@dataclass
class MaskState:
    """Binary visibility mask (1 = revealed) in depth-suffix form plus the
    diffusion step counter."""

    mask: np.ndarray  # (L, D) int8
    step: int = 0

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=np.int8)
        if self.mask.ndim != 2:
            raise ValueError("mask must be (L, D)")
        check_depth_suffix_mask(self.mask)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def masked_counts(self):
        """q_i: number of masked depths per position."""
        return self.mask.shape[1] - self.mask.sum(axis=1, dtype=np.int64)

    @property
    def unmasked_counts(self):
        return self.mask.sum(axis=1, dtype=np.int64)

    @property
    def n_total(self):
        return int(self.masked_counts.sum())


def check_depth_suffix_mask(mask):
    """Masked entries must be a depth suffix at every position."""
    m = np.asarray(mask)
    if np.any((m != 0) & (m != 1)):
        raise ValueError("mask entries must be 0 or 1")
    visible = m.sum(axis=1)
    expect = (np.arange(m.shape[1])[None, :] < visible[:, None]).astype(m.dtype)
    if not np.array_equal(m, expect):
        raise ValueError("mask is not in depth-suffix form")


def state_from_masked_counts(q, D, step=0):
    q = np.asarray(q, dtype=np.int64)
    if np.any((q < 0) | (q > D)):
        raise ValueError("masked counts must lie in [0, D]")
    mask = (np.arange(D)[None, :] < (D - q)[:, None]).astype(np.int8)
    return MaskState(mask, step)


def apply_mask(tokens, mask):
    """Masked-out view of a token grid: hidden entries become MASK."""
    tokens = np.asarray(tokens)
    out = tokens.copy()
    out[np.asarray(mask) == 0] = MASK
    return out


def check_depth_prefix_tokens(tokens):
    """Non-MASK tokens must occupy exactly a depth prefix at each position."""
    t = np.asarray(tokens)
    present = (t != MASK).astype(np.int8)
    counts = present.sum(axis=1)
    expect = (np.arange(t.shape[1])[None, :] < counts[:, None]).astype(np.int8)
    if not np.array_equal(present, expect):
        raise ValueError("token grid violates the depth-prefix property")


# ---------------------------------------------------------------------------
# hypergeometric draws

def sample_counts(capacities, n, rng):
    """Draw a multivariate-hypergeometric count vector: n items without
    replacement from groups of the given capacities.

    Sequential conditional draws: k_1 ~ HG(c_1, sum(c)-c_1, n), then recurse
    on the remainder. This is the exact chain-rule factorization of the
    joint pmf, no shuffling needed.
    """
    caps = np.asarray(capacities, dtype=np.int64)
    total = int(caps.sum())
    if not 0 <= n <= total:
        raise ValueError(f"cannot draw {n} from capacity {total}")
    k = np.zeros(caps.shape[0], dtype=np.int64)
    rem_n = int(n)
    rem_total = total
    for i in range(caps.shape[0] - 1):
        rem_total -= int(caps[i])
        if rem_n > 0:
            # numpy's sampler respects the support bounds
            # max(0, rem_n - rem_total) <= k_i <= min(caps[i], rem_n)
            k[i] = rng.hypergeometric(caps[i], rem_total, rem_n)
            rem_n -= int(k[i])
    k[-1] = rem_n
    return k


def sample_counts_batch(capacities, n, rng, size=None):
    """Vectorized `sample_counts` drawing one vector per row.

    `capacities` is (L,) with `size` iid draws, or (rows, L) with per-row
    capacities; `n` may be a scalar or per-row array.
    """
    caps = np.asarray(capacities, dtype=np.int64)
    if caps.ndim == 1:
        caps = np.broadcast_to(caps, (size, caps.shape[0]))
    rows, L = caps.shape
    totals = caps.sum(axis=1)
    n = np.broadcast_to(np.asarray(n, dtype=np.int64), (rows,))
    if np.any((n < 0) | (n > totals)):
        raise ValueError("draw count outside [0, capacity] for some row")
    k = np.zeros((rows, L), dtype=np.int64)
    rem_n = n.copy()
    rem_total = totals.copy()
    for i in range(L - 1):
        rem_total -= caps[:, i]
        live = (rem_n > 0) & (caps[:, i] > 0)
        if live.any():
            draw = np.zeros(rows, dtype=np.int64)
            draw[live] = rng.hypergeometric(caps[live, i], rem_total[live],
                                            rem_n[live])
            k[:, i] = draw
            rem_n -= draw
    k[:, -1] = rem_n
    return k


def binary_mask(n, L, D, rng) -> MaskState:
    """Fresh mask with n entries hidden, split across positions by a
    multivariate hypergeometric draw; the deepest k_i depths hide at each
    position."""
    if not 0 <= n <= L * D:
        raise ValueError(f"n={n} outside [0, {L * D}]")
    k = sample_counts(np.full(L, D, dtype=np.int64), n, rng)
    return state_from_masked_counts(k, D, step=1)


def mask_more(state: MaskState, n_new, rng) -> MaskState:
    """One forward step: hide n_new additional entries drawn without
    replacement from the currently revealed slots."""
    u = state.unmasked_counts
    if not 0 <= n_new <= u.sum():
        raise ValueError(f"cannot mask {n_new} more; only {u.sum()} revealed")
    k = sample_counts(u, n_new, rng)
    return state_from_masked_counts(state.masked_counts + k, state.shape[1],
                                    step=state.step + 1)


def binary_unmask(state: MaskState, n_target, rng) -> MaskState:
    """Reveal tokens until n_target remain masked. How many reveals land on
    each position is hypergeometric with capacities q_i; reveals take the
    shallowest masked depths, keeping the suffix invariant."""
    q = state.masked_counts
    if n_target > state.n_total:
        raise ValueError(f"n_target={n_target} exceeds masked count {state.n_total}")
    reveal = sample_counts(q, state.n_total - n_target, rng)
    return state_from_masked_counts(q - reveal, state.shape[1], step=state.step + 1)


# ---------------------------------------------------------------------------
# closed-form log probabilities

IMPOSSIBLE = float("-inf")


def log_comb(a, b):
    """log C(a, b); -inf when the coefficient is zero."""
    a, b = int(a), int(b)
    if b < 0 or b > a:
        return IMPOSSIBLE
    return math.lgamma(a + 1) - math.lgamma(b + 1) - math.lgamma(a - b + 1)


def _sum_log_comb(tops, bottoms):
    out = 0.0
    for a, b in zip(tops, bottoms):
        term = log_comb(a, b)
        if term == IMPOSSIBLE:
            return IMPOSSIBLE
        out += term
    return out


def forward_step_logprob(k_next, state: MaskState):
    """log q(k | x_t): probability of newly masking k_i tokens per position
    given the current unmasked capacities. Infeasible k -> -inf."""
    k = np.asarray(k_next, dtype=np.int64)
    u = state.unmasked_counts
    n = int(k.sum())
    num = _sum_log_comb(u, k)
    if num == IMPOSSIBLE:
        return IMPOSSIBLE
    den = log_comb(int(u.sum()), n)
    if den == IMPOSSIBLE:
        return IMPOSSIBLE
    return num - den


def marginal_logprob(counts_t, n_cum, L, D):
    """log q(x_t | x_0): cumulative masked counts after any number of steps."""
    c = np.asarray(counts_t, dtype=np.int64)
    if c.shape[0] != L or int(c.sum()) != int(n_cum):
        return IMPOSSIBLE
    num = _sum_log_comb([D] * L, c)
    if num == IMPOSSIBLE:
        return IMPOSSIBLE
    den = log_comb(L * D, int(n_cum))
    if den == IMPOSSIBLE:
        return IMPOSSIBLE
    return num - den


def posterior_logprob(counts_t, counts_t1, n_cum_t1, n_step):
    """log q(x_t | x_{t+1}, x_0): which k of the cumulative masked counts
    were added by the final step."""
    ct = np.asarray(counts_t, dtype=np.int64)
    ct1 = np.asarray(counts_t1, dtype=np.int64)
    k = ct1 - ct
    if np.any(k < 0) or int(k.sum()) != int(n_step) or int(ct1.sum()) != int(n_cum_t1):
        return IMPOSSIBLE
    num = _sum_log_comb(ct1, k)
    if num == IMPOSSIBLE:
        return IMPOSSIBLE
    den = log_comb(int(n_cum_t1), int(n_step))
    if den == IMPOSSIBLE:
        return IMPOSSIBLE
    return num - den
