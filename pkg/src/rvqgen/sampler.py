"""Iterative unmasking sampler.

Generation starts from a fully masked grid. Each of the T steps predicts
the cumulative masked embedding per position, samples a vector from the
(optionally guidance-combined) mixture, quantizes it into candidate tokens
for the masked depths, then reveals enough tokens to match the schedule.
Revealed tokens are frozen: later steps only re-predict what is still
hidden, so the model is invoked exactly T times (2T with guidance) no
matter how long or deep the grid is.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import masking as mk
from . import mog
from . import rvq
from .backbone import Backbone


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 63
    schedule: str = "circle"
    selection: str = "confidence"   # "confidence" | "random"
    temperature: float = 1.0        # Gumbel choice temperature tau
    top_p: float = 1.0
    cfg_start: float = 0.0
    cfg_end: float = 0.0
    use_cfg: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.selection not in ("confidence", "random"):
            raise ValueError(f"unknown selection mode {self.selection!r}")


# Named presets: step count, guidance ramp, nucleus threshold, and choice
# temperature combinations exposed for convenience.
PRESETS = {
    "paper-28": SamplerConfig(steps=28, cfg_start=0.02, cfg_end=2.4,
                              top_p=0.94, temperature=28.0, use_cfg=True),
    "paper-48": SamplerConfig(steps=48, cfg_start=0.02, cfg_end=2.4,
                              top_p=0.96, temperature=28.0, use_cfg=True),
    "paper-64": SamplerConfig(steps=64, cfg_start=0.02, cfg_end=2.2,
                              top_p=0.98, temperature=28.0, use_cfg=True),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


def cfg_weight(config: SamplerConfig, t):
    """Guidance weight at step t (1-based), linear from start to end."""
    if config.steps == 1:
        return config.cfg_start
    frac = (t - 1) / (config.steps - 1)
    return config.cfg_start + frac * (config.cfg_end - config.cfg_start)


def _flat_params(out) -> mog.MoGParams:
    """(1, L, ...) Tensor head outputs -> numpy (L, ...) MoGParams."""
    return mog.MoGParams(out.logits.data[0], out.means.data[0],
                         out.log_scale.data[0], out.shift.data[0])


def confidence_scores(z, tokens, state: mk.MaskState, book: rvq.Codebook,
                      tau, rng):
    """Per-masked-token confidence: Gaussian log-density of each depth's
    residual under its chosen codeword (variance sigma_j^2), cumulatively
    summed across depths, plus tau-scaled Gumbel noise. Revealed entries
    get -inf."""
    if book.sigma is None or not np.all(book.sigma > 0):
        raise ValueError("codebook sigma required for confidence scores")
    z = np.asarray(z, dtype=np.float64)
    L, D = state.shape
    H = book.dim
    u = np.asarray(state.unmasked_counts)
    scores = np.full((L, D), -np.inf)
    gumbel = rng.gumbel(size=(L, D))
    for i in range(L):
        res = z[i].copy()
        cum = 0.0
        for j in range(int(u[i]) + 1, D + 1):
            word = book.table(j)[tokens[i, j - 1] - 1]
            res -= word
            s2 = float(book.sigma[j - 1]) ** 2
            cum += -0.5 * H * np.log(2 * np.pi * s2) - (res @ res) / (2 * s2)
            scores[i, j - 1] = cum + tau * gumbel[i, j - 1]
    return scores


def select_unmask(state: mk.MaskState, n_target, scores=None, rng=None):
    """Reveal down to n_target masked tokens.

    Confidence mode (scores given): greedily reveal the highest-scoring
    token among each position's shallowest masked depth, which preserves
    the depth-suffix invariant by construction. Random mode: the
    hypergeometric BinaryUnmask draw.
    """
    if scores is None:
        return mk.binary_unmask(state, n_target, rng)
    if n_target > state.n_total:
        raise ValueError(f"n_target={n_target} exceeds masked count {state.n_total}")
    u = np.asarray(state.unmasked_counts).copy()
    q = np.asarray(state.masked_counts).copy()
    D = state.shape[1]
    for _ in range(state.n_total - n_target):
        frontier = np.where(q > 0, scores[np.arange(len(u)), np.minimum(u, D - 1)],
                            -np.inf)
        pos = int(np.argmax(frontier))
        u[pos] += 1
        q[pos] -= 1
    return mk.state_from_masked_counts(q, D, step=state.step + 1)


def generate(model: Backbone, book: rvq.Codebook, label, config: SamplerConfig,
             rng=None, validate=False):
    """Run the T-step unmasking loop; returns (tokens, stats).

    stats: forward_passes (exactly T, or 2T with guidance), steps, and
    wall_time seconds.
    """
    c = model.config
    if book.depth != c.depth or book.dim != c.latent_dim:
        raise ValueError("model and codebook disagree on grid geometry")
    if not 0 <= label <= c.num_classes:
        raise ValueError(f"label {label} outside [0, {c.num_classes}]")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    schedule = mk.parse_schedule(config.schedule)
    basis = mog.LowRankBasis(model.params["basis.M"].data,
                             model.params["basis.s"].data)

    t0 = time.perf_counter()
    calls_before = model.forward_calls
    tokens = np.full((c.seq_len, c.depth), rvq.MASK, dtype=np.int64)
    state = mk.state_from_masked_counts(np.full(c.seq_len, c.depth, dtype=np.int64), c.depth)
    frozen = None

    for t in range(1, config.steps + 1):
        r_model = (t - 1) / config.steps
        visible = mk.apply_mask(tokens, state.mask)
        params = _flat_params(model.forward(visible, state.mask, book,
                                            [label], [r_model]))
        if config.use_cfg:
            uncond = _flat_params(model.forward(visible, state.mask, book,
                                                [0], [r_model]))
            params = mog.cfg_combine(params, uncond, cfg_weight(config, t))

        z = mog.sample(params, basis, rng, top_p=config.top_p)
        tokens = rvq.quantize(z, book, start_depth=state.unmasked_counts,
                              out=tokens)

        n_target = mk.mask_count(schedule, t / config.steps, c.seq_len, c.depth)
        n_target = min(n_target, state.n_total)
        if config.selection == "confidence":
            scores = confidence_scores(z, tokens, state, book,
                                       config.temperature, rng)
            new_state = select_unmask(state, n_target, scores=scores)
        else:
            new_state = select_unmask(state, n_target, rng=rng)

        if validate:
            mk.check_depth_suffix_mask(new_state.mask)
            if frozen is not None:
                prev = state.mask == 1
                if not np.array_equal(tokens[prev], frozen[prev]):
                    raise AssertionError("revealed token changed after reveal")
            frozen = tokens.copy()
        state = new_state

    if state.n_total != 0:
        raise AssertionError("grid not fully revealed after the final step")
    stats = {
        "forward_passes": model.forward_calls - calls_before,
        "steps": config.steps,
        "wall_time": time.perf_counter() - t0,
    }
    return tokens, stats
