"""Training-loop tests: target construction, null updates, convergence on a
degenerate dataset, gradient hygiene, and the VLB diagnostics."""

import numpy as np
import pytest

from rvqgen import masking as mk
from rvqgen import numerics as nm
from rvqgen import rvq
from rvqgen import trainer as tnr
from rvqgen.backbone import Backbone, BackboneConfig


def toy_setup(seed=0, n=64, L=4, D=2, V=4, H=3, **model_over):
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(n, L, H))
    book = rvq.fit_codebook(vectors.reshape(-1, H), depth=D, vocab=V, seed=seed)
    grids = np.stack([rvq.quantize(v, book) for v in vectors])
    cfg = dict(seq_len=L, depth=D, vocab=V, latent_dim=H, width=16, layers=1,
               heads=2, mixtures=3, mean_rank=2)
    cfg.update(model_over)
    model = Backbone(BackboneConfig(**cfg), seed=seed)
    return model, book, grids


# ---------------------------------------------------------------------------
# build_target

def test_empty_mask_gives_no_targets():
    model, book, grids = toy_setup()
    mask = np.ones_like(grids[0], dtype=np.int8)
    z, included = tnr.build_target(grids[0], mask, book)
    assert not included.any()
    sur, nll, n_sel, _ = tnr.masked_loss(model, book, grids[0], mask, [0], [1.0])
    assert n_sel == 0 and float(sur.data) == 0.0


def test_fully_masked_target_is_reconstruction():
    model, book, grids = toy_setup()
    mask = np.zeros_like(grids[0], dtype=np.int8)
    z, included = tnr.build_target(grids[0], mask, book)
    assert included.all()
    assert np.allclose(z, rvq.dequantize(grids[0], book), atol=1e-12)


def test_target_partitions_full_reconstruction():
    model, book, grids = toy_setup()
    L, D = grids[0].shape
    st = mk.binary_mask(5, L, D, np.random.default_rng(3))
    z_masked, _ = tnr.build_target(grids[0], st.mask, book)
    z_visible = rvq.dequantize(grids[0], book,
                               up_to_depth=np.asarray(st.unmasked_counts))
    full = rvq.dequantize(grids[0], book)
    assert np.max(np.abs(z_visible + z_masked - full)) < 1e-12


# ---------------------------------------------------------------------------
# stepping

def test_zero_learning_rate_is_bitwise_noop():
    model, book, grids = toy_setup()
    cfg = tnr.TrainConfig(steps=3, batch_size=4, lr=0.0, seed=1, audit_steps=())
    before = model.parameter_arrays()
    tr = tnr.Trainer(model, book, grids, np.zeros(len(grids), dtype=np.int64), cfg)
    for _ in range(3):
        tr.step()
    after = model.parameter_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_single_sample_converges_to_gaussian_floor():
    # one record, V=1, D=1: the head can put its single mean exactly on the
    # single target, so the loss approaches (H/2) log(2*pi)
    H = 2
    target = np.array([[0.8, -0.4], [0.1, 0.9]])   # L=2 positions
    book = rvq.Codebook(target.mean(axis=0)[None, None, :].repeat(1, axis=1),
                        np.array([1.0]))
    grids = np.ones((1, 2, 1), dtype=np.int64)
    model = Backbone(BackboneConfig(seq_len=2, depth=1, vocab=1, latent_dim=H, width=16, layers=1,
                                    heads=2, mixtures=1, mean_rank=2), seed=0)
    cfg = tnr.TrainConfig(steps=500, batch_size=4, lr=3e-3, warmup=20, seed=0,
                          audit_steps=())
    tr = tnr.Trainer(model, book, grids, np.zeros(1, dtype=np.int64), cfg)
    losses = [tr.step()["loss"] for _ in range(500)]
    floor = (H / 2) * np.log(2 * np.pi)
    # the fixed-scale closed-form optimum is reached inside the budget;
    # training then keeps shrinking the learnable scale (the point-target
    # NLL is unbounded below), so only the upper bound is contractual
    assert min(losses) < floor + 0.15
    assert np.mean(losses[-50:]) < floor + 0.15


def test_loss_decreases_on_average():
    model, book, grids = toy_setup(n=128)
    cfg = tnr.TrainConfig(steps=400, batch_size=8, lr=1e-3, warmup=20, seed=2,
                          audit_steps=())
    tr = tnr.Trainer(model, book, grids, np.zeros(len(grids), dtype=np.int64), cfg)
    losses = [tr.step()["loss"] for _ in range(400)]
    assert np.mean(losses[-100:]) < np.mean(losses[:100])


def test_training_is_reproducible():
    def run():
        model, book, grids = toy_setup(seed=4)
        cfg = tnr.TrainConfig(steps=20, batch_size=4, seed=4, audit_steps=())
        tr = tnr.Trainer(model, book, grids, np.zeros(len(grids), dtype=np.int64), cfg)
        for _ in range(20):
            tr.step()
        return model.parameter_arrays(), tr.ema

    (pa, ea), (pb, eb) = run(), run()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert all(np.array_equal(ea[k], eb[k]) for k in ea)


def test_gap_is_logged_and_nonnegative():
    model, book, grids = toy_setup()
    cfg = tnr.TrainConfig(steps=10, batch_size=4, seed=5, audit_steps=())
    tr = tnr.Trainer(model, book, grids, np.zeros(len(grids), dtype=np.int64), cfg)
    for _ in range(10):
        rec = tr.step()
        assert rec["gap"] >= -1e-9
    line = tnr.format_record(rec)
    assert "step=" in line and "gap=" in line and "loss=" in line


def test_no_gradient_leak_to_excluded_positions():
    model, book, grids = toy_setup()
    # perturb the zero-initialized heads: at exact zero init q == pi and the
    # logits gradient vanishes identically, hiding a would-be leak
    rng = np.random.default_rng(99)
    for name in ("head.logits.w", "head.means.w", "head.scale.w", "head.shift.w"):
        p = model.params[name]
        p.data = p.data + 0.3 * rng.normal(size=p.data.shape)
    L, D = grids[0].shape
    # mask only position 0; positions 1..L-1 contribute nothing
    counts = np.array([D] + [0] * (L - 1))
    st = mk.state_from_masked_counts(counts, D)
    sur, _, n_sel, out = tnr.masked_loss(model, book, grids[0], st.mask, [0], [0.5])
    assert n_sel == 1
    nm.backward(sur)
    assert out.logits.grad is not None
    assert np.all(out.logits.grad[0, 1:] == 0.0)
    assert np.any(out.logits.grad[0, 0] != 0.0)
    assert np.all(out.means.grad[0, 1:] == 0.0)


def test_audit_passes_at_init():
    model, book, grids = toy_setup()
    cfg = tnr.TrainConfig(steps=1, batch_size=2, seed=6, audit_steps=())
    tr = tnr.Trainer(model, book, grids, np.zeros(len(grids), dtype=np.int64), cfg)
    assert tr.audit(entries_per_tensor=2) < 1e-4


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_loss_aborts_with_diagnostic():
    model, book, grids = toy_setup()
    model.params["head.scale.b"].data = np.array([1e308])
    cfg = tnr.TrainConfig(steps=1, batch_size=2, seed=7, audit_steps=())
    tr = tnr.Trainer(model, book, grids, np.zeros(len(grids), dtype=np.int64), cfg)
    with pytest.raises(RuntimeError, match="non-finite"):
        tr.step()


# ---------------------------------------------------------------------------
# simplified loss

def test_simple_loss_zero_when_mask_empty():
    model, book, grids = toy_setup()
    schedule = mk.parse_schedule("circle")
    mask = np.ones_like(grids[0], dtype=np.int8)
    loss, _ = tnr.simple_loss(grids[0], model, book, t=1, T=8,
                              schedule=schedule, mask=mask)
    assert loss == 0.0


def test_simple_loss_matches_direct_path():
    model, book, grids = toy_setup()
    schedule = mk.parse_schedule("circle")
    L, D = grids[0].shape
    st = mk.binary_mask(4, L, D, np.random.default_rng(8))
    t, T = 3, 8
    loss, _ = tnr.simple_loss(grids[0], model, book, t=t, T=T,
                              schedule=schedule, mask=st.mask)
    sur, _, _, _ = tnr.masked_loss(model, book, grids[0], st.mask, [0],
                                   [1.0 - t / T])
    assert loss == float(sur.data)


def test_simple_loss_monotone_in_corruption_after_training():
    model, book, grids = toy_setup(n=128)
    cfg = tnr.TrainConfig(steps=300, batch_size=8, lr=1e-3, warmup=20, seed=9,
                          audit_steps=())
    tr = tnr.Trainer(model, book, grids, np.zeros(len(grids), dtype=np.int64), cfg)
    for _ in range(300):
        tr.step()
    schedule = mk.parse_schedule("circle")
    rng = np.random.default_rng(10)
    T = 8
    heavy, light = [], []
    for i in range(60):
        g = grids[i % len(grids)]
        h_loss, _ = tnr.simple_loss(g, model, book, t=T - 1, T=T,
                                    schedule=schedule, rng=rng)
        l_loss, _ = tnr.simple_loss(g, model, book, t=1, T=T,
                                    schedule=schedule, rng=rng)
        heavy.append(h_loss)
        light.append(l_loss)
    assert np.mean(heavy) > np.mean(light) - 0.05


# ---------------------------------------------------------------------------
# VLB diagnostics

def test_vlb_prior_term_exactly_zero():
    model, book, grids = toy_setup()
    terms = tnr.vlb_diagnostic(grids[0], model, book, T=4,
                               schedule=mk.parse_schedule("circle"),
                               rng=np.random.default_rng(11))
    assert terms["L_T"] == 0.0


def test_vlb_terms_nonnegative():
    model, book, grids = toy_setup()
    terms = tnr.vlb_diagnostic(grids[0], model, book, T=4,
                               schedule=mk.parse_schedule("circle"),
                               rng=np.random.default_rng(12), model_samples=6)
    assert all(v >= 0 for v in terms["L_t"])
    assert terms["L_0"] >= 0


def test_vlb_perfect_model_reconstruction_term_zero():
    # V=1 codebook: every candidate reconstruction is the data grid, so the
    # reverse model is exact and every term collapses to zero
    H = 2
    book = rvq.Codebook(np.array([[[0.3, -0.2]]]), np.array([1.0]))
    grid = np.ones((3, 1), dtype=np.int64)
    model = Backbone(BackboneConfig(seq_len=3, depth=1, vocab=1, latent_dim=H, width=8, layers=1,
                                    heads=2, mixtures=1, mean_rank=1), seed=0)
    terms = tnr.vlb_diagnostic(grid, model, book, T=3,
                               schedule=mk.parse_schedule("circle"),
                               rng=np.random.default_rng(13), model_samples=4)
    assert terms["L_0"] == 0.0
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in terms["L_t"])


def test_vlb_rejects_huge_grids():
    model, book, grids = toy_setup(L=8, D=4)
    with pytest.raises(ValueError, match="enumeration"):
        tnr.vlb_diagnostic(grids[0], model, book, T=4,
                           schedule=mk.parse_schedule("circle"),
                           rng=np.random.default_rng(0), max_states=10)
