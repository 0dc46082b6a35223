"""End-to-end acceptance checks, one test group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion.  Criteria 6 and 7 train real models and take
several minutes on one core.
"""

import time

import numpy as np
import pytest

import oracles
from uadi.config import preset
from uadi.core import Tensor, ops
from uadi.data import DatasetSpec, generate_dataset, split_dataset
from uadi.gradsuite import randomize, run_suite, tolerance
from uadi.losses import (LossConfig, boundary_loss, combine, curvature_kernel, focal_tversky, texture_loss,
                         total_loss)
from uadi.modules import MultiScaleFusion, TaskInteraction, UncertaintyProxyAttention, upa_fuse
from uadi.network import ModelConfig, MultiTaskNet
from uadi.trainer import (ABLATION_ROWS, TrainConfig, ablation_run, diagnose, evaluate, lr_schedule, metric_dict,
                          train)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# ------------------------------------------------------------ 1. gradient fidelity

@criterion(1, "finite-difference suite over every component, under 5 min")
def test_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    results = run_suite("tiny", seed=7)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda k: results[k] / tolerance(k))
    record_property("detail", f"worst {worst} {results[worst]:.2e}, {elapsed:.0f} s")
    expected = {"tim", "upa", "hmsf", "attention_gate", "focal_tversky", "boundary", "texture", "focal_ce",
                "total", "model_seg", "model_clf"}
    assert set(results) == expected
    failed = {k: v for k, v in results.items() if not v < tolerance(k)}
    assert not failed
    assert elapsed < 300


# ------------------------------------------------------------ 2. invariants

@criterion(2, "modulation bounds, weight simplex, fusion boundaries, scale attention, kernel")
def test_modulation_bounds_on_1e4_inputs(record_property):
    rng = np.random.default_rng(2)
    lo, hi = np.inf, -np.inf
    for _ in range(100):
        scale = rng.uniform(0.01, 50.0)
        tim = randomize(TaskInteraction(8, rng, clf_width=16), rng, scale=scale).eval()
        D = rng.normal(scale=scale, size=(100, 1, 1, 8))
        f = rng.normal(scale=scale, size=(100, 16))
        mu = tim.modulation(Tensor(D), Tensor(f)).data
        lo, hi = min(lo, mu.min()), max(hi, mu.max())
    record_property("detail", f"mu in [{lo:.6f}, {hi:.6f}] over 10^4 inputs")
    assert 1.0 <= lo and hi <= 1.7


@criterion(2, "modulation bounds, weight simplex, fusion boundaries, scale attention, kernel")
def test_weights_on_simplex():
    rng = np.random.default_rng(3)
    upa = UncertaintyProxyAttention(rng)
    worst = 0.0
    for _ in range(1000):
        randomize(upa, rng, scale=rng.uniform(0.1, 5.0))
        n = int(rng.integers(1, 8))
        w = upa.weights(Tensor(rng.exponential(size=n)), Tensor(rng.exponential(size=n))).data
        assert (w >= 0).all()
        worst = max(worst, np.abs(w.sum(axis=1) - 1.0).max())
    assert worst <= 1e-9


@criterion(2, "modulation bounds, weight simplex, fusion boundaries, scale attention, kernel")
def test_fusion_boundaries_bit_exact():
    rng = np.random.default_rng(4)
    for shape in [(3, 4, 4, 8), (3, 16)]:
        base, enh = rng.normal(size=shape) * 1e3, rng.normal(size=shape) * 1e-3
        assert np.array_equal(upa_fuse(Tensor(base), Tensor(enh), Tensor(np.zeros(3))).data, base)
        assert np.array_equal(upa_fuse(Tensor(base), Tensor(enh), Tensor(np.ones(3))).data, enh)


@criterion(2, "modulation bounds, weight simplex, fusion boundaries, scale attention, kernel")
def test_scale_attention_sums_to_one():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = randomize(MultiScaleFusion(8, rng), rng, scale=rng.uniform(0.1, 3.0))
        _, alpha = m(Tensor(rng.normal(size=(4, 6, 6, 8))), return_attention=True)
        np.testing.assert_allclose(alpha.data.sum(axis=1), 1.0, atol=1e-12)


@criterion(2, "modulation bounds, weight simplex, fusion boundaries, scale attention, kernel")
def test_curvature_kernel_exact():
    k = curvature_kernel(1.0, 7)
    assert np.array_equal(k, -k.T)
    assert k.sum() == 0.0


# ------------------------------------------------------------ 3. oracle equivalence

@criterion(3, "conv, dilated separable conv and losses match scalar loops within 1e-10")
@pytest.mark.parametrize("seed", range(5))
def test_oracle_equivalence(seed):
    r = np.random.default_rng(100 + seed)
    h, w = int(r.integers(3, 9)), int(r.integers(3, 9))
    c_in, c_out = int(r.integers(1, 4)), int(r.integers(1, 4))
    x = r.normal(size=(2, h, w, c_in))
    for d in (1, 2, 4):
        wk, b = r.normal(size=(3, 3, c_in, c_out)), r.normal(size=c_out)
        np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(wk), Tensor(b), dilation=d).data,
                                   oracles.conv2d(x, wk, b, d), atol=1e-10, rtol=0)
        # separable: depthwise 3x3 at dilation d, then pointwise 1x1
        dw, db = r.normal(size=(3, 3, c_in)), r.normal(size=c_in)
        pw, pb = r.normal(size=(c_in, c_out)), r.normal(size=c_out)
        got = ops.conv1x1(ops.depthwise_conv2d(Tensor(x), Tensor(dw), Tensor(db), dilation=d),
                          Tensor(pw), Tensor(pb)).data
        ref = oracles.pointwise(oracles.depthwise_conv2d(x, dw, db, d), pw, pb)
        np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)
    p, t = r.uniform(size=(2, h, w, 1)), (r.random((2, h, w, 1)) < 0.4).astype(float)
    assert abs(focal_tversky(Tensor(p), Tensor(t)).item() - oracles.focal_tversky(p, t)) <= 1e-10
    assert abs(boundary_loss(Tensor(t), Tensor(p)).item() - oracles.boundary(t, p)) <= 1e-10
    assert abs(texture_loss(Tensor(t), Tensor(p)).item() - oracles.texture(t, p)) <= 1e-10


# ------------------------------------------------------------ 4. loss arithmetic

@criterion(4, "composite loss weights")
def test_loss_arithmetic():
    cfg = LossConfig()
    assert combine(1.0, 0.0, 0.0, 1.0, cfg) == 1.0
    rng = np.random.default_rng(6)
    t = (rng.random((2, 8, 8, 1)) < 0.4).astype(float)
    y = np.array([1, 2])
    logits = np.full((2, 3), -1000.0)
    logits[np.arange(2), y] = 1000.0
    total, parts = total_loss(Tensor(t), Tensor(logits), t, y, from_logits=False)
    assert total.item() == 0.0
    total, parts = total_loss(Tensor(rng.normal(size=(2, 8, 8, 1))), Tensor(rng.normal(size=(2, 3))), t, y)
    recombined = combine(parts["ft"], parts["boundary"], parts["texture"], parts["clf"], cfg)
    assert abs(recombined - total.item()) <= 1e-12


# ------------------------------------------------------------ 5. schedule

@criterion(5, "learning-rate schedule endpoints")
def test_schedule_endpoints():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 3e-4
    assert lr_schedule(cfg.epochs - 1, cfg) == 1.5e-6


# ------------------------------------------------------------ 6 and 8. overfit, then diagnose

OVERFIT_DATA = DatasetSpec(n_samples=16, image_size=64, seed=0)
# batch 4 instead of 8: 4 updates per epoch on 16 samples instead of 2
OVERFIT_CFG = TrainConfig(epochs=200, batch_size=4, lr0=3e-4, patience=10 ** 6, seed=0, augment=False,
                          model=ModelConfig(input_size=64, seed=0))


@pytest.fixture(scope="module")
def overfit():
    samples = generate_dataset(OVERFIT_DATA)
    model = MultiTaskNet(OVERFIT_CFG.model)
    t0 = time.perf_counter()
    res = train(model, samples, [], OVERFIT_CFG,
                evaluator=lambda m, e: metric_dict(*evaluate(m, samples)),
                stop_when=lambda d: d["dice"] > 0.90 and d["acc"] == 1.0)
    return samples, model, res, time.perf_counter() - t0


@criterion(6, "16-sample overfit: Dice > 0.90 and accuracy 1.0 within 200 epochs, under 15 min")
@pytest.mark.slow
def test_overfit(overfit, record_property):
    samples, model, res, elapsed = overfit
    final = metric_dict(*evaluate(model, samples))
    record_property("detail", f"dice {final['dice']:.4f}, acc {final['acc']:.3f}, "
                              f"{res.epochs_run} epochs, {elapsed:.0f} s")
    assert res.epochs_run <= 200
    assert final["dice"] > 0.90 and final["acc"] == 1.0
    assert elapsed < 900


@criterion(8, "diagnostics on a trained model: 4 levels, weights on simplex, both displacements > 0")
@pytest.mark.slow
def test_diagnostics(overfit, tmp_path, record_property):
    samples, model, _, _ = overfit
    records = diagnose(model, samples, tmp_path)
    assert (tmp_path / "diagnostics.csv").exists() and (tmp_path / "diagnostics_summary.csv").exists()
    assert sorted({r["level"] for r in records}) == [1, 2, 3, 4]
    assert len(records) == 4 * len(samples)
    assert all(abs(r["omega_seg"] + r["omega_clf"] - 1.0) <= 1e-9 for r in records)
    assert all(r["omega_seg"] >= 0 and r["omega_clf"] >= 0 for r in records)
    s2c = min(r["disp_seg2clf"] for r in records)
    c2s = min(r["disp_clf2seg"] for r in records)
    record_property("detail", f"min disp seg->clf {s2c:.3g}, clf->seg {c2s:.3g}")
    assert s2c > 0 and c2s > 0


# ------------------------------------------------------------ 7. ablation ordering

@criterion(7, "300-sample ablation, 3 seeds: full >= interaction-only >= baseline on mean val Dice")
@pytest.mark.slow
def test_ablation_ordering(tmp_path, record_property):
    cfg = preset("small")
    samples = generate_dataset(cfg.data)
    tr, va, _ = split_dataset([s.label for s in samples], seed=cfg.data.seed)
    train_s, val_s = [samples[i] for i in tr], [samples[i] for i in va]
    rows = [r for r in ABLATION_ROWS if r[0] in ("none", "tim", "full")]
    table = ablation_run(cfg.train, train_s, val_s, val_s, tmp_path, seeds=(0, 1, 2), rows=rows)
    dice = {r["row"]: r["dice"] for r in table}
    record_property("detail", ", ".join(f"{k} {v:.4f}" for k, v in dice.items()))
    assert (tmp_path / "ablation.csv").exists()
    assert dice["full"] >= dice["tim"] >= dice["none"]


# ------------------------------------------------------------ 9. determinism

@criterion(9, "identical seed and config give byte-identical history and checkpoint")
def test_determinism(tmp_path):
    cfg = preset("tiny")
    samples = generate_dataset(cfg.data)
    tr, va, _ = split_dataset([s.label for s in samples], seed=0)
    for name in ("a", "b"):
        model = MultiTaskNet(cfg.model)
        train(model, [samples[i] for i in tr], [samples[i] for i in va], cfg.train, out_dir=tmp_path / name)
    for f in ("history.csv", "best.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
