"""Finite-difference gradient suite over every differentiable component.

Each check randomizes a small instance (including gates that start at zero,
so every path carries gradient) and compares backward against central
differences.  Results map component name to max relative error.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import ops
from .core.gradcheck import grad_check_params
from .core.tensor import Tensor
from .losses import LossConfig, boundary_loss, focal_ce, focal_tversky, texture_loss, total_loss
from .modules import AttentionGate, MultiScaleFusion, TaskInteraction, UncertaintyProxyAttention
from .network import ModelConfig, MultiTaskNet

MODULE_TOL = 1e-3
LOSS_TOL = 1e-4
STEPS = (1e-5, 1e-4, 1e-6)

SIZES = {
    # (model input size, model widths, sampled entries per tensor)
    "tiny": (32, 8, 3),
    "small": (32, 8, 8),
    "paper": (64, 8, 8),
}


def randomize_buffers(module, rng: np.random.Generator):
    """Replace running statistics so eval-mode batch norm is not an identity."""
    for name, b in module.named_buffers():
        if name.endswith("running_var"):
            b[...] = rng.uniform(0.5, 2.0, size=b.shape)
        elif name.endswith("running_mean"):
            b[...] = rng.normal(scale=0.2, size=b.shape) if "bn" in name else rng.uniform(0.5, 2.0, size=b.shape)
    return module


def randomize(module, rng: np.random.Generator, scale: float = 0.5):
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return randomize_buffers(module, rng)


def _check(loss_fn: Callable[[], Tensor], params: dict, max_entries: Optional[int], seed: int) -> float:
    errs = grad_check_params(loss_fn, params, step=STEPS[0], max_entries=max_entries,
                             rng=np.random.default_rng(seed), extra_steps=STEPS[1:])
    return max(errs.values())


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def check_tim(rng, entries=20) -> float:
    tim = randomize(TaskInteraction(8, rng, clf_width=16), rng).eval()
    D, f = _leaf(rng, (3, 4, 4, 8)), _leaf(rng, (3, 16))
    w1, w2 = rng.normal(size=(3, 4, 4, 8)), rng.normal(size=(3, 16))

    def loss():
        D_enh, f_enh = tim(D, f)
        return ops.sum(D_enh * w1) + ops.sum(f_enh * w2)

    return _check(loss, {**dict(tim.named_parameters()), "D": D, "f": f}, entries, 1)


def check_upa(rng, entries=20) -> float:
    upa = randomize(UncertaintyProxyAttention(rng), rng).train()
    D, De = _leaf(rng, (3, 4, 4, 4)), _leaf(rng, (3, 4, 4, 4))
    f, fe = _leaf(rng, (3, 16)), _leaf(rng, (3, 16))
    w1, w2 = rng.normal(size=(3, 4, 4, 4)), rng.normal(size=(3, 16))

    def loss():
        Df, ff, _ = upa(D, De, f, fe)
        return ops.sum(Df * w1) + ops.sum(ff * w2)

    return _check(loss, {**dict(upa.named_parameters()), "D": D, "D_enh": De, "f": f, "f_enh": fe}, entries, 2)


def check_hmsf(rng, entries=20) -> float:
    m = randomize(MultiScaleFusion(8, rng), rng)
    X = _leaf(rng, (2, 6, 6, 8))
    w = rng.normal(size=(2, 6, 6, 8))
    return _check(lambda: ops.sum(m(X) * w), {**dict(m.named_parameters()), "X": X}, entries, 3)


def check_attention_gate(rng, entries=20) -> float:
    g = randomize(AttentionGate(6, 4, rng), rng)
    skip, sig = _leaf(rng, (2, 5, 5, 6)), _leaf(rng, (2, 5, 5, 4))
    w = rng.normal(size=(2, 5, 5, 6))
    return _check(lambda: ops.sum(g(skip, sig) * w), {**dict(g.named_parameters()), "skip": skip, "gate": sig},
                  entries, 4)


def _probabilities(rng, shape, near_threshold=False):
    if near_threshold:
        # inside the steep band of the binarization, where its gradient is informative
        return 0.5 + rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.005, 0.04, size=shape)
    p = rng.uniform(0.05, 0.4, size=shape)
    return np.where(rng.random(shape) < 0.5, 1.0 - p, p)


def check_losses(rng) -> dict:
    shape = (2, 8, 8, 1)
    mask = (rng.random(shape) < 0.4).astype(float)
    labels = rng.integers(0, 3, size=4)
    out = {}
    p = Tensor(_probabilities(rng, shape), requires_grad=True)
    out["focal_tversky"] = _check(lambda: focal_tversky(p, mask), {"pred": p}, None, 5)
    pb = Tensor(_probabilities(rng, shape, near_threshold=True), requires_grad=True)
    out["boundary"] = _check(lambda: boundary_loss(mask, pb), {"pred": pb}, None, 6)
    pt = Tensor(_probabilities(rng, shape), requires_grad=True)
    out["texture"] = _check(lambda: texture_loss(mask, pt), {"pred": pt}, None, 7)
    z = _leaf(rng, (4, 3))
    out["focal_ce"] = _check(lambda: focal_ce(z, labels), {"logits": z}, None, 8)
    seg = _leaf(rng, shape, 0.5)
    clf = _leaf(rng, (2, 3))
    out["total"] = _check(lambda: total_loss(seg, clf, mask, labels[:2])[0], {"seg_logits": seg, "clf_logits": clf},
                          None, 9)
    return out


def check_model(seed: int = 7, size: str = "tiny", batch: int = 2) -> dict:
    """End-to-end check of both task losses through the full model.

    Batch norm runs on stored statistics and dropout is off, so the loss is a
    deterministic function of the parameters.
    """
    h, width, entries = SIZES[size]
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_size=h, encoder_channels=(width,) * 5, decoder_channels=(width,) * 4,
                      clf_width=width, head_width=width, dropout=0.0, seed=seed)
    model = randomize_buffers(MultiTaskNet(cfg), rng).eval()
    # non-zero gates so every path carries gradient
    for _, p in model.named_parameters():
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    x = rng.random((batch, h, h, 1))
    masks = (rng.random((batch, h, h, 1)) < 0.3).astype(float)
    labels = rng.integers(0, 3, size=batch)
    params = dict(model.named_parameters())
    params["image"] = Tensor(x, requires_grad=True)

    def seg_loss():
        out = model(params["image"])
        return total_loss(out.seg_logits, out.clf_logits, masks, labels, LossConfig(w_clf=0.0))[0]

    def clf_loss():
        return focal_ce(model(params["image"]).clf_logits, labels)

    return {"model_seg": _check(seg_loss, params, entries, seed),
            "model_clf": _check(clf_loss, params, entries, seed)}


def tolerance(component: str) -> float:
    return LOSS_TOL if component in ("focal_tversky", "boundary", "texture", "focal_ce", "total") else MODULE_TOL


def run_suite(size: str = "tiny", seed: int = 7, include_model: bool = True) -> dict:
    if size not in SIZES:
        raise ValueError(f"unknown size {size!r}; choose from {sorted(SIZES)}")
    rng = np.random.default_rng(seed)
    results = {
        "tim": check_tim(rng),
        "upa": check_upa(rng),
        "hmsf": check_hmsf(rng),
        "attention_gate": check_attention_gate(rng),
    }
    results.update(check_losses(rng))
    if include_model:
        results.update(check_model(seed, size))
    return results
