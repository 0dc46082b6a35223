"""Shared builders for model-level tests."""

import numpy as np

from uadi.core import Tensor, grad_check_params
from uadi.losses import LossConfig, focal_ce, total_loss
from uadi.gradsuite import randomize_buffers  # noqa: F401  (re-exported for tests)
from uadi.network import ModelConfig, MultiTaskNet


def tiny_config(**kw) -> ModelConfig:
    base = dict(input_size=32, encoder_channels=(8,) * 5, decoder_channels=(8,) * 4, clf_width=8,
                head_width=8, dropout=0.0, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def end_to_end_gradcheck(seed: int = 7, max_entries: int = 3, batch: int = 2):
    """Max relative error of the seg and clf losses over sampled entries of every parameter.

    BN runs on stored statistics and dropout is off, so the loss is a smooth,
    deterministic function of the parameters away from ReLU kinks.
    """
    rng = np.random.default_rng(seed)
    model = randomize_buffers(MultiTaskNet(tiny_config(seed=seed)), rng).eval()
    # non-zero gates so every path carries gradient
    for _, p in model.named_parameters():
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    x = rng.random((batch, 32, 32, 1))
    masks = (rng.random((batch, 32, 32, 1)) < 0.3).astype(float)
    labels = rng.integers(0, 3, size=batch)
    params = dict(model.named_parameters())
    params["image"] = Tensor(x, requires_grad=True)

    def seg_loss():
        out = model(params["image"])
        return total_loss(out.seg_logits, out.clf_logits, masks, labels,
                          LossConfig(w_clf=0.0))[0]

    def clf_loss():
        out = model(params["image"])
        return focal_ce(out.clf_logits, labels)

    results = {}
    for name, fn in (("segmentation", seg_loss), ("classification", clf_loss)):
        errs = grad_check_params(fn, params, step=1e-5, max_entries=max_entries,
                                 rng=np.random.default_rng(seed), extra_steps=(1e-4, 1e-6))
        results[name] = errs
    return results
