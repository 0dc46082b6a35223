"""Composite segmentation + classification objective.

Segmentation terms take probabilities ``(B, H, W, 1)``; :func:`total_loss`
accepts logits and applies the sigmoid itself.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import ops
from .core.tensor import Tensor, as_tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])


@dataclass
class LossConfig:
    w_seg: float = 0.80
    w_clf: float = 0.20
    w_boundary: float = 0.25
    w_texture: float = 0.15
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    tversky_gamma: float = 0.75
    curvature_sigma: float = 1.0
    curvature_support: int = 7
    focal_ce_gamma: float = 2.0
    binarize_threshold: float = 0.5
    binarize_slope: float = 50.0
    smooth: float = 1.0

    def validate(self) -> "LossConfig":
        weights = (self.w_seg, self.w_clf, self.w_boundary, self.w_texture)
        if min(weights) < 0:
            raise ValueError(f"loss weights must be non-negative, got {weights}")
        if self.tversky_alpha < 0 or self.tversky_beta < 0:
            raise ValueError("tversky_alpha and tversky_beta must be non-negative")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must lie in (0, 1)")
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit_range(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        d = t.data
        if d.size and (not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0):
            raise ValueError(f"{name}: values must lie in [0, 1] (got range [{d.min()}, {d.max()}])")


def tversky_counts(pred, target):
    """Soft TP, FP, FN summed over the whole batch."""
    pred, target = as_tensor(pred), as_tensor(target)
    tp = ops.sum(pred * target)
    fp = ops.sum(pred * (1.0 - target.data))
    fn = ops.sum((1.0 - pred) * target.data)
    return tp, fp, fn


def focal_tversky(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """``(1 - TI) ** gamma`` with ``TI = (TP + s) / (TP + a FP + b FN + s)``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"focal_tversky: shape mismatch {pred.shape} vs {target.shape}")
    _check_unit_range("focal_tversky", pred, target)
    tp, fp, fn = tversky_counts(pred, target)
    s = cfg.smooth
    denom = tp + ops.affine(fp, cfg.tversky_alpha) + ops.affine(fn, cfg.tversky_beta)
    ti = ops.affine(tp, 1.0, s) / ops.affine(denom, 1.0, s)
    return ops.power(ops.relu(ops.affine(ti, -1.0, 1.0)), cfg.tversky_gamma)


def curvature_kernel(sigma: float = 1.0, support: int = 7) -> np.ndarray:
    """``K[x, y] = (x^2 - y^2) exp(-(x^2 + y^2) / (2 sigma^2))`` on a centered grid.

    The first array axis indexes ``x``.  The kernel is odd under swapping
    axes and sums to zero over any symmetric square support.
    """
    if support < 3 or support % 2 == 0:
        raise ValueError(f"curvature kernel support must be an odd integer >= 3, got {support}")
    r = np.arange(support) - support // 2
    x, y = np.meshgrid(r, r, indexing="ij")
    return (x ** 2 - y ** 2) * np.exp(-(x ** 2 + y ** 2) / (2.0 * sigma ** 2))


def soft_binarize(pred, threshold: float, slope: float) -> Tensor:
    """Steep sigmoid around ``threshold``, rescaled so 0 -> 0 and 1 -> 1 exactly."""
    # endpoints through the same code path as the data so the rescale is exact
    lo, hi = ops.sigmoid(np.array([-slope * threshold, slope * (1.0 - threshold)])).data
    raw = ops.sigmoid(ops.affine(pred, slope, -slope * threshold))
    return ops.div(ops.affine(raw, 1.0, -lo), hi - lo)


def _filter(field: Tensor, kernel: np.ndarray) -> Tensor:
    return ops.conv2d(field, kernel.reshape(kernel.shape + (1, 1)))


def boundary_loss(mask, pred, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean absolute difference of curvature-filtered binarized masks.

    The target is thresholded hard; the prediction goes through
    :func:`soft_binarize` so the term stays differentiable.
    """
    mask, pred = as_tensor(mask), as_tensor(pred)
    if pred.shape != mask.shape or pred.ndim != 4:
        raise ValueError(f"boundary_loss: expected matching (B,H,W,1) inputs, got {mask.shape} and {pred.shape}")
    _check_unit_range("boundary_loss", pred, mask)
    kernel = curvature_kernel(cfg.curvature_sigma, cfg.curvature_support)
    target_bin = Tensor((mask.data >= cfg.binarize_threshold).astype(float))
    pred_bin = soft_binarize(pred, cfg.binarize_threshold, cfg.binarize_slope)
    diff = _filter(target_bin, kernel) - _filter(pred_bin, kernel)
    return ops.mean(ops.abs(diff))


def texture_loss(mask, pred) -> Tensor:
    """Batch mean of ``|std(S_x * M) - std(S_x * M_hat)|`` on soft values."""
    mask, pred = as_tensor(mask), as_tensor(pred)
    if pred.shape != mask.shape or pred.ndim != 4:
        raise ValueError(f"texture_loss: expected matching (B,H,W,1) inputs, got {mask.shape} and {pred.shape}")
    _check_unit_range("texture_loss", pred, mask)
    sd_true = ops.std(_filter(mask, SOBEL_X), axis=(1, 2, 3))
    sd_pred = ops.std(_filter(pred, SOBEL_X), axis=(1, 2, 3))
    return ops.mean(ops.abs(sd_true - sd_pred))


def focal_ce(logits, labels, gamma: float = 2.0) -> Tensor:
    """Mean of ``(1 - p_t)^gamma * -log p_t`` over the batch."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n_cls = logits.shape[-1]
    if labels.shape != (logits.shape[0],) or not np.all(labels == np.round(labels)):
        raise ValueError(f"focal_ce: labels must be integers of shape ({logits.shape[0]},)")
    labels = labels.astype(int)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_cls:
        raise ValueError(f"focal_ce: labels must lie in [0, {n_cls - 1}], got {sorted(set(labels.tolist()))}")
    onehot = np.eye(n_cls)[labels]
    logp_t = ops.sum(ops.log_softmax(logits) * onehot, axis=-1)
    p_t = ops.exp(logp_t)
    weight = ops.power(ops.relu(ops.affine(p_t, -1.0, 1.0)), gamma)
    return ops.mean(weight * ops.affine(logp_t, -1.0))


def combine(ft, boundary, texture, clf, cfg: LossConfig = LossConfig()):
    """Weighted sum of the four terms; works on floats and tensors alike."""
    seg = ft + boundary * cfg.w_boundary + texture * cfg.w_texture
    return seg * cfg.w_seg + clf * cfg.w_clf


def total_loss(seg_logits, clf_logits, masks, labels, cfg: LossConfig = LossConfig(),
               from_logits: bool = True):
    """Full objective and a float breakdown ``{total, ft, boundary, texture, seg, clf}``."""
    seg = ops.sigmoid(seg_logits) if from_logits else as_tensor(seg_logits)
    masks = as_tensor(masks)
    ft = focal_tversky(seg, masks, cfg)
    bd = boundary_loss(masks, seg, cfg)
    tx = texture_loss(masks, seg)
    ce = focal_ce(clf_logits, labels, cfg.focal_ce_gamma)
    total = combine(ft, bd, tx, ce, cfg)
    parts = {"ft": ft.item(), "boundary": bd.item(), "texture": tx.item(), "clf": ce.item()}
    parts["seg"] = parts["ft"] + cfg.w_boundary * parts["boundary"] + cfg.w_texture * parts["texture"]
    parts["total"] = total.item()
    return total, parts
