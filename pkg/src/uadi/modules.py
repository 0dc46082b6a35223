"""Task interaction, uncertainty-proxy weighting, multi-scale fusion, attention gates.

Feature maps are channels-last ``(B, h, w, c)``; classification streams are
``(B, 256)`` by default.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import ops
from .core.nn import BatchNorm, Conv2d, Dense, Module, SeparableConv2d
from .core.tensor import ShapeError, Tensor, as_tensor

TAU = 0.7
DILATIONS = (1, 2, 4)


def _column(t: Tensor, k: int, width: int) -> Tensor:
    """Column ``k`` of a ``(B, width)`` tensor as a ``(B,)`` tensor."""
    sel = np.zeros((width, 1))
    sel[k, 0] = 1.0
    return ops.reshape(ops.matmul(t, sel), (t.shape[0],))


def _per_sample(w: Tensor, ndim: int) -> Tensor:
    w = as_tensor(w)
    return ops.reshape(w, (w.shape[0],) + (1,) * (ndim - 1))


class TaskInteraction(Module):
    """Bidirectional exchange between a decoder map and a classification vector.

    The segmentation-to-classification path pools a ReLU-activated 1x1
    projection of the decoder map into a context vector and adds it to the
    classification stream through a sigmoid gate.  The reverse path projects the
    classification vector to channel space and multiplies the decoder map by
    ``1 + tau * gate * projection``, which lies in ``[1, 1 + tau]``.

    Gate layers start at zero so both gates open at 0.5.
    """

    def __init__(self, channels: int, rng: np.random.Generator, clf_width: int = 256,
                 zero_gates: bool = True):
        super().__init__()
        self.channels = channels
        self.clf_width = clf_width
        self.tau = TAU
        self.alpha_conv = Conv2d(channels, channels, 1, rng)
        self.phi_dense = Dense(channels, clf_width, rng)
        self.phi_bn = BatchNorm(clf_width)
        self.clf_gate = Dense(clf_width, clf_width, rng, zero=zero_gates)
        self.psi = Dense(clf_width, channels, rng)
        self.seg_gate = Dense(channels, channels, rng, zero=zero_gates)

    def _check(self, D: Tensor, f: Tensor) -> None:
        if D.ndim != 4 or D.shape[-1] != self.channels:
            raise ShapeError("task_interaction", D.shape, (None, None, None, self.channels),
                             detail="decoder channels")
        if f.ndim != 2 or f.shape[-1] != self.clf_width or f.shape[0] != D.shape[0]:
            raise ShapeError("task_interaction", f.shape, (D.shape[0], self.clf_width),
                             detail="classification stream")

    def seg_context(self, D: Tensor) -> Tensor:
        alpha = ops.relu(self.alpha_conv(D))
        return self.phi_bn(self.phi_dense(ops.global_avg_pool(alpha)))

    def seg_to_clf(self, D, f) -> Tensor:
        D, f = as_tensor(D), as_tensor(f)
        self._check(D, f)
        ctx = self.seg_context(D)
        gate = ops.sigmoid(self.clf_gate(ctx))
        return f + gate * ctx

    def modulation(self, D, f) -> Tensor:
        """The per-sample, per-channel factor ``mu`` as a ``(B, c)`` tensor."""
        D, f = as_tensor(D), as_tensor(f)
        self._check(D, f)
        proj = ops.sigmoid(self.psi(f))
        gate = ops.sigmoid(self.seg_gate(ops.global_avg_pool(D)))
        return ops.affine(gate * proj, self.tau, 1.0)

    def clf_to_seg(self, D, f) -> Tensor:
        D = as_tensor(D)
        return D * ops.broadcast_channels(self.modulation(D, f))

    def forward(self, D, f):
        return self.clf_to_seg(D, f), self.seg_to_clf(D, f)


def tim_seg_to_clf(D, f_clf, params: TaskInteraction) -> Tensor:
    return params.seg_to_clf(D, f_clf)


def tim_clf_to_seg(D, f_clf, params: TaskInteraction) -> Tensor:
    return params.clf_to_seg(D, f_clf)


def upa_uncertainty(D_enh, f_enh):
    """Variance proxies: mean-over-channels spatial variance, and feature variance.

    Both are population variances and return ``(B,)`` tensors.
    """
    D_enh, f_enh = as_tensor(D_enh), as_tensor(f_enh)
    if D_enh.ndim != 4 or f_enh.ndim != 2 or D_enh.shape[0] != f_enh.shape[0]:
        raise ShapeError("upa_uncertainty", D_enh.shape, f_enh.shape)
    u_seg = ops.mean(ops.var(D_enh, axis=(1, 2)), axis=1)
    u_clf = ops.var(f_enh, axis=1)
    return u_seg, u_clf


def upa_fuse(base, enhanced, weight) -> Tensor:
    """Per-sample interpolation ``base + w * (enhanced - base)``.

    Evaluated as ``(1 - w) * base + w * enhanced`` so that ``w = 0`` returns
    ``base`` and ``w = 1`` returns ``enhanced`` bit for bit.
    """
    base, enhanced = as_tensor(base), as_tensor(enhanced)
    if base.shape != enhanced.shape:
        raise ShapeError("upa_fuse", base.shape, enhanced.shape)
    w = _per_sample(weight, base.ndim)
    return (1.0 - w) * base + w * enhanced


class UncertaintyProxyAttention(Module):
    """Softmax MLP mapping normalized variance proxies to ``(w_seg, w_clf)``.

    During training the normalizer is the batch mean of each proxy; a running
    mean (momentum 0.9) is kept for inference.
    """

    def __init__(self, rng: np.random.Generator, hidden: int = 32, eps: float = 1e-8,
                 momentum: float = 0.9):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.hidden = Dense(2, hidden, rng)
        self.out = Dense(hidden, 2, rng)
        self.register_buffer("running_mean", np.ones(2))

    def weights(self, u_seg, u_clf, batch_means=None) -> Tensor:
        u = ops.concat([ops.reshape(as_tensor(u_seg), (-1, 1)), ops.reshape(as_tensor(u_clf), (-1, 1))], axis=1)
        if batch_means is not None:
            ubar = as_tensor(batch_means)
        elif self.training:
            ubar = ops.mean(u, axis=0)
            rm = self._buffers["running_mean"]
            rm *= self.momentum
            rm += (1.0 - self.momentum) * ubar.data
        else:
            ubar = Tensor(self._buffers["running_mean"])
        u_norm = u / ops.affine(ubar, 1.0, self.eps)
        return ops.softmax(self.out(ops.relu(self.hidden(u_norm))))

    def forward(self, D, D_enh, f, f_enh):
        u_seg, u_clf = upa_uncertainty(D_enh, f_enh)
        omega = self.weights(u_seg, u_clf)
        D_final = upa_fuse(D, D_enh, _column(omega, 0, 2))
        f_final = upa_fuse(f, f_enh, _column(omega, 1, 2))
        return D_final, f_final, omega


def upa_weights(u_seg, u_clf, batch_means, params: UncertaintyProxyAttention) -> Tensor:
    """``(B, 2)`` simplex weights; column 0 is ``w_seg``, column 1 ``w_clf``."""
    return params.weights(u_seg, u_clf, batch_means)


class MultiScaleFusion(Module):
    """Three dilated separable 3x3 branches mixed by a softmax scale attention."""

    def __init__(self, channels: int, rng: np.random.Generator, dilations=DILATIONS):
        super().__init__()
        if channels % 8:
            raise ValueError(f"MultiScaleFusion: channels ({channels}) must be divisible by 8")
        self.channels = channels
        self.branches = [SeparableConv2d(channels, channels, rng, dilation=r) for r in dilations]
        self.squeeze = Dense(channels, channels // 8, rng)
        self.scale = Dense(channels // 8, len(dilations), rng)
        self.fuse = Conv2d(channels, channels, 1, rng)

    def scale_attention(self, X) -> Tensor:
        g = ops.relu(self.squeeze(ops.global_avg_pool(X)))
        return ops.softmax(self.scale(g))

    def forward(self, X, return_attention: bool = False):
        X = as_tensor(X)
        if X.ndim != 4 or X.shape[-1] != self.channels:
            raise ShapeError("hmsf", X.shape, (None, None, None, self.channels))
        alpha = self.scale_attention(X)
        n = len(self.branches)
        mixed = None
        for i, branch in enumerate(self.branches):
            term = branch(X) * _per_sample(_column(alpha, i, n), 4)
            mixed = term if mixed is None else mixed + term
        Y = self.fuse(mixed)
        return (Y, alpha) if return_attention else Y


def hmsf_forward(X, params: MultiScaleFusion) -> Tensor:
    return params(X)


class AttentionGate(Module):
    """Additive attention on a skip connection, guided by the decoder signal.

    ``a = sigmoid(psi(relu(theta(skip) + phi(gate))))`` is a single-channel
    spatial map in (0, 1) multiplied into every skip channel.
    """

    def __init__(self, skip_channels: int, gate_channels: int, rng: np.random.Generator,
                 inter_channels: Optional[int] = None):
        super().__init__()
        inter = inter_channels or max(skip_channels // 2, 1)
        self.theta = Conv2d(skip_channels, inter, 1, rng)
        self.phi = Conv2d(gate_channels, inter, 1, rng)
        self.psi = Conv2d(inter, 1, 1, rng)

    def attention(self, skip, gate_signal) -> Tensor:
        skip, gate_signal = as_tensor(skip), as_tensor(gate_signal)
        if skip.ndim != 4 or gate_signal.ndim != 4 or skip.shape[:3] != gate_signal.shape[:3]:
            raise ShapeError("attention_gate", skip.shape, gate_signal.shape, detail="spatial extent")
        return ops.sigmoid(self.psi(ops.relu(self.theta(skip) + self.phi(gate_signal))))

    def forward(self, skip, gate_signal, return_attention: bool = False):
        a = self.attention(skip, gate_signal)
        out = as_tensor(skip) * a
        return (out, a) if return_attention else out


def attention_gate(skip, gate_signal, params: AttentionGate) -> Tensor:
    return params(skip, gate_signal)
