"""Differentiable primitives.

Layout convention is channels-last: feature maps are ``(B, H, W, C)`` and
convolution kernels ``(kh, kw, C_in, C_out)``.  Every function accepts
tensors or array-likes and returns a :class:`Tensor`.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "affine", "power", "exp", "log", "sqrt", "abs",
    "relu", "sigmoid", "softmax", "log_softmax", "matmul", "dense", "conv1x1",
    "conv2d", "depthwise_conv2d", "conv_transpose2d", "avg_pool2x2",
    "global_avg_pool", "sum", "mean", "var", "std", "batch_norm", "concat",
    "reshape", "broadcast_channels", "upsample_nearest", "upsample_bilinear",
    "dropout",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "div")


def affine(x, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with python-scalar coefficients."""
    x = as_tensor(x)

    def back(g):
        return (g * scale,)

    return make_result(x.data * scale + shift, (x,), back, "affine")


def power(x, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent``; the gradient at a zero base is taken as 0
    for fractional exponents below one."""
    x = as_tensor(x)
    out = np.power(x.data, exponent)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * np.power(x.data, exponent - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return make_result(out, (x,), back, "power")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), back, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), back, "log_softmax")


# --------------------------------------------------------------------------
# linear maps

def matmul(a, b) -> Tensor:
    """Matrix product contracting the last axis of ``a`` with a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_result(a.data @ b.data, (a, b), back, "matmul")


def dense(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("dense", x.shape, weight.shape)
    if bias is None:
        return matmul(x, weight)
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("dense", weight.shape, bias.shape, detail="bias width")
    out = x.data @ weight.data + bias.data

    def back(g):
        flat_g = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ flat_g if weight.requires_grad else None
        gb = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), back, "dense")


def conv1x1(x, weight, bias=None) -> Tensor:
    """Pointwise convolution; ``weight`` is ``(C_in, C_out)`` or ``(1, 1, C_in, C_out)``."""
    weight = as_tensor(weight)
    if weight.ndim == 4:
        if weight.shape[:2] != (1, 1):
            raise ShapeError("conv1x1", weight.shape, detail="kernel must be 1x1")
        weight = reshape(weight, weight.shape[2:])
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("conv1x1", x.shape, detail="expected (B,H,W,C)")
    try:
        return dense(x, weight, bias)
    except ShapeError as err:
        raise ShapeError("conv1x1", x.shape, weight.shape) from err


def _check_map(name: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(name, x.shape, detail="expected (B,H,W,C)")


def conv2d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    ``weight`` has shape ``(k, k, C_in, C_out)`` with odd ``k``.  Implemented
    as a sum over kernel taps, each tap a matmul of a shifted input view.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_map("conv2d", x)
    if weight.ndim != 4 or weight.shape[2] != x.shape[3]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", weight.shape, detail="kernel size must be odd")
    d = int(dilation)
    B, H, W, _ = x.shape
    ph, pw = d * (kh // 2), d * (kw // 2)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((B, H, W, cout), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i * d:i * d + H, j * d:j * d + W, :] @ weight.data[i, j]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias width")
        out += bias.data
        parents = (x, weight, bias)

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i * d:i * d + H, j * d:j * d + W, :] += g @ weight.data[i, j].T
            gx = gxp[:, ph:ph + H, pw:pw + W, :]
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            flat_g = g.reshape(-1, cout)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, i * d:i * d + H, j * d:j * d + W, :].reshape(-1, cin)
                    gw[i, j] = patch.T @ flat_g
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 1, 2)) if bias.requires_grad else None,)
        return grads

    return make_result(out, parents, back, "conv2d")


def depthwise_conv2d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Per-channel "same" convolution; ``weight`` is ``(k, k, C)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_map("depthwise_conv2d", x)
    if weight.ndim != 3 or weight.shape[2] != x.shape[3]:
        raise ShapeError("depthwise_conv2d", x.shape, weight.shape)
    kh, kw, C = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("depthwise_conv2d", weight.shape, detail="kernel size must be odd")
    d = int(dilation)
    B, H, W, _ = x.shape
    ph, pw = d * (kh // 2), d * (kw // 2)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros(x.shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i * d:i * d + H, j * d:j * d + W, :] * weight.data[i, j]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (C,):
            raise ShapeError("depthwise_conv2d", weight.shape, bias.shape, detail="bias width")
        out += bias.data
        parents = (x, weight, bias)

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i * d:i * d + H, j * d:j * d + W, :] += g * weight.data[i, j]
            gx = gxp[:, ph:ph + H, pw:pw + W, :]
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = (xp[:, i * d:i * d + H, j * d:j * d + W, :] * g).sum(axis=(0, 1, 2))
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 1, 2)) if bias.requires_grad else None,)
        return grads

    return make_result(out, parents, back, "depthwise_conv2d")


def conv_transpose2d(x, weight, bias=None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel ``(2, 2, C_in, C_out)``.

    Each input pixel paints a disjoint 2x2 output block, so the output is
    exactly twice the input resolution.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_map("conv_transpose2d", x)
    if weight.ndim != 4 or weight.shape[:2] != (2, 2) or weight.shape[2] != x.shape[3]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    B, H, W, cin = x.shape
    cout = weight.shape[3]
    # (B,H,W,cin) x (cin, 2,2,cout) -> (B,H,W,2,2,cout) -> (B,H,2,W,2,cout)
    wmat = weight.data.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    blocks = (x.data.reshape(-1, cin) @ wmat).reshape(B, H, W, 2, 2, cout)
    out = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * H, 2 * W, cout)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv_transpose2d", weight.shape, bias.shape, detail="bias width")
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        gb6 = g.reshape(B, H, 2, W, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        gx = (gb6 @ wmat.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (x.data.reshape(-1, cin).T @ gb6).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 1, 2)) if bias.requires_grad else None,)
        return grads

    return make_result(out, parents, back, "conv_transpose2d")


# --------------------------------------------------------------------------
# pooling, reductions, normalization

def avg_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    _check_map("avg_pool2x2", x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError("avg_pool2x2", x.shape, detail="spatial size must be even")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def back(g):
        g6 = np.broadcast_to(g[:, :, None, :, None, :] * 0.25, (B, H // 2, 2, W // 2, 2, C))
        return (g6.reshape(x.shape),)

    return make_result(out, (x,), back, "avg_pool2x2")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_result(out, (x,), back, "mean")


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of ``(B, H, W, C)``, giving ``(B, C)``."""
    x = as_tensor(x)
    _check_map("global_avg_pool", x)
    return mean(x, axis=(1, 2))


def var(x, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divisor ``n``)."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    out = (centered ** 2).mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * 2.0 * centered / n,)

    return make_result(out, (x,), back, "var")


def std(x, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation; gradient is 0 where the deviation is 0."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    sd = np.sqrt((centered ** 2).mean(axis=axes, keepdims=True))
    out = sd if keepdims else np.squeeze(sd, axis=axes)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(sd > 0, sd, 1.0)
        return (np.where(sd > 0, g * centered / (n * safe), 0.0),)

    return make_result(out, (x,), back, "std")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalize over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``r = momentum * r + (1 - momentum) * batch``.  In
    inference mode the frozen buffers make this a fixed affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * v
    else:
        mu, v = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                n = x.data.size // C
                gx = inv / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gbeta

    return make_result(out, (x, gamma, beta), back, "batch_norm")


# --------------------------------------------------------------------------
# shape manipulation

def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) if tensors[k].requires_grad else None
            for k in range(len(tensors))
        )

    return make_result(out, tuple(tensors), back, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_channels(v) -> Tensor:
    """Reshape a ``(B, C)`` vector to ``(B, 1, 1, C)`` for spatial broadcasting."""
    v = as_tensor(v)
    if v.ndim != 2:
        raise ShapeError("broadcast_channels", v.shape, detail="expected (B,C)")
    return reshape(v, (v.shape[0], 1, 1, v.shape[1]))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    _check_map("upsample_nearest", x)
    B, H, W, C = x.shape
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)

    def back(g):
        return (g.reshape(B, H, f, W, f, C).sum(axis=(2, 4)),)

    return make_result(out, (x,), back, "upsample_nearest")


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Half-pixel bilinear interpolation matrix of shape ``(n_in*factor, n_in)``."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    """Separable bilinear upsampling (edge-clamped, half-pixel centers)."""
    x = as_tensor(x)
    _check_map("upsample_bilinear", x)
    _, H, W, _ = x.shape
    mh, mw = bilinear_matrix(H, factor), bilinear_matrix(W, factor)
    out = np.einsum("oh,bhwc->bowc", mh, x.data)
    out = np.einsum("pw,bowc->bopc", mw, out)

    def back(g):
        gx = np.einsum("pw,bopc->bowc", mw, g)
        return (np.einsum("oh,bowc->bhwc", mh, gx),)

    return make_result(out, (x,), back, "upsample_bilinear")


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
