"""Central finite-difference checks of the reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


class NondeterministicError(RuntimeError):
    pass


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar(f, *args) -> float:
    out = f(*args)
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {val.shape}")
    return float(val.reshape(-1)[0])


def numerical_grad(f: Callable[[], object], x: Tensor, step: float = 1e-5,
                   indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. the flat entries of ``x`` (modified in place)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f)
        flat[i] = orig - step
        fm = _scalar(f)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the backward pass and central differences.

    ``f`` maps ``x`` to a scalar tensor.  Raises :class:`NondeterministicError`
    if two forward evaluations at the same point disagree.
    """
    x.requires_grad = True
    first, second = _scalar(f, x), _scalar(f, x)
    if first != second:
        raise NondeterministicError(f"grad_check: f is not deterministic ({first!r} != {second!r})")
    x.grad = None
    out = f(x)
    if isinstance(out, Tensor):
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = numerical_grad(lambda: f(x), x, step)
    err = relative_error(analytic, numeric)
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict, step: float = 1e-5,
                      max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      extra_steps: Sequence[float] = ()) -> dict:
    """Check ``loss_fn()`` against many leaf tensors at once.

    ``params`` maps names to leaf tensors.  With ``max_entries`` only a random
    subset of each tensor's entries is differenced.  Returns name -> max error.

    ``extra_steps`` adds further step sizes; each entry keeps its smallest
    error.  Deep ReLU networks need this: a parameter that shifts thousands of
    activations at once almost surely puts a kink inside ``[x - h, x + h]``,
    which invalidates that particular difference quotient but not the gradient.
    """
    a, b = _scalar(loss_fn), _scalar(loss_fn)
    if a != b:
        raise NondeterministicError(f"grad_check: loss is not deterministic ({a!r} != {b!r})")
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        n = p.data.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        if not idx.size:
            errors[name] = 0.0
            continue
        analytic = (np.zeros(n) if p.grad is None else p.grad.reshape(-1))[idx]
        err = relative_error(analytic, numerical_grad(loss_fn, p, step, idx).reshape(-1)[idx])
        for h in extra_steps:
            # only entries the previous steps failed to confirm are differenced again
            redo = np.nonzero(err > 1e-6)[0]
            if not redo.size:
                break
            numeric = numerical_grad(loss_fn, p, h, idx[redo]).reshape(-1)[idx[redo]]
            err[redo] = np.minimum(err[redo], relative_error(analytic[redo], numeric))
        errors[name] = float(err.max())
    return errors
