"""Small define-by-run reverse-mode differentiation engine over float64 arrays.

Operations are recorded on the innermost active :class:`Tape`.  Outside a tape
nothing is recorded, which doubles as a gradient-free mode for inference.

    >>> x = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_(x * x)
    >>> tape.backward(y)
    >>> x.grad
    array([2., 2., 2.])
"""

from __future__ import annotations

import logging
import os
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEBUG = os.environ.get("MACS_DEBUG", "") not in ("", "0")

# denominators in the symmetric eigen backward are clamped to this magnitude
EIG_GAP_CLAMP = 1e-8

_TAPES: list["Tape"] = []


class NumericalError(ArithmeticError):
    """Raised when a numerical routine fails (non-finite values, eig failure)."""


class Tensor:
    """Dense float64 array plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Ordered record of operations for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, outputs, inputs, backward_fn) -> None:
        self.nodes.append((tuple(outputs), tuple(inputs), backward_fn))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        produced: set[int] = set()
        for outputs, inputs, fn in reversed(self.nodes):
            out_grads = [grads.get(id(o)) for o in outputs]
            for o in outputs:
                produced.add(id(o))
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros_like(o.data) if g is None else g for o, g in zip(outputs, out_grads)]
            in_grads = fn(out_grads[0] if len(outputs) == 1 else out_grads)
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if DEBUG and not np.all(np.isfinite(g)):
                    raise NumericalError("non-finite gradient during backward")
                key = id(t)
                grads[key] = g if key not in grads else grads[key] + g
        # leaves: tensors that require grad but were never produced by a recorded node
        for outputs, inputs, _ in self.nodes:
            for t in inputs:
                if t.requires_grad and id(t) not in produced and id(t) in grads:
                    g = grads.pop(id(t))
                    t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if DEBUG and not np.all(np.isfinite(out.data)):
        raise NumericalError("non-finite value in forward pass")
    if needs and _TAPES:
        _TAPES[-1].record((out,), inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def is_recording() -> bool:
    return bool(_TAPES)


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; a float operand is scalar-mul."""
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Clamp from below; gradient passes only where the input exceeds ``floor``."""
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def eigh(s: Tensor) -> tuple[Tensor, Tensor]:
    """Symmetric eigendecomposition of the symmetrized input, ascending eigenvalues.

    Backward: dS = U (sym(K o U^T dU) + diag(dL)) U^T with
    K_ij = 1 / (l_j - l_i) off the diagonal, denominators clamped to
    ``EIG_GAP_CLAMP`` in magnitude.
    """
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise ValueError(f"eigh needs square matrices, got {s.shape}")
    sym = 0.5 * (s.data + np.swapaxes(s.data, -1, -2))
    try:
        lam, u = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    needs = s.requires_grad
    lam_t = Tensor(lam, requires_grad=needs)
    u_t = Tensor(u, requires_grad=needs)

    def backward(grads):
        g_lam, g_u = grads
        ut = np.swapaxes(u, -1, -2)
        gap = lam[..., None, :] - lam[..., :, None]  # l_j - l_i
        gap = np.where(gap >= 0, 1.0, -1.0) * np.maximum(np.abs(gap), EIG_GAP_CLAMP)
        k = 1.0 / gap
        n = lam.shape[-1]
        k[..., np.arange(n), np.arange(n)] = 0.0
        inner = k * (ut @ g_u)
        inner = 0.5 * (inner + np.swapaxes(inner, -1, -2))
        inner[..., np.arange(n), np.arange(n)] += g_lam
        return (u @ inner @ ut,)

    if needs and _TAPES:
        _TAPES[-1].record((lam_t, u_t), (s,), backward)
    return lam_t, u_t


# -- reductions and structure ---------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; backward scatters with ``np.add.at``."""

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return take(a, tuple(index))


# -- neural-network primitives ---------------------------------------------


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def l2_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Scale the last axis to unit norm.  Zero-norm rows map to zero with zero gradient."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = norm > eps
    inv = np.where(safe, 1.0 / np.where(safe, norm, 1.0), 0.0)
    out = a.data * inv

    def backward(g):
        return (inv * (g - out * (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward)


def conv_channels(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Convolution across the channel axis with kernels spanning all ``d`` channels.

    ``x`` is (..., d_in, T), ``weight`` is (d_out, d_in): one (d, 1) kernel per output row.
    """
    out = matmul(weight, x)
    if bias is not None:
        out = add(out, reshape(bias, (-1, 1)))
    return out


def conv_time(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise 1-D cross-correlation along time, stride 1, 'same' padding.

    ``x`` is (..., d, T); ``weight`` is (d, k) with one temporal kernel per channel.
    """
    d, k = weight.shape
    if x.shape[-2] != d:
        raise ValueError(f"conv_time: {x.shape[-2]} channels but {d} kernels")
    left = (k - 1) // 2
    right = k - 1 - left
    t = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    xp = np.pad(x.data, pad)
    w = weight.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += w[:, j:j + 1] * xp[..., j:j + t]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        lead = tuple(range(g.ndim - 2))
        for j in range(k):
            gxp[..., j:j + t] += w[:, j:j + 1] * g
            gw[:, j] = (g * xp[..., j:j + t]).sum(axis=lead + (g.ndim - 1,))
        return gxp[..., left:left + t], gw

    out_t = _make(out, (x, weight), backward)
    if bias is not None:
        out_t = add(out_t, reshape(bias, (-1, 1)))
    return out_t


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel row over the last (time) axis, then per-channel affine.

    ``gamma`` and ``beta`` have shape (d,) for input (..., d, T).
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data[:, None]
    out = xhat * gm + beta.data[:, None]
    lead = tuple(range(x.ndim - 2))

    def backward(g):
        gx_hat = g * gm
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead + (x.ndim - 1,))
        gbeta = g.sum(axis=lead + (x.ndim - 1,))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# -- gradient checking -----------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    Returns NaN (and logs the offending coordinates) if any coordinate is non-finite.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    tape.backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        flat[i] = (fp - fm) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    bad = ~np.isfinite(err)
    if bad.any():
        logger.warning("grad_check: non-finite coordinates %s", np.argwhere(bad).tolist())
        return float("nan")
    return float(err.max()) if err.size else 0.0
