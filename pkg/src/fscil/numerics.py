"""Differentiable numeric kernel: reverse-mode autodiff over numpy arrays.

Every forward pass in this package is built from the `Tensor` operations in
this module, so there is exactly one gradient code path and it can be
verified centrally with `grad_check` against central finite differences.

Default precision is float64; float32 can be selected per tensor (gradient
checks at 32-bit need the relaxed tolerance, see `grad_check`).
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy import special as _special

from .errors import ArgumentError, DomainError, UsageError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense n-d array with an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph plumbing ----------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor; seeds with ones if scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ArgumentError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    """Build an op result, wiring the graph only when gradients are live."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise and reduction primitives ----------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _result(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    if isinstance(exponent, Tensor):
        raise ArgumentError("power() supports scalar exponents only")
    data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _result(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _result(data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _result(a.data * mask, (a,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact erf-based GELU: x * Phi(x)."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + _special.erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
            a._accumulate(g * (cdf + a.data * pdf))

    return _result(data, (a,), backward)


def softplus(a) -> Tensor:
    """ln(1 + e^x), stable for large |x|; strictly positive."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _special.expit(a.data))

    return _result(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; slices sum to 1."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ArgumentError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - inner))

    return _result(data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ArgumentError(f"log_softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 or g.shape != a.data.shape else g)
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _result(np.asarray(data), (a,), backward)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- shape primitives -------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(orig))

    return _result(a.data.reshape(shape), (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.swapaxes(ax1, ax2))

    return _result(a.data.swapaxes(ax1, ax2), (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def take(a, idx) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter-back."""
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] += g
            a._accumulate(buf)

    return _result(a.data[idx].copy(), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                t._accumulate(g[tuple(sl)])
            offset += size

    return _result(data, tuple(tensors), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting on leading axes.

    1-d operands follow numpy semantics (promoted, then the length-1 axis
    dropped) by composing through reshape.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1 and b.ndim == 1:
        return tensor_sum(a * b)
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.data.size)), b)
        return reshape(out, out.data.shape[:-2] + (out.data.shape[-1],))
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.data.size, 1)))
        return reshape(out, out.data.shape[:-1])
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), backward)


# -- structured ops ----------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution over (B, C, H, W) input with an (O, C, k, k) kernel."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    b, c, h, w = x.data.shape
    out_c, in_c, kh, kw = weight.data.shape
    if in_c != c:
        raise ArgumentError(f"conv2d channel mismatch: input {c}, kernel {in_c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ArgumentError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum("bcxykl,ockl->boxy", win, weight.data, optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        data = data + bias.data[None, :, None, None]
        parents.append(bias)
    oh, ow = data.shape[2], data.shape[3]

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(np.einsum("bcxykl,boxy->ockl", win, g, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib.transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp)

    return _result(data, tuple(parents), backward)


def maxpool2d(x, size: int, stride: int | None = None) -> Tensor:
    """Max pooling over (B, C, H, W); gradient routes to the first argmax."""
    x = _as_tensor(x)
    stride = stride or size
    b, c, h, w = x.data.shape
    if h < size or w < size:
        raise ArgumentError(f"maxpool window {size} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, oh, ow, size * size)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        ki, kj = np.divmod(idx, size)
        for i in range(size):
            for j in range(size):
                mask = (ki == i) & (kj == j)
                dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g * mask
        x._accumulate(dx)

    return _result(data, (x,), backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    feature_axis: int = -1,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Normalize per feature over all other axes.

    Train mode uses biased batch statistics with `eps` inside the square
    root and updates the running stats in place with `momentum` (new = (1-m)
    old + m batch).  Eval mode normalizes by sqrt(max(running_var, eps)) so
    calibrated (0, 1) stats act as an exact identity.
    """
    x = _as_tensor(x)
    if mode not in ("train", "eval"):
        raise UsageError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    axis = feature_axis % x.ndim
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    shape = [1] * x.ndim
    shape[axis] = x.data.shape[axis]
    gamma_b = reshape(gamma, tuple(shape))
    beta_b = reshape(beta, tuple(shape))
    if mode == "train":
        n = int(np.prod([x.data.shape[i] for i in reduce_axes]))
        if n < 2:
            raise UsageError("batch_norm train mode needs at least 2 samples per feature")
        mu = tensor_mean(x, axis=reduce_axes, keepdims=True)
        centered = x - mu
        var = tensor_mean(centered * centered, axis=reduce_axes, keepdims=True)
        xn = centered / sqrt(var + eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1)
    else:
        rm = running_mean.reshape(shape)
        denom = np.sqrt(np.maximum(running_var, eps)).reshape(shape)
        xn = (x - rm) * (1.0 / denom)
    return gamma_b * xn + beta_b


def cosine_similarity(u, v) -> Tensor:
    """cos angle between two 1-d tensors; differentiable; in [-1, 1]."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ArgumentError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine_similarity undefined for zero vectors")
    return tensor_sum(u * v) / (sqrt(tensor_sum(u * u)) * sqrt(tensor_sum(v * v)))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along `axis` (differentiable)."""
    x = _as_tensor(x)
    norm = sqrt(tensor_sum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# -- verification ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst_index: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f, x: Tensor, tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued `f` at `x` against
    central finite differences with the given step.

    `f` must be pure and deterministic; it is evaluated twice up front and a
    mismatch raises `UsageError`.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out1 = f(probe)
    out2 = f(Tensor(x.data.copy(), requires_grad=True))
    if out1.data.size != 1:
        raise ArgumentError("grad_check needs a scalar-valued function")
    if not np.array_equal(out1.data, out2.data):
        raise UsageError("grad_check requires a deterministic function (two evaluations differed)")
    out1.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.copy().reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig - step
        lo = f(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)

    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / scale
    worst = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else ()
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        tol=tol,
        n_checked=int(flat.size),
        worst_index=worst,
    )


# -- seeded randomness -------------------------------------------------------


class SeededRng:
    """Deterministic, splittable random stream (Philox counter generator).

    Identical (seed, path) pairs produce identical draw sequences on every
    platform.  `child(*labels)` derives an independent stream whose identity
    depends only on the labels, so call sites can be re-ordered safely.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = tuple(str(p) for p in _path)
        material = ("%d/" % self.seed + "/".join(self._path)).encode()
        key = int.from_bytes(hashlib.sha256(material).digest()[:16], "big")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "SeededRng":
        return SeededRng(self.seed, self._path + tuple(labels))

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc=loc, scale=scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
