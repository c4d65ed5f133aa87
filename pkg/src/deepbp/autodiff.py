"""Dense f64 tensors with a tape-based reverse-mode autodiff engine.

Conventions used throughout the package:

* everything is float64; complex data is carried as a trailing axis of
  length 2 holding (real, imag),
* "centered" FFT layout puts DC at index (H/2, W/2) in both the image and
  the frequency domain (shift-FFT-shift),
* tensors are immutable after construction; gradients are recorded on an
  explicit, single-use :class:`Tape`.

Inference runs with no tape active and records nothing.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "zeros",
    "zeros_like",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "sum_all",
    "dot",
    "sqrt",
    "exp",
    "complex_mul",
    "complex_conj",
    "fft2_centered",
    "conv2d",
    "avg_pool2",
    "upsample_nearest2",
    "concat_channels",
    "hwc_to_chw",
    "chw_to_hwc",
    "broadcast_leading",
    "sum_leading",
]


class Tensor:
    """Immutable dense f64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of arr without copying; asarray keeps 0-d extents
        # (ascontiguousarray would silently promote them to shape (1,))
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64, order="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars (python numbers or size-1 tensors) broadcast
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros(t.shape))


# ---------------------------------------------------------------------------
# tape


_LOCAL = threading.local()


def _stack() -> list:
    s = getattr(_LOCAL, "stack", None)
    if s is None:
        s = []
        _LOCAL.stack = s
    return s


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of primitive ops; single-use per forward/backward.

    Records are appended in execution order, which is automatically a
    topological order, and the backward pass visits each record exactly
    once in reverse.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], tuple]] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _stack().pop()
        assert top is self
        return False

    def _tracked(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backfns: tuple) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        out._tape = self
        out._node = len(self._records)
        self._records.append((out, inputs, backfns))
        for t in inputs:
            if t.requires_grad:
                self._leaves[id(t)] = t

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for trainable leaves; clears the tape.

        Returns a map keyed by leaf tensor. With ``wrt`` given, the map
        contains exactly those tensors (zeros where no path to the loss
        exists); otherwise all trainable leaves seen by the tape.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backfns in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, fn in zip(inputs, backfns):
                if fn is None or not self._tracked(t):
                    continue
                gi = fn(g)
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        if wrt is None:
            targets: Iterable[Tensor] = self._leaves.values()
        else:
            targets = wrt
        result = {t: grads.get(id(t), np.zeros(t.shape)) for t in targets}
        self._records.clear()
        self._leaves.clear()
        self._consumed = True
        return result


def _emit(out_arr: np.ndarray, inputs: tuple[Tensor, ...], backfns: tuple) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = active_tape()
    if tape is not None and any(tape._tracked(t) for t in inputs):
        tape._record(out, inputs, backfns)
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    # equal shapes, or scalar (size 1) broadcast on either side
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)  # scalar operand


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        (lambda g: _reduce_to(g * bd, a.shape), lambda g: _reduce_to(g * ad, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    return _emit(
        ad / bd,
        (a, b),
        (
            lambda g: _reduce_to(g / bd, a.shape),
            lambda g: _reduce_to(-g * ad / (bd * bd), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), (lambda g: -g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), (lambda g: g * s,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is taken as 0
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.sum(a.data).reshape(()), (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Plain real inner product over all components; returns a scalar."""
    if a.shape != b.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = np.dot(ad.ravel(), bd.ravel()).reshape(())
    return _emit(out, (a, b), (lambda g: g * bd, lambda g: g * ad))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), (lambda g: g * (0.5 / out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), (lambda g: g * out,))


# ---------------------------------------------------------------------------
# complex pairs


def _check_pair(t: Tensor, opname: str) -> None:
    if t.data.ndim < 1 or t.shape[-1] != 2:
        raise ValueError(f"{opname}: trailing axis must have length 2, got shape {t.shape}")


def _c_view(a: np.ndarray) -> np.ndarray:
    # reinterpret a trailing (…, 2) real-pair axis as complex, zero-copy
    # when contiguous
    return np.ascontiguousarray(a).view(np.complex128)[..., 0]


def _pairs(c: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return c.view(np.float64).reshape(shape)


def _cmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _pairs(_c_view(a) * _c_view(b), a.shape)


def _cconj(a: np.ndarray) -> np.ndarray:
    return _pairs(_c_view(a).conj(), a.shape)


def complex_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise complex product of (…, 2) real-pair tensors."""
    _check_pair(a, "complex_mul")
    _check_pair(b, "complex_mul")
    if a.shape != b.shape:
        raise ValueError(f"complex_mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit(
        _cmul(ad, bd),
        (a, b),
        (lambda g: _cmul(g, _cconj(bd)), lambda g: _cmul(g, _cconj(ad))),
    )


def complex_conj(a: Tensor) -> Tensor:
    _check_pair(a, "complex_conj")
    return _emit(_cconj(a.data), (a,), (lambda g: _cconj(g),))


# ---------------------------------------------------------------------------
# centered orthonormal FFT


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


_CHECKER_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _checkers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Input/output diagonal masks realizing shift-FFT-shift for even
    extents: fftshift(fft2(ifftshift(x))) == (-1)^(H/2+W/2) * E . fft2(E . x)
    with E the (-1)^(i+j) checkerboard. Avoids four np.roll copies."""
    cached = _CHECKER_CACHE.get((h, w))
    if cached is None:
        si = 1.0 - 2.0 * (np.arange(h) % 2)
        sj = 1.0 - 2.0 * (np.arange(w) % 2)
        m = np.outer(si, sj)
        g = 1.0 if (h // 2 + w // 2) % 2 == 0 else -1.0
        cached = (m, m * g)
        _CHECKER_CACHE[(h, w)] = cached
    return cached


def _fft2c_arr(arr: np.ndarray, inverse: bool) -> np.ndarray:
    m_in, m_out = _checkers(arr.shape[-3], arr.shape[-2])
    c = _c_view(arr) * m_in
    if inverse:
        c = np.fft.ifft2(c, axes=(-2, -1), norm="ortho")
    else:
        c = np.fft.fft2(c, axes=(-2, -1), norm="ortho")
    c *= m_out
    return _pairs(c, arr.shape)


def fft2_centered(x: Tensor, inverse: bool = False) -> Tensor:
    """Unitary 2-D DFT with DC at (H/2, W/2) in both domains.

    Acts on the last three axes (H, W, 2); leading axes are batched.
    The backward pass is the inverse transform, by unitarity.
    """
    if x.data.ndim < 3 or x.shape[-1] != 2:
        raise ValueError(f"fft2_centered: need (..., H, W, 2), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"fft2_centered: extents must be powers of two, got {h}x{w}")
    return _emit(
        _fft2c_arr(x.data, inverse),
        (x,),
        (lambda g: _fft2c_arr(g, not inverse),),
    )


# ---------------------------------------------------------------------------
# convolution and resampling (channels-first layout)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding 1: (C_in,H,W) -> (C_out,H,W)."""
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: input must be (C_in, H, W), got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernel must be (C_out, C_in, 3, 3), got {kernel.shape}")
    cin, h, w = x.shape
    cout = kernel.shape[0]
    if kernel.shape[1] != cin:
        raise ValueError(f"conv2d: channel mismatch, input has {cin}, kernel expects {kernel.shape[1]}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias must be ({cout},), got {bias.shape}")

    xp = np.zeros((cin, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x.data
    kd = kernel.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    out = np.tensordot(kd, win, axes=([1, 2, 3], [0, 3, 4]))
    out += bias.data[:, None, None]

    def back_x(g):
        gp = np.zeros((cout, h + 2, w + 2))
        gp[:, 1:-1, 1:-1] = g
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (3, 3), axis=(1, 2))
        return np.tensordot(kd[:, :, ::-1, ::-1], gwin, axes=([0, 2, 3], [0, 3, 4]))

    def back_k(g):
        return np.tensordot(g, win, axes=([1, 2], [1, 2]))

    return _emit(
        out,
        (x, kernel, bias),
        (back_x, back_k, lambda g: g.sum(axis=(1, 2))),
    )


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2, on (C, H, W)."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: extents must be even, got {x.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return _emit(
        out,
        (x,),
        (lambda g: np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,),
    )


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on (C, H, W)."""
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _emit(
        out,
        (x,),
        (lambda g: g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),),
    )


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (C_i, H, W) tensors along the channel axis."""
    parts = tuple(parts)
    hw = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim != 3 or p.shape[1:] != hw:
            raise ValueError("concat_channels: spatial extents must agree")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[lo:hi]

    return _emit(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        tuple(make_back(i) for i in range(len(parts))),
    )


def hwc_to_chw(x: Tensor) -> Tensor:
    """(H, W, C) -> (C, H, W); pure permutation, self-inverting backward."""
    if x.data.ndim != 3:
        raise ValueError(f"hwc_to_chw: need rank 3, got {x.shape}")
    return _emit(
        np.ascontiguousarray(np.moveaxis(x.data, -1, 0)),
        (x,),
        (lambda g: np.ascontiguousarray(np.moveaxis(g, 0, -1)),),
    )


def chw_to_hwc(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ValueError(f"chw_to_hwc: need rank 3, got {x.shape}")
    return _emit(
        np.ascontiguousarray(np.moveaxis(x.data, 0, -1)),
        (x,),
        (lambda g: np.ascontiguousarray(np.moveaxis(g, -1, 0)),),
    )


def broadcast_leading(x: Tensor, n: int) -> Tensor:
    """Tile x along a new leading axis of extent n; backward sums it away."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _emit(out, (x,), (lambda g: g.sum(axis=0),))


def sum_leading(x: Tensor) -> Tensor:
    """Sum over the leading axis; backward tiles the gradient."""
    if x.data.ndim < 1:
        raise ValueError("sum_leading: need at least rank 1")
    n = x.shape[0]
    rest = x.shape[1:]
    return _emit(
        x.data.sum(axis=0),
        (x,),
        (lambda g: np.broadcast_to(g, (n,) + rest).copy(),),
    )
