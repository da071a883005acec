"""Dense float tensors and the deterministic PRNG everything else builds on.

Tensors are thin, immutable-by-convention wrappers around contiguous
row-major numpy arrays. Only float32 and float64 are supported: float32 is
the training dtype, float64 exists for finite-difference gradient checks.
Volumes follow the channel-first convention [N, C, D, H, W].
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
_SUPPORTED = (F32, F64)

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer (pure Python ints)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _hash_token(token: int | str) -> int:
    if isinstance(token, str):
        # FNV-1a over UTF-8, then finalized.
        h = 0xCBF29CE484222325
        for b in token.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        return _mix64(h)
    return _mix64(int(token) & _MASK64)


class Rng:
    """Counter-based SplitMix64 generator with named substreams.

    The raw 64-bit stream is a pure function of (seed, stream path, draw
    index) computed with integer arithmetic only, so identical seeds give
    identical sequences on every platform and across runs. Substreams
    created with :meth:`stream` are independent of each other and of the
    parent; drawing from one never perturbs another. Derived floating-point
    draws (uniform, normal) depend additionally on IEEE-754 arithmetic.
    """

    __slots__ = ("_key", "_counter")

    def __init__(self, seed: int):
        self._key = _mix64(int(seed) & _MASK64)
        self._counter = 0

    def stream(self, *tokens: int | str) -> "Rng":
        """Derive an independent child generator keyed by the token path."""
        key = self._key
        for t in tokens:
            key = _mix64((key ^ _hash_token(t)) + _GOLDEN)
        child = Rng.__new__(Rng)
        child._key = key
        child._counter = 0
        return child

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words as a uint64 array."""
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        z = np.uint64(self._key) + (idx + np.uint64(1)) * np.uint64(_GOLDEN)
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
        return z

    def uniform(self, shape: Sequence[int] = (), lo: float = 0.0,
                hi: float = 1.0) -> np.ndarray:
        """Uniform float64 draws in [lo, hi)."""
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = lo + (hi - lo) * u
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape: Sequence[int] = ()) -> np.ndarray:
        """Standard normal float64 draws (Box-Muller)."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        w = self.raw(2 * m)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((w[:m] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
        u2 = (w[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out.reshape(shape) if shape else out[0]

    def integers(self, bound: int, shape: Sequence[int] = ()) -> np.ndarray | int:
        """Uniform integers in [0, bound). Modulo bias is < bound / 2**64."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        n = int(np.prod(shape)) if shape else 1
        v = (self.raw(n) % np.uint64(bound)).astype(np.int64)
        return v.reshape(shape) if shape else int(v[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n)."""
        return np.argsort(self.raw(n), kind="stable")


class Tensor:
    """Contiguous row-major float array with shape metadata.

    Treat instances as immutable: operations return fresh tensors and never
    modify their inputs. The raw numpy array is exposed as ``.data`` for the
    numeric kernels in :mod:`volcnn.ops`; code that mutates it in place owns
    the tensor exclusively (parameter updates in the training loop).
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype: np.dtype | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED:
            if dtype is None and np.issubdtype(arr.dtype, np.number):
                arr = arr.astype(F32)
            else:
                raise TypeError(f"unsupported dtype {arr.dtype}; use f32 or f64")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.shape else float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self.data.reshape(shape).copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def _as_array(x, like: Tensor) -> np.ndarray:
    """Coerce a Tensor or scalar operand to an array matching ``like``."""
    if isinstance(x, Tensor):
        if x.shape != like.shape:
            raise ShapeError(f"shape mismatch: {like.shape} vs {x.shape}")
        if x.dtype != like.dtype:
            raise TypeError(f"dtype mismatch: {like.dtype} vs {x.dtype}")
        return x.data
    return np.asarray(x, dtype=like.dtype)


def add(a: Tensor, b) -> Tensor:
    return Tensor(a.data + _as_array(b, a))


def sub(a: Tensor, b) -> Tensor:
    return Tensor(a.data - _as_array(b, a))


def mul(a: Tensor, b) -> Tensor:
    return Tensor(a.data * _as_array(b, a))


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor(a.data * a.dtype.type(s))


def max_with_scalar(a: Tensor, s: float) -> Tensor:
    return Tensor(np.maximum(a.data, a.dtype.type(s)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return Tensor(a.data @ b.data)


def _check_axes(x: Tensor, axes: Iterable[int]) -> tuple[int, ...]:
    axes = tuple(axes)
    for ax in axes:
        if not 0 <= ax < x.data.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axes}")
    return axes


def reduce_sum(x: Tensor, axes: Iterable[int], keepdims: bool = False) -> Tensor:
    axes = _check_axes(x, axes)
    if not axes:
        return x.copy()
    return Tensor(x.data.sum(axis=axes, keepdims=keepdims, dtype=x.dtype))


def reduce_mean(x: Tensor, axes: Iterable[int], keepdims: bool = False) -> Tensor:
    axes = _check_axes(x, axes)
    if not axes:
        return x.copy()
    return Tensor(x.data.mean(axis=axes, keepdims=keepdims, dtype=x.dtype))


def reduce_max(x: Tensor, axes: Iterable[int], keepdims: bool = False,
               return_argmax: bool = False):
    """Max over ``axes``; optionally the argmax as a row-major flat index
    into the reduced subspace (first occurrence wins on ties)."""
    axes = _check_axes(x, axes)
    if not axes:
        out = x.copy()
        return (out, np.zeros(x.shape, dtype=np.int64)) if return_argmax else out
    kept = tuple(i for i in range(x.data.ndim) if i not in axes)
    moved = np.transpose(x.data, kept + axes)
    flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
    values = flat.max(axis=-1)
    if keepdims:
        shape = tuple(1 if i in axes else e for i, e in enumerate(x.shape))
        values = values.reshape(shape)
    out = Tensor(values)
    if return_argmax:
        idx = flat.argmax(axis=-1)
        if keepdims:
            idx = idx.reshape(values.shape)
        return out, idx
    return out


def zeros(shape: Sequence[int], dtype=F32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape: Sequence[int], dtype=F32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def uniform(shape: Sequence[int], lo: float, hi: float, rng: Rng, dtype=F32) -> Tensor:
    return Tensor(rng.uniform(shape, lo, hi).astype(dtype))


def kaiming_uniform(shape: Sequence[int], rng: Rng, dtype=F32,
                    fan_in: int | None = None) -> Tensor:
    """Uniform init with bound sqrt(6 / fan_in).

    For weight layouts [out, in, ...] the default fan_in is the product of
    all trailing extents (input channels times kernel volume).
    """
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    bound = float(np.sqrt(6.0 / fan_in))
    return uniform(shape, -bound, bound, rng, dtype)
