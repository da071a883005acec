"""Differentiable layer kernels: each forward has an exact backward.

All kernels are pure functions from Tensors to Tensors. Convolution uses
cross-correlation semantics (no kernel flip). The 3D convolution and pooling
loops run over kernel taps, turning each tap into one BLAS contraction over
channels; a naive direct-loop oracle lives in the test suite.

Output extent per spatial axis:
    conv: floor((in + 2p - d*(k-1) - 1) / s) + 1
    pool: floor((in - k) / s) + 1            (no padding)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError


def conv_out_extent(extent: int, k: int, p: int, s: int, d: int) -> int:
    return (extent + 2 * p - d * (k - 1) - 1) // s + 1


def pool_out_extent(extent: int, k: int, s: int) -> int:
    return (extent - k) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    """Cubic 3D convolution hyperparameters: kernel, channels, padding,
    stride, dilation."""

    k: int
    c_out: int
    p: int = 0
    s: int = 1
    d: int = 1

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.d < 1 or self.p < 0 or self.c_out < 1:
            raise ValueError(f"invalid conv spec {self}")

    @property
    def effective_k(self) -> int:
        return self.d * (self.k - 1) + 1


@dataclass(frozen=True)
class NormKind:
    variant: str  # instance | batch | layer
    eps: float = 1e-5
    affine: bool = True

    def __post_init__(self):
        if self.variant not in ("instance", "batch", "layer"):
            raise ValueError(f"unknown normalization variant {self.variant!r}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def _tap_slices(k: int, s: int, d: int, out_extents: tuple[int, ...], tap):
    """Slices selecting the input positions a kernel tap touches, one per
    spatial axis."""
    return tuple(
        slice(t * d, t * d + s * (o - 1) + 1, s) for t, o in zip(tap, out_extents)
    )


def conv3d_forward(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """3D cross-correlation with bias. x: [N,C,D,H,W], w: [O,C,k,k,k], b: [O]."""
    n, c, *spatial = x.shape
    if w.shape != (spec.c_out, c, spec.k, spec.k, spec.k):
        raise ShapeError(
            f"weight shape {w.shape} does not match spec {spec} with {c} input channels"
        )
    if b.shape != (spec.c_out,):
        raise ShapeError(f"bias shape {b.shape}, expected ({spec.c_out},)")
    outs = tuple(conv_out_extent(e, spec.k, spec.p, spec.s, spec.d) for e in spatial)
    if any(o < 1 for o in outs):
        raise ShapeError(
            f"effective kernel {spec.effective_k} exceeds padded input "
            f"{tuple(e + 2 * spec.p for e in spatial)}"
        )
    xp = x.data
    if spec.p:
        pad = ((0, 0), (0, 0)) + ((spec.p, spec.p),) * 3
        xp = np.pad(xp, pad)
    # Accumulate in [O, N, ...] layout so each tap is one channel contraction.
    acc = np.zeros((spec.c_out, n) + outs, dtype=x.dtype)
    for i in range(spec.k):
        for j in range(spec.k):
            for l in range(spec.k):
                sl = _tap_slices(spec.k, spec.s, spec.d, outs, (i, j, l))
                xs = xp[:, :, sl[0], sl[1], sl[2]]
                acc += np.tensordot(w.data[:, :, i, j, l], xs, axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))
    out += b.data[None, :, None, None, None]
    return Tensor(out)


def conv3d_backward(grad_out: Tensor, x: Tensor, w: Tensor,
                    spec: ConvSpec) -> tuple[Tensor, Tensor, Tensor]:
    """Exact gradients of conv3d_forward w.r.t. input, weight, and bias."""
    n, c, *spatial = x.shape
    outs = tuple(conv_out_extent(e, spec.k, spec.p, spec.s, spec.d) for e in spatial)
    if grad_out.shape != (n, spec.c_out) + outs:
        raise ShapeError(
            f"grad_out shape {grad_out.shape}, expected {(n, spec.c_out) + outs}"
        )
    xp = x.data
    if spec.p:
        pad = ((0, 0), (0, 0)) + ((spec.p, spec.p),) * 3
        xp = np.pad(xp, pad)
    g = grad_out.data
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w.data)
    gb = g.sum(axis=(0, 2, 3, 4))
    for i in range(spec.k):
        for j in range(spec.k):
            for l in range(spec.k):
                sl = _tap_slices(spec.k, spec.s, spec.d, outs, (i, j, l))
                xs = xp[:, :, sl[0], sl[1], sl[2]]
                gw[:, :, i, j, l] = np.tensordot(
                    g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                gx_tap = np.tensordot(w.data[:, :, i, j, l], g, axes=([0], [1]))
                gxp[:, :, sl[0], sl[1], sl[2]] += gx_tap.transpose(1, 0, 2, 3, 4)
    if spec.p:
        p = spec.p
        gx = gxp[:, :, p:p + spatial[0], p:p + spatial[1], p:p + spatial[2]]
    else:
        gx = gxp
    return Tensor(np.ascontiguousarray(gx)), Tensor(gw), Tensor(gb)


def maxpool3d_forward(x: Tensor, k: int, s: int) -> tuple[Tensor, np.ndarray]:
    """Max pooling without padding. Returns pooled values and, per output
    position, the row-major flat index of the chosen input voxel within its
    (sample, channel) volume. Ties go to the first element in row-major
    window order."""
    n, c, dd, hh, ww = x.shape
    if k > min(dd, hh, ww):
        raise ShapeError(f"pool window {k} larger than input extents {(dd, hh, ww)}")
    outs = (pool_out_extent(dd, k, s), pool_out_extent(hh, k, s),
            pool_out_extent(ww, k, s))
    base = (
        (np.arange(outs[0], dtype=np.int64) * s)[:, None, None] * (hh * ww)
        + (np.arange(outs[1], dtype=np.int64) * s)[None, :, None] * ww
        + (np.arange(outs[2], dtype=np.int64) * s)[None, None, :]
    )
    cur = None
    idx = None
    for i in range(k):
        for j in range(k):
            for l in range(k):
                sl = _tap_slices(k, s, 1, outs, (i, j, l))
                cand = x.data[:, :, sl[0], sl[1], sl[2]]
                off = (i * hh + j) * ww + l
                if cur is None:
                    cur = cand.copy()
                    idx = np.broadcast_to(base + off, cand.shape).copy()
                else:
                    mask = cand > cur  # strict: first maximal tap wins
                    cur = np.where(mask, cand, cur)
                    idx = np.where(mask, base + off, idx)
    return Tensor(cur), idx


def maxpool3d_backward(grad_out: Tensor, idx: np.ndarray,
                       input_shape: tuple[int, ...]) -> Tensor:
    """Route each output gradient to its argmax voxel, accumulating where
    pooling windows overlap."""
    n, c, dd, hh, ww = input_shape
    if grad_out.shape != idx.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} vs indices {idx.shape}")
    vol = dd * hh * ww
    if idx.min() < 0 or idx.max() >= vol:
        raise ShapeError(f"argmax index out of range for volume of {vol} voxels")
    g = np.zeros((n * c, vol), dtype=grad_out.dtype)
    rows = np.arange(n * c)[:, None]
    np.add.at(g, (rows, idx.reshape(n * c, -1)), grad_out.data.reshape(n * c, -1))
    return Tensor(g.reshape(input_shape))


@dataclass
class NormCache:
    """Saved forward state for norm_backward."""

    variant: str
    x_shape: tuple[int, ...]
    axes: tuple[int, ...]       # reduction axes of the normalization
    param_axes: tuple[int, ...]  # axes summed over for gamma/beta grads
    xhat: np.ndarray
    invstd: np.ndarray
    gamma_b: np.ndarray          # gamma broadcast to x's rank


def _norm_core(x: np.ndarray, gamma_b: np.ndarray, beta_b: np.ndarray,
               axes: tuple[int, ...], eps: float):
    mean = x.mean(axis=axes, keepdims=True, dtype=x.dtype)
    var = x.var(axis=axes, keepdims=True, dtype=x.dtype)  # biased
    invstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mean) * invstd
    return gamma_b * xhat + beta_b, xhat, invstd


def instance_norm_forward(x: Tensor, gamma: Tensor, beta: Tensor,
                          eps: float = 1e-5) -> tuple[Tensor, NormCache]:
    """Normalize each (sample, channel) over its spatial positions. No batch
    statistics are involved, so train and eval behave identically."""
    n, c = x.shape[0], x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params {gamma.shape}/{beta.shape}, expected ({c},)")
    gb = gamma.data.reshape(1, c, 1, 1, 1)
    bb = beta.data.reshape(1, c, 1, 1, 1)
    y, xhat, invstd = _norm_core(x.data, gb, bb, (2, 3, 4), eps)
    cache = NormCache("instance", x.shape, (2, 3, 4), (0, 2, 3, 4), xhat, invstd, gb)
    return Tensor(y), cache


def batch_norm_forward(x: Tensor, gamma: Tensor, beta: Tensor,
                       running_mean: Tensor, running_var: Tensor, mode: str,
                       momentum: float = 0.1, eps: float = 1e-5
                       ) -> tuple[Tensor, NormCache, Tensor, Tensor]:
    """Per-channel normalization over batch and spatial positions.

    Train mode normalizes with batch statistics (biased variance) and blends
    them into the returned running stats: running <- (1-m)*running + m*batch,
    with the unbiased variance entering the running estimate. Eval mode
    normalizes with the running stats unchanged. Returns
    (y, cache, new_running_mean, new_running_var).
    """
    n, c = x.shape[0], x.shape[1]
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    gb = gamma.data.reshape(1, c, 1, 1, 1)
    bb = beta.data.reshape(1, c, 1, 1, 1)
    if mode == "train":
        if n < 2:
            raise ValueError("batch norm in train mode needs a batch of >= 2")
        mean = x.data.mean(axis=(0, 2, 3, 4))
        var = x.data.var(axis=(0, 2, 3, 4))  # biased, used for normalization
        invstd = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1, 1).astype(x.dtype)
        xhat = (x.data - mean.reshape(1, c, 1, 1, 1)) * invstd
        y = gb * xhat + bb
        m = x.data.size // c
        new_mean = (1 - momentum) * running_mean.data + momentum * mean
        new_var = (1 - momentum) * running_var.data + momentum * var * m / (m - 1)
        cache = NormCache("batch", x.shape, (0, 2, 3, 4), (0, 2, 3, 4),
                          xhat, invstd, gb)
        return (Tensor(y), cache, Tensor(new_mean.astype(x.dtype)),
                Tensor(new_var.astype(x.dtype)))
    invstd = (1.0 / np.sqrt(running_var.data + eps)).reshape(1, c, 1, 1, 1)
    xhat = (x.data - running_mean.data.reshape(1, c, 1, 1, 1)) * invstd
    y = gb * xhat + bb
    cache = NormCache("batch_eval", x.shape, (0, 2, 3, 4), (0, 2, 3, 4),
                      xhat.astype(x.dtype), invstd.astype(x.dtype), gb)
    return Tensor(y.astype(x.dtype)), cache, running_mean, running_var


def layer_norm_forward(x: Tensor, gamma: Tensor, beta: Tensor,
                       eps: float = 1e-5) -> tuple[Tensor, NormCache]:
    """Normalize over the trailing feature axis of each row."""
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"affine params {gamma.shape}/{beta.shape}, expected ({f},)")
    axes = (x.data.ndim - 1,)
    gb = gamma.data.reshape((1,) * (x.data.ndim - 1) + (f,))
    bb = beta.data.reshape(gb.shape)
    y, xhat, invstd = _norm_core(x.data, gb, bb, axes, eps)
    param_axes = tuple(range(x.data.ndim - 1))
    cache = NormCache("layer", x.shape, axes, param_axes, xhat, invstd, gb)
    return Tensor(y), cache


def norm_backward(grad_out: Tensor,
                  cache: NormCache) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients through any normalization forward, including the dependence
    of mean and variance on the input (except eval-mode batch norm, whose
    statistics are constants)."""
    if grad_out.shape != cache.x_shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match saved forward "
            f"state for input {cache.x_shape}"
        )
    g = grad_out.data
    dgamma = (g * cache.xhat).sum(axis=cache.param_axes)
    dbeta = g.sum(axis=cache.param_axes)
    dxhat = g * cache.gamma_b
    if cache.variant == "batch_eval":
        dx = dxhat * cache.invstd
    else:
        m1 = dxhat.mean(axis=cache.axes, keepdims=True, dtype=g.dtype)
        m2 = (dxhat * cache.xhat).mean(axis=cache.axes, keepdims=True, dtype=g.dtype)
        dx = cache.invstd * (dxhat - m1 - cache.xhat * m2)
    return Tensor(dx), Tensor(dgamma), Tensor(dbeta)


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, x.dtype.type(0)))


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    """Subgradient 0 at x == 0."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} vs input {x.shape}")
    return Tensor(grad_out.data * (x.data > 0))


def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b with x: [N,F_in], w: [F_out,F_in], b: [F_out]."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"feature extents disagree: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape}, expected ({w.shape[0]},)")
    return Tensor(x.data @ w.data.T + b.data)


def linear_backward(grad_out: Tensor, x: Tensor,
                    w: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(
            f"grad_out shape {grad_out.shape}, expected {(x.shape[0], w.shape[0])}"
        )
    gx = grad_out.data @ w.data
    gw = grad_out.data.T @ x.data
    gb = grad_out.data.sum(axis=0)
    return Tensor(gx), Tensor(gw), Tensor(gb)


def softmax_xent(scores: Tensor, labels,
                 sample_weights=None) -> tuple[float, Tensor, Tensor]:
    """Numerically stabilized softmax + mean cross-entropy.

    Returns (loss, grad wrt scores, probabilities). With per-sample weights
    the loss is the weighted mean and the gradient scales accordingly.
    """
    y = np.asarray(labels, dtype=np.int64)
    n, c = scores.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape}, expected ({n},)")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {y[(y < 0) | (y >= c)]}")
    z = scores.data - scores.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    probs = ez / sez
    # log-sum-exp keeps the loss finite even when the true-class probability
    # underflows to zero
    nll = np.log(sez[:, 0]) - z[np.arange(n), y]
    if sample_weights is None:
        wts = np.ones(n, dtype=scores.dtype)
    else:
        wts = np.asarray(sample_weights, dtype=scores.dtype)
    wsum = wts.sum()
    loss = float((wts * nll).sum() / wsum)
    grad = probs.copy()
    grad[np.arange(n), y] -= 1.0
    grad *= (wts / wsum)[:, None]
    return loss, Tensor(grad.astype(scores.dtype)), Tensor(probs.astype(scores.dtype))


def round_age(age: float) -> float:
    """Round to the nearest 0.5 years, halves rounding up."""
    return float(np.floor(age * 2.0 + 0.5) / 2.0)


def age_encode(age: float, d_model: int = 128, dtype=np.float32) -> Tensor:
    """Fixed sinusoidal embedding of age in years.

    The age is first rounded to 0.5-year resolution, then for each frequency
    index i the pair (sin, cos) of age / 10000^(2i/d_model) fills components
    2i and 2i+1.
    """
    if not 0.0 <= age <= 120.0:
        raise ValueError(f"age {age} outside [0, 120]")
    if d_model < 2 or d_model % 2:
        raise ValueError(f"d_model must be even and positive, got {d_model}")
    a = round_age(age)
    i = np.arange(d_model // 2, dtype=np.float64)
    angles = a / np.power(10000.0, 2.0 * i / d_model)
    out = np.empty(d_model, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return Tensor(out.astype(dtype))
