"""Gradient saliency maps.

Per-sample maps are the elementwise magnitude of the gradient of the
pre-softmax target-class score with respect to the input volume. Maps can
be aggregated over a sample set (voxelwise mean after max-normalizing each
map to [0, 1]), smoothed with a Gaussian kernel, and exported as 8-bit
grayscale slices plus the full 3D map in the native volume format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as network
from .data import gaussian_blur, write_native
from .tensor import ShapeError, Tensor

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}
DEFAULT_VIEWS = (("axial", 50), ("axial", 26), ("coronal", 56),
                 ("sagittal", 26))
SMOOTH_SIGMA = 0.8


@dataclass(frozen=True)
class SaliencyMap:
    values: Tensor        # input spatial extents, all values >= 0
    target: int | None    # None for aggregated maps
    sigma: float = 0.0    # smoothing applied to produce this map


def saliency(net, volume, target: int, age=None) -> SaliencyMap:
    """|d logit[target] / d input| for one volume.

    The score is the pre-softmax logit: the post-softmax gradient carries a
    probability factor that vanishes at saturation and would flatten the
    map exactly where the model is most confident.
    """
    c = net.config.num_classes
    if not 0 <= int(target) < c:
        raise ValueError(f"target class {target} outside [0, {c})")
    vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    e = net.config.crop_extent
    if vol.shape != (e, e, e):
        raise ShapeError(f"volume shape {vol.shape}, expected ({e}, {e}, {e})")
    x = Tensor(vol[None, None].astype(net.dtype))
    ages = None if age is None else [float(age)]
    logits, tape = network.forward(net, x, ages=ages, mode="eval")
    grad = np.zeros(logits.shape, dtype=net.dtype)
    grad[0, int(target)] = 1.0
    _, gx = network.backward(net, tape, Tensor(grad))
    values = np.abs(gx.data[0, 0]).astype(np.float32)
    return SaliencyMap(Tensor(values), int(target), 0.0)


def aggregate(maps) -> SaliencyMap:
    """Voxelwise mean of the maps, each max-normalized to [0, 1] first.
    An all-zero map contributes zeros (nothing to normalize)."""
    maps = list(maps)
    if not maps:
        raise ValueError("no maps to aggregate")
    shape = maps[0].values.shape
    acc = np.zeros(shape, dtype=np.float64)
    for m in maps:
        if m.values.shape != shape:
            raise ShapeError(
                f"map extents {m.values.shape} do not match {shape}")
        v = m.values.data.astype(np.float64)
        peak = v.max()
        if peak > 0.0:
            v = v / peak
        acc += v
    out = (acc / len(maps)).astype(np.float32)
    return SaliencyMap(Tensor(out), None, 0.0)


def smooth(smap: SaliencyMap, sigma: float = SMOOTH_SIGMA) -> SaliencyMap:
    """Gaussian smoothing; the kernel is non-negative so the map stays
    non-negative."""
    out = gaussian_blur(smap.values.data, sigma)
    return SaliencyMap(Tensor(np.ascontiguousarray(out, dtype=np.float32)),
                       smap.target, float(sigma))


def slice_to_pgm(sl: np.ndarray) -> bytes:
    """Binary PGM (P5), min-max scaled per slice. A constant slice scales
    to 0 (black) rather than dividing by zero."""
    lo = float(sl.min())
    hi = float(sl.max())
    if hi > lo:
        scaled = (sl.astype(np.float64) - lo) / (hi - lo)
    else:
        scaled = np.zeros(sl.shape, dtype=np.float64)
    pix = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
    h, w = pix.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes()


def export_slices(smap: SaliencyMap, views, prefix,
                  with_volume: bool = True) -> list[Path]:
    """Write one `{prefix}_{axis}{index}.pgm` per view and, unless
    disabled, the full map as `{prefix}_map.vol`. Returns the paths."""
    vol = smap.values.data
    first = Path(f"{prefix}_map.vol")
    if first.parent != Path(""):
        first.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for axis, index in views:
        if axis not in AXES:
            raise ValueError(
                f"unknown axis {axis!r}; expected one of {sorted(AXES)}")
        dim = AXES[axis]
        index = int(index)
        if not 0 <= index < vol.shape[dim]:
            raise ValueError(
                f"{axis} index {index} out of range [0, {vol.shape[dim]})")
        path = Path(f"{prefix}_{axis}{index}.pgm")
        path.write_bytes(slice_to_pgm(np.take(vol, index, axis=dim)))
        paths.append(path)
    if with_volume:
        write_native(first, vol)
        paths.append(first)
    return paths
