"""Volume ingestion, manifests, augmentation, and synthetic data.

Volumes travel as rank-3 float32 numpy arrays in file voxel order
(sagittal, coronal, axial for registered scans). Batching into network
tensors happens in the training loop.
"""

from __future__ import annotations

import csv
import math
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, Tensor

LABEL_NAMES = ("CN", "MCI", "AD")
LABELS = {name: i for i, name in enumerate(LABEL_NAMES)}
SPLITS = ("train", "val", "test")

MANIFEST_HEADER = ["subject_id", "path", "label", "age", "split"]


class VolumeFormatError(ValueError):
    """A volume file violates its format contract."""


class BadMagic(VolumeFormatError):
    pass


class UnsupportedVoxelType(VolumeFormatError):
    pass


class BadRank(VolumeFormatError):
    pass


class TruncatedVolume(VolumeFormatError):
    pass


class ManifestError(ValueError):
    pass


class LeakageError(ManifestError):
    def __init__(self, subjects):
        self.subjects = list(subjects)
        super().__init__(
            f"subjects appear in more than one split: {self.subjects}")


# single-file (.nii) or header+image (.hdr/.img) NIfTI-1, uncompressed,
# rank 3, int16 or float32 voxels; orientation fields ignored (inputs are
# assumed pre-registered)
_NIFTI_DTYPES = {4: ("i2", 2), 16: ("f4", 4)}


def read_nifti1(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 348:
        raise TruncatedVolume(f"{path}: header shorter than 348 bytes")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"{path}: magic {magic!r}")
    # byte order: dim[0] is the rank and must land in [1, 7]
    (rank_le,) = struct.unpack_from("<h", raw, 40)
    if 1 <= rank_le <= 7:
        endian = "<"
        rank = rank_le
    else:
        (rank_be,) = struct.unpack_from(">h", raw, 40)
        if not 1 <= rank_be <= 7:
            raise VolumeFormatError(
                f"{path}: cannot determine byte order, dim[0] = {rank_le}")
        endian = ">"
        rank = rank_be
    if rank != 3:
        raise BadRank(f"{path}: rank {rank}, only rank-3 volumes supported")
    d1, d2, d3 = struct.unpack_from(f"{endian}3h", raw, 42)
    (datatype,) = struct.unpack_from(f"{endian}h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedVoxelType(f"{path}: datatype code {datatype}")
    code, itemsize = _NIFTI_DTYPES[datatype]
    (vox_offset,) = struct.unpack_from(f"{endian}f", raw, 108)
    slope, inter = struct.unpack_from(f"{endian}2f", raw, 112)

    if magic == b"n+1\x00":
        payload = raw
        offset = int(vox_offset)
    else:
        img = path.with_suffix(".img")
        if not img.exists():
            raise TruncatedVolume(f"{path}: image sibling {img} missing")
        payload = img.read_bytes()
        offset = 0
    count = d1 * d2 * d3
    need = offset + count * itemsize
    if len(payload) < need:
        raise TruncatedVolume(
            f"{path}: payload holds {len(payload) - offset} bytes, "
            f"needs {count * itemsize}")
    vox = np.frombuffer(payload, dtype=endian + code, count=count,
                        offset=offset)
    vol = vox.reshape((d3, d2, d1)).transpose(2, 1, 0)  # file voxel order
    vol = np.ascontiguousarray(vol, dtype=np.float32)
    if slope != 0.0:
        vol = vol * np.float32(slope) + np.float32(inter)
    return vol


NATIVE_MAGIC = b"VCNNVOL\x00"
NATIVE_VERSION = 1


def write_native(path, volume: np.ndarray) -> None:
    vol = np.ascontiguousarray(volume, dtype="<f4")
    if vol.ndim != 3:
        raise BadRank(f"native volumes are rank 3, got rank {vol.ndim}")
    with open(path, "wb") as fh:
        fh.write(NATIVE_MAGIC)
        fh.write(struct.pack("<I", NATIVE_VERSION))
        fh.write(struct.pack("<3Q", *vol.shape))
        fh.write(vol.tobytes())


def read_native(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 36:
        raise TruncatedVolume(f"{path}: shorter than the fixed header")
    if raw[:8] != NATIVE_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:8]!r}")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != NATIVE_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from("<3Q", raw, 12)
    count = int(np.prod(shape))
    if len(raw) != 36 + 4 * count:
        raise TruncatedVolume(
            f"{path}: payload is {len(raw) - 36} bytes, extents "
            f"{tuple(shape)} require {4 * count}")
    return np.frombuffer(raw, dtype="<f4", count=count,
                         offset=36).reshape(shape).copy()


def load_volume(path) -> np.ndarray:
    """Dispatch on extension: .nii/.hdr are NIfTI-1, anything else native."""
    suffix = Path(path).suffix.lower()
    if suffix in (".nii", ".hdr"):
        return read_nifti1(path)
    return read_native(path)


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    path: str
    label: int
    age: float
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    base_dir: Path

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.base_dir / p

    def subjects(self, split: str | None = None):
        seen = {}
        for r in self.rows:
            if split is None or r.split == split:
                seen.setdefault(r.subject_id, r.label)
        return seen

    def class_counts(self) -> dict[str, dict[str, tuple[int, int]]]:
        """Per split and class: (subject count, scan count)."""
        out = {s: {n: (0, 0) for n in LABEL_NAMES} for s in SPLITS}
        seen = set()
        for r in self.rows:
            name = LABEL_NAMES[r.label]
            subj, scans = out[r.split][name]
            fresh = (r.split, r.subject_id) not in seen
            seen.add((r.split, r.subject_id))
            out[r.split][name] = (subj + (1 if fresh else 0), scans + 1)
        return out


def check_leakage(manifest: Manifest) -> list[str]:
    """Subjects that appear in more than one split, sorted."""
    splits_of: dict[str, set] = {}
    for r in manifest.rows:
        splits_of.setdefault(r.subject_id, set()).add(r.split)
    return sorted(s for s, sp in splits_of.items() if len(sp) > 1)


def load_manifest(path, allow_leakage: bool = False) -> Manifest:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: header {header}, expected {MANIFEST_HEADER}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 fields")
            subject, vol_path, label_text, age_text, split = rec
            if not subject or not vol_path:
                raise ManifestError(f"{path}:{lineno}: empty subject or path")
            if label_text not in LABELS:
                raise ManifestError(
                    f"{path}:{lineno}: label {label_text!r} not in "
                    f"{LABEL_NAMES}")
            try:
                age = float(age_text)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: age {age_text!r} is not a number")
            if not 0.0 <= age <= 120.0:
                raise ManifestError(f"{path}:{lineno}: age {age} outside [0, 120]")
            if split not in SPLITS:
                raise ManifestError(
                    f"{path}:{lineno}: split {split!r} not in {SPLITS}")
            rows.append(ManifestRow(subject, vol_path, LABELS[label_text],
                                    age, split))
    manifest = Manifest(rows, path.parent)
    leaks = check_leakage(manifest)
    if leaks:
        for s in leaks:
            print(f"leakage: subject {s} appears in multiple splits",
                  file=sys.stderr)
        if not allow_leakage:
            raise LeakageError(leaks)
    return manifest


def gaussian_blur(volume: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3D Gaussian. Kernel truncated at radius ceil(3*sigma) and
    renormalized to sum 1; edges mirror the volume so constants stay
    constant. sigma = 0 returns a bit-identical copy."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    radius = math.ceil(3 * sigma)
    two_var = 2.0 * sigma * sigma
    if radius == 0 or two_var == 0.0:  # kernel is numerically a delta
        return volume.copy()
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(t * t) / two_var)
    kernel /= kernel.sum()
    out = volume.astype(np.float64)
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for i, w in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + volume.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out.astype(volume.dtype)


def _check_crop(shape, extent: int):
    if any(extent > e for e in shape):
        raise ValueError(f"crop extent {extent} exceeds volume extents {shape}")


def random_crop(volume: np.ndarray, extent: int, rng: Rng) -> np.ndarray:
    """Uniform corner over valid positions, one draw per axis in order."""
    _check_crop(volume.shape, extent)
    offs = [rng.integers(e - extent + 1) for e in volume.shape]
    d, h, w = offs
    return np.ascontiguousarray(
        volume[d:d + extent, h:h + extent, w:w + extent])


def center_crop(volume: np.ndarray, extent: int) -> np.ndarray:
    _check_crop(volume.shape, extent)
    offs = [(e - extent) // 2 for e in volume.shape]
    d, h, w = offs
    return np.ascontiguousarray(
        volume[d:d + extent, h:h + extent, w:w + extent])


def intensity_normalize(volume: np.ndarray) -> np.ndarray:
    """Per-volume z-score."""
    std = volume.std(dtype=np.float64)
    if std == 0.0:
        raise ValueError("constant volume cannot be normalized")
    mean = volume.mean(dtype=np.float64)
    return ((volume - mean) / std).astype(volume.dtype)


def _subject_classes(manifest: Manifest, split: str) -> dict[str, int]:
    """Subject -> class, from each subject's first row in the split."""
    return manifest.subjects(split)


def subsample(manifest: Manifest, rate: float, rng: Rng) -> Manifest:
    """Keep a stratified fraction of TRAIN subjects; scans follow their
    subject, val/test stay untouched. Counts round half up per class."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    if rate == 1.0:
        return Manifest(list(manifest.rows), manifest.base_dir)
    by_class: dict[int, list[str]] = {}
    for subject, label in sorted(_subject_classes(manifest, "train").items()):
        by_class.setdefault(label, []).append(subject)
    kept: set[str] = set()
    for label, subjects in sorted(by_class.items()):
        k = int(math.floor(rate * len(subjects) + 0.5))
        if k == 0:
            raise ValueError(
                f"rate {rate} keeps no {LABEL_NAMES[label]} train subjects")
        order = rng.stream("subsample", label).permutation(len(subjects))
        kept.update(subjects[i] for i in order[:k])
    rows = [r for r in manifest.rows
            if r.split != "train" or r.subject_id in kept]
    return Manifest(rows, manifest.base_dir)


@dataclass
class VolumeSample:
    volume: Tensor          # [1, D, H, W]
    label: int
    age: float
    subject_id: str
    split: str


def load_sample(manifest: Manifest, row: ManifestRow) -> VolumeSample:
    vol = load_volume(manifest.resolve(row))
    if not np.isfinite(vol).all():
        raise VolumeFormatError(f"{row.path}: non-finite voxels")
    return VolumeSample(Tensor(vol[None]), row.label, row.age,
                        row.subject_id, row.split)


@dataclass
class SyntheticSample:
    volume: np.ndarray
    subject_id: str
    label: int
    age: float
    split: str


# per-class age statistics (mean, standard deviation) for synthesis
_AGE_STATS = {0: (77.0, 5.4), 1: (75.9, 7.3), 2: (76.7, 7.4)}


def generate_synthetic(n_per_class: int, extent: int, rng: Rng,
                       noise: float = 0.1) -> list[SyntheticSample]:
    """Structured class-conditional volumes: a tissue ball with a centered
    ellipsoidal cavity whose radius grows with disease stage, plus optional
    Gaussian noise. Cavity volume alone separates the classes, so a simple
    thresholding oracle can verify learnability. Splits are assigned
    per class: 70% train, 15% val, 15% test (half-up rounding)."""
    if extent < 16:
        raise ValueError(f"extent must be >= 16, got {extent}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    coords = np.arange(extent, dtype=np.float64) - (extent - 1) / 2.0
    zz, yy, xx = np.meshgrid(coords, coords, coords, indexing="ij")
    tissue = (zz * zz + yy * yy + xx * xx) <= (0.42 * extent) ** 2

    n_train = int(math.floor(0.7 * n_per_class + 0.5))
    n_val = int(math.floor(0.15 * n_per_class + 0.5))
    samples = []
    for label in sorted(_AGE_STATS):
        for i in range(n_per_class):
            s = rng.stream("synth", label, i)
            r = (0.10 + 0.05 * label) * extent \
                + float(s.stream("radius").uniform((), -0.01, 0.01)) * extent
            cj = s.stream("center").uniform((3,), -0.02, 0.02) * extent
            # mild fixed anisotropy makes the cavity ellipsoidal
            cav = (((zz - cj[0]) / 1.0) ** 2 + ((yy - cj[1]) / 0.9) ** 2
                   + ((xx - cj[2]) / 1.1) ** 2) <= r * r
            vol = tissue.astype(np.float32)
            vol[cav] = 0.0
            if noise > 0:
                vol = vol + noise * s.stream("noise").normal(
                    (extent,) * 3).astype(np.float32)
            mean, std = _AGE_STATS[label]
            age = mean + std * float(s.stream("age").normal(()))
            age = float(np.floor(min(max(age, 40.0), 100.0) * 2.0 + 0.5) / 2.0)
            split = ("train" if i < n_train
                     else "val" if i < n_train + n_val else "test")
            sid = f"syn-{LABEL_NAMES[label].lower()}-{i:03d}"
            samples.append(SyntheticSample(vol.astype(np.float32), sid,
                                           label, age, split))
    return samples


def write_synthetic_dataset(samples: list[SyntheticSample], out_dir) -> Path:
    """Write volumes in the native format plus a manifest CSV; returns the
    manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            name = f"{s.subject_id}.vol"
            write_native(out_dir / name, s.volume)
            writer.writerow([s.subject_id, name, LABEL_NAMES[s.label],
                             s.age, s.split])
    return manifest_path
