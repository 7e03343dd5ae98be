"""Volume data model, VVOL binary I/O, spatial transforms and dataset builders.

Everything in here works on plain numpy arrays laid out as (D, H, W).  Random
operations take an explicit integer seed so that the same (sample, seed) pair
always produces the same output regardless of worker scheduling.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
DTYPE_F32_LE = 0
_HEADER = struct.Struct("<4sIIIIII")

SPLITS = ("train", "val", "test")


class VolumeFormatError(ValueError):
    """Base class for malformed VVOL files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    """Payload is longer than the header dimensions allow."""


class ManifestError(ValueError):
    pass


@dataclass
class PhaseVolume:
    voxels: np.ndarray
    phase_name: str = "phase0"
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"expected a non-empty 3D grid, got shape {self.voxels.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class MultiPhaseSample:
    sample_id: str
    phases: list[PhaseVolume]
    label: int
    split: str = "train"
    mask: np.ndarray | None = None  # lesion mask, synthetic data only

    def __post_init__(self):
        shapes = {p.shape for p in self.phases}
        if len(shapes) > 1:
            raise ValueError(f"phases of {self.sample_id} differ in shape: {sorted(shapes)}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.phases[0].shape

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    def stack(self) -> np.ndarray:
        """Return the phases as one (N, D, H, W) float32 array."""
        return np.stack([p.voxels for p in self.phases])

    def with_voxels(self, stacked: np.ndarray, mask: np.ndarray | None = None) -> "MultiPhaseSample":
        phases = [replace(p, voxels=v) for p, v in zip(self.phases, stacked)]
        return replace(self, phases=phases, mask=mask)

    def select_phases(self, names: Sequence[str]) -> "MultiPhaseSample":
        lookup = {p.phase_name: p for p in self.phases}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"phases not present: {missing}")
        return replace(self, phases=[lookup[n] for n in names])


@dataclass
class DatasetManifest:
    class_names: list[str]
    phase_names: list[str]
    samples: list[dict] = field(default_factory=list)
    root: Path | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_phases(self) -> int:
        return len(self.phase_names)

    def validate(self, check_files: bool = True) -> None:
        k, n = self.n_classes, self.n_phases
        for entry in self.samples:
            if not 0 <= int(entry["label"]) < k:
                raise ManifestError(f"{entry['sample_id']}: label {entry['label']} outside [0, {k})")
            if entry.get("split") not in SPLITS:
                raise ManifestError(f"{entry['sample_id']}: bad split {entry.get('split')!r}")
            paths = entry["phases"]
            if len(paths) != n or set(paths) != set(self.phase_names):
                raise ManifestError(f"{entry['sample_id']}: expected phases {self.phase_names}")
            if check_files:
                for p in list(paths.values()) + ([entry["mask"]] if entry.get("mask") else []):
                    if not self.resolve(p).is_file():
                        raise ManifestError(f"{entry['sample_id']}: missing file {p}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_json(self) -> dict:
        return {"class_names": self.class_names, "phase_names": self.phase_names,
                "samples": self.samples}

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        unknown = set(raw) - {"class_names", "phase_names", "samples"}
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        m = cls(list(raw["class_names"]), list(raw["phase_names"]), list(raw["samples"]),
                root=path.parent)
        m.validate()
        return m

    def load_samples(self, split: str | None = None,
                     phases: Sequence[str] | None = None) -> list[MultiPhaseSample]:
        names = list(phases) if phases is not None else self.phase_names
        out = []
        for entry in self.samples:
            if split is not None and entry["split"] != split:
                continue
            vols = [PhaseVolume(read_volume(self.resolve(entry["phases"][n])).voxels, n)
                    for n in names]
            mask = None
            if entry.get("mask"):
                mask = read_volume(self.resolve(entry["mask"])).voxels > 0.5
            out.append(MultiPhaseSample(entry["sample_id"], vols, int(entry["label"]),
                                        entry["split"], mask))
        return out


@dataclass
class AugmentationConfig:
    flip_prob: tuple[float, float, float] = (0.5, 0.5, 0.5)
    rotation: tuple[int, ...] = (0, 1, 2, 3)
    erase_prob: float = 0.25
    erase_fraction_range: tuple[float, float] = (0.02, 0.10)

    def __post_init__(self):
        if any(not 0.0 <= p <= 1.0 for p in (*self.flip_prob, self.erase_prob)):
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.erase_fraction_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("erase_fraction_range must satisfy 0 < min <= max < 1")
        if not self.rotation or any(k not in (0, 1, 2, 3) for k in self.rotation):
            raise ValueError("rotation must be a non-empty subset of {0, 1, 2, 3}")


# ---------------------------------------------------------------------------
# VVOL I/O


def write_volume(path: str | os.PathLike, vol: PhaseVolume | np.ndarray) -> None:
    grid = vol.voxels if isinstance(vol, PhaseVolume) else np.asarray(vol, dtype=np.float32)
    if grid.ndim != 3:
        raise ValueError("VVOL stores 3D grids only")
    d, h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VVOL_MAGIC, VVOL_VERSION, 3, d, h, w, DTYPE_F32_LE))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_volume(path: str | os.PathLike, phase_name: str | None = None) -> PhaseVolume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != VVOL_MAGIC:
        raise BadMagicError(f"{path}: not a VVOL file")
    if len(raw) < _HEADER.size:
        raise TruncatedVolumeError(f"{path}: header truncated")
    _, version, ndim, d, h, w, dtype = _HEADER.unpack_from(raw)
    if version != VVOL_VERSION or ndim != 3 or dtype != DTYPE_F32_LE:
        raise VolumeFormatError(f"{path}: unsupported version/ndim/dtype {version}/{ndim}/{dtype}")
    expected = d * h * w * 4
    payload = len(raw) - _HEADER.size
    if payload < expected:
        raise TruncatedVolumeError(f"{path}: payload has {payload} bytes, header needs {expected}")
    if payload > expected:
        raise DimensionMismatchError(f"{path}: payload has {payload} bytes, header needs {expected}")
    grid = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(d, h, w)
    return PhaseVolume(grid.astype(np.float32), phase_name or Path(path).stem)


# ---------------------------------------------------------------------------
# Intensity and geometry


def normalize_volume(grid: np.ndarray) -> np.ndarray:
    """Per-volume z-score; constant volumes map to zeros."""
    g = np.asarray(grid, dtype=np.float64)
    sd = g.std()
    if sd == 0.0 or not np.isfinite(sd):
        return np.zeros(g.shape, dtype=np.float32)
    return ((g - g.mean()) / sd).astype(np.float32)


def normalize_sample(s: MultiPhaseSample) -> MultiPhaseSample:
    return s.with_voxels(np.stack([normalize_volume(p.voxels) for p in s.phases]), s.mask)


def resize_volume(v: PhaseVolume, target: Sequence[int]) -> PhaseVolume:
    """Trilinear resize with corner-aligned sampling.

    Output voxel i along an axis samples the source at i * (n_in - 1) / (n_out - 1).
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target dims must be three positive integers, got {target}")
    if target == v.shape:
        return replace(v, voxels=v.voxels.copy())
    coords = []
    for n_in, n_out in zip(v.shape, target):
        if n_out == 1 or n_in == 1:
            coords.append(np.zeros(n_out) if n_in == 1 else np.full(n_out, (n_in - 1) / 2.0))
        else:
            coords.append(np.linspace(0.0, n_in - 1, n_out))
    grid = np.meshgrid(*coords, indexing="ij")
    out = ndimage.map_coordinates(v.voxels.astype(np.float64), grid, order=1, mode="nearest")
    return replace(v, voxels=out.astype(np.float32))


def resize_sample(s: MultiPhaseSample, target: Sequence[int]) -> MultiPhaseSample:
    stacked = np.stack([resize_volume(p, target).voxels for p in s.phases])
    mask = None
    if s.mask is not None:
        mask = resize_volume(PhaseVolume(s.mask.astype(np.float32)), target).voxels > 0.5
    return s.with_voxels(stacked, mask)


def crop_offsets(shape: Sequence[int], size: Sequence[int], mode: str, seed: int = 0) -> tuple[int, int, int]:
    if any(c > n for c, n in zip(size, shape)) or min(size) < 1:
        raise ValueError(f"crop {tuple(size)} does not fit inside {tuple(shape)}")
    if mode == "center":
        return tuple((n - c) // 2 for n, c in zip(shape, size))
    if mode == "random":
        rng = np.random.default_rng(seed)
        return tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(shape, size))
    raise ValueError(f"unknown crop mode {mode!r}")


def crop_sample(s: MultiPhaseSample, size: Sequence[int], mode: str = "center",
                seed: int = 0) -> MultiPhaseSample:
    od, oh, ow = crop_offsets(s.shape, size, mode, seed)
    d, h, w = size
    sl = (slice(od, od + d), slice(oh, oh + h), slice(ow, ow + w))
    stacked = s.stack()[(slice(None),) + sl].copy()
    mask = s.mask[sl].copy() if s.mask is not None else None
    return s.with_voxels(stacked, mask)


def _erase_box(shape, frac_range, rng) -> tuple[slice, slice, slice] | None:
    total = int(np.prod(shape))
    lo, hi = frac_range
    d_max, h_max, w_max = shape
    for _ in range(200):
        target = rng.uniform(lo, hi) * total
        d = int(rng.integers(1, d_max + 1))
        h = int(rng.integers(1, h_max + 1))
        w = int(round(target / (d * h)))
        if 1 <= w <= w_max and lo <= d * h * w / total <= hi:
            od = int(rng.integers(0, d_max - d + 1))
            oh = int(rng.integers(0, h_max - h + 1))
            ow = int(rng.integers(0, w_max - w + 1))
            return slice(od, od + d), slice(oh, oh + h), slice(ow, ow + w)
    return None  # volume too small to hit the requested fraction


def augment_sample(s: MultiPhaseSample, cfg: AugmentationConfig, seed: int) -> MultiPhaseSample:
    """Draw one spatial transform and apply it to every phase (and the mask)."""
    rng = np.random.default_rng(seed)
    flips = [rng.random() < p for p in cfg.flip_prob]
    k = int(rng.choice(cfg.rotation))
    _, h, w = s.shape
    if h != w and k % 2:
        k = (k + 1) % 4  # odd quarter-turns would change the H/W shape
    erase = rng.random() < cfg.erase_prob
    box = _erase_box(s.shape, cfg.erase_fraction_range, rng) if erase else None

    def apply(grid: np.ndarray) -> np.ndarray:
        # grid has leading phase axis for voxels, none for the mask
        off = grid.ndim - 3
        for axis, f in enumerate(flips):
            if f:
                grid = np.flip(grid, axis=off + axis)
        if k:
            grid = np.rot90(grid, k=k, axes=(off + 1, off + 2))
        return np.ascontiguousarray(grid)

    stacked = apply(s.stack())
    if box is not None:
        stacked[(slice(None),) + box] = 0.0
    mask = apply(s.mask) if s.mask is not None else None
    return s.with_voxels(stacked, mask)


def low_resolution(grid: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the last two axes (H, W); D is untouched."""
    *lead, h, w = grid.shape
    if h % 2 or w % 2:
        raise ValueError(f"H and W must be even, got {h}x{w}")
    return grid.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


# ---------------------------------------------------------------------------
# Synthetic data


def class_signature(label: int, n_classes: int, n_phases: int, contrast: float,
                    background: float = 1.0) -> np.ndarray:
    """Per-phase lesion intensity of a class.

    Phase p of class k sits at level (k + p) mod K, so neighbouring classes differ by
    `contrast` in every phase and each class has its own enhancement pattern.
    """
    levels = (label + np.arange(n_phases)) % n_classes - (n_classes - 1) / 2.0
    return (background + contrast * levels).astype(np.float64)


def _smooth_field(shape, rng, amplitude: float) -> np.ndarray:
    d, h, w = shape
    zz, yy, xx = np.meshgrid(np.linspace(0, 1, d), np.linspace(0, 1, h), np.linspace(0, 1, w),
                             indexing="ij")
    field = np.zeros(shape)
    for _ in range(3):
        fz, fy, fx = rng.uniform(0.3, 1.5, size=3)
        field += np.cos(2 * np.pi * (fz * zz + fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return amplitude * field / 3.0


def _lesion_mask(shape, rng) -> np.ndarray:
    dims = np.array(shape, dtype=float)
    center = (dims - 1) / 2.0 + rng.uniform(-0.15, 0.15, size=3) * dims
    radii = np.maximum(rng.uniform(0.18, 0.28, size=3) * dims, 0.75)
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    mask = r2 <= 1.0
    if not mask.any():
        mask[tuple(np.clip(np.round(center).astype(int), 0, dims.astype(int) - 1))] = True
    return mask


def synthesize_sample(label: int, n_phases: int, n_classes: int, dims: Sequence[int],
                      contrast: float, noise_sd: float, rng: np.random.Generator,
                      signal_phases: Iterable[int] | None = None,
                      phase_jitter: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One synthetic sample: returns (stacked phases, lesion mask, lesion intensities).

    Phases outside `signal_phases` show the signature of a randomly drawn class, so
    they look like signal but carry no information about the label.
    """
    signal = set(range(n_phases)) if signal_phases is None else set(signal_phases)
    mask = _lesion_mask(dims, rng)
    truth = class_signature(label, n_classes, n_phases, contrast)
    decoy = class_signature(int(rng.integers(n_classes)), n_classes, n_phases, contrast)
    intensity = np.where([p in signal for p in range(n_phases)], truth, decoy)
    intensity = intensity + phase_jitter * rng.standard_normal(n_phases)
    vols = np.empty((n_phases, *dims), dtype=np.float32)
    for p in range(n_phases):
        bg = 1.0 + _smooth_field(dims, rng, 0.25)
        vol = np.where(mask, intensity[p], bg)
        if noise_sd > 0:
            vol = vol + noise_sd * rng.standard_normal(dims)
        vols[p] = vol
    return vols, mask, intensity


def generate_synthetic_dataset(out_dir: str | os.PathLike, n_samples: int, n_phases: int,
                               n_classes: int, dims: Sequence[int] = (10, 36, 36),
                               contrast: float = 0.8, noise_sd: float = 0.3, seed: int = 0,
                               split_fractions: tuple[float, float, float] = (0.8, 0.2, 0.0),
                               signal_phases: Iterable[int] | None = None,
                               phase_jitter: float = 0.0,
                               phase_names: Sequence[str] | None = None) -> Path:
    """Write a class-balanced synthetic multi-phase dataset; returns the manifest path."""
    if n_classes < 2 or n_phases < 1 or n_samples < 1:
        raise ValueError("need n_classes >= 2, n_phases >= 1, n_samples >= 1")
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    names = list(phase_names) if phase_names else [f"phase{p}" for p in range(n_phases)]
    if len(names) != n_phases:
        raise ValueError("phase_names must list one name per phase")
    signal = None if signal_phases is None else sorted(set(signal_phases))
    dims = tuple(int(x) for x in dims)

    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % n_classes
    splits = _balanced_splits(labels, n_classes, split_fractions, rng)
    samples = []
    for i in range(n_samples):
        sid = f"s{i:05d}"
        vols, mask, _ = synthesize_sample(int(labels[i]), n_phases, n_classes, dims, contrast,
                                          noise_sd, rng, signal, phase_jitter)
        paths = {}
        for name, vol in zip(names, vols):
            rel = f"volumes/{sid}_{name}.vvol"
            write_volume(out / rel, vol)
            paths[name] = rel
        mask_rel = f"volumes/{sid}_mask.vvol"
        write_volume(out / mask_rel, mask.astype(np.float32))
        samples.append({"sample_id": sid, "label": int(labels[i]), "split": splits[i],
                        "phases": paths, "mask": mask_rel})
    manifest = DatasetManifest([f"class{k}" for k in range(n_classes)], names, samples, out)
    return manifest.save(out / "manifest.json")


def _balanced_splits(labels, n_classes, fractions, rng) -> list[str]:
    fr = np.asarray(fractions, dtype=float)
    fr = fr / fr.sum()
    splits = [""] * len(labels)
    for k in range(n_classes):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        bounds = np.round(np.cumsum(fr) * len(idx)).astype(int)
        for j, i in enumerate(idx):
            splits[i] = SPLITS[int(np.searchsorted(bounds, j, side="right"))]
    return splits


# ---------------------------------------------------------------------------
# MedMNIST3D

MEDMNIST3D_CLASSES = {
    "organmnist3d": 11,
    "nodulemnist3d": 2,
    "adrenalmnist3d": 2,
    "fracturemnist3d": 3,
    "vesselmnist3d": 2,
    "synapsemnist3d": 2,
}


def load_medmnist3d(archive: str | os.PathLike, n_classes: int | None = None,
                    phase_name: str = "ct") -> tuple[DatasetManifest, list[MultiPhaseSample]]:
    """Read an upstream MedMNIST3D ``.npz`` archive into single-phase samples.

    Intensities are scaled to [0, 1]; z-scoring happens later in the pipeline.
    """
    archive = Path(archive)
    if n_classes is None:
        key = archive.stem.split("_")[0].lower()
        if key not in MEDMNIST3D_CLASSES:
            raise ValueError(f"cannot infer class count from {archive.name}; pass n_classes")
        n_classes = MEDMNIST3D_CLASSES[key]
    with np.load(archive) as data:
        needed = [f"{s}_{kind}" for s in SPLITS for kind in ("images", "labels")]
        missing = [k for k in needed if k not in data.files]
        if missing:
            raise ManifestError(f"{archive.name}: missing collections {missing}")
        arrays = {k: data[k] for k in needed}

    samples, entries = [], []
    for split in SPLITS:
        images, labels = arrays[f"{split}_images"], arrays[f"{split}_labels"].reshape(-1)
        if images.ndim != 4:
            raise ManifestError(f"{split}_images must be (n, D, H, W), got {images.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ManifestError(f"{split} labels outside [0, {n_classes})")
        scale = 255.0 if images.dtype == np.uint8 else max(float(images.max()), 1.0)
        for i, (img, lab) in enumerate(zip(images, labels)):
            sid = f"{split}{i:05d}"
            vol = PhaseVolume(img.astype(np.float32) / scale, phase_name)
            samples.append(MultiPhaseSample(sid, [vol], int(lab), split))
            entries.append({"sample_id": sid, "label": int(lab), "split": split,
                            "phases": {phase_name: f"{archive.name}#{sid}"}})
    manifest = DatasetManifest([str(k) for k in range(n_classes)], [phase_name], entries,
                               archive.parent)
    return manifest, samples
