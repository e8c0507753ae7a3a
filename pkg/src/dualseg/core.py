"""Shared value types, intensity normalization, binarization and the volume container."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS = 1e-7
LN2 = math.log(2.0)
CONTAINER_VERSION = 1


def _as_grid(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D grid, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"empty grid {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _as_grid(self.data, np.float32))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _as_grid(arr, np.uint8))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def foreground_fraction(self) -> float:
        return float(self.data.sum()) / self.data.size


@dataclass(frozen=True, eq=False)
class Patch:
    data: np.ndarray
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        arr = _as_grid(self.data, np.float32)
        if len(set(arr.shape)) != 1:
            raise ValueError(f"patch must be cubic, got {arr.shape}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))

    @property
    def side(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class SoftPrediction:
    data: np.ndarray

    def __post_init__(self):
        arr = _as_grid(self.data, np.float32)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class BayesianEstimate:
    mean: np.ndarray
    entropy: np.ndarray
    passes: int


@dataclass
class DatasetSplit:
    labeled: list  # (Volume, SegmentationMask, center)
    unlabeled: list  # Volume
    validation: list
    test: list
    unlabeled_centers: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled)


@dataclass
class HybridLossConfig:
    """Weights, uncertainty thresholds and ramp settings of the hybrid objective.

    ``tau1``/``tau2`` are probabilities; the entropy thresholds used for voxel
    selection are ``binary_entropy(tau)``.  ``threshold_ramp_domain`` chooses
    whether the 3/4 -> 1 ramp acts on that probability or on its entropy.
    """
    __pydantic_config__ = {"extra": "forbid"}

    alpha: float = 0.1
    beta: float = 0.002
    gamma: float = 0.1
    tau1: float = 0.5
    tau2: float = 0.7
    t_max: int = 4000
    apply_consistency_to_labeled: bool = True
    enable_intra: bool = True
    enable_inter: bool = True
    enable_lcont: bool = True
    enable_ncont: bool = True
    threshold_ramp: str = "linear"  # linear | gaussian
    threshold_ramp_domain: str = "entropy"  # entropy | probability
    stable_agreement: str = "instrument"  # instrument | class
    bce_reduction: str = "mean"  # mean | sum

    def __post_init__(self):
        for name in ("tau1", "tau2"):
            tau = getattr(self, name)
            if not 0.5 <= tau <= 1.0:
                raise ValueError(f"{name} must be a probability in [0.5, 1], got {tau}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.threshold_ramp not in ("linear", "gaussian"):
            raise ValueError(f"unknown threshold_ramp {self.threshold_ramp!r}")
        if self.threshold_ramp_domain not in ("entropy", "probability"):
            raise ValueError(f"unknown threshold_ramp_domain {self.threshold_ramp_domain!r}")
        if self.stable_agreement not in ("instrument", "class"):
            raise ValueError(f"unknown stable_agreement {self.stable_agreement!r}")
        if self.bce_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown bce_reduction {self.bce_reduction!r}")

    @property
    def intra_active(self) -> bool:
        return self.enable_intra and self.alpha > 0

    @property
    def inter_active(self) -> bool:
        return self.enable_inter and self.alpha > 0

    @property
    def lcont_active(self) -> bool:
        return self.enable_lcont and self.beta > 0

    @property
    def ncont_active(self) -> bool:
        return self.enable_ncont and self.gamma > 0

    @property
    def any_semi(self) -> bool:
        return self.intra_active or self.inter_active or self.lcont_active or self.ncont_active


def binary_entropy(p):
    """Per-voxel binary entropy in nats; probabilities are clamped to [EPS, 1-EPS]."""
    raw = np.asarray(p, dtype=np.float64)
    q = np.clip(raw, EPS, 1.0 - EPS)
    h = -(q * np.log(q) + (1.0 - q) * np.log1p(-q))
    # exact zeros at the certain ends instead of ~1.7e-6
    return np.where((raw <= 0.0) | (raw >= 1.0), 0.0, h)


def normalize_intensities(raw, spacing=(1.0, 1.0, 1.0)) -> Volume:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty grid")
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise ValueError(f"grid contains {bad} non-finite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        out = np.zeros_like(arr)
    else:
        out = (arr - lo) / (hi - lo)
    return Volume(out.astype(np.float32), spacing=tuple(spacing))


def binarize(pred, threshold: float = 0.5) -> SegmentationMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    data = pred.data if isinstance(pred, SoftPrediction) else np.asarray(pred)
    return SegmentationMask((data > threshold).astype(np.uint8))


# --- container format -------------------------------------------------------
# A directory with meta.json plus raw little-endian arrays in X-fastest
# (Fortran) order: volume.f32 and, when present, mask.u8.


def save_container(path, volume: Volume | None = None, mask: SegmentationMask | None = None,
                   seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if volume is None and mask is None:
        raise ValueError("nothing to save")
    shape = volume.shape if volume is not None else mask.shape
    if volume is not None and mask is not None and volume.shape != mask.shape:
        raise ValueError(f"volume {volume.shape} and mask {mask.shape} differ in shape")
    meta = {
        "version": CONTAINER_VERSION,
        "shape": list(shape),
        "spacing": list(volume.spacing) if volume is not None else [1.0, 1.0, 1.0],
        "dtype": "f32le",
        "order": "x-fastest",
        "foreground_fraction": mask.foreground_fraction if mask is not None else None,
        "seed": seed,
    }
    if extra:
        meta.update(extra)
    if volume is not None:
        volume.data.astype("<f4").ravel(order="F").tofile(path / "volume.f32")
    if mask is not None:
        mask.data.astype("u1").ravel(order="F").tofile(path / "mask.u8")
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_container(path):
    """Return ``(volume, mask, meta)``; missing arrays come back as None."""
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    shape = tuple(meta["shape"])
    volume = mask = None
    if (path / "volume.f32").exists():
        raw = np.fromfile(path / "volume.f32", dtype="<f4")
        volume = Volume(raw.reshape(shape, order="F"), spacing=tuple(meta.get("spacing", (1, 1, 1))))
    if (path / "mask.u8").exists():
        raw = np.fromfile(path / "mask.u8", dtype="u1")
        mask = SegmentationMask(raw.reshape(shape, order="F"))
    return volume, mask, meta
