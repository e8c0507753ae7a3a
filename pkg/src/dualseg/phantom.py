"""Synthetic ultrasound-like phantoms with a thin curved tube instrument.

All randomness comes from ``numpy.random.Generator(PCG64(seed))`` so a fixed
(config, seed) pair reproduces the same bytes on any platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import DatasetSplit, SegmentationMask, Volume, normalize_intensities

FG_MIN, FG_MAX = 1e-4, 1e-3
MAX_SMALL_ANGLE = 15.0


@dataclass
class PhantomConfig:
    __pydantic_config__ = {"extra": "forbid"}

    shape: tuple[int, int, int] = (160, 160, 160)
    radius_range: tuple[float, float] = (1.5, 2.5)
    target_fraction: tuple[float, float] = (2e-4, 8e-4)
    curvature: float = 0.15  # control-point offset, as a fraction of tube length
    n_blobs: int = 12
    blob_size: tuple[float, float] = (0.08, 0.25)  # ellipsoid semi-axes, fraction of shape
    speckle: float = 0.6
    contrast: float = 2.0  # tube intensity relative to the brightest tissue
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3:
            raise ValueError("shape must have three components")
        if min(self.shape) < 64:
            raise ValueError(f"phantom shape {self.shape} is smaller than the 64^3 ROI")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        flo, fhi = self.target_fraction
        if not FG_MIN <= flo <= fhi <= FG_MAX:
            raise ValueError(f"target_fraction must lie within [{FG_MIN}, {FG_MAX}]")
        if not 0.0 <= self.speckle <= 1.0:
            raise ValueError("speckle must be in [0, 1]")


@dataclass
class AugmentationConfig:
    __pydantic_config__ = {"extra": "forbid"}

    rot90: bool = True
    small_angle: float = 15.0  # degrees, uniform in [-a, a] about one random axis
    mirror: tuple[bool, bool, bool] = (True, True, True)
    intensity_range: tuple[float, float] = (0.8, 1.2)
    jitter: int = 8

    def __post_init__(self):
        if not 0 <= self.small_angle <= MAX_SMALL_ANGLE:
            raise ValueError(f"small_angle must be within [0, {MAX_SMALL_ANGLE}]")

    @classmethod
    def identity(cls):
        return cls(rot90=False, small_angle=0.0, mirror=(False, False, False),
                   intensity_range=(1.0, 1.0), jitter=0)


def _bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = t[:, None]
    return ((1 - t) ** 3 * ctrl[0] + 3 * (1 - t) ** 2 * t * ctrl[1]
            + 3 * (1 - t) * t ** 2 * ctrl[2] + t ** 3 * ctrl[3])


def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def rasterize_tube(shape, ctrl: np.ndarray, radius: float) -> np.ndarray:
    """Voxels whose centre lies within ``radius`` of the Bezier centerline."""
    length = sum(np.linalg.norm(ctrl[i + 1] - ctrl[i]) for i in range(3))
    n = max(16, int(math.ceil(length * 8)))
    pts = _bezier(ctrl, np.linspace(0.0, 1.0, n))
    lo = np.maximum(np.floor(pts.min(0) - radius - 1), 0).astype(int)
    hi = np.minimum(np.ceil(pts.max(0) + radius + 2), shape).astype(int)
    mask = np.zeros(shape, dtype=np.uint8)
    if np.any(hi <= lo):
        return mask
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
    dist, _ = cKDTree(pts).query(grid.reshape(-1, 3))
    inside = (dist <= radius).reshape(grid.shape[:3])
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside
    return mask


def _tissue(shape, cfg: PhantomConfig, rng) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float32)
    tissue = np.full(shape, 0.15, dtype=np.float32)
    dims = np.array(shape, dtype=np.float32)
    for _ in range(cfg.n_blobs):
        centre = rng.uniform(0.0, 1.0, 3) * dims
        axes = rng.uniform(*cfg.blob_size, 3) * dims
        level = rng.uniform(0.2, 0.6)
        d2 = sum(((grid[i] - centre[i]) / axes[i]) ** 2 for i in range(3))
        tissue += np.where(d2 <= 1.0, np.float32(level), np.float32(0.0))
    return ndimage.gaussian_filter(tissue, sigma=2.0)


def generate_phantom(config: PhantomConfig, seed: int | None = None):
    """Return ``(volume, mask, center)`` for one synthetic acquisition."""
    seed = config.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(seed))
    shape = config.shape
    dims = np.array(shape, dtype=np.float64)
    n_vox = float(np.prod(dims))

    for _ in range(20):
        radius = rng.uniform(*config.radius_range)
        frac = rng.uniform(*config.target_fraction)
        length = frac * n_vox / (math.pi * radius ** 2)
        if length + 4 * radius >= 0.8 * dims.min():
            continue
        direction = _unit(rng)
        bend = _unit(rng)
        bend -= direction * bend.dot(direction)
        bend /= np.linalg.norm(bend) + 1e-12
        margin = length / 2 + radius + 4
        mid = rng.uniform(margin, dims - margin)
        p0 = mid - direction * length / 2
        p3 = mid + direction * length / 2
        off = bend * config.curvature * length
        ctrl = np.stack([p0, p0 + (p3 - p0) / 3 + off, p0 + 2 * (p3 - p0) / 3 + off, p3])
        mask = rasterize_tube(shape, ctrl, radius)
        fraction = mask.sum() / n_vox
        centre = np.rint(_bezier(ctrl, np.array([0.5]))[0]).astype(int)
        if FG_MIN <= fraction <= FG_MAX and mask[tuple(centre)]:
            break
    else:
        raise ValueError(f"cannot fit a tube into shape {shape} with the requested fraction")

    tissue = _tissue(shape, config, rng)
    tube_level = config.contrast * float(tissue.max())
    smooth_mask = ndimage.gaussian_filter(mask.astype(np.float32), sigma=0.6)
    image = tissue * (1 - smooth_mask) + tube_level * smooth_mask
    rayleigh = rng.rayleigh(scale=1.0, size=shape).astype(np.float32)
    rayleigh = ndimage.gaussian_filter(rayleigh, sigma=0.7)
    rayleigh /= rayleigh.mean()
    image = image * ((1 - config.speckle) + config.speckle * rayleigh)
    volume = normalize_intensities(image)
    return volume, SegmentationMask(mask), tuple(int(c) for c in centre)


def make_dataset(config: PhantomConfig, n_labeled: int, n_unlabeled: int, n_val: int,
                 n_test: int, seed: int = 0) -> DatasetSplit:
    if min(n_labeled, n_unlabeled, n_val, n_test) < 0:
        raise ValueError("counts must be non-negative")
    if n_labeled < 1:
        raise ValueError("at least one labeled phantom is required")
    total = n_labeled + n_unlabeled + n_val + n_test
    seeds = sample_seeds(seed, total)
    groups = {}
    start = 0
    for name, n in (("labeled", n_labeled), ("unlabeled", n_unlabeled),
                    ("validation", n_val), ("test", n_test)):
        groups[name] = seeds[start:start + n]
        start += n
    made = {name: [generate_phantom(config, s) for s in ss] for name, ss in groups.items()}
    return DatasetSplit(
        labeled=made["labeled"],
        unlabeled=[v for v, _, _ in made["unlabeled"]],
        unlabeled_centers=[c for _, _, c in made["unlabeled"]],
        validation=made["validation"],
        test=made["test"],
        seeds=groups,
    )


def sample_seeds(master: int, n: int) -> list[int]:
    """``n`` distinct 32-bit seeds derived from ``master`` via SeedSequence."""
    ss = np.random.SeedSequence(master)
    out: list[int] = []
    k = n
    while len(out) < n:
        for s in ss.generate_state(k + len(out), dtype=np.uint32).tolist():
            if s not in out:
                out.append(int(s))
            if len(out) == n:
                break
        k *= 2
    return out


# --- augmentation -----------------------------------------------------------

def _rotation_matrix(axis: int, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    i, j = [k for k in range(3) if k != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def augment(volume: Volume, mask: SegmentationMask, center, config: AugmentationConfig, seed: int):
    """Apply one random rigid transform plus an intensity rescale.

    The same spatial transform moves volume, mask and center; intensities are
    re-clamped to [0, 1] and the mask is resampled nearest-neighbour.
    """
    if volume.shape != mask.shape:
        raise ValueError("volume and mask shapes differ")
    rng = np.random.Generator(np.random.PCG64(seed))
    vol = volume.data
    msk = mask.data
    c = np.array(center, dtype=np.float64)

    for axis in range(3):
        if config.mirror[axis] and rng.random() < 0.5:
            vol = np.flip(vol, axis)
            msk = np.flip(msk, axis)
            c[axis] = vol.shape[axis] - 1 - c[axis]

    if config.rot90:
        k = int(rng.integers(0, 4))
        a, b = sorted(rng.choice(3, size=2, replace=False).tolist())
        for _ in range(k):
            # np.rot90(axes=(a, b)) == flip along b, then swap a and b
            c[b] = vol.shape[b] - 1 - c[b]
            c[a], c[b] = c[b], c[a]
            vol = np.rot90(vol, 1, axes=(a, b))
            msk = np.rot90(msk, 1, axes=(a, b))

    vol = np.ascontiguousarray(vol)
    msk = np.ascontiguousarray(msk)
    if config.small_angle > 0:
        angle = float(rng.uniform(-config.small_angle, config.small_angle))
        axis = int(rng.integers(0, 3))
        rot = _rotation_matrix(axis, angle)
        pivot = (np.array(vol.shape) - 1) / 2.0
        inv = rot.T
        offset = pivot - inv @ pivot
        vol = ndimage.affine_transform(vol, inv, offset=offset, order=1, mode="nearest")
        msk = ndimage.affine_transform(msk, inv, offset=offset, order=0, mode="constant", cval=0)
        c = rot @ (c - pivot) + pivot

    lo, hi = config.intensity_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    vol = np.clip(vol * scale, 0.0, 1.0)

    ci = np.clip(np.rint(c).astype(int), 0, np.array(vol.shape) - 1)
    if not msk[tuple(ci)] and msk.any():
        fg = np.argwhere(msk)
        ci = fg[np.argmin(((fg - c) ** 2).sum(1))]
    return (Volume(vol, spacing=volume.spacing), SegmentationMask(msk),
            tuple(int(x) for x in ci))
