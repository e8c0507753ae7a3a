"""Coarse-to-fine inference: locate, tile a 64^3 ROI with eight 48^3 patches, predict, stitch."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .core import Patch, SegmentationMask, SoftPrediction, Volume, binarize

ROI_SIDE = 64
PATCH_SIDE = 48


@dataclass
class Locator:
    __pydantic_config__ = {"extra": "forbid"}

    kind: str = "oracle"  # oracle | centroid
    sigma: float = 2.0
    top_fraction: float = 1e-3
    smoothing: float = 1.0
    background: float = 4.0  # wider blur subtracted so broad bright tissue does not win

    def __post_init__(self):
        if self.kind not in ("oracle", "centroid"):
            raise ValueError(f"unknown locator kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 < self.smoothing < self.background:
            raise ValueError("need 0 < smoothing < background")


@dataclass(frozen=True)
class RoiGrid:
    start: tuple
    roi_side: int
    patch_side: int
    origins: tuple

    @property
    def stride(self) -> int:
        return self.roi_side - self.patch_side

    def slices(self):
        return tuple(slice(s, s + self.roi_side) for s in self.start)

    def coverage(self, full_shape) -> np.ndarray:
        count = np.zeros(full_shape, dtype=np.int32)
        for o in self.origins:
            count[tuple(slice(a, a + self.patch_side) for a in o)] += 1
        return count


def _clamp_point(p, shape):
    return tuple(int(min(max(v, 0), s - 1)) for v, s in zip(p, shape))


def locate(locator: Locator, volume: Volume, truth_center=None, rng=None) -> tuple:
    shape = volume.shape
    if locator.kind == "oracle":
        if truth_center is None:
            raise ValueError("the oracle locator needs the true center")
        if locator.sigma == 0:
            return _clamp_point(truth_center, shape)
        rng = rng if rng is not None else np.random.default_rng()
        jitter = rng.normal(0.0, locator.sigma, 3)
        return _clamp_point(np.rint(np.asarray(truth_center) + jitter).astype(int), shape)
    data = volume.data.astype(np.float32)
    response = (ndimage.gaussian_filter(data, locator.smoothing)
                - ndimage.gaussian_filter(data, locator.background))
    k = max(1, int(round(locator.top_fraction * response.size)))
    flat = response.ravel()
    idx = np.argpartition(flat, flat.size - k)[-k:]
    coords = np.column_stack(np.unravel_index(idx, shape)).astype(np.float64)
    # weight by the excess over the k-th response so borderline speckle barely counts
    w = flat[idx].astype(np.float64) - float(flat[idx].min())
    if w.sum() <= 0:
        w = np.ones_like(w)
    centre = (coords * w[:, None]).sum(0) / w.sum()
    return _clamp_point(np.rint(centre).astype(int), shape)


def roi_side_for(patch_side: int) -> int:
    """ROI edge that two patches per axis tile with stride patch_side/3 (48 -> 64)."""
    return patch_side + patch_side // 3


def roi_grid(shape, center, roi_side: int = ROI_SIDE, patch_side: int = PATCH_SIDE) -> RoiGrid:
    if any(s < roi_side for s in shape):
        raise ValueError(f"volume {tuple(shape)} is smaller than the {roi_side}^3 ROI")
    start = tuple(int(min(max(c - roi_side // 2, 0), s - roi_side)) for c, s in zip(center, shape))
    offsets = (0, roi_side - patch_side)
    origins = tuple(tuple(s + o for s, o in zip(start, off)) for off in itertools.product(offsets, repeat=3))
    return RoiGrid(start=start, roi_side=roi_side, patch_side=patch_side, origins=origins)


def extract_roi_patches(volume: Volume, center, roi_side: int = ROI_SIDE, patch_side: int = PATCH_SIDE):
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    grid = roi_grid(data.shape, center, roi_side, patch_side)
    patches = [Patch(data[tuple(slice(a, a + patch_side) for a in o)], origin=o) for o in grid.origins]
    return grid, patches


def stitch(grid: RoiGrid, patch_predictions, full_shape) -> SoftPrediction:
    if len(patch_predictions) != len(grid.origins):
        raise ValueError(f"expected {len(grid.origins)} patch predictions, got {len(patch_predictions)}")
    acc = np.zeros(full_shape, dtype=np.float64)
    count = np.zeros(full_shape, dtype=np.int32)
    for o, pred in zip(grid.origins, patch_predictions):
        data = pred.data if isinstance(pred, SoftPrediction) else np.asarray(pred)
        if data.shape != (grid.patch_side,) * 3:
            raise ValueError(f"patch prediction of shape {data.shape}")
        sl = tuple(slice(a, a + grid.patch_side) for a in o)
        acc[sl] += data
        count[sl] += 1
    out = np.divide(acc, count, out=np.zeros_like(acc), where=count > 0)
    return SoftPrediction(out.astype(np.float32))


def _predict_patches(net, patches, chunk: int) -> np.ndarray:
    x = torch.from_numpy(np.stack([p.data for p in patches]))[:, None]
    was = net.training
    net.eval()
    outs = []
    try:
        with torch.no_grad():
            for i in range(0, len(x), chunk):
                outs.append(net(x[i:i + chunk]))
    finally:
        net.train(was)
    return torch.cat(outs)[:, 0].numpy()


def predict_volume(net1, net2, volume: Volume, center, chunk: int = 2, threshold: float = 0.5):
    """Average of the two networks' deterministic predictions, stitched and binarized."""
    side = net1.spec.side
    roi = roi_side_for(side)
    grid, patches = extract_roi_patches(volume, center, roi_side=roi, patch_side=side)
    p1 = _predict_patches(net1, patches, chunk)
    p2 = p1 if net2 is net1 else _predict_patches(net2, patches, chunk)
    prob = stitch(grid, list((p1 + p2) / 2.0), volume.shape)
    return prob, binarize(prob, threshold)


# --- quick-look renders ------------------------------------------------------

def write_ppm(path, volume: Volume, mask: SegmentationMask | None = None, axis: int = 2, index=None):
    """Mid-slice grayscale render (binary P6) with the mask overlaid in red."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    index = data.shape[axis] // 2 if index is None else index
    sl = np.take(data, index, axis=axis)
    grey = (np.clip(sl, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    if mask is not None:
        m = np.take(mask.data if isinstance(mask, SegmentationMask) else mask, index, axis=axis) > 0
        rgb[m] = (255, 0, 0)
    h, w = rgb.shape[:2]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb).tobytes())
    return path
