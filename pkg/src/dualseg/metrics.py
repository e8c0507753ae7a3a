"""Dice, 95th-percentile Hausdorff distance, paired t-test and result tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage, stats

from .core import SegmentationMask

RESULTS_SCHEMA = "# schema: dualseg-results/1 columns=method,L,U,dsc_mean,dsc_std,hd95_mean,hd95_std"
EVAL_SCHEMA = "# schema: dualseg-eval/1 per-volume rows (volume,dsc,hd95,hd95_sentinel) then one summary row"
SUMMARY_COLUMNS = ("method", "L", "U", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std")

_SIX = ndimage.generate_binary_structure(3, 1)


def _grid(a) -> np.ndarray:
    return (a.data if isinstance(a, SegmentationMask) else np.asarray(a)).astype(bool)


def dice(a, b) -> float:
    a, b = _grid(a), _grid(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask."""
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def surface_distances(a, b) -> np.ndarray:
    """Distance from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(_grid(a)), surface(_grid(b))
    dt = ndimage.distance_transform_edt(~sb)
    return dt[sa]


def hd95_checked(a, b) -> tuple[float, bool]:
    """Return ``(hd95, is_sentinel)``.

    An empty mask on either side yields the volume diagonal with the flag set.
    """
    ga, gb = _grid(a), _grid(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch {ga.shape} vs {gb.shape}")
    if not ga.any() or not gb.any():
        return float(math.sqrt(sum(s * s for s in ga.shape))), True
    d_ab = np.percentile(surface_distances(ga, gb), 95)
    d_ba = np.percentile(surface_distances(gb, ga), 95)
    return float(max(d_ab, d_ba)), False


def hd95(a, b) -> float:
    return hd95_checked(a, b)[0]


class TTestResult(NamedTuple):
    t: float
    p: float
    degenerate: bool


def paired_t_test(scores_a, scores_b) -> TTestResult:
    """Paired t statistic and one-tailed p-value for mean(a) > mean(b)."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score vectors must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two paired scores")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    # a constant shift leaves only rounding noise in the differences
    if sd <= 1e-12 * max(1.0, abs(mean)):
        if mean > 0:
            return TTestResult(math.inf, 0.0, True)
        if mean < 0:
            return TTestResult(-math.inf, 1.0, True)
        return TTestResult(0.0, 0.5, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), float(stats.t.sf(t, df=n - 1)), False)


@dataclass
class EvalResult:
    method: str = "proposed"
    n_labeled: int = 0
    n_unlabeled: int = 0
    names: list = field(default_factory=list)
    dsc: list = field(default_factory=list)
    hd95: list = field(default_factory=list)
    hd95_sentinel: list = field(default_factory=list)

    def add(self, name, pred, truth):
        h, flag = hd95_checked(pred, truth)
        self.names.append(name)
        self.dsc.append(dice(pred, truth))
        self.hd95.append(h)
        self.hd95_sentinel.append(flag)

    @property
    def dsc_mean(self):
        return float(np.mean(self.dsc))

    @property
    def dsc_std(self):
        return float(np.std(self.dsc))

    @property
    def hd95_mean(self):
        return float(np.mean(self.hd95))

    @property
    def hd95_std(self):
        return float(np.std(self.hd95))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(EVAL_SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["volume", "dsc", "hd95", "hd95_sentinel"])
        for row in zip(self.names, self.dsc, self.hd95, self.hd95_sentinel):
            w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", int(row[3])])
        w.writerow(SUMMARY_COLUMNS)
        w.writerow(summary_row(self))
        return buf.getvalue()


def summary_row(r: EvalResult) -> list:
    return [r.method, r.n_labeled, r.n_unlabeled, f"{r.dsc_mean:.6f}", f"{r.dsc_std:.6f}",
            f"{r.hd95_mean:.6f}", f"{r.hd95_std:.6f}"]


def summarize(results) -> str:
    """CSV table with one ``mean +- std`` row per method.

    ``results`` maps a method name to an EvalResult or a list of them (e.g. one
    per seed); per-volume scores are pooled.  std is the population std.
    """
    buf = io.StringIO()
    buf.write(RESULTS_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for method, rs in results.items():
        rs = rs if isinstance(rs, (list, tuple)) else [rs]
        if not rs:
            raise ValueError(f"method {method!r} has no results")
        pooled = EvalResult(method=method, n_labeled=rs[0].n_labeled, n_unlabeled=rs[0].n_unlabeled)
        for r in rs:
            pooled.dsc += r.dsc
            pooled.hd95 += r.hd95
        w.writerow(summary_row(pooled))
    return buf.getvalue()
