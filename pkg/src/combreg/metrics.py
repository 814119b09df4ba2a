"""Overlap, surface-distance and volume metrics on 3D binary masks with anisotropic spacing.

Fractions are kept as fractions here; the serialized records carry
percentages (``*_pct``) and millimetres (``*_mm``). A metric that is not
defined for its inputs (empty ground truth, empty surface) is ``None`` and
the reason is appended to ``MetricReport.notes``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .autodiff import ContractError
from .postproc import BinaryVolume

RECORD_FIELDS = (
    "case_id",
    "structure",
    "dice_pct",
    "sensitivity_pct",
    "specificity_pct",
    "hd_mm",
    "msd_mm",
    "ravd_pct",
    "delta_mm",
)

_SIX = ndimage.generate_binary_structure(3, 1)


def _mask(v) -> np.ndarray:
    return v.mask if isinstance(v, BinaryVolume) else np.asarray(v, dtype=bool)


def _pair(gt, p) -> tuple[np.ndarray, np.ndarray]:
    g, q = _mask(gt), _mask(p)
    if g.shape != q.shape:
        raise ContractError(f"extent mismatch: ground truth {g.shape} vs prediction {q.shape}")
    return g, q


@dataclass
class MetricReport:
    case_id: str = ""
    structure: str = "global"
    dice: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    hd_mm: float | None = None
    msd_mm: float | None = None
    ravd: float | None = None
    delta_mm: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        """Flat record with percentages and millimetres; undefined values are ``None``."""
        pct = lambda v: None if v is None else 100.0 * v  # noqa: E731
        return {
            "case_id": self.case_id,
            "structure": self.structure,
            "dice_pct": pct(self.dice),
            "sensitivity_pct": pct(self.sensitivity),
            "specificity_pct": pct(self.specificity),
            "hd_mm": self.hd_mm,
            "msd_mm": self.msd_mm,
            "ravd_pct": pct(self.ravd),
            "delta_mm": self.delta_mm,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MetricReport":
        frac = lambda v: None if v is None else v / 100.0  # noqa: E731
        return cls(
            case_id=rec["case_id"],
            structure=rec["structure"],
            dice=frac(rec["dice_pct"]),
            sensitivity=frac(rec["sensitivity_pct"]),
            specificity=frac(rec["specificity_pct"]),
            hd_mm=rec["hd_mm"],
            msd_mm=rec["msd_mm"],
            ravd=frac(rec["ravd_pct"]),
            delta_mm=rec["delta_mm"],
        )


def overlap_metrics(gt, p) -> tuple[float | None, float | None, float | None]:
    """(dice, sensitivity, specificity) from set cardinalities; ``None`` where undefined."""
    g, q = _pair(gt, p)
    tp = int(np.count_nonzero(g & q))
    n_gt = int(np.count_nonzero(g))
    n_p = int(np.count_nonzero(q))
    n_bg = g.size - n_gt
    tn = n_bg - (n_p - tp)
    dice = 2.0 * tp / (n_gt + n_p) if n_gt else None
    sens = tp / n_gt if n_gt else None
    spec = tn / n_bg if n_bg else None
    return dice, sens, spec


def surface_voxels(vol) -> np.ndarray:
    """(n, 3) indices of foreground voxels with a background or out-of-volume 6-neighbour."""
    m = _mask(vol)
    if not m.any():
        return np.zeros((0, 3), dtype=np.intp)
    interior = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return np.argwhere(m & ~interior)


def _directed(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from each surface voxel of ``a`` to the nearest one of ``b``."""
    s = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(b * s)
    d, _ = tree.query(a * s, k=1)
    return np.asarray(d, dtype=np.float64)


def _surfaces(gt, p):
    g, q = _pair(gt, p)
    return surface_voxels(g), surface_voxels(q)


def hausdorff(gt, p, spacing_mm=(1.0, 1.0, 1.0)) -> float | None:
    sg, sp = _surfaces(gt, p)
    if not len(sg) or not len(sp):
        return None
    return float(max(_directed(sg, sp, spacing_mm).max(), _directed(sp, sg, spacing_mm).max()))


def mean_surface_distance(gt, p, spacing_mm=(1.0, 1.0, 1.0)) -> float | None:
    sg, sp = _surfaces(gt, p)
    if not len(sg) or not len(sp):
        return None
    total = _directed(sg, sp, spacing_mm).sum() + _directed(sp, sg, spacing_mm).sum()
    return float(total / (len(sg) + len(sp)))


def ravd(gt, p) -> float | None:
    g, q = _pair(gt, p)
    n_gt = int(np.count_nonzero(g))
    if not n_gt:
        return None
    return abs(n_gt - int(np.count_nonzero(q))) / n_gt


def longest_distance(extents, spacing_mm) -> float:
    """Spacing-scaled diagonal between the two farthest voxel centres of the grid."""
    return math.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(extents, spacing_mm)))


def evaluate(gt, p, spacing_mm=(1.0, 1.0, 1.0), case_id: str = "", structure: str = "global") -> MetricReport:
    g, q = _pair(gt, p)
    report = MetricReport(case_id=case_id, structure=structure, delta_mm=longest_distance(g.shape, spacing_mm))
    report.dice, report.sensitivity, report.specificity = overlap_metrics(g, q)
    if not g.any():
        report.notes.append("empty ground truth: dice, sensitivity and RAVD undefined")
    if g.all():
        report.notes.append("ground truth fills the volume: specificity undefined")
    sg, sp = surface_voxels(g), surface_voxels(q)
    if len(sg) and len(sp):
        d_gp = _directed(sg, sp, spacing_mm)
        d_pg = _directed(sp, sg, spacing_mm)
        report.hd_mm = float(max(d_gp.max(), d_pg.max()))
        report.msd_mm = float((d_gp.sum() + d_pg.sum()) / (len(sg) + len(sp)))
    else:
        report.notes.append("empty surface: HD and MSD undefined")
    report.ravd = ravd(g, q)
    return report
