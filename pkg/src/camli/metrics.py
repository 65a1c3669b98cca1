"""Flow evaluation metrics for both modalities.

EPE is the mean L2 error over the evaluated mask; the threshold metrics
count the fraction of elements whose error is small in absolute or
relative terms (relative = error / ground-truth norm).
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import ContractError


@dataclass
class MetricReport:
    epe2d: float
    acc1px: float
    epe3d: float
    acc05: float
    acc_s: float
    acc_r: float
    outliers: float
    count_2d: int
    count_3d: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def row(self):
        return (f"epe2d={self.epe2d:.4f} acc1px={self.acc1px:.4f} "
                f"epe3d={self.epe3d:.4f} acc05={self.acc05:.4f} "
                f"accS={self.acc_s:.4f} accR={self.acc_r:.4f} outliers={self.outliers:.4f}")


def _rel(err, gt_norm):
    out = np.full_like(err, np.inf)
    np.divide(err, gt_norm, out=out, where=gt_norm > 0)
    out[(gt_norm == 0) & (err == 0)] = 0.0
    return out


def compute_metrics(pred2d, gt2d, mask2d, pred3d, gt3d, mask3d):
    """Metric report over masked pixels (2D) and masked points (3D).

    pred2d/gt2d: (2, H, W); pred3d/gt3d: (N, 3); masks are boolean (or 0/1)
    selections and must be non-empty.
    """
    m2 = np.asarray(mask2d).astype(bool).reshape(-1)
    m3 = np.asarray(mask3d).astype(bool).reshape(-1)
    if not m2.any() or not m3.any():
        raise ContractError("compute_metrics: empty evaluation mask")

    d2 = np.asarray(pred2d, dtype=np.float64) - np.asarray(gt2d, dtype=np.float64)
    err2 = np.sqrt(np.sum(d2 * d2, axis=0)).reshape(-1)[m2]
    gtn2 = np.sqrt(np.sum(np.asarray(gt2d, dtype=np.float64) ** 2, axis=0)).reshape(-1)[m2]
    rel2 = _rel(err2, gtn2)

    d3 = np.asarray(pred3d, dtype=np.float64) - np.asarray(gt3d, dtype=np.float64)
    err3 = np.sqrt(np.sum(d3 * d3, axis=1))[m3]
    gtn3 = np.sqrt(np.sum(np.asarray(gt3d, dtype=np.float64) ** 2, axis=1))[m3]
    rel3 = _rel(err3, gtn3)

    return MetricReport(
        epe2d=float(err2.mean()),
        acc1px=float(np.mean((err2 < 1.0) | (rel2 < 0.05))),
        epe3d=float(err3.mean()),
        acc05=float(np.mean((err3 < 0.05) | (rel3 < 0.05))),
        acc_s=float(np.mean((err3 < 0.05) | (rel3 < 0.05))),
        acc_r=float(np.mean((err3 < 0.1) | (rel3 < 0.1))),
        outliers=float(np.mean((err3 > 0.3) | (rel3 > 0.1))),
        count_2d=int(m2.sum()),
        count_3d=int(m3.sum()),
    )
