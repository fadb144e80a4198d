"""Flow evaluation metrics: endpoint errors, accuracy fractions, outliers,
and the neighbor distance score used when ground truth is absent."""

from dataclasses import dataclass

import numpy as np

from .core import ParticleFrame, self_excluded_knn
from .errors import ConfigError, ShapeError

ACC_STRICT_ABS = 0.05
ACC_STRICT_REL = 0.05
ACC_RELAX_ABS = 0.10
ACC_RELAX_REL = 0.10
OUTLIER_ABS = 0.30
OUTLIER_REL = 0.10

DEFAULT_NDS_K = 8


@dataclass
class MetricsReport:
    epe: float
    nepe: float
    acc_strict: float
    acc_relax: float
    outliers: float
    n: int

    FIELDS = ("epe", "nepe", "acc_strict", "acc_relax", "outliers", "n")

    def to_kv(self):
        """Flat key=value lines."""
        return "\n".join(f"{k}={getattr(self, k)!r}" for k in self.FIELDS) + "\n"

    def to_record(self):
        """One machine-readable line: tab-separated key=value pairs."""
        return "\t".join(f"{k}={getattr(self, k)!r}" for k in self.FIELDS)


def _vectors(x):
    if hasattr(x, "vectors"):
        return x.vectors
    return np.asarray(x, dtype=np.float64)


def evaluate(flow_pred, flow_gt):
    """Compare predicted and ground-truth flows row by row.

    Relative errors are undefined where the ground-truth row is zero; such
    rows are dropped from the normalized mean and judged by the absolute
    thresholds alone.
    """
    pred = _vectors(flow_pred)
    gt = _vectors(flow_gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    has_rel = gt_norm > 0
    rel = np.zeros_like(err)
    rel[has_rel] = err[has_rel] / gt_norm[has_rel]

    epe = float(err.mean())
    nepe = float(rel[has_rel].mean()) if has_rel.any() else 0.0
    strict = (err < ACC_STRICT_ABS) | (has_rel & (rel < ACC_STRICT_REL))
    relax = (err < ACC_RELAX_ABS) | (has_rel & (rel < ACC_RELAX_REL))
    outlier = (err > OUTLIER_ABS) | (has_rel & (rel > OUTLIER_REL))
    return MetricsReport(
        epe=epe,
        nepe=nepe,
        acc_strict=float(strict.mean()),
        acc_relax=float(relax.mean()),
        outliers=float(outlier.mean()),
        n=int(err.shape[0]),
    )


def nds(frame, flow, k=DEFAULT_NDS_K):
    """Neighbor distance score: per point, the mean squared flow difference
    to its k nearest neighbors in position space. Returns (scores, mean)."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    pts = frame.positions if isinstance(frame, ParticleFrame) else np.asarray(frame)
    f = _vectors(flow)
    if pts.shape[0] != f.shape[0]:
        raise ShapeError("flow rows must align with the frame")
    if pts.shape[0] < 2:
        raise ShapeError("nds needs at least 2 particles")
    idx = self_excluded_knn(pts, k)
    diffs = f[idx] - f[:, None, :]
    scores = (diffs ** 2).sum(axis=2).mean(axis=1)
    return scores, float(scores.mean())
