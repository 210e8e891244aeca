"""Reconstruction and confusion-matrix metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..model import BAND_NAMES


@dataclass
class ReconMetrics:
    mae: np.ndarray  # [6]
    rmse: np.ndarray
    cc: np.ndarray

    @property
    def mean_mae(self) -> float:
        return float(self.mae.mean())

    @property
    def mean_rmse(self) -> float:
        return float(self.rmse.mean())

    @property
    def mean_cc(self) -> float:
        return float(self.cc.mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Band", "MAE", "RMSE", "CC"])
        for i, b in enumerate(BAND_NAMES):
            w.writerow([b, f"{self.mae[i]:.6f}", f"{self.rmse[i]:.6f}", f"{self.cc[i]:.6f}"])
        w.writerow(["mean", f"{self.mean_mae:.6f}", f"{self.mean_rmse:.6f}", f"{self.mean_cc:.6f}"])
        return buf.getvalue()


def recon_metrics(x, x_hat) -> ReconMetrics:
    """Per-band MAE, RMSE and Pearson CC over every (sample, day) pair."""
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(x_hat, dtype=np.float64)
    if x.shape != xh.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xh.shape}")
    nb = x.shape[-1]
    a = x.reshape(-1, nb)
    b = xh.reshape(-1, nb)
    if a.shape[0] < 2:
        raise ValueError("correlation needs at least 2 data points per band")
    d = b - a
    mae = np.abs(d).mean(axis=0)
    rmse = np.sqrt((d * d).mean(axis=0))
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    den = np.sqrt((ac * ac).sum(axis=0) * (bc * bc).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        cc = np.where(den > 0, (ac * bc).sum(axis=0) / den, np.where(np.abs(d).max(axis=0) == 0, 1.0, 0.0))
    return ReconMetrics(mae, rmse, np.clip(cc, -1.0, 1.0))


@dataclass
class ConfusionMatrix:
    """Rows are reference classes, columns predictions."""

    counts: np.ndarray
    class_names: tuple[str, ...] | None = None

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def oa(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def _safe(self, num, den):
        return np.divide(num, den, out=np.zeros(self.k), where=den > 0)

    @property
    def pa(self) -> np.ndarray:
        """Producer's accuracy (recall) per reference class."""
        return self._safe(np.diag(self.counts).astype(float), self.counts.sum(axis=1).astype(float))

    @property
    def ua(self) -> np.ndarray:
        """User's accuracy (precision) per predicted class."""
        return self._safe(np.diag(self.counts).astype(float), self.counts.sum(axis=0).astype(float))

    recall = pa
    precision = ua

    @property
    def f1(self) -> np.ndarray:
        p, r = self.ua, self.pa
        return self._safe(2 * p * r, p + r)

    @property
    def macro_precision(self) -> float:
        return float(self.ua.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.pa.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    def to_csv(self) -> str:
        names = self.class_names or tuple(str(i) for i in range(self.k))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Class", *names, "PA"])
        for i, n in enumerate(names):
            w.writerow([n, *self.counts[i].tolist(), f"{100 * self.pa[i]:.2f}%"])
        w.writerow(["UA", *[f"{100 * u:.2f}%" for u in self.ua], f"{100 * self.oa:.2f}%"])
        return buf.getvalue()


def confusion_from_counts(counts, class_names=None) -> ConfusionMatrix:
    c = np.asarray(counts, dtype=np.int64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {c.shape}")
    if np.any(c < 0) or c.sum() == 0:
        raise ValueError("counts must be non-negative with a positive total")
    return ConfusionMatrix(c, None if class_names is None else tuple(class_names))


def confusion_metrics(ref, pred, k: int, class_names=None) -> ConfusionMatrix:
    ref = np.asarray(ref, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if ref.shape != pred.shape:
        raise ValueError("reference and prediction lengths differ")
    for arr, what in ((ref, "reference"), (pred, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{what} label outside [0, {k})")
    counts = np.bincount(ref * k + pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, None if class_names is None else tuple(class_names))
