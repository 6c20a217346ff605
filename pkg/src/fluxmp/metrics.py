"""Evaluation metrics: sample-wise cosine similarity, imbalance means, and
Pearson correlation with a Student-t two-sided p-value."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .graph import DirectedFactorGraph, FluxMatrix, batch_factor_imbalances

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    l1_imbalance_mean: float
    l2_imbalance_mean: float
    mean_cosine: float | None = None
    per_sample_cosine: np.ndarray | None = None
    n_zero_pred_rows: int = 0
    pearson_r: float | None = None
    pearson_p: float | None = None

    def to_dict(self) -> dict:
        d: dict = {
            "l1_imbalance_mean": self.l1_imbalance_mean,
            "l2_imbalance_mean": self.l2_imbalance_mean,
            "n_zero_pred_rows": self.n_zero_pred_rows,
        }
        if self.mean_cosine is not None:
            d["mean_cosine"] = self.mean_cosine
            d["per_sample_cosine"] = list(self.per_sample_cosine)
        if self.pearson_r is not None:
            d["pearson_r"] = self.pearson_r
            d["pearson_p"] = self.pearson_p
        return d


def mean_cosine(pred: FluxMatrix, truth: FluxMatrix) -> tuple[float, np.ndarray]:
    """Mean and vector of per-sample cosine similarities.

    Zero-norm prediction rows score 0 (collapse must be rankable, not fatal);
    zero-norm truth rows are a caller error.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(truth, axis=1)
    if (tn == 0).any():
        raise ValueError("truth rows must have nonzero norm")
    n_zero = int((pn == 0).sum())
    if n_zero:
        log.warning("%d zero-norm prediction rows scored as cosine 0", n_zero)
    denom = np.where(pn > 0, pn, 1.0) * tn
    cos = np.where(pn > 0, (pred * truth).sum(axis=1) / denom, 0.0)
    return float(cos.mean()), cos


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via Lentz's continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def student_t_sf(t: float, dof: int) -> float:
    """P(T > t) for Student's t with ``dof`` degrees of freedom."""
    p_two = _reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return p_two / 2.0 if t >= 0 else 1.0 - p_two / 2.0


def pearson_with_p(x, y) -> tuple[float, float]:
    """Sample Pearson r and its two-sided t-test p-value (n - 2 dof)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    n = x.size
    if n < 3:
        raise ValueError(f"need at least 3 observations, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("constant input has no defined correlation")
    r = float(xc @ yc) / (sx * sy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * student_t_sf(abs(t), n - 2)
    return r, p


def evaluate(g: DirectedFactorGraph, pred: FluxMatrix, truth: FluxMatrix | None = None) -> EvalReport:
    """Aggregate cosine (when truth is given) and imbalance means into a report."""
    pred = np.asarray(pred, dtype=float)
    imb = batch_factor_imbalances(g, pred)
    report = EvalReport(
        l1_imbalance_mean=float(np.abs(imb).sum(axis=1).mean()) if pred.shape[0] else 0.0,
        l2_imbalance_mean=float(np.sqrt((imb**2).sum(axis=1)).mean()) if pred.shape[0] else 0.0,
    )
    if truth is not None:
        mc, cos = mean_cosine(pred, truth)
        report.mean_cosine = mc
        report.per_sample_cosine = cos
        report.n_zero_pred_rows = int((np.linalg.norm(pred, axis=1) == 0).sum())
        pf, tf = pred.ravel(), np.asarray(truth, dtype=float).ravel()
        if pf.size >= 3 and np.ptp(pf) > 0 and np.ptp(tf) > 0:
            report.pearson_r, report.pearson_p = pearson_with_p(pf, tf)
        else:
            log.warning("pearson skipped: fewer than 3 values or constant input")
    return report
