"""Post-hoc interval calibration and temperature scaling.

The corrective value q is the split-conformal rank quantile of
nonconformity scores on a held-out fold: k-th smallest score with
k = ceil((n+1)(1-alpha)). Direct constructors get an additive q on the
bounds, sampling constructors a multiplicative q on the standard
deviation (replacing the initial z). With k <= n this is the smallest q
achieving >= (1-alpha) coverage on the calibration fold itself; k > n
marks the class unbounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from volpi.pimethods import SamplingStats, VolumeInterval, _finalize_bounds

ADDITIVE = "additive_mL"
MULTIPLICATIVE = "multiplicative"


@dataclass
class CalibrationFactor:
    """Per-foreground-class corrective values (+inf where unbounded)."""

    q: np.ndarray
    mode: str
    alpha: float
    n_cal: int
    unbounded: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        self.unbounded = np.atleast_1d(np.asarray(self.unbounded, dtype=bool))
        if self.mode == MULTIPLICATIVE and (self.q[~self.unbounded] < 0).any():
            raise ValueError("multiplicative q must be nonnegative")
        if self.n_cal < 1:
            raise ValueError("n_cal must be >= 1")


@dataclass
class Temperature:
    tau: float
    nll_before: float
    nll_after: float
    degenerate: bool = False


def conformal_rank(n: int, alpha: float) -> int:
    """k = ceil((n+1)(1-alpha)), guarded against float fuzz."""
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9)


def _rank_quantile(scores: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Columnwise k-th smallest score; (+inf, True) where k exceeds n or
    the k-th score itself is infinite."""
    scores = np.atleast_2d(scores.T).T if scores.ndim == 1 else scores
    n = scores.shape[0]
    k = conformal_rank(n, alpha)
    if k > n:
        q = np.full(scores.shape[1], np.inf)
        return q, np.ones(scores.shape[1], dtype=bool)
    q = np.partition(scores, k - 1, axis=0)[k - 1]
    return q, ~np.isfinite(q)


def _as_columns(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=float)
        out.append(a.reshape(-1, 1) if a.ndim == 1 else a)
    n_rows = {a.shape for a in out}
    if len(n_rows) != 1:
        raise ValueError(f"mismatched record shapes: {sorted(n_rows)}")
    return out


def additive_scores(lowers, uppers, truths) -> np.ndarray:
    """Nonconformity s_i = max(l_i - y_i, y_i - u_i); negative inside."""
    lowers, uppers, truths = _as_columns(lowers, uppers, truths)
    if not np.isfinite(truths).all():
        raise ValueError("truths must be finite")
    return np.maximum(lowers - truths, truths - uppers)


def multiplicative_scores(mus, sigmas, truths) -> np.ndarray:
    """Nonconformity |y - mu| / sigma; sigma = 0 scores 0 on an exact hit
    and +inf otherwise (uncoverable by any finite q)."""
    mus, sigmas, truths = _as_columns(mus, sigmas, truths)
    dev = np.abs(truths - mus)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(sigmas > 0, dev / np.where(sigmas > 0, sigmas, 1.0), np.inf)
    return np.where((sigmas == 0) & (dev == 0), 0.0, scores)


def fit_additive_q(lowers, uppers, truths, alpha: float) -> CalibrationFactor:
    """Conformal additive factor from (lower, upper, truth) records.

    q may be negative when the raw intervals are systematically over-wide.
    Accepts flat arrays (one class) or [n, n_classes-1] columns (fitted
    independently per class).
    """
    scores = additive_scores(lowers, uppers, truths)
    if scores.shape[0] < 1:
        raise ValueError("need at least one calibration record")
    q, unbounded = _rank_quantile(scores, alpha)
    return CalibrationFactor(q, ADDITIVE, alpha, scores.shape[0], unbounded)


def fit_multiplicative_q(mus, sigmas, truths, alpha: float) -> CalibrationFactor:
    """Conformal multiplicative factor from (mu, sigma, truth) records."""
    scores = multiplicative_scores(mus, sigmas, truths)
    if scores.shape[0] < 1:
        raise ValueError("need at least one calibration record")
    q, unbounded = _rank_quantile(scores, alpha)
    return CalibrationFactor(q, MULTIPLICATIVE, alpha, scores.shape[0], unbounded)


def apply_calibration(interval_or_stats, factor: CalibrationFactor) -> VolumeInterval:
    """Rewrite bounds with the fitted q; mean untouched, clamped at zero.

    Additive factors apply to a VolumeInterval ([l-q, u+q]); multiplicative
    factors to SamplingStats ([mu-q*sigma, mu+q*sigma]). Unbounded classes
    become [0, +inf) and keep their warning flag.
    """
    if factor.mode == ADDITIVE:
        if not isinstance(interval_or_stats, VolumeInterval):
            raise ValueError("additive calibration expects a VolumeInterval")
        src = interval_or_stats
        mean = src.mean_mL
        lower = np.where(factor.unbounded, -np.inf, src.lower_mL - factor.q)
        upper = np.where(factor.unbounded, np.inf, src.upper_mL + factor.q)
        violations = src.order_violations
        method_id = src.method_id
    elif factor.mode == MULTIPLICATIVE:
        if not isinstance(interval_or_stats, SamplingStats):
            raise ValueError("multiplicative calibration expects SamplingStats")
        src = interval_or_stats
        mean = src.mu_mL
        with np.errstate(invalid="ignore"):
            spread = np.where(factor.unbounded, np.inf, factor.q * src.sigma_mL)
        lower = mean - spread
        upper = mean + spread
        violations = None
        method_id = src.method_id
    else:
        raise ValueError(f"unknown calibration mode '{factor.mode}'")
    lo, mid, hi = _finalize_bounds(lower, mean, upper)
    return VolumeInterval(
        lo,
        mid,
        hi,
        method_id=method_id,
        calibrated=True,
        order_violations=violations,
        unbounded=factor.unbounded.copy(),
    )


def empirical_coverage(lowers, uppers, truths) -> float:
    """Fraction of truths inside their closed interval [lower, upper]."""
    lowers = np.asarray(lowers, dtype=float)
    uppers = np.asarray(uppers, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if lowers.size == 0:
        raise ValueError("no records")
    return float(np.mean((lowers <= truths) & (truths <= uppers)))


DEFAULT_TEMPERATURE_GRID = tuple(np.round(np.arange(1, 101) * 0.05, 2))  # 0.05 .. 5.0


def _nll(logits: np.ndarray, labels: np.ndarray, tau: float) -> float:
    z = logits / tau
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def fit_temperature(logit_samples, labels, grid=DEFAULT_TEMPERATURE_GRID) -> Temperature:
    """Grid-search the softmax temperature minimizing voxelwise NLL.

    The grid contains 1.0, so the fitted NLL never exceeds the uncalibrated
    one. Single-class label sets are fitted anyway but flagged degenerate.
    """
    logits = np.asarray(logit_samples, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("logit_samples must be a nonempty [n_voxels, n_classes] array")
    if len(labels) != logits.shape[0]:
        raise ValueError("labels length must match logit_samples rows")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("labels out of class range")
    nlls = [_nll(logits, labels, float(tau)) for tau in grid]
    best = int(np.argmin(nlls))
    nll_before = _nll(logits, labels, 1.0)
    return Temperature(
        tau=float(grid[best]),
        nll_before=nll_before,
        nll_after=float(nlls[best]),
        degenerate=bool(np.unique(labels).size < 2),
    )


def apply_temperature(logits: np.ndarray, tau: float) -> np.ndarray:
    """Softmax of logits / tau along the class axis (axis 0)."""
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float32)
