"""Ensemble estimators with uncertainties.

Standard errors come from batch means with floor(sqrt(N)) batches in fixed
path order; acceptance comparisons use 3-standard-error bands unless a
check states otherwise.  Every estimator is a pure function of its inputs,
so results are reproducible given (data, seeds).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .sde import EnsembleResult, PairEnsembleResult


def batch_se(values: np.ndarray) -> np.ndarray:
    """Batch-means standard error of the mean along axis 0.

    Splits the first axis into floor(sqrt(N)) equal batches (truncating the
    remainder) and returns std(batch means)/sqrt(B).
    """
    N = values.shape[0]
    if N < 4:
        return np.full(values.shape[1:], np.nan)
    B = int(np.sqrt(N))
    q = N // B
    batches = values[: B * q].reshape(B, q, *values.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(B)


@dataclass
class EnsembleSummary:
    """Per-time-slice sample moments of a set of observables."""

    times: np.ndarray
    count: int
    names: list
    means: np.ndarray        # (T, d)
    covariances: np.ndarray  # (T, d, d)
    std_errors: np.ndarray   # (T, d): SE of the means
    var_std_errors: np.ndarray  # (T, d): SE of the diagonal variances
    meta: dict = field(default_factory=dict)

    def column(self, name):
        return self.names.index(name)


def estimate_moments(result: EnsembleResult, observables: Sequence,
                     times: Optional[Sequence[float]] = None) -> EnsembleSummary:
    """Unbiased means/covariances of observables over the ensemble.

    `observables` is a sequence of (name, fn) pairs, fn mapping states of
    shape (..., 2n) to scalars elementwise; failed paths are excluded.
    Raises on an empty (or fully failed) ensemble.
    """
    if result.states.shape[0] < 2:
        raise ValueError("need at least 2 paths")
    ok = result.ok
    if not np.any(ok):
        raise ValueError("all paths failed")
    states = result.states[ok]
    if times is None:
        t_idx = np.arange(result.times.shape[0])
    else:
        t_idx = np.array([_time_index(result.times, t) for t in times])
    names = [n for n, _ in observables]
    N = states.shape[0]
    T = len(t_idx)
    d = len(observables)
    vals = np.empty((N, T, d))
    for j, (_, fn) in enumerate(observables):
        vals[:, :, j] = fn(states[:, t_idx])
    means = vals.mean(axis=0)
    centered = vals - means
    cov = np.einsum("ntj,ntk->tjk", centered, centered) / (N - 1)
    se = np.stack([batch_se(vals[:, t]) for t in range(T)])
    var_se = np.stack([batch_se(centered[:, t] ** 2) for t in range(T)])
    meta = dict(result.meta)
    meta["paths_used"] = int(N)
    return EnsembleSummary(result.times[t_idx], N, names, means, cov, se,
                           var_se, meta)


def _time_index(times, t):
    idx = int(np.argmin(np.abs(times - t)))
    if abs(times[idx] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} not on the recorded grid")
    return idx


@dataclass
class DispersionCurve:
    times: np.ndarray
    mean_dx2: np.ndarray
    se_dx2: np.ndarray
    mean_dv2: np.ndarray
    se_dv2: np.ndarray
    pairs: int


def dispersion_curve(result: PairEnsembleResult) -> DispersionCurve:
    """Mean squared separations E|dx|^2, E|dv|^2 over shared-noise pairs."""
    ok = result.failed_step < 0
    if not np.any(ok):
        raise ValueError("all pairs failed")
    a = result.states_a[ok]
    b = result.states_b[ok]
    if a.shape != b.shape:
        raise ValueError("mismatched pair time grids")
    n = a.shape[-1] // 2
    dx2 = np.sum((a[..., :n] - b[..., :n]) ** 2, axis=-1)
    dv2 = np.sum((a[..., n:] - b[..., n:]) ** 2, axis=-1)
    return DispersionCurve(result.times, dx2.mean(axis=0), batch_se(dx2),
                           dv2.mean(axis=0), batch_se(dv2), int(ok.sum()))


@dataclass
class WeakOrderFit:
    slope: float
    intercept: float
    slope_se: float
    ci_halfwidth: float  # 95% from residuals


def weak_order_fit(step_sizes, errors) -> WeakOrderFit:
    """Least-squares slope of log(error) against log(h)."""
    h = np.asarray(step_sizes, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if h.shape != e.shape or h.size < 3:
        raise ValueError("need at least 3 (h, error) pairs")
    if np.any(h <= 0) or np.any(e <= 0):
        raise ValueError("step sizes and errors must be positive")
    x = np.log(h)
    y = np.log(e)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = coef
    n = x.size
    if n > 2:
        resid = y - A @ coef
        s2 = np.sum(resid ** 2) / (n - 2)
        sxx = np.sum((x - x.mean()) ** 2)
        se = np.sqrt(s2 / sxx)
    else:
        se = 0.0
    return WeakOrderFit(float(slope), float(intercept), float(se), float(1.96 * se))
