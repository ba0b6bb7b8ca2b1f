"""Estimators: spike spacing, stationary tails, moments, exit-time tails."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InsufficientData

__all__ = [
    "Clock",
    "SpikeRecord",
    "TailFit",
    "MomentSeries",
    "spike_gaps",
    "fit_loglog",
    "fit_window",
    "survival",
    "tail_survival",
    "empirical_moment",
    "exit_tail_rate",
    "ktau_tail",
    "batch_means_se",
    "burn_in",
    "Verdict",
]

MIN_EXCEEDANCES = 50
MIN_GAPS = 20


class Clock(enum.Enum):
    PLAIN = "plain"
    TIME_CHANGED = "timechanged"


@dataclass
class SpikeRecord:
    r_low: float
    R: float
    gap_samples: np.ndarray
    clock: Clock = Clock.PLAIN

    @property
    def mean_gap(self) -> float:
        return float(np.mean(self.gap_samples))

    @property
    def se_gap(self) -> float:
        g = self.gap_samples
        return float(np.std(g, ddof=1) / math.sqrt(g.size)) if g.size > 1 else float("nan")


@dataclass
class TailFit:
    levels: np.ndarray
    survival: np.ndarray
    counts: np.ndarray
    slope: float
    intercept: float
    residual: float
    window: np.ndarray  # boolean mask over levels
    slope_se: float = float("nan")

    def rows(self):
        for R, S, c, w in zip(self.levels, self.survival, self.counts, self.window):
            yield float(R), float(S), int(c), bool(w)


def spike_gaps(data, r_low: float, R: float, times=None, clock: Clock | str = Clock.PLAIN) -> SpikeRecord:
    """Gaps T_{i+1} - T_i between successive up-crossings of R.

    T_i is the first time r >= R after S_{i-1}, the first time r <= r_low
    after T_{i-1}.  ``data`` is an array of radii (with ``times``), a
    Trajectory, or a precomputed gap array from a streaming scan.
    """
    if not r_low < R / 2:
        raise DomainError(f"need r_low < R/2, got r_low={r_low}, R={R}")
    clock = Clock(clock)
    if hasattr(data, "radii"):
        r = data.radii()
        times = data.times
    elif times is None:
        gaps = np.asarray(data, dtype=float)
        if gaps.size < MIN_GAPS:
            raise InsufficientData(f"only {gaps.size} gaps (need {MIN_GAPS})")
        if np.any(gaps <= 0):
            raise DomainError("gaps must be positive")
        return SpikeRecord(r_low, R, gaps, clock)
    else:
        r = np.asarray(data, dtype=float)
    times = np.asarray(times, dtype=float)
    ups = []
    armed = True
    for i, ri in enumerate(r):
        if armed and ri >= R:
            ups.append(times[i])
            armed = False
        elif not armed and ri <= r_low:
            armed = True
    gaps = np.diff(np.asarray(ups))
    if gaps.size < MIN_GAPS:
        raise InsufficientData(f"only {gaps.size} gaps between crossings of R={R} (need {MIN_GAPS})")
    return SpikeRecord(r_low, R, gaps, clock)


def fit_loglog(x, y, window=None):
    """Least squares line through (log x, log y): (slope, intercept, rms residual)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        w = np.asarray(window)
        x, y = x[w], y[w]
    if np.any(x <= 0) or np.any(y <= 0):
        raise DomainError("log-log fit needs positive coordinates")
    if x.size < 3:
        raise DomainError(f"log-log fit needs at least 3 points, got {x.size}")
    lx, ly = np.log(x), np.log(y)
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res**2)))


def _slope_se(x, y):
    lx, ly = np.log(x), np.log(y)
    if lx.size < 3:
        return float("nan")
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - A @ coef
    s2 = res @ res / (lx.size - 2)
    return float(math.sqrt(s2 / np.sum((lx - lx.mean()) ** 2)))


def fit_window(levels, counts, r_low: float | None = None, min_count: int = MIN_EXCEEDANCES):
    """Keep level R iff it has at least ``min_count`` events and R >= 4 r_low."""
    levels = np.asarray(levels, dtype=float)
    w = np.asarray(counts) >= min_count
    if r_low is not None:
        w &= levels >= 4 * r_low
    return w


def survival(samples, levels):
    """Empirical P(X >= R) and exceedance counts on the given levels."""
    x = np.sort(np.asarray(samples, dtype=float))
    levels = np.asarray(levels, dtype=float)
    counts = x.size - np.searchsorted(x, levels, side="left")
    return counts / x.size, counts


def tail_survival(samples, levels, r_low: float | None = None) -> TailFit:
    """Survival of |z| on a level grid with a log-log fit over the window."""
    levels = np.sort(np.asarray(levels, dtype=float))
    S, counts = survival(samples, levels)
    # monotone by construction; a violation would be a bug in survival()
    assert np.all(np.diff(S) <= 0)
    w = fit_window(levels, counts, r_low)
    if not np.any(w) or counts[w][-1] < MIN_EXCEEDANCES:
        raise InsufficientData(f"fewer than {MIN_EXCEEDANCES} exceedances at every fit level")
    if np.count_nonzero(w) < 3:
        raise InsufficientData(f"only {np.count_nonzero(w)} levels in the fit window")
    slope, icpt, res = fit_loglog(levels, S, w)
    return TailFit(levels, S, counts, slope, icpt, res, w, _slope_se(levels[w], S[w]))


class Verdict(str, enum.Enum):
    CONVERGED = "Converged"
    DIVERGING = "Diverging"
    INCONCLUSIVE = "Inconclusive"


@dataclass
class MomentSeries:
    gamma: float
    counts: np.ndarray
    means: np.ndarray
    verdict: Verdict
    ratios: np.ndarray = field(default_factory=lambda: np.empty(0))


def empirical_moment(samples, gamma: float, n0: int | None = None) -> MomentSeries:
    """Running means of |x|^gamma at sample counts n0, 2 n0, 4 n0, ...

    Converged when each of the last three doublings changes the mean by
    less than 10%; Diverging when the mean grows by more than 25% at each
    of them; Inconclusive otherwise.
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    x = np.abs(np.asarray(samples, dtype=float)) ** gamma
    N = x.size
    if n0 is None:
        n0 = max(1, N >> 10)
    counts = []
    c = n0
    while c <= N:
        counts.append(c)
        c *= 2
    counts = np.array(counts, dtype=np.int64)
    csum = np.cumsum(x)
    means = csum[counts - 1] / counts
    ratios = means[1:] / means[:-1]
    last = ratios[-3:]
    if last.size < 3:
        verdict = Verdict.INCONCLUSIVE
    elif np.all(np.abs(last - 1) < 0.10):
        verdict = Verdict.CONVERGED
    elif np.all(last > 1.25):
        verdict = Verdict.DIVERGING
    else:
        verdict = Verdict.INCONCLUSIVE
    return MomentSeries(gamma, counts, means, verdict, ratios)


def exit_tail_rate(tau, upper_fraction: float = 0.2, min_samples: int = 1000) -> float:
    """Exponential rate of P(tau > t) on its upper tail.

    Above the (1 - upper_fraction) quantile u the excesses tau - u are
    exponential with the tail rate, whose maximum-likelihood estimate is
    1 / mean excess.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.size < min_samples:
        raise InsufficientData(f"need at least {min_samples} exit times, got {tau.size}")
    u = np.quantile(tau, 1 - upper_fraction)
    exc = tau[tau > u] - u
    if exc.size < 50:
        raise InsufficientData("too few samples in the upper tail")
    return float(1.0 / exc.mean())


def ktau_tail(K, levels=None, min_samples: int = 10_000) -> TailFit:
    """Survival of the orbit parameter at exit with its log-log slope."""
    K = np.asarray(K, dtype=float)
    if K.size < min_samples:
        raise InsufficientData(f"need at least {min_samples} exit events, got {K.size}")
    if levels is None:
        # from the median up to where 50 exceedances remain
        lo = np.quantile(K, 0.5)
        hi = np.sort(K)[-MIN_EXCEEDANCES]
        levels = np.geomspace(lo, hi, 12)
    return tail_survival(K, levels)


def batch_means_se(x, n_batches: int = 20) -> float:
    """Standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x, dtype=float)
    m = x.size // n_batches
    if m < 1:
        raise InsufficientData("series shorter than the number of batches")
    b = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(b.std(ddof=1) / math.sqrt(n_batches))


def burn_in(samples, r_star: float, fraction: float = 0.1) -> np.ndarray:
    """Drop the first ``fraction`` of a series, or up to its first value <= r_star if later."""
    x = np.asarray(samples)
    start = int(math.ceil(fraction * x.size))
    below = np.flatnonzero(np.abs(x[start:]) <= r_star)
    if below.size == 0:
        raise InsufficientData(f"series never returns below r*={r_star} after burn-in")
    return x[start + below[0]:]
