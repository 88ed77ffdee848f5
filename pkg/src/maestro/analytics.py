"""Seed-level summary statistics, risk metrics and pairwise comparisons.

Undefined quantities (zero spread, no downside observations, a threshold that
is never crossed) are returned as ``None`` rather than inf or NaN. Condition
level functions take per-seed values only, never pooled episodes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

N_PAIRWISE = 3
EXACT_LIMIT = 12


class DataError(ValueError):
    pass


def _sample(values: Sequence[float], name: str = "values", min_n: int = 1) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size < min_n:
        raise DataError(f"{name} needs at least {min_n} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def sample_sd(values: Sequence[float]) -> float:
    arr = _sample(values, min_n=2)
    return float(np.std(arr, ddof=1))


# ------------------------------------------------------------------ per seed


@dataclass(frozen=True)
class SeedSummary:
    seed: int
    mean: float
    sd: float
    best: float
    worst: float
    time_to_target: int | None = None
    time_to_90pct: int | None = None


def final_window_stats(
    returns: Mapping[int, float] | Sequence[float],
    window: tuple[int, int] = (180, 200),
    seed: int = 0,
) -> SeedSummary:
    """Statistics of the per-episode returns inside ``[start, stop)``."""
    start, stop = window
    if stop <= start:
        raise DataError(f"empty window {window}")
    series = dict(returns) if isinstance(returns, Mapping) else dict(enumerate(returns))
    gaps = [ep for ep in range(start, stop) if ep not in series]
    if gaps:
        raise DataError(f"missing episodes in window {window}: {gaps}")
    vals = _sample([series[ep] for ep in range(start, stop)], "window returns")
    return SeedSummary(
        seed=seed,
        mean=float(vals.mean()),
        sd=float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
        best=float(vals.max()),
        worst=float(vals.min()),
    )


def learning_efficiency(
    eval_returns: Sequence[float],
    target: float = 165.0,
    final_mean: float | None = None,
    episodes: Sequence[int] | None = None,
) -> tuple[int | None, int | None]:
    """First episode reaching ``target`` and first reaching 90% of ``final_mean``."""
    vals = list(eval_returns)
    if not vals:
        raise DataError("learning_efficiency needs a non-empty series")
    eps = list(episodes) if episodes is not None else list(range(len(vals)))
    if len(eps) != len(vals):
        raise DataError("episodes and eval_returns differ in length")

    def first(threshold: float) -> int | None:
        return next((e for e, v in zip(eps, vals) if v >= threshold), None)

    t90 = first(0.9 * final_mean) if final_mean is not None else None
    return first(target), t90


# ------------------------------------------------------------- across seeds


def sharpe(cond_mean: float, baseline_mean: float, cond_sd: float) -> float | None:
    if cond_sd <= 0:
        return None
    return (cond_mean - baseline_mean) / cond_sd


def cv_percent(mean: float, sd: float) -> float | None:
    if mean <= 0:
        return None
    return 100.0 * sd / mean


def var_percentile(values: Sequence[float], p: float = 0.05) -> float:
    """Lower-tail percentile at plotting position ``p·(n+1)``.

    Below the first rank the minimum is returned, so for n <= 18 the 5th
    percentile is the worst seed.
    """
    x = np.sort(_sample(values))
    n = x.size
    h = p * (n + 1)
    if h <= 1:
        return float(x[0])
    if h >= n:
        return float(x[-1])
    lo = int(math.floor(h))
    return float(x[lo - 1] + (h - lo) * (x[lo] - x[lo - 1]))


@dataclass(frozen=True)
class RiskMetrics:
    sortino: float | None
    var5: float
    max_drawdown: float
    success_rate: float


def risk_metrics(per_seed_means: Sequence[float], baseline_mean: float) -> RiskMetrics:
    x = _sample(per_seed_means, "per-seed means", min_n=2)
    mean = float(x.mean())
    below = x[x < baseline_mean]
    if below.size:
        downside = math.sqrt(float(np.mean((below - baseline_mean) ** 2)))
        sortino = (mean - baseline_mean) / downside
    else:
        sortino = None
    return RiskMetrics(
        sortino=sortino,
        var5=var_percentile(x, 0.05),
        max_drawdown=float(np.max(np.abs(x - mean))),
        success_rate=float(np.mean(x > baseline_mean)),
    )


@dataclass(frozen=True)
class ConditionSummary:
    condition: str
    seeds: tuple[SeedSummary, ...]
    mean: float
    sd: float
    cv_percent: float | None
    sharpe: float | None
    sortino: float | None
    var5: float
    max_drawdown: float
    success_rate: float
    best: float
    worst: float

    @property
    def range(self) -> float:
        return self.best - self.worst


def summarize_condition(condition: str, seeds: Sequence[SeedSummary], baseline_mean: float) -> ConditionSummary:
    if len(seeds) < 2:
        raise DataError(f"{condition}: need at least 2 seeds, got {len(seeds)}")
    means = np.array([s.mean for s in seeds])
    mean = float(means.mean())
    sd = float(means.std(ddof=1))
    risk = risk_metrics(means, baseline_mean)
    return ConditionSummary(
        condition=condition,
        seeds=tuple(seeds),
        mean=mean,
        sd=sd,
        cv_percent=cv_percent(mean, sd),
        sharpe=sharpe(mean, baseline_mean, sd),
        sortino=risk.sortino,
        var5=risk.var5,
        max_drawdown=risk.max_drawdown,
        success_rate=risk.success_rate,
        best=float(means.max()),
        worst=float(means.min()),
    )


# --------------------------------------------------------------- comparisons


def _u1(x: np.ndarray, y: np.ndarray) -> float:
    diff = x[:, None] - y[None, :]
    return float(np.sum(diff > 0) + 0.5 * np.sum(diff == 0))


def _exact_p(x: np.ndarray, y: np.ndarray, u1: float) -> float:
    pooled = np.concatenate([x, y])
    n, n1 = pooled.size, x.size
    centre = n1 * y.size / 2.0
    observed = abs(u1 - centre)
    hits = total = 0
    for idx in itertools.combinations(range(n), n1):
        mask = np.zeros(n, dtype=bool)
        mask[list(idx)] = True
        total += 1
        if abs(_u1(pooled[mask], pooled[~mask]) - centre) >= observed - 1e-9:
            hits += 1
    return hits / total


def _normal_p(x: np.ndarray, y: np.ndarray, u1: float) -> float:
    n1, n2 = x.size, y.size
    n = n1 + n2
    _, counts = np.unique(np.concatenate([x, y]), return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = (abs(u1 - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2.0)))


def mann_whitney_u(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """(min(U1, U2), two-sided p); exact enumeration when n1 + n2 <= 12."""
    x = _sample(xs, "xs")
    y = _sample(ys, "ys")
    u1 = _u1(x, y)
    u = min(u1, x.size * y.size - u1)
    p = _exact_p(x, y, u1) if x.size + y.size <= EXACT_LIMIT else _normal_p(x, y, u1)
    return u, min(1.0, p)


def cohens_d(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    x = _sample(xs, "xs", min_n=2)
    y = _sample(ys, "ys", min_n=2)
    n1, n2 = x.size, y.size
    pooled = math.sqrt(((n1 - 1) * x.var(ddof=1) + (n2 - 1) * y.var(ddof=1)) / (n1 + n2 - 2))
    if pooled == 0:
        return None
    return float(x.mean() - y.mean()) / pooled


def bootstrap_ci(
    xs: Sequence[float], resamples: int = 10_000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile interval of resampled means."""
    x = _sample(xs, "xs", min_n=2)
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def bootstrap_diff_ci(
    xs: Sequence[float], ys: Sequence[float], resamples: int = 10_000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile interval of mean(xs*) - mean(ys*) with independent resampling."""
    x = _sample(xs, "xs", min_n=2)
    y = _sample(ys, "ys", min_n=2)
    rng = np.random.default_rng(seed)
    mx = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    my = y[rng.integers(0, y.size, size=(resamples, y.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(mx - my, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def bonferroni(p: float, comparisons: int = N_PAIRWISE) -> float:
    return min(1.0, p * comparisons)


@dataclass(frozen=True)
class ComparisonReport:
    label: str
    u: float
    p: float
    p_adjusted: float
    exact: bool
    cohens_d: float | None
    ci_low: float
    ci_high: float


def compare(
    label: str, xs: Sequence[float], ys: Sequence[float], *, seed: int = 0, comparisons: int = N_PAIRWISE
) -> ComparisonReport:
    u, p = mann_whitney_u(xs, ys)
    lo, hi = bootstrap_diff_ci(xs, ys, seed=seed)
    return ComparisonReport(
        label=label,
        u=u,
        p=p,
        p_adjusted=bonferroni(p, comparisons),
        exact=len(xs) + len(ys) <= EXACT_LIMIT,
        cohens_d=cohens_d(xs, ys),
        ci_low=lo,
        ci_high=hi,
    )


def mean_band(curves: Sequence[Sequence[float]], z: float = 1.96) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Across-seed mean and normal 95% band per point (zero width for one seed)."""
    arr = np.asarray(curves, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DataError("curves must be a non-empty 2-D array (seeds x points)")
    mean = arr.mean(axis=0)
    if arr.shape[0] < 2:
        return mean, mean.copy(), mean.copy()
    half = z * arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])
    return mean, mean - half, mean + half
