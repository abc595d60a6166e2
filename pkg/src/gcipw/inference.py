"""Simultaneous inference over active components.

Gaussian multiplier bootstrap for the max statistic, simultaneous
confidence intervals, and a step-down procedure with augmentation that
controls the probability of the false discovery proportion exceeding a
threshold d at level alpha.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, EmptyActiveSet


@dataclass(frozen=True)
class BootstrapConfig:
    replications: int = 2000
    alpha: float = 0.05
    fdp_threshold: float = 0.1
    seed: int = 0
    fresh_multipliers_per_step: bool = True

    def __post_init__(self):
        if self.replications < 100:
            raise ConfigInvalid("bootstrap replications must be >= 100")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigInvalid("alpha must be in (0, 1)")
        if not 0.0 < self.fdp_threshold < 1.0:
            raise ConfigInvalid("fdp_threshold must be in (0, 1)")
        if math.ceil(self.replications * self.alpha) < 1:
            raise ConfigInvalid("B * alpha must round up to at least 1")


@dataclass(frozen=True)
class SimultaneousResult:
    quantile: float
    intervals: dict[tuple[int, int], tuple[float, float]]
    rejections: tuple[tuple[int, int], ...]
    stepdown_rejections: int
    standardized: dict[tuple[int, int], float]


def _empirical_quantile(samples: np.ndarray, alpha: float) -> float:
    """Order statistic at ceil(B (1 - alpha)), inclusive convention."""
    ordered = np.sort(samples)
    b = ordered.size
    index = min(math.ceil(b * (1.0 - alpha)), b) - 1
    return float(ordered[max(index, 0)])


def _max_stat_samples(influence, variance, columns, rng, B):
    """Bootstrap draws of the max absolute standardized sum statistic."""
    n = influence.shape[0]
    h = influence[:, columns] / np.sqrt(variance[columns])[None, :]
    xi = rng.standard_normal((B, n))
    return np.max(np.abs(xi @ h), axis=1) / math.sqrt(n)


def multiplier_bootstrap_quantile(
    influence: np.ndarray,
    variance: np.ndarray,
    active,
    config: BootstrapConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """(1 - alpha)-quantile of the multiplier-bootstrap max statistic.

    active may be a boolean mask or an index array over columns of the
    influence matrix.  Deterministic given config.seed.
    """
    influence = np.asarray(influence, dtype=float)
    variance = np.asarray(variance, dtype=float)
    columns = np.flatnonzero(active) if np.asarray(active).dtype == bool else np.asarray(active, dtype=int)
    if columns.size == 0:
        raise EmptyActiveSet("no active components for the bootstrap")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    samples = _max_stat_samples(influence, variance, columns, rng, config.replications)
    return _empirical_quantile(samples, config.alpha)


def simultaneous_cis(tau_star, variance, active, q: float, n: int):
    """Intervals tau_k -/+ q * sqrt(V_k / n) for each active component k."""
    if q < 0:
        raise ConfigInvalid("quantile must be nonnegative")
    tau_star = np.asarray(tau_star, dtype=float)
    variance = np.asarray(variance, dtype=float)
    columns = np.flatnonzero(active) if np.asarray(active).dtype == bool else np.asarray(active, dtype=int)
    half = q * np.sqrt(variance[columns] / n)
    return {
        int(k): (float(tau_star[k] - hw), float(tau_star[k] + hw))
        for k, hw in zip(columns, half)
    }


def stepdown_augment(
    tau_star: np.ndarray,
    influence: np.ndarray,
    variance: np.ndarray,
    active,
    config: BootstrapConfig,
    pair_labels=None,
) -> SimultaneousResult:
    """Step-down max testing with FDP-exceedance augmentation.

    At each step the largest remaining standardized statistic is compared
    against a bootstrap quantile recomputed over the remaining set (fresh
    multipliers per step, deterministically seeded from config.seed and the
    step index, unless fresh_multipliers_per_step is off).  After the
    step-down terminates with R rejections, the floor(d R / (1 - d))
    largest remaining statistics are added.  Ties break lexicographically
    by pair label.
    """
    tau_star = np.asarray(tau_star, dtype=float)
    influence = np.asarray(influence, dtype=float)
    variance = np.asarray(variance, dtype=float)
    n = influence.shape[0]
    columns = np.flatnonzero(active) if np.asarray(active).dtype == bool else np.asarray(active, dtype=int)
    if columns.size == 0:
        raise EmptyActiveSet("no active components to test")
    if pair_labels is None:
        pair_labels = tuple((k, k) for k in range(tau_star.size))
    labels = {int(k): tuple(pair_labels[k]) for k in columns}
    t_stat = {
        int(k): math.sqrt(n) * abs(tau_star[k]) / math.sqrt(variance[k])
        for k in columns
    }

    # simultaneous CIs use the quantile over the full active set
    rng_full = np.random.default_rng((config.seed, 0))
    q_full = multiplier_bootstrap_quantile(influence, variance, columns, config, rng=rng_full)
    intervals_by_col = simultaneous_cis(tau_star, variance, columns, q_full, n)

    remaining = sorted(columns.tolist(), key=lambda k: labels[k])
    rejected: list[int] = []
    step = 0
    while remaining:
        step += 1
        best = max(remaining, key=lambda k: (t_stat[k], [-c for c in labels[k]]))
        if config.fresh_multipliers_per_step:
            rng = np.random.default_rng((config.seed, step))
        else:
            rng = np.random.default_rng((config.seed, 0))
        q_step = multiplier_bootstrap_quantile(
            influence, variance, np.array(remaining), config, rng=rng
        )
        if t_stat[best] > q_step:
            rejected.append(best)
            remaining.remove(best)
        else:
            break
    stepdown_count = len(rejected)
    d = config.fdp_threshold
    n_augment = math.floor(d * stepdown_count / (1.0 - d))
    if n_augment > 0 and remaining:
        ranked = sorted(
            remaining, key=lambda k: (-t_stat[k], labels[k])
        )
        rejected.extend(ranked[:n_augment])
    return SimultaneousResult(
        quantile=q_full,
        intervals={labels[k]: intervals_by_col[k] for k in columns},
        rejections=tuple(labels[k] for k in rejected),
        stepdown_rejections=stepdown_count,
        standardized={labels[k]: t_stat[k] for k in columns},
    )
