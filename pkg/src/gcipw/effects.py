"""IPW point estimation and influence-function variances for derived outcomes.

The estimated-propensity correction (the Fisher-information term in the
influence function) is what separates these variances from a naive
plug-in; a known-propensity mode that drops it exists for oracle tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import AlignmentMismatch, DimensionMismatch, SingularInformation
from .propensity import CovariateTable, LinkFunction, PropensityFit, link_values

DEFAULT_VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class OutcomePanel:
    """Derived outcomes stacked across subjects: n rows, one column per pair."""

    values: np.ndarray
    pair_labels: tuple[tuple[int, int], ...]
    subject_ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] < 1:
            raise DimensionMismatch("outcome panel must be n x K with K >= 1")
        if not np.all(np.isfinite(values)):
            raise DimensionMismatch("outcome panel contains non-finite entries")
        labels = tuple(tuple(pair) for pair in self.pair_labels)
        if len(labels) != values.shape[1]:
            raise DimensionMismatch("pair_labels length must equal columns")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pair_labels", labels)
        ids = tuple(self.subject_ids) if self.subject_ids else tuple(
            f"s{i}" for i in range(values.shape[0])
        )
        if len(ids) != values.shape[0]:
            raise DimensionMismatch("subject_ids length must equal rows")
        object.__setattr__(self, "subject_ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class EffectEstimates:
    tau_star: np.ndarray
    influence: np.ndarray
    variance: np.ndarray
    active: np.ndarray
    variance_floor: float
    pair_labels: tuple[tuple[int, int], ...] = ()


def _check_alignment(outcomes: OutcomePanel, table: CovariateTable, fit: PropensityFit):
    if outcomes.n != table.n or fit.fitted.shape[0] != table.n:
        raise AlignmentMismatch(
            f"subject counts disagree: outcomes {outcomes.n}, covariates {table.n}, "
            f"propensity {fit.fitted.shape[0]}"
        )
    if outcomes.subject_ids and table.subject_ids:
        if outcomes.subject_ids != table.subject_ids:
            raise AlignmentMismatch("subject id order differs between inputs")


def ipw_weights(z, e):
    """Signed inverse-probability weights: Z/e - (1-Z)/(1-e)."""
    return z / e - (1.0 - z) / (1.0 - e)


def ipw_estimate(
    outcomes: OutcomePanel, table: CovariateTable, fit: PropensityFit
) -> np.ndarray:
    """Columnwise weighted-difference estimator of the effect on each pair."""
    _check_alignment(outcomes, table, fit)
    w = ipw_weights(table.treatment.astype(float), fit.fitted)
    return (w[:, None] * outcomes.values).mean(axis=0)


def influence_functions(
    outcomes: OutcomePanel,
    table: CovariateTable,
    fit: PropensityFit,
    link: LinkFunction,
    tau_star: np.ndarray,
    correct_for_estimation: bool = True,
) -> np.ndarray:
    """Per-subject influence values of the IPW estimator, n x K.

    The leading term is the centered IPW contribution; the second term
    corrects for the estimated propensity model through the inverse Fisher
    information.  With correct_for_estimation=False (known-propensity mode)
    only the leading term remains.
    """
    _check_alignment(outcomes, table, fit)
    z = table.treatment.astype(float)
    Y = outcomes.values
    e = fit.fitted
    tau_star = np.asarray(tau_star, dtype=float)
    if tau_star.shape != (outcomes.n_pairs,):
        raise DimensionMismatch("tau_star length must equal number of pairs")
    leading = ipw_weights(z, e)[:, None] * Y - tau_star[None, :]
    if not correct_for_estimation:
        return leading
    W = table.values
    n = table.n
    eta = W @ fit.beta
    sigma, sigma_prime, omega = link_values(link, eta)
    # G_k = mean_i [Z Y sigma'/sigma^2 + (1-Z) Y sigma'/(1-sigma)^2] W_i
    g_weights = z * sigma_prime / sigma**2 + (1.0 - z) * sigma_prime / (1.0 - sigma) ** 2
    G = (W.T @ (g_weights[:, None] * Y)) / n  # q x K
    try:
        factor = cho_factor(fit.fisher_info, lower=True, check_finite=False)
        solved = cho_solve(factor, G, check_finite=False)  # q x K
    except LinAlgError:
        raise SingularInformation("Fisher information is not positive definite") from None
    score_terms = (z - sigma) * omega  # n
    correction = (score_terms[:, None] * W) @ solved  # n x K
    return leading - correction


def variance_estimates(
    influence: np.ndarray, floor: float = DEFAULT_VARIANCE_FLOOR
) -> tuple[np.ndarray, np.ndarray]:
    """Mean squared influence per column, with the activity flag V > floor."""
    influence = np.asarray(influence, dtype=float)
    if influence.ndim != 2 or influence.shape[0] < 2:
        raise DimensionMismatch("influence matrix must be n x K with n >= 2")
    variance = np.mean(influence**2, axis=0)
    return variance, variance > floor


def estimate_effects(
    outcomes: OutcomePanel,
    table: CovariateTable,
    fit: PropensityFit,
    link: LinkFunction,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    correct_for_estimation: bool = True,
) -> EffectEstimates:
    """Point estimates, influence matrix, variances, and the active set."""
    tau_star = ipw_estimate(outcomes, table, fit)
    influence = influence_functions(
        outcomes, table, fit, link, tau_star,
        correct_for_estimation=correct_for_estimation,
    )
    variance, active = variance_estimates(influence, variance_floor)
    return EffectEstimates(
        tau_star=tau_star,
        influence=influence,
        variance=variance,
        active=active,
        variance_floor=variance_floor,
        pair_labels=outcomes.pair_labels,
    )
