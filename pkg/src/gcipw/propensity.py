"""Treatment-assignment model: MLE of Pr(Z=1 | W) = sigma(W'beta).

Fitting is Newton-Raphson with step-halving for a generic smooth link.
The fitted object exposes everything the influence-function correction
downstream needs: beta, fitted scores, and the Fisher information.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .errors import (
    DimensionMismatch,
    NoConvergence,
    RankDeficientDesign,
    Separation,
)

#: fitted probabilities are kept this far away from exact 0/1
PROB_CLAMP = 1e-12

#: any |linear predictor| beyond this during iteration signals separation
SEPARATION_GUARD = 30.0

MAX_ITERATIONS = 100


@dataclass(frozen=True)
class CovariateTable:
    """Baseline covariates and treatment indicators, one row per subject."""

    values: np.ndarray
    treatment: np.ndarray
    subject_ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        treatment = np.asarray(self.treatment)
        if values.ndim != 2:
            raise DimensionMismatch("covariate values must be 2-d")
        n = values.shape[0]
        if treatment.shape != (n,):
            raise DimensionMismatch("treatment length must match covariate rows")
        if not np.all(np.isin(treatment, (0, 1))):
            raise DimensionMismatch("treatment must be binary 0/1")
        if not np.all(np.isfinite(values)):
            raise DimensionMismatch("covariates contain non-finite entries")
        if treatment.sum() == 0 or treatment.sum() == n:
            raise DimensionMismatch("both treatment arms must be nonempty")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "treatment", treatment.astype(int))
        ids = tuple(self.subject_ids) if self.subject_ids else tuple(
            f"s{i}" for i in range(n)
        )
        if len(ids) != n:
            raise DimensionMismatch("subject_ids length must match rows")
        object.__setattr__(self, "subject_ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def q(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LinkFunction:
    """A smooth strictly increasing map from the real line to (0, 1)."""

    kind: str
    sigma: Callable[[np.ndarray], np.ndarray]
    sigma_prime: Callable[[np.ndarray], np.ndarray]


def _logistic(eta):
    return 1.0 / (1.0 + np.exp(-eta))


def _logistic_prime(eta):
    s = _logistic(eta)
    return s * (1.0 - s)


LOGISTIC = LinkFunction("logistic", _logistic, _logistic_prime)
PROBIT = LinkFunction("probit", stats.norm.cdf, stats.norm.pdf)

LINKS = {"logistic": LOGISTIC, "probit": PROBIT}


def link_values(link: LinkFunction, eta):
    """Elementwise sigma, sigma', and omega = sigma' / (sigma (1 - sigma)).

    For the logistic link omega is identically one.
    """
    eta = np.asarray(eta, dtype=float)
    sigma = np.clip(link.sigma(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    sigma_prime = link.sigma_prime(eta)
    if link.kind == "logistic":
        omega = np.ones_like(sigma)
    else:
        omega = sigma_prime / (sigma * (1.0 - sigma))
    return sigma, sigma_prime, omega


@dataclass(frozen=True)
class PropensityFit:
    beta: np.ndarray
    fitted: np.ndarray
    fisher_info: np.ndarray
    converged: bool
    iterations: int
    link_kind: str = "logistic"


def _log_likelihood(z, sigma):
    return float(np.sum(z * np.log(sigma) + (1 - z) * np.log(1.0 - sigma)))


def fit_propensity(table: CovariateTable, link: LinkFunction = LOGISTIC) -> PropensityFit:
    """Maximum-likelihood fit of the treatment model by Newton iterations.

    Starts from beta = 0 with step-halving to keep the likelihood
    monotonically increasing; convergence is max-norm of the score below
    1e-8 * n.  Divergence of the linear predictor signals separation.
    """
    W = table.values
    z = table.treatment.astype(float)
    n, q = W.shape
    if np.linalg.matrix_rank(W, tol=1e-10 * max(np.linalg.norm(W), 1.0)) < q:
        raise RankDeficientDesign("covariate matrix is rank deficient")
    beta = np.zeros(q)
    tol = 1e-8 * n
    eta = W @ beta
    sigma, sigma_prime, omega = link_values(link, eta)
    ll = _log_likelihood(z, sigma)
    converged = False
    it = 0
    for it in range(1, MAX_ITERATIONS + 1):
        score = W.T @ ((z - sigma) * omega)
        if np.max(np.abs(score)) <= tol:
            converged = True
            it -= 1
            break
        weights = sigma_prime**2 / (sigma * (1.0 - sigma))
        hessian = (W * weights[:, None]).T @ W
        try:
            step = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError:
            raise RankDeficientDesign("singular Hessian in Newton iteration") from None
        # step-halving: accept the first step that improves the likelihood
        scale = 1.0
        for _ in range(40):
            candidate = beta + scale * step
            eta = W @ candidate
            if np.max(np.abs(eta)) > SEPARATION_GUARD:
                raise Separation(
                    "linear predictor diverged; data are (quasi-)separated"
                )
            sigma_c, sp_c, om_c = link_values(link, eta)
            ll_c = _log_likelihood(z, sigma_c)
            if ll_c >= ll - 1e-12:
                beta, sigma, sigma_prime, omega, ll = candidate, sigma_c, sp_c, om_c, ll_c
                break
            scale *= 0.5
        else:
            raise NoConvergence("step-halving failed to improve the likelihood")
    else:
        raise NoConvergence(f"no convergence in {MAX_ITERATIONS} Newton iterations")
    weights = sigma_prime**2 / (sigma * (1.0 - sigma))
    fisher_info = (W * weights[:, None]).T @ W / n
    fisher_info = 0.5 * (fisher_info + fisher_info.T)
    fitted = np.clip(sigma, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return PropensityFit(
        beta=beta,
        fitted=fitted,
        fisher_info=fisher_info,
        converged=converged,
        iterations=it,
        link_kind=link.kind,
    )


def evaluate_propensity(fit: PropensityFit, link: LinkFunction, w) -> float:
    """sigma(w' beta), clamped away from 0 and 1."""
    w = np.asarray(w, dtype=float)
    if w.shape != fit.beta.shape:
        raise DimensionMismatch(
            f"covariate vector length {w.shape} != {fit.beta.shape}"
        )
    sigma = float(link.sigma(float(w @ fit.beta)))
    return float(np.clip(sigma, PROB_CLAMP, 1.0 - PROB_CLAMP))
