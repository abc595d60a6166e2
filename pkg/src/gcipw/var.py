"""Dense VAR(r) simulation, single-equation OLS fitting, and stationarity checks.

Numerical substrate shared by the connectivity derivation and the simulation
data generator.  Everything here is pure given inputs and a seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientSamples,
    NonStationaryProcess,
    RankDeficient,
)

#: relative rank tolerance for the OLS design matrix (scaled by the
#: largest singular value inside lstsq)
RANK_RTOL = 1e-10

#: default number of discarded initialization steps in simulate_var
DEFAULT_BURN_IN = 500


@dataclass(frozen=True)
class TimeSeriesPanel:
    """One subject's p x T matrix of weakly stationary series.

    Rows are units (e.g. brain regions), columns are time points.  Time
    contiguity is meaningful: sample splits must be contiguous blocks.
    """

    values: np.ndarray
    unit_labels: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise DimensionMismatch("panel values must be a 2-d array")
        p, T = values.shape
        if p < 2 or T < 2:
            raise DimensionMismatch(f"panel needs p >= 2 and T >= 2, got {p} x {T}")
        if not np.all(np.isfinite(values)):
            raise DimensionMismatch("panel contains non-finite entries")
        labels = tuple(self.unit_labels) if self.unit_labels else tuple(
            f"u{j}" for j in range(p)
        )
        if len(labels) != p:
            raise DimensionMismatch("unit_labels length must equal number of rows")
        object.__setattr__(self, "unit_labels", labels)

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class VarSpec:
    """Specification of a single target equation in a VAR(r) system.

    ``lagged_regressors`` is an ordered list of unit indices whose lags
    1..order enter the equation; it may include the target itself.
    """

    target: int
    lagged_regressors: tuple[int, ...]
    order: int = 1
    include_intercept: bool = True
    exogenous: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "lagged_regressors", tuple(self.lagged_regressors))
        if self.order < 1:
            raise DimensionMismatch("VAR order must be >= 1")
        if len(set(self.lagged_regressors)) != len(self.lagged_regressors):
            raise DimensionMismatch("regressor indices must be distinct")

    @property
    def n_coefficients(self) -> int:
        k = len(self.lagged_regressors) * self.order
        if self.include_intercept:
            k += 1
        if self.exogenous is not None:
            k += np.asarray(self.exogenous).shape[1]
        return k


@dataclass(frozen=True)
class VarFit:
    """OLS fit of one VAR equation.

    Coefficient order: intercept first (if present), then lag-major blocks
    (all regressors at lag 1, then lag 2, ...), then exogenous columns.
    """

    coefficients: np.ndarray
    residuals: np.ndarray
    rss: float
    df_model: int
    df_resid: int


@dataclass(frozen=True)
class VarProcess:
    """A stationary VAR(r) data-generating process with Gaussian noise."""

    transition: tuple[np.ndarray, ...]
    intercept: np.ndarray
    noise_cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mats = tuple(np.asarray(a, dtype=float) for a in self.transition)
        if not mats:
            raise DimensionMismatch("at least one transition matrix required")
        p = mats[0].shape[0]
        for a in mats:
            if a.shape != (p, p):
                raise DimensionMismatch("transition matrices must be square, same size")
        object.__setattr__(self, "transition", mats)
        intercept = np.asarray(self.intercept, dtype=float).reshape(-1)
        if intercept.shape != (p,):
            raise DimensionMismatch("intercept length must match dimension")
        object.__setattr__(self, "intercept", intercept)
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.shape != (p, p):
            raise DimensionMismatch("noise_cov must be p x p")
        if np.max(np.abs(cov - cov.T)) > 1e-10:
            raise DimensionMismatch("noise_cov must be symmetric within 1e-10")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise DimensionMismatch("noise_cov must be positive definite") from None
        object.__setattr__(self, "_chol", chol)
        rho = spectral_radius(mats)
        if rho >= 1.0:
            raise NonStationaryProcess(f"companion spectral radius {rho:.6f} >= 1")

    @property
    def dimension(self) -> int:
        return self.transition[0].shape[0]

    @property
    def order(self) -> int:
        return len(self.transition)


def spectral_radius(transition) -> float:
    """Largest eigenvalue modulus of the companion matrix of the lag matrices.

    For a single matrix this is just its spectral radius.
    """
    mats = [np.asarray(a, dtype=float) for a in transition]
    if not mats:
        raise DimensionMismatch("no transition matrices given")
    p = mats[0].shape[0]
    for a in mats:
        if a.ndim != 2 or a.shape != (p, p):
            raise DimensionMismatch("transition matrices must be square of common size")
    r = len(mats)
    if r == 1:
        companion = mats[0]
    else:
        companion = np.zeros((r * p, r * p))
        companion[:p, :] = np.hstack(mats)
        companion[p:, : (r - 1) * p] = np.eye((r - 1) * p)
    eigvals = np.linalg.eigvals(companion)
    return float(np.max(np.abs(eigvals))) if eigvals.size else 0.0


def simulate_var(
    process: VarProcess,
    T: int,
    burn_in: int = DEFAULT_BURN_IN,
    seed: int | np.random.Generator = 0,
) -> TimeSeriesPanel:
    """Simulate T observations from a stationary VAR(r) process.

    The recursion starts at zero, runs burn_in extra steps that are
    discarded, and is deterministic given the seed.
    """
    if T < 1:
        raise DimensionMismatch("T must be >= 1")
    if burn_in < 0:
        raise DimensionMismatch("burn_in must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = process.dimension
    r = process.order
    total = T + burn_in
    noise = rng.standard_normal((total, p)) @ process._chol.T
    out = np.zeros((total + r, p))
    mats = process.transition
    intercept = process.intercept
    for t in range(total):
        row = intercept + noise[t]
        for k in range(r):
            row = row + mats[k] @ out[t + r - 1 - k]
        out[t + r] = row
    return TimeSeriesPanel(out[r + burn_in :].T)


def _build_design(panel, window, spec):
    """Design matrix and response for one lagged equation on a window."""
    a, b = window
    X = panel.values
    r = spec.order
    t_idx = np.arange(a + r, b)
    y = X[spec.target, t_idx]
    cols = []
    if spec.include_intercept:
        cols.append(np.ones(t_idx.size))
    for k in range(1, r + 1):
        for j in spec.lagged_regressors:
            cols.append(X[j, t_idx - k])
    if spec.exogenous is not None:
        exo = np.asarray(spec.exogenous, dtype=float)
        for c in range(exo.shape[1]):
            cols.append(np.broadcast_to(exo[:, c], t_idx.shape)
                        if exo.shape[0] == t_idx.size else np.full(t_idx.size, exo[0, c]))
    design = np.column_stack(cols) if cols else np.empty((t_idx.size, 0))
    return design, y


def fit_var_ols(panel: TimeSeriesPanel, window, spec: VarSpec) -> VarFit:
    """Least-squares fit of a single VAR equation on a contiguous window.

    window is a half-open (start, stop) range of time indices.  Raises
    InsufficientSamples when the window cannot support the requested order
    and regressor count, RankDeficient for a collinear design.
    """
    a, b = window
    if not (0 <= a < b <= panel.n_times):
        raise DimensionMismatch(f"window {window} out of range for T={panel.n_times}")
    t_eff = (b - a) - spec.order
    k = spec.n_coefficients
    if t_eff <= k:
        raise InsufficientSamples(
            f"effective sample size {t_eff} must exceed {k} coefficients"
        )
    design, y = _build_design(panel, window, spec)
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=RANK_RTOL)
    if rank < design.shape[1]:
        raise RankDeficient(
            f"design rank {rank} < {design.shape[1]} columns; shrink the regressor set"
        )
    resid = y - design @ coef
    rss = float(resid @ resid)
    return VarFit(
        coefficients=coef,
        residuals=resid,
        rss=rss,
        df_model=int(design.shape[1]),
        df_resid=int(t_eff - design.shape[1]),
    )
