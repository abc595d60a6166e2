"""Per-subject derivation of conditional Granger-causality outcomes.

The series is split into two contiguous blocks: the first block picks the
VAR order and per-pair conditioning sets, the second block computes the
F-statistics.  Keeping selection and evaluation on disjoint blocks removes
the selective-inference bias that data-driven model choice would otherwise
introduce.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import (
    DegenerateResidual,
    DimensionMismatch,
    InsufficientSamples,
    SeriesTooShort,
)
from .var import TimeSeriesPanel, VarSpec, fit_var_ols

BIC = "bic"
AIC = "aic"
CROSS_CORRELATION = "cross_correlation"
PARTIAL_CORRELATION = "partial_correlation"


def default_max_conditioning(p: int) -> int:
    return min(5, p - 2)


@dataclass(frozen=True)
class SplitConfig:
    """Knobs for the split / select / evaluate pipeline."""

    split_fraction: float = 0.5
    max_order: int = 3
    max_conditioning: int | None = None
    selection_criterion: str = BIC
    screening_rule: str = CROSS_CORRELATION

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise DimensionMismatch("split_fraction must be in (0, 1)")
        if self.max_order < 1:
            raise DimensionMismatch("max_order must be >= 1")
        if self.selection_criterion not in (BIC, AIC):
            raise DimensionMismatch(f"unknown criterion {self.selection_criterion!r}")
        if self.screening_rule not in (CROSS_CORRELATION, PARTIAL_CORRELATION):
            raise DimensionMismatch(f"unknown screening rule {self.screening_rule!r}")

    def conditioning_cap(self, p: int) -> int:
        if self.max_conditioning is None:
            return default_max_conditioning(p)
        return min(self.max_conditioning, p - 2)


@dataclass(frozen=True)
class ModelChoice:
    """Order and per-pair conditioning sets selected on the first block only."""

    order: int
    conditioning: dict[tuple[int, int], tuple[int, ...]]


@dataclass(frozen=True)
class FStatistic:
    value: float
    df1: int
    df2: int
    p_value: float


@dataclass(frozen=True)
class ConnectivityOutcome:
    """A subject's derived outcome vector: F-statistics over ordered pairs."""

    subject_id: str
    entries: dict[tuple[int, int], FStatistic]
    model: ModelChoice
    failures: tuple[tuple[str, int, int, str], ...] = ()


def granger_df2(block_len: int, r: int, ell: int) -> int:
    """Denominator degrees of freedom: (len - r) - (ell + 2) * r - 1."""
    return (block_len - r) - (ell + 2) * r - 1


def split_panel(panel: TimeSeriesPanel, config: SplitConfig):
    """Contiguous split [0, T0) / [T0, T) with T0 = floor(fraction * T)."""
    T = panel.n_times
    if T < 4 * (config.max_order + 1):
        raise SeriesTooShort(
            f"T={T} too short for max_order={config.max_order}"
        )
    t0 = int(np.floor(config.split_fraction * T))
    return (0, t0), (t0, T)


def _lag_design(values, window, order):
    """Intercept + lag-major lag matrix of every unit on a window.

    Returns (design, targets, column_of(unit, lag)) where design is
    T_eff x (1 + p * order) and targets is T_eff x p (time-aligned).
    """
    a, b = window
    p = values.shape[0]
    t_idx = np.arange(a + order, b)
    cols = [np.ones(t_idx.size)]
    for k in range(1, order + 1):
        cols.append(values[:, t_idx - k].T)
    design = np.column_stack(cols)
    targets = values[:, t_idx].T
    return design, targets


def _column_indices(units, p, order):
    """Design columns (after the intercept) for given units at lags 1..order."""
    idx = [0]
    for k in range(order):
        for j in units:
            idx.append(1 + k * p + j)
    return np.array(idx, dtype=int)


class _GramSolver:
    """RSS of column-subset regressions from one shared Gram matrix.

    Solving tiny normal equations per pair is far cheaper than one lstsq
    per pair; a Cholesky failure (singular subset) falls back to a
    rank-tolerant lstsq on the actual columns.
    """

    def __init__(self, values, window, order):
        self.design, self.targets = _lag_design(values, window, order)
        self.p = values.shape[0]
        self.order = order
        self.t_eff = self.design.shape[0]
        self.gram = self.design.T @ self.design
        self.cross = self.design.T @ self.targets  # (1 + p*r) x p
        self.yty = np.einsum("ij,ij->j", self.targets, self.targets)

    def rss(self, target: int, units) -> tuple[float, bool]:
        """Minimal RSS of target on intercept + lags of units.

        Second element reports whether the design had full rank.
        """
        cols = _column_indices(units, self.p, self.order)
        g = self.gram[np.ix_(cols, cols)]
        c = self.cross[cols, target]
        try:
            f = cho_factor(g, lower=True, check_finite=False)
            beta = cho_solve(f, c, check_finite=False)
            rss = float(self.yty[target] - c @ beta)
            return max(rss, 0.0), True
        except LinAlgError:
            X = self.design[:, cols]
            y = self.targets[:, target]
            beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=1e-10)
            resid = y - X @ beta
            return float(resid @ resid), rank == cols.size

    def rss_batch(self, targets, units_list) -> np.ndarray:
        """Vectorized rss over regressions with equally sized unit sets.

        One batched solve replaces thousands of tiny factorizations; any
        singular or ill-conditioned member falls back to the scalar path.
        """
        t = np.asarray(targets, dtype=int)
        idx = np.array(
            [_column_indices(u, self.p, self.order) for u in units_list]
        )
        g = self.gram[idx[:, :, None], idx[:, None, :]]
        c = self.cross[idx, t[:, None]]
        try:
            beta = np.linalg.solve(g, c[..., None])[..., 0]
        except np.linalg.LinAlgError:
            return np.array(
                [self.rss(int(ti), u)[0] for ti, u in zip(t, units_list)]
            )
        rss = self.yty[t] - np.einsum("ij,ij->i", c, beta)
        # verify the normal equations actually hold; a nearly singular
        # member can pass the LU solve yet return garbage
        err = np.abs(np.einsum("bij,bj->bi", g, beta) - c).max(axis=1)
        scale = np.maximum(np.abs(c).max(axis=1), 1.0)
        bad = ~np.isfinite(rss) | (err > 1e-7 * scale)
        rss = np.maximum(rss, 0.0)
        for i in np.flatnonzero(bad):
            rss[i] = self.rss(int(t[i]), units_list[i])[0]
        return rss


def _f_from_rss(rss_reduced, rss_full, r, df2):
    if rss_full <= 0.0:
        raise DegenerateResidual("full-model RSS is zero; F undefined")
    value = ((rss_reduced - rss_full) / r) / (rss_full / df2)
    if value < 0.0:
        # nesting guarantees nonnegativity; small negatives are cancellation
        value = 0.0
    p_value = float(stats.f.sf(value, r, df2))
    return FStatistic(value=float(value), df1=int(r), df2=int(df2), p_value=p_value)


def conditional_granger_f(
    panel: TimeSeriesPanel,
    second_block,
    j1: int,
    j2: int,
    J,
    r: int,
) -> FStatistic:
    """F-statistic for 'j1 Granger-causes j2 conditional on lags of J'.

    Reduced model: lags of {j2} and J.  Full model: adds lags of j1.  Both
    fitted by OLS on the second block; the statistic compares residual sums
    of squares with df (r, (len - r) - (|J| + 2) r - 1).
    """
    J = tuple(J)
    if j1 == j2:
        raise DimensionMismatch("j1 and j2 must differ")
    if j1 in J or j2 in J:
        raise DimensionMismatch("conditioning set must exclude j1 and j2")
    a, b = second_block
    ell = len(J)
    df2 = granger_df2(b - a, r, ell)
    if df2 < 1:
        raise InsufficientSamples(f"df2={df2} < 1 on block of length {b - a}")
    reduced = VarSpec(target=j2, lagged_regressors=(j2,) + J, order=r)
    full = VarSpec(target=j2, lagged_regressors=(j1, j2) + J, order=r)
    rss_reduced = _rank_tolerant_rss(panel, second_block, reduced)
    rss_full = _rank_tolerant_rss(panel, second_block, full)
    return _f_from_rss(rss_reduced, rss_full, r, df2)


def _rank_tolerant_rss(panel, window, spec) -> float:
    """Minimal RSS, tolerating rank-deficient designs.

    Degenerate columns (zero or collinear regressors) are effectively
    dropped with coefficient zero: lstsq still attains the minimal RSS, so
    the full/reduced nesting inequality is preserved.
    """
    from .var import _build_design

    a, b = window
    t_eff = (b - a) - spec.order
    if t_eff <= spec.n_coefficients:
        raise InsufficientSamples(
            f"effective sample size {t_eff} must exceed {spec.n_coefficients}"
        )
    design, y = _build_design(panel, window, spec)
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=1e-10)
    resid = y - design @ coef
    return float(resid @ resid)


def ordered_pairs(p: int) -> list[tuple[int, int]]:
    return [(j1, j2) for j1 in range(p) for j2 in range(p) if j1 != j2]


def _select_order(values, window, config) -> int:
    """Information-criterion choice of VAR order on the selection block.

    The residual covariance for every candidate order is computed on the
    common sample implied by max_order so criteria are comparable.
    """
    a, b = window
    p = values.shape[0]
    rmax = config.max_order
    best_r, best_ic = 1, np.inf
    for r in range(1, rmax + 1):
        # common window start so all orders see the same observations
        design, targets = _lag_design(values, (a + rmax - r, b), r)
        t_eff = design.shape[0]
        if t_eff <= design.shape[1]:
            break
        coef, _, _, _ = np.linalg.lstsq(design, targets, rcond=1e-10)
        resid = targets - design @ coef
        sigma = (resid.T @ resid) / t_eff
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0:
            continue
        n_params = r * p * p
        if config.selection_criterion == BIC:
            ic = logdet + n_params * np.log(t_eff) / t_eff
        else:
            ic = logdet + 2.0 * n_params / t_eff
        if ic < best_ic:
            best_ic, best_r = ic, r
    return best_r


def _screening_scores(values, window, r, rule):
    """score[k, j] = strength of lagged unit k as a predictor of target j."""
    a, b = window
    p = values.shape[0]
    design, targets = _lag_design(values, window, r)
    lags = design[:, 1:]  # T_eff x (p * r)
    if rule == PARTIAL_CORRELATION:
        # residualize lagged candidates and targets on each target's own lags
        scores = np.zeros((p, p))
        for j in range(p):
            own = _column_indices([j], p, r)
            X = design[:, own]
            beta, _, _, _ = np.linalg.lstsq(X, targets[:, j], rcond=1e-10)
            ry = targets[:, j] - X @ beta
            gamma, _, _, _ = np.linalg.lstsq(X, lags, rcond=1e-10)
            rl = lags - X @ gamma
            num = rl.T @ ry
            den = np.sqrt(np.einsum("ij,ij->j", rl, rl) * float(ry @ ry))
            with np.errstate(invalid="ignore", divide="ignore"):
                corr = np.where(den > 0, num / den, 0.0)
            scores[:, j] = np.abs(corr).reshape(r, p).max(axis=0)
        return scores
    lc = lags - lags.mean(axis=0)
    tc = targets - targets.mean(axis=0)
    num = lc.T @ tc  # (p*r) x p
    den = np.sqrt(np.einsum("ij,ij->j", lc, lc)[:, None]
                  * np.einsum("ij,ij->j", tc, tc)[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(den > 0, num / den, 0.0)
    return np.abs(corr).reshape(r, p, p).max(axis=0)


def select_model(
    panel: TimeSeriesPanel,
    first_block,
    config: SplitConfig,
    pairs=None,
) -> ModelChoice:
    """Data-driven order and conditioning sets, computed from one block only.

    Order minimizes the information criterion of a full-panel VAR; per pair
    (j1, j2) the conditioning set is the up-to-ell_max units with the
    strongest screening score against the target j2, excluding j1 and j2.
    """
    p = panel.n_units
    if pairs is None:
        pairs = ordered_pairs(p)
    values = panel.values
    r = _select_order(values, first_block, config)
    ell_max = config.conditioning_cap(p)
    conditioning = {}
    if ell_max <= 0:
        for pair in pairs:
            conditioning[pair] = ()
        return ModelChoice(order=r, conditioning=conditioning)
    scores = _screening_scores(values, first_block, r, config.screening_rule)
    # descending by score; stable sort breaks ties by smaller unit index
    rank_order = np.argsort(-scores, axis=0, kind="stable")
    for j1, j2 in pairs:
        chosen = []
        for k in rank_order[:, j2]:
            if k != j1 and k != j2:
                chosen.append(int(k))
                if len(chosen) == ell_max:
                    break
        conditioning[(j1, j2)] = tuple(sorted(chosen))
    return ModelChoice(order=r, conditioning=conditioning)


def derive_connectivity(
    panel: TimeSeriesPanel,
    config: SplitConfig,
    subject_id: str = "",
    use_splitting: bool = True,
    pairs=None,
) -> ConnectivityOutcome:
    """Full layer-1 derivation for one subject.

    With use_splitting the model is selected on the first block; without it
    (the no-splitting comparator) selection reuses the second block.  The
    F-statistics are always computed on the second block.  Pairs whose full
    model has zero residual sum of squares are recorded as failures rather
    than entries.
    """
    first, second = split_panel(panel, config)
    selection_block = first if use_splitting else second
    model = select_model(panel, selection_block, config, pairs=pairs)
    if pairs is None:
        pairs = ordered_pairs(panel.n_units)
    r = model.order
    solver = _GramSolver(panel.values, second, r)
    entries = {}
    failures = []
    block_len = second[1] - second[0]
    # group pairs by conditioning-set size so each group batches into one
    # stacked solve; reduced models repeat across sources, so dedupe them
    groups = {}
    for j1, j2 in pairs:
        J = model.conditioning[(j1, j2)]
        df2 = granger_df2(block_len, r, len(J))
        if df2 < 1:
            failures.append((subject_id, j1, j2, "InsufficientSamples"))
            continue
        groups.setdefault(len(J), []).append((j1, j2, J, df2))
    kept = []
    for items in groups.values():
        reduced_index = {}
        reduced_units = []
        for _, j2, J, _ in items:
            key = (j2, J)
            if key not in reduced_index:
                reduced_index[key] = len(reduced_units)
                reduced_units.append((j2,) + J)
        rss_reduced = solver.rss_batch(
            [u[0] for u in reduced_units], reduced_units
        )
        rss_full = solver.rss_batch(
            [j2 for _, j2, _, _ in items],
            [(j1, j2) + J for j1, j2, J, _ in items],
        )
        for i, (j1, j2, J, df2) in enumerate(items):
            rf = rss_full[i]
            # relative threshold: a residual at rounding-noise level of the
            # target's scale is an exact fit for all inferential purposes
            if rf <= solver.yty[j2] * 1e-24:
                failures.append((subject_id, j1, j2, "DegenerateResidual"))
                continue
            rr = rss_reduced[reduced_index[(j2, J)]]
            value = max(((rr - rf) / r) / (rf / df2), 0.0)
            kept.append((j1, j2, value, df2))
    if kept:
        values = np.array([k[2] for k in kept])
        df2s = np.array([k[3] for k in kept])
        p_values = stats.f.sf(values, r, df2s)
        for (j1, j2, value, df2), pv in zip(kept, p_values):
            entries[(j1, j2)] = FStatistic(
                value=float(value), df1=int(r), df2=int(df2), p_value=float(pv)
            )
    return ConnectivityOutcome(
        subject_id=subject_id,
        entries=entries,
        model=model,
        failures=tuple(failures),
    )


def deletion_stability_gap(
    panel: TimeSeriesPanel,
    config: SplitConfig,
    j1: int,
    j2: int,
    L: int,
) -> float:
    """|F(D2) - F(D2 minus its first L observations)| under a common model.

    Test utility backing the deletion-stability property of the split.
    """
    if L < 0:
        raise DimensionMismatch("L must be >= 0")
    first, second = split_panel(panel, config)
    model = select_model(panel, first, config, pairs=[(j1, j2)])
    J = model.conditioning[(j1, j2)]
    r = model.order
    trimmed = (second[0] + L, second[1])
    if granger_df2(trimmed[1] - trimmed[0], r, len(J)) < 1:
        raise InsufficientSamples(
            f"deleting L={L} leaves too few observations in the second block"
        )
    f_full = conditional_granger_f(panel, second, j1, j2, J, r)
    f_trim = conditional_granger_f(panel, trimmed, j1, j2, J, r)
    return abs(f_full.value - f_trim.value)
