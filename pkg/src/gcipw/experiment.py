"""Monte Carlo harness: block-structured VAR data generator, the four
comparator methods, replication runner, and metric aggregation.

The generator builds a 3 x 3 block transition matrix whose within-block
entries are modulated per subject by baseline covariates; treatment
activates a sparse set of between-block entries of magnitude delta.  The
same subject-level data feed every method within a replication.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .connectivity import SplitConfig, derive_connectivity, ordered_pairs
from .effects import DEFAULT_VARIANCE_FLOOR, OutcomePanel, estimate_effects
from .errors import ConfigInvalid
from .inference import BootstrapConfig, stepdown_augment
from .propensity import LINKS, LOGISTIC, CovariateTable, fit_propensity
from .var import DEFAULT_BURN_IN, VarProcess


@dataclass(frozen=True)
class DgpConfig:
    n: int = 100
    p: int = 21
    T: int = 1000
    q: int = 5
    beta_true: tuple[float, ...] = (0.7, -0.8, 0.5, 0.3, -0.3)
    covariate_mean: tuple[float, ...] = (0.1, -0.1, 0.0, 0.0, 0.0)
    delta: float = 0.0
    diag_range: tuple[float, float] = (0.72, 0.85)
    offdiag_range: tuple[float, float] = (0.03, 0.08)
    within_block_density: float = 0.25
    covariate_effect_scale: float = 0.4
    confounding_alignment: float = 1.0
    target_spectral_radius: float = 0.95
    active_entries_per_block: int = 3
    burn_in: int = DEFAULT_BURN_IN
    master_seed: int = 0

    def __post_init__(self):
        if self.p % 3 != 0:
            raise ConfigInvalid("p must be divisible by 3 (three equal blocks)")
        if self.delta < 0:
            raise ConfigInvalid("delta must be >= 0")
        if not 0.0 < self.target_spectral_radius < 1.0:
            raise ConfigInvalid("target_spectral_radius must be in (0, 1)")
        if not 0.0 <= self.confounding_alignment <= 1.0:
            raise ConfigInvalid("confounding_alignment must be in [0, 1]")
        if len(self.beta_true) != self.q:
            raise ConfigInvalid("beta_true length must equal q")
        if len(self.covariate_mean) != self.q:
            raise ConfigInvalid("covariate_mean length must equal q")
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        object.__setattr__(
            self, "covariate_mean", tuple(float(m) for m in self.covariate_mean)
        )


@dataclass(frozen=True)
class MethodSpec:
    use_splitting: bool
    propensity_spec: str  # "correct" | "misspecified"
    name: str = ""

    def __post_init__(self):
        if self.propensity_spec not in ("correct", "misspecified"):
            raise ConfigInvalid(f"unknown propensity spec {self.propensity_spec!r}")


METHOD_I = MethodSpec(True, "correct", "i")
METHOD_II = MethodSpec(True, "misspecified", "ii")
METHOD_III = MethodSpec(False, "correct", "iii")
METHOD_IV = MethodSpec(False, "misspecified", "iv")
ALL_METHODS = (METHOD_I, METHOD_II, METHOD_III, METHOD_IV)
METHODS_BY_NAME = {m.name: m for m in ALL_METHODS}


@dataclass(frozen=True)
class PipelineConfig:
    """Per-method analysis knobs shared across replications."""

    split: SplitConfig = field(default_factory=SplitConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    link_kind: str = "logistic"


@dataclass(frozen=True)
class Dgp:
    """One replication's realized data-generating process."""

    base_transition: np.ndarray
    modulation_mask: np.ndarray
    treatment_delta: np.ndarray
    gamma: np.ndarray
    truth: frozenset
    config: DgpConfig

    def transition_for(self, w: np.ndarray, z: int) -> np.ndarray:
        cfg = self.config
        A = self.base_transition.copy()
        scale = 1.0 + cfg.covariate_effect_scale * math.tanh(float(w @ self.gamma))
        A[self.modulation_mask] *= scale
        if z:
            A = A + self.treatment_delta
        rho = _spectral_radius_dense(A)
        if rho > cfg.target_spectral_radius:
            A *= cfg.target_spectral_radius / rho
        return A

    def process_for(self, w: np.ndarray, z: int) -> VarProcess:
        A = self.transition_for(w, z)
        p = A.shape[0]
        return VarProcess((A,), np.zeros(p), np.eye(p))


def _spectral_radius_dense(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _misspecified_columns(beta_true) -> np.ndarray:
    """Covariates kept by the misspecified propensity model.

    The two largest-|beta| covariates are dropped, inducing genuine
    confounding while leaving the model estimable.
    """
    beta = np.asarray(beta_true, dtype=float)
    dropped = np.argsort(-np.abs(beta), kind="stable")[:2]
    return np.array([j for j in range(beta.size) if j not in set(dropped.tolist())])


def build_dgp(config: DgpConfig, rng: np.random.Generator) -> Dgp:
    """Realize the block-structured transition pattern for one replication.

    Within-block structure: diagonal entries Unif(diag_range); off-diagonal
    entries sparse Unif(offdiag_range) with random signs.  Under treatment a
    fixed sparse set of between-block entries is set to magnitude delta; the
    resulting ordered source->target pairs are the truth set.
    """
    p = config.p
    m = p // 3
    A = np.zeros((p, p))
    mod_mask = np.zeros((p, p), dtype=bool)
    lo_d, hi_d = config.diag_range
    lo_o, hi_o = config.offdiag_range
    for b in range(3):
        s = slice(b * m, (b + 1) * m)
        block = np.zeros((m, m))
        block[np.diag_indices(m)] = rng.uniform(lo_d, hi_d, size=m)
        off = ~np.eye(m, dtype=bool)
        present = rng.random((m, m)) < config.within_block_density
        signs = rng.choice((-1.0, 1.0), size=(m, m))
        vals = rng.uniform(lo_o, hi_o, size=(m, m)) * signs
        block[off & present] = vals[off & present]
        A[s, s] = block
        sub = np.zeros((p, p), dtype=bool)
        sub[s, s] = off & present
        mod_mask |= sub

    delta_mat = np.zeros((p, p))
    truth = set()
    if config.delta > 0:
        # one direction per ordered block cycle: targets in block u, sources in v
        for u, v in ((0, 1), (1, 2), (2, 0)):
            rows = rng.integers(u * m, (u + 1) * m, size=config.active_entries_per_block)
            cols = rng.integers(v * m, (v + 1) * m, size=config.active_entries_per_block)
            signs = rng.choice((-1.0, 1.0), size=config.active_entries_per_block)
            for row, col, sign in zip(rows, cols, signs):
                delta_mat[row, col] = sign * config.delta
                truth.add((int(col), int(row)))  # (source j1, target j2)

    gamma = rng.standard_normal(config.q)
    gamma /= np.linalg.norm(gamma)
    # orient gamma so confounding via the dropped covariates has a stable
    # sign across replications (otherwise misspecification bias averages out)
    beta = np.asarray(config.beta_true)
    dropped = np.argsort(-np.abs(beta), kind="stable")[:2]
    if float(gamma[dropped] @ beta[dropped]) < 0:
        gamma = -gamma
    # tilt gamma toward the dropped-covariate direction: alignment 1 makes
    # the modulation load entirely on the covariates the misspecified
    # propensity model cannot adjust for, 0 leaves it random
    a = config.confounding_alignment
    if a > 0.0:
        u = np.zeros(config.q)
        u[dropped] = beta[dropped]
        u /= np.linalg.norm(u)
        gamma = (1.0 - a) * gamma + a * u
        gamma /= np.linalg.norm(gamma)
    return Dgp(
        base_transition=A,
        modulation_mask=mod_mask,
        treatment_delta=delta_mat,
        gamma=gamma,
        truth=frozenset(truth),
        config=config,
    )


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(x) for x in parts)).generate_state(1)[0])


def _simulate_subject_panels(dgp: Dgp, W, Z, rep_index):
    """Batched VAR(1) recursion across subjects, per-subject noise streams."""
    cfg = dgp.config
    n, p, T = cfg.n, cfg.p, cfg.T
    total = T + cfg.burn_in
    A_stack = np.empty((n, p, p))
    for i in range(n):
        A_stack[i] = dgp.transition_for(W[i], int(Z[i]))
    noise = np.empty((n, total, p))
    for i in range(n):
        rng = np.random.default_rng((cfg.master_seed, rep_index, 2, i))
        noise[i] = rng.standard_normal((total, p))
    X = np.zeros((n, p))
    out = np.empty((n, T, p))
    for t in range(total):
        X = np.einsum("npq,nq->np", A_stack, X) + noise[:, t, :]
        if t >= cfg.burn_in:
            out[:, t - cfg.burn_in, :] = X
    return out  # n x T x p


@dataclass(frozen=True)
class ReplicationDetail:
    """One method's outputs within one replication."""

    method: str
    pair_labels: tuple[tuple[int, int], ...]
    tau_star: np.ndarray
    rejections: frozenset
    truth: frozenset
    n_active: int
    stepdown_rejections: int

    def false_rejections(self) -> int:
        return len(self.rejections - self.truth)

    def true_rejections(self) -> int:
        return len(self.rejections & self.truth)

    def fdp(self) -> float:
        return self.false_rejections() / max(len(self.rejections), 1)


def _derive_outcome_panel(panels, split, use_splitting, pair_list):
    """Stack per-subject derivations; pairs failing for any subject drop out."""
    outcomes = []
    dropped = set()
    for i, values in enumerate(panels):
        from .var import TimeSeriesPanel

        outcome = derive_connectivity(
            TimeSeriesPanel(values), split, subject_id=f"s{i}",
            use_splitting=use_splitting,
        )
        outcomes.append(outcome)
        for _, j1, j2, _ in outcome.failures:
            dropped.add((j1, j2))
    kept = [pair for pair in pair_list if pair not in dropped]
    matrix = np.array(
        [[o.entries[pair].value for pair in kept] for o in outcomes]
    )
    return OutcomePanel(matrix, tuple(kept)), dropped


def run_replication(
    config: DgpConfig,
    methods,
    pipeline: PipelineConfig,
    rep_index: int,
) -> dict[str, ReplicationDetail]:
    """Simulate one replication and run every requested method on it."""
    rng = np.random.default_rng((config.master_seed, rep_index, 0))
    dgp = build_dgp(config, rng)
    rng_subjects = np.random.default_rng((config.master_seed, rep_index, 1))
    # a nonzero mean on the covariates the misspecified model drops makes the
    # no-intercept subset fit globally miscalibrated, the confounding
    # mechanism behind the misspecified methods' bias
    W = rng_subjects.standard_normal((config.n, config.q)) + np.asarray(config.covariate_mean)
    beta = np.asarray(config.beta_true)
    prob = 1.0 / (1.0 + np.exp(-(W @ beta)))
    Z = (rng_subjects.random(config.n) < prob).astype(int)
    if Z.sum() == 0 or Z.sum() == config.n:
        # degenerate draw; flip one subject so the estimators are defined
        Z[0] = 1 - Z[0]
    panels = _simulate_subject_panels(dgp, W, Z, rep_index)
    panels = np.transpose(panels, (0, 2, 1))  # n x p x T

    pair_list = ordered_pairs(config.p)
    link = LINKS[pipeline.link_kind]
    need_split = any(m.use_splitting for m in methods)
    need_nosplit = any(not m.use_splitting for m in methods)
    outcome_panels = {}
    if need_split:
        outcome_panels[True] = _derive_outcome_panel(panels, pipeline.split, True, pair_list)[0]
    if need_nosplit:
        outcome_panels[False] = _derive_outcome_panel(panels, pipeline.split, False, pair_list)[0]

    misspec_cols = _misspecified_columns(config.beta_true)
    details = {}
    for mi, method in enumerate(methods):
        outcomes = outcome_panels[method.use_splitting]
        cols = misspec_cols if method.propensity_spec == "misspecified" else np.arange(config.q)
        table = CovariateTable(W[:, cols], Z)
        fit = fit_propensity(table, link)
        effects = estimate_effects(
            outcomes, table, fit, link, variance_floor=pipeline.variance_floor
        )
        boot = replace(
            pipeline.bootstrap,
            seed=_seed_int(config.master_seed, rep_index, 3, mi),
        )
        if effects.active.any():
            result = stepdown_augment(
                effects.tau_star, effects.influence, effects.variance,
                effects.active, boot, pair_labels=outcomes.pair_labels,
            )
            rejections = frozenset(result.rejections)
            stepdown_count = result.stepdown_rejections
        else:
            rejections = frozenset()
            stepdown_count = 0
        details[method.name] = ReplicationDetail(
            method=method.name,
            pair_labels=outcomes.pair_labels,
            tau_star=effects.tau_star,
            rejections=rejections,
            truth=dgp.truth,
            n_active=int(effects.active.sum()),
            stepdown_rejections=stepdown_count,
        )
    return details


@dataclass(frozen=True)
class MetricsReport:
    method: str
    delta: float
    n: int
    p: int
    replications: int
    fwer: float
    power: float
    fdp_mean: float
    fdpex: float
    bias_mean: float
    rmse: float

    def binomial_se(self, rate: float) -> float:
        return math.sqrt(max(rate * (1.0 - rate), 0.0) / self.replications)


def aggregate_metrics(details, d: float = 0.1, method: str = "",
                      delta: float = 0.0, n: int = 0, p: int = 0) -> MetricsReport:
    """Fold one method's per-replication details into rate and error metrics.

    FWER counts replications with at least one false rejection; power is the
    average fraction of truth pairs rejected; bias and RMSE are computed over
    truth-null pairs.
    """
    R = len(details)
    if R < 1:
        raise ConfigInvalid("at least one replication required")
    any_false = [1.0 if det.false_rejections() > 0 else 0.0 for det in details]
    fdps = [det.fdp() for det in details]
    powers = [
        det.true_rejections() / len(det.truth) for det in details if det.truth
    ]
    null_devs = []
    for det in details:
        null_idx = [k for k, pair in enumerate(det.pair_labels) if pair not in det.truth]
        null_devs.append(det.tau_star[null_idx])
    stacked = np.concatenate(null_devs)
    return MetricsReport(
        method=method,
        delta=delta,
        n=n,
        p=p,
        replications=R,
        fwer=float(np.mean(any_false)),
        power=float(np.mean(powers)) if powers else 0.0,
        fdp_mean=float(np.mean(fdps)),
        fdpex=float(np.mean([1.0 if f > d else 0.0 for f in fdps])),
        bias_mean=float(np.mean(stacked)),
        rmse=float(np.sqrt(np.mean(stacked**2))),
    )


def run_cell(
    config: DgpConfig,
    methods,
    pipeline: PipelineConfig,
    replications: int,
    threads: int = 1,
) -> tuple[dict[str, MetricsReport], list[dict[str, ReplicationDetail]]]:
    """Run all replications of one grid cell, optionally in parallel."""
    methods = tuple(methods)
    if threads > 1:
        from joblib import Parallel, delayed

        all_details = Parallel(n_jobs=threads, prefer="processes")(
            delayed(run_replication)(config, methods, pipeline, r)
            for r in range(replications)
        )
    else:
        all_details = [
            run_replication(config, methods, pipeline, r)
            for r in range(replications)
        ]
    reports = {}
    for method in methods:
        per_method = [det[method.name] for det in all_details]
        reports[method.name] = aggregate_metrics(
            per_method,
            d=pipeline.bootstrap.fdp_threshold,
            method=method.name,
            delta=config.delta,
            n=config.n,
            p=config.p,
        )
    return reports, all_details


def run_experiment(
    grid,
    methods,
    base_config: DgpConfig,
    pipeline: PipelineConfig,
    replications: int,
    threads: int = 1,
    cell_callback=None,
):
    """Full factorial over (delta, n, p) cells; failures are isolated per cell.

    cell_callback(config, reports, details), when given, runs after each
    cell (used by the CLI to write results incrementally and to skip
    already-written cells by returning False from a pre-check).
    """
    collected = []
    errors = []
    for delta, n, p in grid:
        config = replace(base_config, delta=float(delta), n=int(n), p=int(p))
        try:
            reports, details = run_cell(config, methods, pipeline, replications, threads)
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            errors.append((config, repr(exc)))
            continue
        collected.append((config, reports))
        if cell_callback is not None:
            cell_callback(config, reports, details)
    return collected, errors


DESK_GRID = ((0.0, 100, 21), (0.06, 100, 21), (0.10, 100, 21))
DESK_REPLICATIONS = 300
PAPER_GRID = tuple(
    (delta, n, 21) for n in (100, 200) for delta in (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
)
PAPER_REPLICATIONS = 1000
