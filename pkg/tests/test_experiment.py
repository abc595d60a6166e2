import numpy as np
import pytest

from gcipw.errors import ConfigInvalid
from gcipw.experiment import (
    ALL_METHODS,
    DESK_GRID,
    METHODS_BY_NAME,
    DgpConfig,
    PipelineConfig,
    ReplicationDetail,
    aggregate_metrics,
    build_dgp,
    run_cell,
    run_replication,
)
from gcipw.inference import BootstrapConfig
from gcipw.var import spectral_radius

SMALL = dict(n=30, p=6, T=300, burn_in=50)


def small_config(**kw):
    base = dict(SMALL)
    base.update(kw)
    return DgpConfig(master_seed=5, **base)


def fast_pipeline():
    return PipelineConfig(bootstrap=BootstrapConfig(replications=200))


class TestBuildDgp:
    def test_p_must_be_divisible_by_three(self):
        with pytest.raises(ConfigInvalid):
            DgpConfig(p=20)

    def test_truth_pairs_cross_blocks(self):
        config = DgpConfig(n=10, p=21, T=100, delta=0.1)
        dgp = build_dgp(config, np.random.default_rng(0))
        block = 21 // 3
        assert len(dgp.truth) == 3 * config.active_entries_per_block
        for j1, j2 in dgp.truth:
            assert j1 // block != j2 // block

    def test_null_dgp_has_empty_truth(self):
        dgp = build_dgp(small_config(), np.random.default_rng(1))
        assert dgp.truth == frozenset()

    def test_truth_entries_back_transition_difference(self):
        config = DgpConfig(n=10, p=9, T=100, delta=0.08)
        dgp = build_dgp(config, np.random.default_rng(2))
        w = np.zeros(config.q)
        control = dgp.transition_for(w, 0)
        treated = dgp.transition_for(w, 1)
        diff = treated - control
        for j1, j2 in dgp.truth:
            assert abs(diff[j2, j1]) == pytest.approx(config.delta)
        assert np.count_nonzero(diff) == len(dgp.truth)

    def test_emitted_processes_are_stationary(self):
        config = DgpConfig(n=10, p=9, T=100, delta=0.1,
                           covariate_effect_scale=2.0)
        dgp = build_dgp(config, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        for _ in range(20):
            w = rng.standard_normal(config.q)
            z = int(rng.random() < 0.5)
            A = dgp.transition_for(w, z)
            assert spectral_radius((A,)) < 1.0

    def test_modulation_touches_only_within_block_entries(self):
        config = DgpConfig(n=10, p=9, T=100, delta=0.0)
        dgp = build_dgp(config, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        w = rng.standard_normal(config.q)
        base = dgp.transition_for(np.zeros(config.q), 0)
        mod = dgp.transition_for(w, 0)
        block = 3
        changed = np.argwhere(~np.isclose(base, mod))
        for row, col in changed:
            assert row // block == col // block
            assert row != col


class TestRunReplication:
    def test_same_subject_data_for_all_methods(self):
        det = run_replication(small_config(), ALL_METHODS, fast_pipeline(), 0)
        assert set(det) == {"i", "ii", "iii", "iv"}
        # splitting methods share one outcome panel: identical estimates
        assert det["i"].pair_labels == det["ii"].pair_labels
        assert det["i"].truth == det["iii"].truth

    def test_deterministic_across_runs(self):
        a = run_replication(small_config(), ALL_METHODS, fast_pipeline(), 1)
        b = run_replication(small_config(), ALL_METHODS, fast_pipeline(), 1)
        for name in a:
            assert np.array_equal(a[name].tau_star, b[name].tau_star)
            assert a[name].rejections == b[name].rejections

    def test_null_rejections_are_false_positives(self):
        det = run_replication(small_config(), (METHODS_BY_NAME["i"],),
                              fast_pipeline(), 2)
        d = det["i"]
        assert d.truth == frozenset()
        assert d.false_rejections() == len(d.rejections)


class TestDetailBookkeeping:
    def detail(self, rejections, truth):
        labels = tuple((0, k + 1) for k in range(6))
        return ReplicationDetail(
            method="i", pair_labels=labels, tau_star=np.zeros(6),
            rejections=frozenset(rejections), truth=frozenset(truth),
            n_active=6, stepdown_rejections=len(rejections),
        )

    def test_empty_rejection_set(self):
        d = self.detail([], [(0, 1)])
        assert d.false_rejections() == 0
        assert d.fdp() == 0.0

    def test_mixed_rejections(self):
        truth = [(0, 1), (0, 2), (0, 3), (0, 4)]
        d = self.detail([(0, 1), (0, 6)], truth)
        assert d.true_rejections() == 1
        assert d.false_rejections() == 1
        assert d.fdp() == 0.5
        report = aggregate_metrics([d])
        assert report.power == 0.25
        assert report.fdpex == 1.0  # 0.5 > 0.1

    def test_fwer_counts_replications(self):
        truth = [(0, 1)]
        details = [
            self.detail([(0, 1)], truth),   # only true rejection
            self.detail([(0, 2)], truth),   # one false rejection
            self.detail([], truth),
        ]
        report = aggregate_metrics(details)
        assert report.fwer == pytest.approx(1 / 3)


class TestRunCell:
    def test_reports_and_details(self):
        methods = (METHODS_BY_NAME["i"], METHODS_BY_NAME["iii"])
        reports, details = run_cell(small_config(), methods, fast_pipeline(),
                                    replications=3)
        assert set(reports) == {"i", "iii"}
        assert len(details) == 3
        assert reports["i"].replications == 3

    def test_desk_grid_shape(self):
        assert len(DESK_GRID) == 3
        assert {cell[0] for cell in DESK_GRID} == {0.0, 0.06, 0.10}
