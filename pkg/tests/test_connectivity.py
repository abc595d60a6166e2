import numpy as np
import pytest
from scipy import stats

from gcipw.connectivity import (
    SplitConfig,
    conditional_granger_f,
    default_max_conditioning,
    deletion_stability_gap,
    derive_connectivity,
    granger_df2,
    ordered_pairs,
    select_model,
    split_panel,
)
from gcipw.errors import DimensionMismatch, SeriesTooShort
from gcipw.var import TimeSeriesPanel, VarProcess, simulate_var


def diag_process(p, coef=0.4):
    return VarProcess((np.eye(p) * coef,), np.zeros(p), np.eye(p))


class TestSplit:
    def test_floor_convention(self):
        panel = TimeSeriesPanel(np.random.default_rng(0).standard_normal((2, 101)))
        first, second = split_panel(panel, SplitConfig())
        assert first == (0, 50)
        assert second == (50, 101)

    def test_too_short(self):
        panel = TimeSeriesPanel(np.random.default_rng(0).standard_normal((2, 10)))
        with pytest.raises(SeriesTooShort):
            split_panel(panel, SplitConfig(max_order=5))

    def test_df2_formula(self):
        assert granger_df2(500, 1, 0) == 496
        assert granger_df2(1000, 2, 5) == (1000 - 2) - 7 * 2 - 1


class TestSelectModel:
    def test_screening_finds_the_driver(self):
        # unit 2 drives unit 1 strongly, unit 0 independent
        A = np.array([
            [0.4, 0.0, 0.0],
            [0.0, 0.4, 0.6],
            [0.0, 0.0, 0.4],
        ])
        process = VarProcess((A,), np.zeros(3), np.eye(3))
        panel = simulate_var(process, 1200, seed=21)
        config = SplitConfig(max_conditioning=1)
        first, _ = split_panel(panel, config)
        model = select_model(panel, first, config)
        assert model.conditioning[(0, 1)] == (2,)
        # oracle: exhaustive screening score comparison on the same block
        from gcipw.connectivity import _screening_scores

        scores = _screening_scores(panel.values, first, model.order,
                                   config.screening_rule)
        assert scores[2, 1] > scores[0, 1]

    def test_zero_capacity(self):
        panel = TimeSeriesPanel(np.random.default_rng(1).standard_normal((4, 200)))
        config = SplitConfig(max_conditioning=0)
        model = select_model(panel, (0, 100), config)
        assert all(J == () for J in model.conditioning.values())

    def test_cap_default(self):
        assert default_max_conditioning(21) == 5
        assert default_max_conditioning(4) == 2

    def test_bic_prefers_order_one_for_white_noise(self):
        hits = 0
        for seed in range(200):
            panel = simulate_var(diag_process(2, 0.0), 400, burn_in=10, seed=seed)
            config = SplitConfig(max_order=4)
            model = select_model(panel, (0, 400), config)
            hits += model.order == 1
        assert hits >= 180

    def test_conditioning_excludes_pair(self):
        panel = simulate_var(diag_process(6), 600, seed=5)
        config = SplitConfig()
        model = select_model(panel, (0, 300), config)
        for (j1, j2), J in model.conditioning.items():
            assert j1 not in J and j2 not in J
            assert len(J) <= config.conditioning_cap(6)


class TestConditionalGrangerF:
    def test_zero_source_gives_zero_f(self):
        rng = np.random.default_rng(3)
        values = rng.standard_normal((3, 400))
        values[0] = 0.0
        panel = TimeSeriesPanel(values)
        fs = conditional_granger_f(panel, (200, 400), 0, 1, (), 1)
        assert fs.value == 0.0
        assert fs.p_value == 1.0

    def test_detects_strong_cross_coefficient(self):
        A = np.array([[0.4, 0.0], [0.5, 0.4]])
        process = VarProcess((A,), np.zeros(2), np.eye(2))
        hits = 0
        for seed in range(100):
            panel = simulate_var(process, 2000, burn_in=50, seed=seed)
            fs = conditional_granger_f(panel, (1000, 2000), 0, 1, (), 1)
            hits += fs.p_value < 0.001
        assert hits >= 99

    def test_null_p_values_uniform(self):
        process = diag_process(2)
        pvals = []
        for seed in range(2000):
            panel = simulate_var(process, 1000, burn_in=50, seed=seed)
            fs = conditional_granger_f(panel, (500, 1000), 0, 1, (), 1)
            assert fs.df2 == 496
            pvals.append(fs.p_value)
        ks = stats.kstest(pvals, "uniform").statistic
        assert ks < 0.04

    def test_rejects_bad_pair_arguments(self):
        panel = TimeSeriesPanel(np.random.default_rng(0).standard_normal((3, 100)))
        with pytest.raises(DimensionMismatch):
            conditional_granger_f(panel, (50, 100), 1, 1, (), 1)
        with pytest.raises(DimensionMismatch):
            conditional_granger_f(panel, (50, 100), 0, 1, (1,), 1)


class TestDeriveConnectivity:
    def test_white_noise_panel_is_quiet(self):
        quiet = 0
        for seed in range(20):
            panel = simulate_var(diag_process(3, 0.0), 1000, burn_in=10, seed=seed)
            out = derive_connectivity(panel, SplitConfig(), subject_id=f"s{seed}")
            assert len(out.entries) == 6
            quiet += all(fs.p_value > 0.01 for fs in out.entries.values())
        assert quiet >= 18

    def test_constant_panel_all_failures(self):
        values = np.ones((3, 200))
        values[1] = 2.0
        values[2] = -1.0
        panel = TimeSeriesPanel(values)
        out = derive_connectivity(panel, SplitConfig(), subject_id="flat")
        assert out.entries == {}
        assert len(out.failures) == 6
        assert all(code == "DegenerateResidual" for *_, code in out.failures)

    def test_deterministic(self):
        panel = simulate_var(diag_process(4), 600, seed=8)
        a = derive_connectivity(panel, SplitConfig(), subject_id="s")
        b = derive_connectivity(panel, SplitConfig(), subject_id="s")
        assert a.model == b.model
        assert a.entries == b.entries

    def test_f_nonnegative_and_df2_consistent(self):
        panel = simulate_var(diag_process(5), 800, seed=13)
        config = SplitConfig()
        out = derive_connectivity(panel, config)
        first, second = split_panel(panel, config)
        for (j1, j2), fs in out.entries.items():
            assert fs.value >= 0.0
            ell = len(out.model.conditioning[(j1, j2)])
            assert fs.df2 == granger_df2(second[1] - second[0], out.model.order, ell)

    def test_split_hygiene(self):
        panel = simulate_var(diag_process(3), 800, seed=17)
        config = SplitConfig()
        first, second = split_panel(panel, config)
        model = select_model(panel, first, config)

        mutated = panel.values.copy()
        mutated[:, second[0] + 5] += 3.0  # touch only the second block
        assert select_model(TimeSeriesPanel(mutated), first, config) == model

        mutated = panel.values.copy()
        mutated[:, 5] += 3.0  # touch only the first block
        pair = (0, 1)
        before = conditional_granger_f(panel, second, 0, 1,
                                       model.conditioning[pair], model.order)
        after = conditional_granger_f(TimeSeriesPanel(mutated), second, 0, 1,
                                      model.conditioning[pair], model.order)
        assert before == after

    @pytest.mark.xfail(
        reason="screening candidates exclude the tested pair and order is "
        "picked from the whole panel, so model choice is essentially "
        "independent of any single pair statistic under a diagonal null; "
        "no measurable per-pair anti-conservativeness of the no-splitting "
        "comparator was found at any probed overfitting intensity",
        strict=False,
    )
    def test_no_splitting_inflates_null_statistics(self):
        # overfitting-prone setup: generous conditioning on a short block
        config = SplitConfig(max_conditioning=6, max_order=2)
        split_p, nosplit_p = [], []
        for seed in range(120):
            panel = simulate_var(diag_process(9, 0.3), 240, burn_in=50, seed=seed)
            a = derive_connectivity(panel, config, use_splitting=True,
                                    pairs=[(0, 1)])
            b = derive_connectivity(panel, config, use_splitting=False,
                                    pairs=[(0, 1)])
            if (0, 1) in a.entries and (0, 1) in b.entries:
                split_p.append(a.entries[(0, 1)].p_value)
                nosplit_p.append(b.entries[(0, 1)].p_value)
        res = stats.mannwhitneyu(nosplit_p, split_p, alternative="less")
        assert res.pvalue < 0.05


class TestDeletionStability:
    def test_zero_deletion_zero_gap(self):
        panel = simulate_var(diag_process(2), 800, seed=4)
        gap = deletion_stability_gap(panel, SplitConfig(), 0, 1, 0)
        assert gap == 0.0

    def test_gap_shrinks_with_block_length(self):
        process = diag_process(2)
        medians = []
        for total in (1000, 4000):
            gaps = []
            block = total // 2
            L = int(np.sqrt(block))
            for seed in range(200):
                panel = simulate_var(process, total, burn_in=50, seed=seed)
                gaps.append(deletion_stability_gap(panel, SplitConfig(), 0, 1, L))
            medians.append(np.median(gaps))
        assert medians[1] < medians[0]

    def test_maximal_deletion_raises(self):
        from gcipw.errors import InsufficientSamples

        panel = simulate_var(diag_process(2), 200, seed=6)
        with pytest.raises(InsufficientSamples):
            deletion_stability_gap(panel, SplitConfig(), 0, 1, 98)


def test_ordered_pairs_count():
    assert len(ordered_pairs(5)) == 20
    assert (3, 3) not in ordered_pairs(5)
