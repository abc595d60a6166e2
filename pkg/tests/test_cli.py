import numpy as np
import yaml

from gcipw.cli import main
from gcipw.io import read_table


def run(args):
    return main([str(a) for a in args])


def write_yaml(path, tree):
    path.write_text(yaml.safe_dump(tree))
    return path


def simulate_small(tmp_path, seed=5, n=40, p=5, T=200):
    tmp_path.mkdir(parents=True, exist_ok=True)
    data = tmp_path / "data"
    cfg = write_yaml(tmp_path / "sim.yaml",
                     {"dgp": {"n": n, "p": p if p % 3 == 0 else 6,
                              "T": T, "burn_in": 100}})
    # p must be divisible by 3 for the block construction; use 6
    assert run(["simulate", "--seed", seed, "--out", data,
                "--config", cfg]) == 0
    return data


class TestSimulate:
    def test_writes_reproducible_dataset(self, tmp_path):
        a = simulate_small(tmp_path / "a")
        b = simulate_small(tmp_path / "b")
        fa = sorted(f.name for f in a.iterdir())
        fb = sorted(f.name for f in b.iterdir())
        assert fa == fb
        for name in fa:
            if name == "config_echo.yaml":  # echoes its own --out path
                continue
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / "config_echo.yaml").exists()

    def test_panel_rows_match_p(self, tmp_path):
        data = simulate_small(tmp_path)
        header, rows = read_table(data / "s0000.csv")
        assert len(rows) == 6

    def test_treatment_rate_tracks_logistic_model(self, tmp_path):
        cfg = write_yaml(tmp_path / "sim.yaml",
                         {"dgp": {"n": 1000, "p": 3, "T": 20, "burn_in": 5}})
        out = tmp_path / "data"
        assert run(["simulate", "--seed", 11, "--out", out,
                    "--config", cfg]) == 0
        _, rows = read_table(out / "covariates.csv")
        z = np.array([int(r[-1]) for r in rows])
        # oracle: marginal treatment probability by numerical integration
        rng = np.random.default_rng(123)
        beta = np.array([0.7, -0.8, 0.5, 0.3, -0.3])
        mean = np.array([0.1, -0.1, 0.0, 0.0, 0.0])
        eta = (rng.standard_normal((200000, 5)) + mean) @ beta
        target = float(np.mean(1.0 / (1.0 + np.exp(-eta))))
        se = np.sqrt(target * (1 - target) / 1000)
        assert abs(z.mean() - target) < 3 * se


class TestDerive:
    def test_pair_count_and_determinism(self, tmp_path):
        data = simulate_small(tmp_path)
        outs = []
        for name in ("d1", "d2"):
            out = tmp_path / name
            assert run(["derive", "--seed", 5, "--out", out,
                        "--dataset", data / "manifest.yaml"]) == 0
            outs.append((out / "outcome_panel.csv").read_bytes())
        assert outs[0] == outs[1]
        header, rows = read_table(tmp_path / "d1" / "outcome_panel.csv")
        assert len(header) - 1 == 6 * 5  # p(p-1) ordered pairs
        assert len(rows) == 40

    def test_failed_pairs_dropped_and_logged(self, tmp_path):
        data = simulate_small(tmp_path)
        # overwrite one subject with constants: every pair fails for it
        lines = ["unit," + ",".join(f"t{t}" for t in range(200))]
        for j in range(6):
            lines.append(f"u{j}," + ",".join(str(float(j)) for _ in range(200)))
        (data / "s0003.csv").write_text("\n".join(lines) + "\n")
        out = tmp_path / "derived"
        assert run(["derive", "--seed", 5, "--out", out,
                    "--dataset", data / "manifest.yaml"]) == 0
        header, rows = read_table(out / "outcome_panel.csv")
        assert len(header) == 1  # all pairs dropped listwise
        _, report = read_table(out / "derivation_report.csv")
        assert {r[0] for r in report} == {"s0003"}
        assert len(report) == 30


class TestEstimate:
    def _derive(self, tmp_path):
        data = simulate_small(tmp_path)
        derived = tmp_path / "derived"
        assert run(["derive", "--seed", 5, "--out", derived,
                    "--dataset", data / "manifest.yaml"]) == 0
        return data, derived

    def test_outputs_and_alpha_monotonicity(self, tmp_path):
        data, derived = self._derive(tmp_path)
        counts = []
        for alpha in (0.05, 0.5):
            cfg = write_yaml(tmp_path / f"est{alpha}.yaml",
                             {"bootstrap": {"replications": 400,
                                            "alpha": alpha}})
            out = tmp_path / f"est_{alpha}"
            assert run(["estimate", "--seed", 5, "--out", out,
                        "--outcomes", derived / "outcome_panel.csv",
                        "--covariates", data / "covariates.csv",
                        "--config", cfg]) == 0
            _, rows = read_table(out / "inference.csv")
            counts.append(sum(int(r[6]) for r in rows))
            assert (out / "propensity_summary.yaml").exists()
            assert (out / "effects.csv").exists()
        assert counts[1] >= counts[0]

    def test_separation_exit_code_and_no_partial_output(self, tmp_path):
        data, derived = self._derive(tmp_path)
        # rewrite treatment to be a deterministic function of covariate 0
        header, rows = read_table(data / "covariates.csv")
        for r in rows:
            r[-1] = "1" if float(r[1]) > 0 else "0"
        body = ",".join(header) + "\n" + "\n".join(",".join(r) for r in rows)
        sep = tmp_path / "sep.csv"
        sep.write_text(body + "\n")
        out = tmp_path / "sep_out"
        code = run(["estimate", "--seed", 5, "--out", out,
                    "--outcomes", derived / "outcome_panel.csv",
                    "--covariates", sep])
        assert code == 4
        assert not (out / "effects.csv").exists()
        assert not (out / "inference.csv").exists()

    def test_known_answer_stability(self, tmp_path):
        # frozen pipeline fixture: same inputs and seed give the same bytes
        data, derived = self._derive(tmp_path)
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            assert run(["estimate", "--seed", 9, "--out", out,
                        "--outcomes", derived / "outcome_panel.csv",
                        "--covariates", data / "covariates.csv"]) == 0
            outs.append((out / "inference.csv").read_bytes())
        assert outs[0] == outs[1]


class TestExitCodes:
    def test_missing_config_is_config_error(self, tmp_path):
        assert run(["derive", "--out", tmp_path / "o",
                    "--config", tmp_path / "nope.yaml"]) == 2

    def test_missing_dataset_key(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", {})
        assert run(["derive", "--out", tmp_path / "o", "--config", cfg]) == 2

    def test_bad_data_is_data_error(self, tmp_path):
        data = simulate_small(tmp_path)
        text = (data / "s0000.csv").read_text().replace("0.", "x.", 1)
        (data / "s0000.csv").write_text(text)
        assert run(["derive", "--out", tmp_path / "o",
                    "--dataset", data / "manifest.yaml"]) == 3


class TestExperimentCommand:
    def test_tiny_grid_resumable_and_echoed(self, tmp_path):
        cfg = write_yaml(tmp_path / "exp.yaml", {
            "dgp": {"n": 40, "p": 6, "T": 200, "burn_in": 50},
            "grid": [[0.0, 40, 6]],
            "replications": 2,
            "methods": ["i", "iii"],
            "bootstrap": {"replications": 200},
        })
        out = tmp_path / "exp"
        assert run(["experiment", "--seed", 3, "--out", out,
                    "--config", cfg]) == 0
        metrics = (out / "metrics.csv").read_bytes()
        _, rows = read_table(out / "metrics.csv")
        assert len(rows) == 2  # one cell x two methods
        assert (out / "config_echo.yaml").exists()
        cell = next(f for f in out.iterdir() if f.name.startswith("metrics_delta"))
        stamp = cell.stat().st_mtime_ns
        assert run(["experiment", "--seed", 3, "--out", out,
                    "--config", cfg]) == 0
        assert cell.stat().st_mtime_ns == stamp  # cell skipped, not rewritten
        assert (out / "metrics.csv").read_bytes() == metrics
