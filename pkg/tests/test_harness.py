"""Matrix runner, trace round-trips, aggregation, and the CLI verbs."""

import json

import numpy as np
import pytest
from scipy import stats

from mfsearch.cli import main as cli_main
from mfsearch.harness import (
    ConfigError,
    ExperimentMatrix,
    emit_series,
    paired_t_test,
    read_series,
    read_trace,
    run_matrix,
    summarize,
    trace_complete,
    write_trace,
)
from mfsearch.policies import Policy
from mfsearch.simulate import make_ground_truth, run_experiment

from conftest import random_pool


def small_matrix(tmp_path, policies=("greedy", "ug"), seeds=(1, 2, 3),
                 n=40, t=3, ks=(1,)):
    return ExperimentMatrix(
        datasets={"tiny": _tiny_spec(n)},
        policies=list(policies),
        thetas=[0.2],
        ks=list(ks),
        t=t,
        seeds=list(seeds),
        output=tmp_path / "runs",
    )


def _tiny_spec(n):
    from mfsearch.pool import DatasetSpec, SyntheticParams
    return DatasetSpec(SyntheticParams(n=n, dims=3, clusters=3,
                                       prevalence=0.2, seed=5), neighbors=5)


class TestTraceIO:
    def test_round_trip(self, rng, tmp_path):
        pool = random_pool(rng, 20, 3)
        y = np.zeros(20, dtype=np.int8)
        y[:5] = 1
        truth = make_ground_truth(y, 0.2, rng)
        trace = run_experiment(Policy("h-ens"), pool, truth, t=3, k=1, seed=4)
        trace.config["dataset"] = "unit"
        path = tmp_path / "trace.jsonl"
        write_trace(trace, path)
        stored = read_trace(path)
        assert stored.final_utility == trace.final_utility
        assert len(stored.records) == len(trace.records)
        assert stored.cell == ("unit", "h-ens", 0.2, 1)
        np.testing.assert_array_equal(stored.utility_series(),
                                      trace.utility_series())

    def test_incomplete_trace_detected(self, tmp_path):
        path = tmp_path / "partial.jsonl"
        path.write_text(json.dumps({"kind": "config", "policy": "greedy"}) + "\n")
        assert not trace_complete(path)
        with pytest.raises(ValueError, match="incomplete"):
            read_trace(path)


class TestRunMatrix:
    def test_product_of_cells(self, tmp_path):
        matrix = small_matrix(tmp_path)
        paths = run_matrix(matrix)
        assert len(paths) == 2 * 3  # policies x seeds
        assert all(trace_complete(p) for p in paths)

    def test_rerun_is_idempotent(self, tmp_path):
        matrix = small_matrix(tmp_path)
        paths = run_matrix(matrix)
        stamps = {p: p.stat().st_mtime_ns for p in paths}
        run_matrix(matrix)
        assert stamps == {p: p.stat().st_mtime_ns for p in paths}

    def test_resume_after_partial_matches_clean_run(self, tmp_path):
        matrix = small_matrix(tmp_path)
        paths = run_matrix(matrix)
        contents = {p: p.read_bytes() for p in paths}
        # simulate a crash: one trace truncated, one deleted
        victim = paths[0]
        victim.write_bytes(contents[victim][: len(contents[victim]) // 2])
        paths[1].unlink()
        run_matrix(matrix)
        fresh = {p: read_trace(p) for p in paths}
        clean_dir = tmp_path / "clean"
        clean = small_matrix(clean_dir)
        for p, q in zip(run_matrix(clean), paths):
            a, b = read_trace(p), fresh[q]
            assert a.final_utility == b.final_utility
            assert [r["point"] for r in a.records] == [
                r["point"] for r in b.records]

    def test_workers_do_not_change_results(self, tmp_path):
        m1 = small_matrix(tmp_path / "w1")
        m2 = small_matrix(tmp_path / "w2")
        p1 = run_matrix(m1, workers=1)
        p2 = run_matrix(m2, workers=2)
        for a, b in zip(p1, p2):
            ta, tb = read_trace(a), read_trace(b)
            assert [r["point"] for r in ta.records] == [
                r["point"] for r in tb.records]
            assert ta.final_utility == tb.final_utility

    def test_axis_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentMatrix(datasets={}, policies=["greedy"], thetas=[0.1],
                             ks=[1], t=2, seeds=[1], output=tmp_path)
        with pytest.raises(ConfigError):
            small_matrix(tmp_path, seeds=(1, 1))


class TestSummarize:
    def test_mean_and_se(self, rng, tmp_path):
        matrix = small_matrix(tmp_path)
        paths = run_matrix(matrix)
        summary = summarize(paths)
        for row in summary.rows:
            cell = (row.dataset, row.policy, row.theta, row.k)
            utils = np.array(sorted(summary.utilities[cell].values()))
            utils = np.array([summary.utilities[cell][s] for s in sorted(
                summary.utilities[cell])], dtype=float)
            assert row.mean == pytest.approx(utils.mean())
            assert row.se == pytest.approx(utils.std(ddof=1) / np.sqrt(len(utils)))
            assert row.repeats == 3

    def test_two_utilities_hand_check(self, rng, tmp_path):
        # mean 11, se 1 for utilities {10, 12}
        a = np.array([10.0, 12.0])
        assert a.mean() == 11.0
        assert a.std(ddof=1) / np.sqrt(2) == pytest.approx(1.0)

    def test_self_difference_is_zero(self, tmp_path):
        matrix = small_matrix(tmp_path, policies=("greedy", "ug"))
        paths = run_matrix(matrix)
        stored = [read_trace(p) for p in paths]
        doubled = stored + stored
        summary = summarize(stored)
        for (cell_a, cell_b), series in summary.difference_series.items():
            by_seed = {
                s.seed: s.utility_series() for s in stored if s.cell == cell_a}
            other = {
                s.seed: s.utility_series() for s in stored if s.cell == cell_b}
            want = np.mean([by_seed[s] - other[s] for s in sorted(by_seed)],
                           axis=0)
            np.testing.assert_allclose(series, want, atol=1e-12)

    def test_aggregation_permutation_invariant(self, tmp_path):
        matrix = small_matrix(tmp_path)
        paths = run_matrix(matrix)
        s1 = summarize(paths)
        s2 = summarize(list(reversed(paths)))
        assert s1.rows == s2.rows

    def test_mixed_config_cell_rejected(self, tmp_path):
        m1 = small_matrix(tmp_path / "a", t=3)
        m2 = small_matrix(tmp_path / "b", t=2)
        traces = [read_trace(p) for p in run_matrix(m1)]
        traces += [read_trace(p) for p in run_matrix(m2)]
        with pytest.raises(ValueError, match="mixes"):
            summarize(traces)

    def test_pruning_stats_shape(self, tmp_path):
        matrix = small_matrix(tmp_path, policies=("h-ens",), seeds=(1, 2))
        summary = summarize(run_matrix(matrix))
        stats_ = next(iter(summary.pruning.values()))
        assert 0.0 <= stats_["coverage_rate"] <= 1.0
        if stats_["total_pruned_pct"] is not None:
            combined = stats_["total_pruned_pct"] + stats_["partial_pruned_pct"]
            assert combined <= 100.0 + 1e-9


class TestPairedTTest:
    def test_identical_samples(self):
        t, p = paired_t_test([3, 4, 5], [3, 4, 5])
        assert t == 0.0 and p == 1.0

    def test_constant_difference_sentinel(self):
        t, p = paired_t_test(np.arange(20) + 2.0, np.arange(20))
        assert p < 1e-12

    def test_matches_reference_routine(self):
        d = np.array([1, -1, 2, 0, 3, -2, 1, 0, 2, 1], dtype=float)
        a = np.linspace(5, 10, d.size)
        b = a - d
        t, p = paired_t_test(a, b)
        want = stats.ttest_rel(a, b)
        assert t == pytest.approx(want.statistic, abs=1e-6)
        assert p == pytest.approx(want.pvalue, abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            paired_t_test([1, 2], [1, 2, 3])


class TestEmission:
    def test_round_trip(self, tmp_path):
        matrix = small_matrix(tmp_path)
        summary = summarize(run_matrix(matrix))
        files = emit_series(summary, tmp_path / "series")
        doc = json.loads((tmp_path / "series" / "series__summary.json").read_text())
        assert doc["rows"]
        for key, fname in doc["series_files"].items():
            values, ses = read_series(tmp_path / "series" / fname)
            assert values.size > 0
            if key.startswith("utility__"):
                cell = next(c for c in summary.utility_series
                            if key.endswith(_key(c)))
                np.testing.assert_allclose(values,
                                           summary.utility_series[cell][0],
                                           rtol=1e-9)

    def test_difference_series_full_length(self, tmp_path):
        matrix = small_matrix(tmp_path, policies=("greedy", "ug"), t=3, ks=(2,))
        summary = summarize(run_matrix(matrix))
        (pair, series), = summary.difference_series.items()
        assert series.size == 3 + 2 * 3 - 2


def _key(cell):
    dataset, policy, theta, k = cell
    return f"{dataset}__{policy}__theta{theta:g}__k{k}"


class TestCli:
    def write_config(self, tmp_path, workers_note=None):
        cfg = {
            "output": str(tmp_path / "runs"),
            "t": 3,
            "ks": [1],
            "thetas": [0.2],
            "seeds": [1, 2],
            "policies": ["greedy", "ug"],
            "model": {"gamma": 0.05, "K": 5},
            "datasets": [{
                "name": "tiny",
                "synthetic": {"n": 40, "dims": 3, "clusters": 3,
                              "prevalence": 0.2, "seed": 5},
            }],
        }
        path = tmp_path / "config.yaml"
        import yaml
        path.write_text(yaml.safe_dump(cfg))
        return path

    def test_run_and_summarize_and_test(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        assert cli_main(["run", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "traces complete" in out
        assert cli_main(["summarize", str(tmp_path / "runs" / "traces"),
                         "--output", str(tmp_path / "series")]) == 0
        assert cli_main(["test", str(tmp_path / "runs" / "traces"),
                         "--policy-a", "greedy", "--policy-b", "ug"]) == 0
        report = json.loads(capsys.readouterr().out.split("wrote")[-1]
                            .split("\n", 1)[-1])
        assert report["pairs"] == 2

    def test_synth_round_trips_through_loader(self, tmp_path, capsys):
        out_csv = tmp_path / "pool.csv"
        assert cli_main(["synth", "--out", str(out_csv), "--n", "60",
                         "--dims", "3", "--prevalence", "0.2"]) == 0
        from mfsearch.pool import DatasetSpec, load_pool
        pool, labels = load_pool(DatasetSpec(str(out_csv), neighbors=5))
        assert pool.n == 60
        assert labels.sum() >= 8

    def test_config_errors_exit_one(self, tmp_path, capsys):
        assert cli_main(["run", str(tmp_path / "missing.yaml")]) == 1
        bad = tmp_path / "bad.yaml"
        bad.write_text("output: x\n")  # missing required axes
        assert cli_main(["run", str(bad)]) == 1
        assert cli_main(["bogus-verb"]) == 1

    def test_runtime_failure_exits_two(self, tmp_path):
        # config is well-formed but the budget is infeasible for the pool
        cfg = {
            "output": str(tmp_path / "runs"),
            "t": 50, "ks": [0], "thetas": [0.0], "seeds": [1, 2],
            "policies": ["greedy"],
            "datasets": [{"name": "tiny",
                          "synthetic": {"n": 20, "dims": 2, "clusters": 2,
                                        "prevalence": 0.3, "seed": 1}}],
        }
        import yaml
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert cli_main(["run", str(path)]) == 2
