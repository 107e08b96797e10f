"""Harness tests: scenario validation, metrics oracles, runners, plots."""

import math
from pathlib import Path

import numpy as np
import pytest

from bbrtune.errors import ConfigError, ScenarioError
from bbrtune.harness import (
    MetricsReport,
    cdf,
    compare_reports,
    convergence_times,
    estimation_accuracy,
    evaluate,
    load_scenario,
    peak_rtt,
    train,
    validate_scenario,
)
from bbrtune.harness.plots import cdf_plot, emit_plots, line_plot
from bbrtune.harness.scenario import RandomEventConfig, generate_random_events

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def quick_scenario(**over):
    raw = {
        "name": "quick",
        "seed": 3,
        "duration_s": 24.0,
        "link": {"capacity_mbps": 10.0, "rtt_ms": 40.0},
        "flows": [{"id": 0, "controlled": True}],
        "random_events": {
            "interval_s": [2.0, 6.0],
            "capacity_mbps": [2.0, 10.0],
            "rtt_ms": [10.0, 50.0],
            "kinds": ["set_bandwidth", "set_latency"],
        },
        "env": {"t1_ms": 100, "t2_s": 2.0,
                "reward": {"normalizer_mbps": 10.0}},
        "training": {"iters": 3, "hyper": {"n_actors": 1, "horizon": 8,
                                           "minibatch_size": 8, "epochs": 2}},
    }
    raw.update(over)
    return validate_scenario(raw)


class TestScenario:
    def test_shipped_scenarios_validate(self):
        for name in ("fig2a", "fig2b", "train_random", "eval_random",
                     "multiflow", "workload_slow_intervals"):
            spec = load_scenario(SCENARIOS / f"{name}.yaml")
            assert spec.name == name

    def test_missing_file_raises(self):
        with pytest.raises(ScenarioError):
            load_scenario("/does/not/exist.yaml")

    def test_schema_rejects_unknown_keys(self):
        with pytest.raises(ScenarioError):
            validate_scenario({"name": "x", "seed": 0, "duration_s": 1.0,
                               "link": {"capacity_mbps": 1, "rtt_ms": 1},
                               "bogus": True})

    def test_schema_rejects_bad_types(self):
        with pytest.raises(ScenarioError) as err:
            validate_scenario({"name": "x", "seed": "one", "duration_s": 1.0,
                               "link": {"capacity_mbps": 1, "rtt_ms": 1}})
        assert "seed" in str(err.value)

    def test_buffer_defaults_to_twice_bdp(self):
        spec = quick_scenario()
        bdp = 10e6 * 0.040 / 8
        assert spec.link.buffer_bytes == int(2 * bdp)

    def test_event_generator_deterministic(self):
        cfg = RandomEventConfig(interval_s=(1.0, 5.0), kinds=("set_bandwidth",
                                                              "set_latency"))
        a = generate_random_events(cfg, 60.0, np.random.default_rng(5))
        b = generate_random_events(cfg, 60.0, np.random.default_rng(5))
        assert a == b
        assert all(ev.at_us < 60_000_000 for ev in a)

    def test_event_generator_background_flows_balanced(self):
        cfg = RandomEventConfig(interval_s=(0.5, 1.0),
                                kinds=("flow_join", "flow_leave"),
                                max_background_flows=2)
        events = generate_random_events(cfg, 120.0, np.random.default_rng(6))
        active = 0
        for ev in events:
            active += 1 if ev.kind.value == "flow_join" else -1
            assert 0 <= active <= 2

    def test_world_factory_builds_flows_and_events(self):
        spec = load_scenario(SCENARIOS / "multiflow.yaml")
        world = spec.build_world(actor=0, episode=0)
        assert world.controlled == [0, 1, 2, 3, 4]
        assert world.sim.active_flow_ids() == [0]  # others join later

    def test_config_hash_stable_and_seed_sensitive(self):
        a, b = quick_scenario(), quick_scenario()
        assert a.config_hash() == b.config_hash()
        assert a.with_seed(99).seed == 99


class TestMetrics:
    def test_cdf_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        samples = list(rng.normal(size=257))
        points = cdf(samples)
        xs = [x for x, _ in points]
        ys = [y for _, y in points]
        assert xs == sorted(samples)
        assert ys == [i / 257 for i in range(1, 258)]
        assert all(0 < y <= 1 for y in ys)

    @staticmethod
    def row(t_us, fid, rate=5e6, srtt=50_000.0, rtprop=40_000.0, truth=40_000,
            cap=10e6):
        return (t_us, fid, rate, srtt, 0.0, 10_000, rate, 0, rate, rtprop,
                1.0, 2.0, "ProbeBW", truth, cap)

    def test_estimation_accuracy_identity(self):
        rows = [self.row(t * 100_000, 0) for t in range(1, 51)]
        assert estimation_accuracy(rows) == 1.0

    def test_estimation_accuracy_always_off(self):
        rows = [self.row(t * 100_000, 0, rtprop=400_000.0) for t in range(1, 51)]
        assert estimation_accuracy(rows) == 0.0

    def test_estimation_accuracy_stale_fraction(self):
        """Stale estimate 10 s of a 25 s trace caps accuracy at 0.6."""
        rows = []
        for t in range(1, 251):  # 25 s at 100 ms
            stale = 100 < t <= 200  # 10 s stale stretch
            rows.append(self.row(t * 100_000, 0,
                                 rtprop=40_000.0,
                                 truth=400_000 if stale else 40_000))
        assert estimation_accuracy(rows) <= 0.6

    def test_estimation_accuracy_empty_errors(self):
        with pytest.raises(ValueError):
            estimation_accuracy([])

    def test_peak_rtt(self):
        rows = [self.row(1, 0, srtt=45_000.0), self.row(2, 0, srtt=120_000.0)]
        assert peak_rtt(rows) == pytest.approx(120.0)

    def test_convergence_single_flow_at_capacity(self):
        rows = [self.row(t * 100_000, 0, rate=10e6) for t in range(1, 101)]
        times = convergence_times(rows, [0.0], tolerance=0.1, hold_s=2.0)
        assert times[0] <= 1.2  # limited only by smoothing warmup

    def test_convergence_exact_constructed_trace(self):
        """Flow converges to fair share exactly 5 s after the event."""
        rows = []
        for t in range(1, 301):  # 30 s
            t_us = t * 100_000
            rate = 4e6 if t_us < 15_000_000 else 10e6  # fair share 10 after
            rows.append(self.row(t_us, 0, rate=rate))
        times = convergence_times(rows, [10.0], tolerance=0.1, hold_s=2.0,
                                  smooth_s=0.1)
        assert times[0] == pytest.approx(5.0, abs=0.2)

    def test_convergence_never_is_inf(self):
        rows = [self.row(t * 100_000, 0, rate=1e6) for t in range(1, 101)]
        times = convergence_times(rows, [0.0])
        assert math.isinf(times[0])

    def test_report_csv_round_trip(self, tmp_path):
        report = MetricsReport(
            scenario_name="x", scenario_hash="h", seed=3, mode="ppo",
            estimation_accuracy=0.62, accuracy_threshold_ms=5.0,
            peak_rtt_ms=88.5, mean_throughput_bps=5.2e6, mean_reward=0.41,
            rtt_sqerr_cdf=[(0.0, 0.5), (25.0, 1.0)],
            throughput_cdf=[(1e6, 0.25), (5e6, 1.0)],
            convergence_events_s=[5.0, 10.0],
            convergence_times_s=[2.5, math.inf],
            mean_reward_curve=[0.3, 0.4])
        path = tmp_path / "report.csv"
        report.to_csv(path)
        loaded = MetricsReport.from_csv(path)
        assert loaded == report

    def test_report_validates_monotone_cdf(self):
        report = MetricsReport(scenario_name="x", scenario_hash="h", seed=0,
                               mode="ppo", rtt_sqerr_cdf=[(0.0, 0.9), (1.0, 0.2)])
        with pytest.raises(ValueError):
            report.validate()


class TestTrain:
    def test_budget_zero_checkpoint_equals_init(self, tmp_path):
        from bbrtune.rl_core import PolicyParams, load_checkpoint
        spec = quick_scenario()
        res = train(spec, tmp_path, iters=0)
        params, meta = load_checkpoint(res.checkpoint_path)
        init_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 101)))
        expected = PolicyParams.init(spec.env.state_dim, 5, 5, rng=init_rng)
        assert params.allclose(expected)

    def test_rerun_same_manifest_identical_artifacts(self, tmp_path):
        spec = quick_scenario()
        r1 = train(spec, tmp_path / "a", iters=2)
        r2 = train(spec, tmp_path / "b", iters=2)
        assert Path(r1.checkpoint_path).read_bytes() == Path(r2.checkpoint_path).read_bytes()
        assert Path(r1.stats_path).read_text() == Path(r2.stats_path).read_text()

    def test_learning_progress_on_default_scenario(self, tmp_path):
        """Mean reward of the last iterations beats the first ones."""
        spec = load_scenario(SCENARIOS / "train_random.yaml")
        res = train(spec, tmp_path, iters=50,
                    hyper_overrides={"n_actors": 1, "horizon": 16,
                                     "minibatch_size": 16})
        curve = res.mean_reward_curve
        assert np.mean(curve[-10:]) > np.mean(curve[:10])

    def test_unknown_hyper_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            train(quick_scenario(), tmp_path, hyper_overrides={"bogus": 1.0})

    def test_multi_agent_training_runs(self, tmp_path):
        spec = quick_scenario()
        spec.agents.n_rl_agents = 2
        res = train(spec, tmp_path, iters=2, n_agents=2)
        assert Path(res.checkpoint_path).exists()
        stats = Path(res.stats_path).read_text().strip().splitlines()
        assert len(stats) == 3  # header + 2 iterations


class TestEvaluate:
    def test_vanilla_and_checkpoint_modes(self, tmp_path):
        spec = quick_scenario()
        t = train(spec, tmp_path / "train", iters=1)
        van = evaluate(spec, tmp_path / "eval", baseline="vanilla")
        ppo = evaluate(spec, tmp_path / "eval", checkpoint=t.checkpoint_path)
        assert Path(van.trace_path).exists() and Path(ppo.trace_path).exists()
        assert van.report.mode == "vanilla" and ppo.report.mode == "ppo"
        assert 0.0 <= van.report.estimation_accuracy <= 1.0

    def test_requires_exactly_one_mode(self, tmp_path):
        spec = quick_scenario()
        with pytest.raises(ConfigError):
            evaluate(spec, tmp_path)
        with pytest.raises(ConfigError):
            evaluate(spec, tmp_path, checkpoint="x", baseline="vanilla")

    def test_shape_mismatched_checkpoint_rejected(self, tmp_path):
        from bbrtune.errors import CheckpointError
        from bbrtune.rl_core import PolicyParams, save_checkpoint
        bad = PolicyParams.init(7, 3, 3, rng=np.random.default_rng(0))
        path = tmp_path / "bad.npz"
        save_checkpoint(path, bad, {}, seed=0)
        with pytest.raises(CheckpointError):
            evaluate(quick_scenario(), tmp_path, checkpoint=path)

    def test_eval_determinism(self, tmp_path):
        spec = quick_scenario()
        a = evaluate(spec, tmp_path / "a", baseline="vanilla")
        b = evaluate(spec, tmp_path / "b", baseline="vanilla")
        assert Path(a.trace_path).read_bytes() == Path(b.trace_path).read_bytes()


class TestCompare:
    def make_report(self, **over):
        base = dict(scenario_name="s", scenario_hash="h", seed=1, mode="vanilla",
                    estimation_accuracy=0.4, peak_rtt_ms=100.0,
                    mean_throughput_bps=5e6,
                    convergence_events_s=[5.0], convergence_times_s=[13.5])
        base.update(over)
        return MetricsReport(**base)

    def test_equal_reports_unit_ratios(self):
        a = self.make_report()
        cmp = compare_reports(a, self.make_report())
        by_name = {r[0]: r for r in cmp.rows}
        assert by_name["convergence_speedup"][3] == 1.0
        assert by_name["peak_rtt_reduction"][3] == 0.0
        assert by_name["estimation_accuracy_delta"][3] == 0.0

    def test_speedup_example(self):
        a = self.make_report(convergence_times_s=[13.5])
        b = self.make_report(mode="ppo", convergence_times_s=[5.0])
        cmp = compare_reports(a, b)
        by_name = {r[0]: r for r in cmp.rows}
        assert by_name["convergence_speedup"][3] == pytest.approx(2.7)

    def test_peak_rtt_reduction_example(self):
        a = self.make_report(peak_rtt_ms=100.0)
        b = self.make_report(mode="ppo", peak_rtt_ms=60.0)
        cmp = compare_reports(a, b)
        by_name = {r[0]: r for r in cmp.rows}
        assert by_name["peak_rtt_reduction"][3] == pytest.approx(0.40)

    def test_scenario_mismatch_rejected(self):
        a = self.make_report()
        b = self.make_report(scenario_hash="other")
        with pytest.raises(ConfigError):
            compare_reports(a, b)
        with pytest.raises(ConfigError):
            compare_reports(a, self.make_report(seed=2))


class TestPlots:
    def test_empty_cdf_axes_only(self):
        svg = cdf_plot([], "empty", "x")
        assert svg.startswith("<svg") and "polyline" not in svg

    def test_monotone_cdf_rendered_monotone(self):
        pts = [(0.0, 0.2), (1.0, 0.5), (2.0, 1.0)]
        svg = cdf_plot(pts, "cdf", "x")
        line = svg.split('points="')[1].split('"')[0]
        ys = [float(p.split(",")[1]) for p in line.split()]
        assert ys == sorted(ys, reverse=True)  # svg y axis points down

    def test_byte_identical_output(self, tmp_path):
        spec = quick_scenario()
        result = evaluate(spec, tmp_path / "e", baseline="vanilla")
        rows = []
        import csv as _csv
        with open(result.trace_path) as fh:
            reader = _csv.reader(fh)
            next(reader)
            for rec in reader:
                rows.append((int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3]),
                             float(rec[4]), int(rec[5]), float(rec[6]), int(rec[7]),
                             float(rec[8]), float(rec[9]), float(rec[10]),
                             float(rec[11]), rec[12], int(rec[13]), float(rec[14])))
        f1 = emit_plots(result.report, rows, tmp_path / "p1")
        f2 = emit_plots(result.report, rows, tmp_path / "p2")
        for a, b in zip(f1, f2):
            assert Path(a).read_bytes() == Path(b).read_bytes()

    def test_line_plot_renders_series(self):
        svg = line_plot({"a": [(0, 1), (1, 2)], "b": [(0, 2), (1, 1)]},
                        "t", "x", "y")
        assert svg.count("polyline") == 2
