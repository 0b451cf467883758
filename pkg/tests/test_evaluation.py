import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t1dtwin.baselines import MapConfig, McmcConfig
from t1dtwin.datagen import default_prior, generate_dataset
from t1dtwin.errors import ValidationError
from t1dtwin.evaluation import (
    EvalConfig,
    compute_posteriors,
    inclusive_grid,
    make_test_cases,
    mard,
    out_of_sample_segment,
    param_metrics,
    percentile_linear,
    point_metrics,
    replay,
    rmse,
    run_param_eval,
    run_replay_eval,
    run_timing,
    setting_scenario,
    simulate_rows,
    write_param_csv,
    write_replay_csv,
    write_report_json,
)
from t1dtwin.flow import TrainConfig
from t1dtwin.npe import train_npe
from t1dtwin.physiology import PhysioParams, PopulationConstants, SensorModel
from t1dtwin.scenario import canonical_scenario


class TestMardRmse:
    def test_identical_signals(self):
        y = np.array([100.0, 150.0, 200.0])
        assert mard(y, y) == 0.0
        assert rmse(y, y) == 0.0

    def test_hand_computed(self):
        y = np.array([100.0, 200.0, 150.0])
        yh = np.array([110.0, 190.0, 150.0])
        assert mard(y, yh) == pytest.approx(5.0, rel=1e-12)
        assert rmse(y, yh) == pytest.approx(math.sqrt(200.0 / 3.0), rel=1e-12)
        assert rmse(y, yh) == pytest.approx(8.16496580927726, rel=1e-10)

    def test_homogeneity(self):
        rng = np.random.default_rng(0)
        y = rng.uniform(80, 200, 50)
        yh = y + rng.normal(0, 5, 50)
        assert mard(2 * y, 2 * yh) == pytest.approx(mard(y, yh), rel=1e-12)
        assert rmse(2 * y, 2 * yh) == pytest.approx(2 * rmse(y, yh), rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            mard(np.ones(3), np.ones(4))
        with pytest.raises(ValidationError):
            rmse(np.ones(3), np.ones(4))

    @given(st.integers(min_value=2, max_value=30))
    @settings(max_examples=20, deadline=None)
    def test_rmse_permutation_invariant(self, n):
        rng = np.random.default_rng(n)
        y = rng.uniform(50, 250, n)
        yh = y + rng.normal(0, 3, n)
        perm = rng.permutation(n)
        assert rmse(y[perm], yh[perm]) == pytest.approx(rmse(y, yh), rel=1e-12)


class TestParamMetrics:
    def test_exact_samples(self):
        samples = np.tile([50.0, 2.0], (10, 1))
        rows = param_metrics(samples, np.array([50.0, 2.0]))
        for row in rows:
            assert row["abs_err"] == 0.0
            assert row["rel_err"] == 0.0
            assert row["mad"] == 0.0
            assert row["covered"] is True

    def test_percentile_interpolation_oracle(self):
        samples = np.arange(1.0, 101.0)[:, None]
        assert percentile_linear(samples, 2.5)[0] == pytest.approx(3.475, rel=1e-12)
        assert param_metrics(samples, np.array([50.0]))[0]["covered"] is True
        assert param_metrics(samples, np.array([1.0]))[0]["covered"] is False

    def test_two_sample_hand_case(self):
        samples = np.array([[40.0], [60.0]])
        row = param_metrics(samples, np.array([50.0]))[0]
        assert row["abs_err"] == 0.0
        assert row["mad"] == 10.0
        assert row["covered"] is True

    def test_zero_truth_rel_undefined(self):
        samples = np.random.default_rng(1).normal(0, 1, (100, 1))
        row = param_metrics(samples, np.array([0.0]))[0]
        assert row["rel_err"] is None
        assert row["abs_err"] >= 0.0

    def test_point_metrics(self):
        rows = point_metrics(np.array([110.0, 0.02]), np.array([100.0, 0.025]))
        assert rows[0]["abs_err"] == 10.0
        assert rows[0]["rel_err"] == pytest.approx(10.0)
        assert rows[0]["covered"] is None and rows[0]["mad"] is None

    def test_coverage_calibrated_on_conjugate_oracle(self):
        # an exact-posterior sampler must cover ~95% of cases
        rng = np.random.default_rng(2)
        prior_sd, noise_sd, n_cases = 1.0, 0.5, 200
        shrink = prior_sd ** 2 / (prior_sd ** 2 + noise_sd ** 2)
        post_sd = math.sqrt(prior_sd ** 2 * noise_sd ** 2 /
                            (prior_sd ** 2 + noise_sd ** 2))
        hits = []
        for _ in range(n_cases):
            truth = rng.normal(0, prior_sd)
            y = truth + rng.normal(0, noise_sd)
            draws = rng.normal(shrink * y, post_sd, (500, 1))
            hits.append(param_metrics(draws, np.array([truth]))[0]["covered"])
        cov = np.mean(hits)
        # binomial 95% band around 0.95 with n = 200
        band = 1.96 * math.sqrt(0.95 * 0.05 / n_cases)
        assert 0.95 - band <= cov <= 0.95 + band


@pytest.fixture(scope="module")
def world():
    prior = default_prior()
    consts = PopulationConstants()
    scenario = canonical_scenario()
    sensor = SensorModel(noise_sd=2.0)
    return prior, consts, scenario, sensor


@pytest.fixture(scope="module")
def tiny_model(world):
    prior, consts, scenario, sensor = world
    ds = generate_dataset(60, prior, consts, scenario, sensor, seed=31)
    cfg = TrainConfig(batch_size=30, max_epochs=6, patience=3, min_dataset_rows=10)
    model, history = train_npe(ds, cfg, {"n_blocks": 2, "hidden_sizes": (16, 16)},
                               seed=3, prior=prior)
    return model, history


class TestReplay:
    def test_identical_rows_zero_band(self, world):
        prior, consts, scenario, sensor = world
        theta = PhysioParams(Gb=115.0, SG=0.02, p2=0.012, ka2=0.014, kd=0.026,
                             kempt=0.18, SI=6e-4, kabs=0.012)
        from t1dtwin.physiology import steady_state
        row = np.concatenate([theta.as_array(), steady_state(theta, consts)])
        rows = np.tile(row, (20, 1))
        band = replay(rows, scenario, "in_sample", consts, sensor)
        assert np.array_equal(band.q05, band.median)
        assert np.array_equal(band.q95, band.median)
        assert band.t_min.size == 265

    def test_in_sample_self_replay_mard_zero(self, world):
        prior, consts, scenario, sensor = world
        cases = make_test_cases(prior, consts, scenario, sensor, 2, seed=32)
        truth_traces, _ = simulate_rows(cases.thetas, scenario, consts, sensor)
        band = replay(cases.thetas[0], scenario, "in_sample", consts, sensor)
        assert mard(truth_traces[0], band.median) < 1e-12

    def test_point_estimate_single_trace(self, world):
        prior, consts, scenario, sensor = world
        theta = PhysioParams(Gb=115.0, SG=0.02, p2=0.012, ka2=0.014, kd=0.026,
                             kempt=0.18, SI=6e-4, kabs=0.012)
        band = replay(theta.as_array(), scenario, "in_sample", consts, sensor)
        assert np.array_equal(band.q05, band.median)

    def test_next_day_covers_46h_and_segment(self, world):
        prior, consts, scenario, sensor = world
        theta = PhysioParams(Gb=115.0, SG=0.02, p2=0.012, ka2=0.014, kd=0.026,
                             kempt=0.18, SI=6e-4, kabs=0.012)
        band = replay(theta.as_array(), scenario, "next_day", consts, sensor)
        assert band.t_min.size == 553
        seg = out_of_sample_segment(band.t_min, scenario.horizon_min)
        assert seg.sum() == 288
        assert band.t_min[seg][0] == 1325.0

    def test_median_always_inside_band(self, tiny_model, world):
        prior, consts, scenario, sensor = world
        model, _ = tiny_model
        cases = make_test_cases(prior, consts, scenario, sensor, 1, seed=33)
        from t1dtwin.npe import infer
        ps = infer(model, cases.observations[0], n=64, seed=1)
        band = replay(ps.samples, scenario, "altered_meals", consts, sensor)
        assert np.all(band.q05 <= band.median + 1e-12)
        assert np.all(band.median <= band.q95 + 1e-12)

    def test_setting_scenario_validation(self, world):
        _, _, scenario, _ = world
        with pytest.raises(ValidationError):
            setting_scenario(scenario, "bogus")


class TestRunners:
    @pytest.fixture(scope="class")
    def eval_bits(self, world, tiny_model):
        prior, consts, scenario, sensor = world
        model, history = tiny_model
        cases = make_test_cases(prior, consts, scenario, sensor, 2, seed=34)
        cfg = EvalConfig(
            n_cases=2, n_posterior=40, seed=34,
            mcmc=McmcConfig(burn_in=20, main_steps=30, seed=35),
            map=MapConfig(restarts=1, max_iters=30, seed=36))
        posts = compute_posteriors(model, cases, prior, consts, scenario, cfg)
        return model, history, cases, cfg, posts

    def test_param_report_schema(self, world, eval_bits):
        prior, consts, scenario, _ = world
        model, _, cases, cfg, posts = eval_bits
        report = run_param_eval(model, cases, prior, consts, scenario, cfg,
                                posteriors=posts)
        assert set(report["methods"]) == {"sbi", "mcmc", "map"}
        sbi = report["methods"]["sbi"]
        assert len(sbi["per_param"]) == 17
        assert "Gb" in sbi["per_param"]
        assert 0.0 <= sbi["avg_coverage"] <= 1.0
        assert len(report["methods"]["mcmc"]["per_param"]) == 8
        assert report["methods"]["map"]["avg_coverage"] is None

    def test_replay_report_schema(self, world, eval_bits):
        prior, consts, scenario, sensor = world
        model, _, cases, cfg, posts = eval_bits
        report = run_replay_eval(model, cases, prior, consts, scenario, cfg,
                                 sensor=sensor, posteriors=posts)
        for method in ("sbi", "mcmc", "map"):
            for setting in ("in_sample", "next_day", "altered_meals"):
                row = report["methods"][method][setting]
                assert row["mard_mean"] >= 0.0 and row["rmse_mean"] >= 0.0

    def test_timing_report(self, world, eval_bits):
        prior, consts, scenario, _ = world
        model, history, cases, cfg, posts = eval_bits
        report = run_timing(model, cases, prior, consts, scenario, cfg,
                            training_time_s=history.wall_time_s, posteriors=posts)
        assert report["methods"]["sbi"]["training_time_s"] > 0.0
        assert report["methods"]["mcmc"]["training_time_s"] == 0.0
        assert report["methods"]["map"]["training_time_s"] == 0.0
        assert report["methods"]["sbi"]["inference_time_mean_s"] >= 0.0

    def test_reports_deterministic_excluding_timing(self, world, eval_bits, tmp_path):
        prior, consts, scenario, sensor = world
        model, _, cases, cfg, posts = eval_bits
        a = run_param_eval(model, cases, prior, consts, scenario, cfg,
                           posteriors=posts)
        b = run_param_eval(model, cases, prior, consts, scenario, cfg,
                           posteriors=posts)
        assert a == b
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        write_report_json(p1, a)
        write_report_json(p2, b)
        assert p1.read_bytes() == p2.read_bytes()

    def test_csv_writers(self, world, eval_bits, tmp_path):
        prior, consts, scenario, sensor = world
        model, _, cases, cfg, posts = eval_bits
        pr = run_param_eval(model, cases, prior, consts, scenario, cfg,
                            posteriors=posts)
        rr = run_replay_eval(model, cases, prior, consts, scenario, cfg,
                             sensor=sensor, posteriors=posts)
        write_param_csv(tmp_path / "p.csv", pr)
        write_replay_csv(tmp_path / "r.csv", rr)
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0].startswith("method,param,")
        assert len(lines) == 1 + 17 + 8 + 8
        rl = (tmp_path / "r.csv").read_text().splitlines()
        assert len(rl) == 1 + 3 * 3

    def test_single_case_report(self, world, tiny_model):
        prior, consts, scenario, sensor = world
        model, _ = tiny_model
        cases = make_test_cases(prior, consts, scenario, sensor, 1, seed=37)
        cfg = EvalConfig(n_cases=1, n_posterior=20, seed=37, methods=("sbi",))
        report = run_param_eval(model, cases, prior, consts, scenario, cfg)
        assert report["n_cases"] == 1


def test_inclusive_grid_counts():
    assert inclusive_grid(1320.0).size == 265
    assert inclusive_grid(2760.0).size == 553
