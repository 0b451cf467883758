"""Recovery metrics, replay simulation and the three experiment suites.

Reports are plain dicts (JSON-ready, sorted-key serialization) plus CSV table
writers. Wall-clock numbers live only in the timing report so the parameter
and replay reports stay byte-reproducible across runs.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    LikelihoodConfig,
    MapConfig,
    McmcConfig,
    map_estimate,
    rwmh_sample_batch,
    thin_chain,
)
from .datagen import (
    Dataset,
    N_THETA,
    PARAM_NAMES,
    PriorSpec,
    generate_dataset,
)
from .errors import ValidationError
from .npe import PosteriorModel, infer
from .physiology import (
    PopulationConstants,
    SensorModel,
    integrate_batch,
    sensor_readings,
    steady_state_batch,
)
from .scenario import (
    MealPerturbation,
    Scenario,
    alter_meals,
    extend_next_day,
    rasterize,
)

REPLAY_SETTINGS = ("in_sample", "next_day", "altered_meals")


def mard(y_ref: np.ndarray, y_hat: np.ndarray) -> float:
    """Mean absolute relative difference, in percent of the reference."""
    y_ref = np.asarray(y_ref, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y_ref.shape != y_hat.shape:
        raise ValidationError("signals must have equal length")
    if np.any(y_ref <= 0):
        raise ValidationError("reference signal must be positive")
    return float(100.0 * np.mean(np.abs(y_hat - y_ref) / y_ref))


def rmse(y_ref: np.ndarray, y_hat: np.ndarray) -> float:
    y_ref = np.asarray(y_ref, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y_ref.shape != y_hat.shape:
        raise ValidationError("signals must have equal length")
    return float(np.sqrt(np.mean((y_hat - y_ref) ** 2)))


def percentile_linear(samples: np.ndarray, q) -> np.ndarray:
    """Percentiles with linear interpolation between order statistics."""
    return np.percentile(samples, q, axis=0, method="linear")


def param_metrics(samples: np.ndarray, truth: np.ndarray) -> list[dict]:
    """Per-component recovery metrics for one test case.

    abs_err compares the componentwise posterior median to the truth;
    rel_err is in percent and undefined (None) when the truth is zero; MAD
    averages |sample - truth| over all draws; covered means the truth lies in
    the central 95% interval.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if samples.shape[0] < 2:
        raise ValidationError("need at least 2 samples for interval metrics")
    if samples.shape[1] != truth.size:
        raise ValidationError("sample and truth dimensions differ")
    med = np.median(samples, axis=0)
    lo = percentile_linear(samples, 2.5)
    hi = percentile_linear(samples, 97.5)
    mad = np.mean(np.abs(samples - truth), axis=0)
    out = []
    for j in range(truth.size):
        abs_err = float(abs(med[j] - truth[j]))
        rel_err = None if truth[j] == 0.0 else float(100.0 * abs_err / abs(truth[j]))
        out.append({
            "abs_err": abs_err,
            "rel_err": rel_err,
            "mad": float(mad[j]),
            "covered": bool(lo[j] <= truth[j] <= hi[j]),
        })
    return out


def point_metrics(point: np.ndarray, truth: np.ndarray) -> list[dict]:
    """Recovery metrics for a point estimate (no interval, no MAD)."""
    point = np.asarray(point, dtype=float)
    truth = np.asarray(truth, dtype=float)
    out = []
    for j in range(truth.size):
        abs_err = float(abs(point[j] - truth[j]))
        rel_err = None if truth[j] == 0.0 else float(100.0 * abs_err / abs(truth[j]))
        out.append({"abs_err": abs_err, "rel_err": rel_err,
                    "mad": None, "covered": None})
    return out


def inclusive_grid(horizon_min: float) -> np.ndarray:
    """Replay band grid: both endpoints included (22 h -> 265 points)."""
    return 5.0 * np.arange(int(round(horizon_min / 5.0)) + 1)


def setting_scenario(scenario: Scenario, setting: str,
                     perturbation: MealPerturbation | None = None) -> Scenario:
    if setting == "in_sample":
        return scenario
    if setting == "next_day":
        return extend_next_day(scenario)
    if setting == "altered_meals":
        return alter_meals(scenario, perturbation) if perturbation is not None \
            else alter_meals(scenario)
    raise ValidationError(f"unknown replay setting {setting!r}")


@dataclass
class ReplayResult:
    t_min: np.ndarray
    median: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    n_dropped: int = 0


def simulate_rows(rows: np.ndarray, scenario: Scenario, c: PopulationConstants,
                  sensor: SensorModel) -> tuple[np.ndarray, int]:
    """Noiseless CGM per parameter row on the inclusive 5-min grid.

    Rows may be 17-vectors (own initial state) or 8-vectors (steady state).
    Rows whose integration fails are dropped and counted.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] == N_THETA:
        theta = rows
        x0 = steady_state_batch(theta, c)
    elif rows.shape[1] == N_THETA + 9:
        theta = rows[:, :N_THETA]
        x0 = rows[:, N_THETA:]
    else:
        raise ValidationError("rows must have 8 or 17 columns")
    inputs = rasterize(scenario, 1.0, 60.0, c.BW)
    res = integrate_batch(x0, theta, c, inputs, scenario.horizon_min,
                          capture_every_min=5.0)
    ig = res.captured[:, :, 8]
    t = inclusive_grid(scenario.horizon_min)
    traces = sensor_readings(ig, t, sensor.noiseless(), None)
    ok = np.isfinite(traces).all(axis=1)
    return traces[ok], int((~ok).sum())


def replay(samples: np.ndarray, scenario: Scenario, setting: str,
           c: PopulationConstants, sensor: SensorModel,
           perturbation: MealPerturbation | None = None) -> ReplayResult:
    """Median trace and 5-95% band over per-row noiseless simulations.

    A 1-D input is treated as a point estimate and yields a zero-width band.
    """
    s = setting_scenario(scenario, setting, perturbation)
    rows = np.atleast_2d(np.asarray(samples, dtype=float))
    traces, dropped = simulate_rows(rows, s, c, sensor)
    if traces.shape[0] == 0:
        raise ValidationError("every replay row failed to integrate")
    t = inclusive_grid(s.horizon_min)
    return ReplayResult(
        t_min=t,
        median=np.median(traces, axis=0),
        q05=percentile_linear(traces, 5.0),
        q95=percentile_linear(traces, 95.0),
        n_dropped=dropped,
    )


def out_of_sample_segment(t_min: np.ndarray, original_horizon: float) -> np.ndarray:
    """Boolean mask of the extension beyond the originally observed window."""
    return t_min > original_horizon


# ---- experiment runners ---------------------------------------------------

@dataclass
class EvalConfig:
    n_cases: int = 50
    n_posterior: int = 1000
    seed: int = 0
    methods: tuple[str, ...] = ("sbi", "mcmc", "map")
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    map: MapConfig = field(default_factory=MapConfig)
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    perturbation: MealPerturbation = field(default_factory=MealPerturbation)


@dataclass
class MethodPosteriors:
    """Per-case posterior draws (or point estimates) for one method."""

    name: str
    samples: list[np.ndarray]          # each (n, k) or (k,) for points
    elapsed_s: list[float]


def make_test_cases(prior: PriorSpec, c: PopulationConstants, scenario: Scenario,
                    sensor: SensorModel, n_cases: int, seed: int) -> Dataset:
    """Held-out cases from the same generative pipeline, disjoint by seed."""
    return generate_dataset(n_cases, prior, c, scenario, sensor, seed=seed)


def compute_posteriors(model: PosteriorModel, cases: Dataset, prior: PriorSpec,
                       c: PopulationConstants, scenario: Scenario,
                       cfg: EvalConfig, progress=None) -> dict[str, MethodPosteriors]:
    """Run every configured method on every case once; reused by all suites."""
    out: dict[str, MethodPosteriors] = {}
    n_cases = len(cases)

    if "sbi" in cfg.methods:
        samples, times = [], []
        for i in range(n_cases):
            ps = infer(model, cases.observations[i], n=cfg.n_posterior,
                       seed=cfg.seed + 10_000 + i)
            samples.append(ps.samples)
            times.append(ps.elapsed_s)
            if progress:
                progress(f"sbi case {i + 1}/{n_cases}")
        out["sbi"] = MethodPosteriors("sbi", samples, times)

    if "mcmc" in cfg.methods:
        t0 = time.monotonic()
        results = rwmh_sample_batch(cases.observations, prior, scenario, c,
                                    cfg.likelihood, cfg.mcmc)
        per_case = (time.monotonic() - t0) / n_cases
        samples = [thin_chain(r.samples, cfg.n_posterior) for r in results]
        out["mcmc"] = MethodPosteriors("mcmc", samples, [per_case] * n_cases)
        if progress:
            progress(f"mcmc finished {n_cases} lockstep chains")

    if "map" in cfg.methods:
        samples, times = [], []
        for i in range(n_cases):
            t0 = time.monotonic()
            res = map_estimate(cases.observations[i], prior, scenario, c,
                               cfg.likelihood,
                               MapConfig(restarts=cfg.map.restarts,
                                         max_iters=cfg.map.max_iters,
                                         tol=cfg.map.tol,
                                         seed=cfg.map.seed + i))
            times.append(time.monotonic() - t0)
            samples.append(res.theta.as_array())
            if progress:
                progress(f"map case {i + 1}/{n_cases}")
        out["map"] = MethodPosteriors("map", samples, times)
    return out


def _aggregate_param_rows(per_case_rows: list[list[dict]], names) -> dict:
    """Aggregate per-case component metrics into per-parameter summaries."""
    per_param = {}
    n_params = len(per_case_rows[0])
    for j in range(n_params):
        abs_errs = [case[j]["abs_err"] for case in per_case_rows]
        rel_errs = [case[j]["rel_err"] for case in per_case_rows
                    if case[j]["rel_err"] is not None]
        mads = [case[j]["mad"] for case in per_case_rows if case[j]["mad"] is not None]
        covers = [case[j]["covered"] for case in per_case_rows
                  if case[j]["covered"] is not None]
        per_param[names[j]] = {
            "abs_err_mean": float(np.mean(abs_errs)),
            "abs_err_median": float(np.median(abs_errs)),
            "rel_err_mean": float(np.mean(rel_errs)) if rel_errs else None,
            "rel_err_median": float(np.median(rel_errs)) if rel_errs else None,
            "n_rel_defined": len(rel_errs),
            "mad_mean": float(np.mean(mads)) if mads else None,
            "coverage": float(np.mean(covers)) if covers else None,
        }
    coverages = [v["coverage"] for v in per_param.values() if v["coverage"] is not None]
    per_case_cov = None
    if coverages:
        per_case_cov = [float(np.mean([case[j]["covered"] for j in range(n_params)
                                       if case[j]["covered"] is not None]))
                        for case in per_case_rows]
    return {
        "per_param": per_param,
        "avg_coverage": float(np.mean(coverages)) if coverages else None,
        "per_case_coverage": per_case_cov,
    }


def run_param_eval(model: PosteriorModel, cases: Dataset, prior: PriorSpec,
                   c: PopulationConstants, scenario: Scenario, cfg: EvalConfig,
                   posteriors: dict[str, MethodPosteriors] | None = None,
                   progress=None) -> dict:
    """Parameter-recovery suite: abs/rel error, MAD and coverage per method."""
    if posteriors is None:
        posteriors = compute_posteriors(model, cases, prior, c, scenario, cfg,
                                        progress)
    report = {"suite": "params", "n_cases": len(cases), "seed": cfg.seed,
              "n_posterior": cfg.n_posterior, "methods": {}}
    for name, post in posteriors.items():
        rows = []
        for i in range(len(cases)):
            truth = cases.thetas[i]
            s = post.samples[i]
            if s.ndim == 1:  # point estimate
                rows.append(point_metrics(s, truth[:s.size]))
            else:
                rows.append(param_metrics(s, truth[:s.shape[1]]))
        names = PARAM_NAMES[:len(rows[0])]
        report["methods"][name] = _aggregate_param_rows(rows, names)
    return report


def run_replay_eval(model: PosteriorModel, cases: Dataset, prior: PriorSpec,
                    c: PopulationConstants, scenario: Scenario, cfg: EvalConfig,
                    sensor: SensorModel | None = None,
                    posteriors: dict[str, MethodPosteriors] | None = None,
                    progress=None) -> dict:
    """Replay suite: MARD/RMSE of the median replay against the noiseless
    ground-truth trace, per method and setting (mean +- sd over cases)."""
    sensor = sensor or SensorModel()
    if posteriors is None:
        posteriors = compute_posteriors(model, cases, prior, c, scenario, cfg,
                                        progress)
    report = {"suite": "replay", "n_cases": len(cases), "seed": cfg.seed,
              "settings": list(REPLAY_SETTINGS), "methods": {}}
    truth_traces = {}
    masks = {}
    for setting in REPLAY_SETTINGS:
        s = setting_scenario(scenario, setting, cfg.perturbation)
        traces, dropped = simulate_rows(cases.thetas, s, c, sensor)
        if dropped:
            raise ValidationError("ground-truth simulation failed for a test case")
        truth_traces[setting] = traces
        t = inclusive_grid(s.horizon_min)
        masks[setting] = (out_of_sample_segment(t, scenario.horizon_min)
                          if setting == "next_day"
                          else np.ones(t.size, dtype=bool))

    for name, post in posteriors.items():
        method_rows = {}
        for setting in REPLAY_SETTINGS:
            mards, rmses, dropped_total = [], [], 0
            for i in range(len(cases)):
                band = replay(post.samples[i], scenario, setting, c, sensor,
                              cfg.perturbation)
                seg = masks[setting]
                ref = truth_traces[setting][i][seg]
                est = band.median[seg]
                mards.append(mard(ref, est))
                rmses.append(rmse(ref, est))
                dropped_total += band.n_dropped
            method_rows[setting] = {
                "mard_mean": float(np.mean(mards)),
                "mard_sd": float(np.std(mards, ddof=1)) if len(mards) > 1 else 0.0,
                "rmse_mean": float(np.mean(rmses)),
                "rmse_sd": float(np.std(rmses, ddof=1)) if len(rmses) > 1 else 0.0,
                "n_dropped_rows": dropped_total,
            }
            if progress:
                progress(f"replay {name}/{setting} done")
        report["methods"][name] = method_rows
    return report


def run_timing(model: PosteriorModel, cases: Dataset, prior: PriorSpec,
               c: PopulationConstants, scenario: Scenario, cfg: EvalConfig,
               training_time_s: float = 0.0,
               posteriors: dict[str, MethodPosteriors] | None = None,
               progress=None) -> dict:
    """Wall-clock per-case inference time per method plus one-time training cost."""
    if posteriors is None:
        posteriors = compute_posteriors(model, cases, prior, c, scenario, cfg,
                                        progress)
    report = {"suite": "timing", "n_cases": len(cases), "seed": cfg.seed,
              "methods": {}}
    for name, post in posteriors.items():
        times = np.asarray(post.elapsed_s)
        report["methods"][name] = {
            "inference_time_mean_s": float(times.mean()),
            "inference_time_sd_s": float(times.std(ddof=1)) if times.size > 1 else 0.0,
            "training_time_s": float(training_time_s) if name == "sbi" else 0.0,
        }
    return report


# ---- report output --------------------------------------------------------

def write_report_json(path, report: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_param_csv(path, report: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "param", "abs_err_mean", "abs_err_median",
                         "rel_err_mean", "rel_err_median", "mad_mean", "coverage"])
        for method, body in sorted(report["methods"].items()):
            for param, row in body["per_param"].items():
                writer.writerow([method, param] + [
                    "" if row[k] is None else repr(row[k])
                    for k in ("abs_err_mean", "abs_err_median", "rel_err_mean",
                              "rel_err_median", "mad_mean", "coverage")])


def write_replay_csv(path, report: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "setting", "mard_mean", "mard_sd",
                         "rmse_mean", "rmse_sd"])
        for method, body in sorted(report["methods"].items()):
            for setting in report["settings"]:
                row = body[setting]
                writer.writerow([method, setting] + [
                    repr(row[k]) for k in ("mard_mean", "mard_sd",
                                           "rmse_mean", "rmse_sd")])
