"""Command-line entry point for the whole pipeline.

Exit codes: 0 success, 1 validation problem (bad flags, malformed or missing
files), 2 runtime failure. All randomness is controlled by --seed; reruns
with identical flags produce byte-identical primary outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, datagen, evaluation, npe
from .errors import (
    IntegrationError,
    ProvenanceError,
    SamplingError,
    TrainingError,
    ValidationError,
)
from .flow import TrainConfig
from .physiology import (
    PhysioParams,
    PopulationConstants,
    SensorModel,
    apply_sensor,
    integrate,
    read_trace_csv,
    steady_state,
    write_trace_csv,
)
from .scenario import Scenario, rasterize

USAGE_ERRORS = (ValidationError, ProvenanceError, FileNotFoundError,
                json.JSONDecodeError, KeyError)
RUNTIME_ERRORS = (IntegrationError, SamplingError, TrainingError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _progress(quiet: bool):
    if quiet:
        return lambda *a: None
    return lambda msg: print(msg, file=sys.stderr)


def load_params_file(path) -> tuple[PhysioParams, np.ndarray | None,
                                    PopulationConstants, SensorModel]:
    """Parameter file: {"theta": {...}, "x0": [...]|"steady",
    "constants": {...}, "sensor": {...}}; every block but theta optional."""
    with open(path) as fh:
        doc = json.load(fh)
    theta = PhysioParams(**{k: float(v) for k, v in doc["theta"].items()})
    consts = PopulationConstants.from_dict(doc["constants"]) \
        if "constants" in doc else PopulationConstants()
    sensor = SensorModel.from_dict(doc["sensor"]) if "sensor" in doc else SensorModel()
    x0 = doc.get("x0", "steady")
    if isinstance(x0, str):
        if x0 != "steady":
            raise ValidationError('x0 must be a 9-vector or "steady"')
        x0_arr = None
    else:
        x0_arr = np.asarray([float(v) for v in x0])
        if x0_arr.shape != (9,):
            raise ValidationError("x0 must have 9 components")
    return theta, x0_arr, consts, sensor


def cmd_simulate(args) -> int:
    theta, x0, consts, sensor = load_params_file(args.params)
    scenario = Scenario.from_json(args.scenario)
    if x0 is None:
        x0 = steady_state(theta, consts)
    inputs = rasterize(scenario, 1.0, 60.0, consts.BW)
    traj = integrate(x0, theta, consts, inputs, scenario.horizon_min)
    trace = apply_sensor(traj, sensor, 5.0, rng_seed=args.seed)
    write_trace_csv(args.out, trace.t_min, trace.values)
    print(args.out)
    return 0


def cmd_generate(args) -> int:
    prior = datagen.PriorSpec.from_json(args.prior)
    scenario = Scenario.from_json(args.scenario)
    consts = PopulationConstants()
    sensor = SensorModel(noise_sd=args.sensor_noise)
    report = _progress(args.quiet)
    ds = datagen.generate_dataset(
        args.n, prior, consts, scenario, sensor, seed=args.seed,
        batch_size=args.batch_size,
        progress=lambda acc, drawn: report(f"accepted {acc}/{args.n} (drawn {drawn})"))
    ds.save(args.out)
    print(args.out)
    return 0


def cmd_train(args) -> int:
    dataset = datagen.Dataset.load(args.data)
    prior = datagen.PriorSpec.from_json(args.prior)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr,
                      max_epochs=args.max_epochs, patience=args.patience)
    report = _progress(args.quiet)
    report(f"training on {len(dataset)} rows")
    model, history = npe.train_npe(dataset, cfg,
                                   {"n_blocks": args.blocks,
                                    "hidden_sizes": (args.hidden, args.hidden)},
                                   seed=args.seed, prior=prior)
    model.save(args.out)
    report(f"best val loss {history.best_val_loss:.4f} at epoch "
           f"{history.best_epoch} ({history.wall_time_s:.1f}s)")
    for w in history.warnings:
        report(f"warning: {w}")
    print(args.out)
    return 0


def cmd_infer(args) -> int:
    model = npe.PosteriorModel.load(args.model)
    _, y = read_trace_csv(args.cgm)
    ps = npe.infer(model, y, n=args.samples, seed=args.seed)
    npe.write_posterior_csv(args.out, ps.samples)
    _progress(args.quiet)(
        f"{args.samples} samples in {ps.elapsed_s:.2f}s "
        f"(leakage {ps.leakage_rate:.4f})")
    print(args.out)
    return 0


def cmd_baseline(args) -> int:
    prior = datagen.PriorSpec.from_json(args.prior)
    scenario = Scenario.from_json(args.scenario)
    consts = PopulationConstants()
    _, y = read_trace_csv(args.cgm)
    lik = baselines.LikelihoodConfig(sigma=args.sigma)
    if args.method == "mcmc":
        cfg = baselines.McmcConfig(burn_in=args.burn_in, main_steps=args.steps,
                                   seed=args.seed)
        res = baselines.rwmh_sample(y, prior, scenario, consts, lik, cfg)
        npe.write_posterior_csv(args.out, res.samples,
                                names=datagen.PARAM_NAMES[:8])
        _progress(args.quiet)(f"acceptance rate {res.acceptance_rate:.3f}")
        for w in res.warnings:
            _progress(args.quiet)(f"warning: {w}")
    else:
        cfg = baselines.MapConfig(restarts=args.restarts, max_iters=args.iters,
                                  seed=args.seed)
        res = baselines.map_estimate(y, prior, scenario, consts, lik, cfg)
        npe.write_posterior_csv(args.out, res.theta.as_array()[None, :],
                                names=datagen.PARAM_NAMES[:8])
        _progress(args.quiet)(f"log posterior {res.log_posterior:.2f} "
                              f"({res.n_evals} evaluations)")
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    model = npe.PosteriorModel.load(args.model)
    prior = datagen.PriorSpec.from_json(args.prior)
    scenario = Scenario.from_json(args.scenario)
    consts = PopulationConstants()
    sensor = SensorModel(noise_sd=args.sensor_noise)
    report_fn = _progress(args.quiet)

    cfg = evaluation.EvalConfig(
        n_cases=args.cases, n_posterior=args.posterior_n, seed=args.seed,
        mcmc=baselines.McmcConfig(burn_in=args.mcmc_burn_in,
                                  main_steps=args.mcmc_steps, seed=args.seed),
        map=baselines.MapConfig(restarts=args.map_restarts,
                                max_iters=args.map_iters, seed=args.seed),
        likelihood=baselines.LikelihoodConfig(sigma=args.sigma))
    cases = evaluation.make_test_cases(prior, consts, scenario, sensor,
                                       args.cases, args.seed)
    posts = evaluation.compute_posteriors(model, cases, prior, consts, scenario,
                                          cfg, progress=report_fn)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if args.suite in ("params", "all"):
        rep = evaluation.run_param_eval(model, cases, prior, consts, scenario,
                                        cfg, posteriors=posts)
        evaluation.write_report_json(out_dir / "params.json", rep)
        evaluation.write_param_csv(out_dir / "params.csv", rep)
        written.append(out_dir / "params.json")
    if args.suite in ("replay", "all"):
        rep = evaluation.run_replay_eval(model, cases, prior, consts, scenario,
                                         cfg, sensor=sensor, posteriors=posts)
        evaluation.write_report_json(out_dir / "replay.json", rep)
        evaluation.write_replay_csv(out_dir / "replay.csv", rep)
        written.append(out_dir / "replay.json")
    if args.suite in ("timing", "all"):
        rep = evaluation.run_timing(model, cases, prior, consts, scenario, cfg,
                                    training_time_s=args.training_time,
                                    posteriors=posts)
        evaluation.write_report_json(out_dir / "timing.json", rep)
        written.append(out_dir / "timing.json")
    for path in written:
        print(path)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    model = npe.PosteriorModel.load(args.model)
    app = build_app(model, ttl_min=args.ttl_min)
    uvicorn.run(app, host=args.host, port=args.port,
                log_level="warning" if args.quiet else "info")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="t1dtwin", description=__doc__)
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    p.add_argument("--threads", type=int, default=1,
                   help="cap for internal parallelism (compute is vectorized; "
                        "values > 1 are accepted and recorded)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one CGM trace")
    s.add_argument("--scenario", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    g = sub.add_parser("generate", help="generate a training dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--prior", required=True)
    g.add_argument("--scenario", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sensor-noise", type=float, default=2.0)
    g.add_argument("--batch-size", type=int, default=512)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train the posterior model")
    t.add_argument("--data", required=True)
    t.add_argument("--prior", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=200)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--max-epochs", type=int, default=500)
    t.add_argument("--patience", type=int, default=20)
    t.add_argument("--blocks", type=int, default=5)
    t.add_argument("--hidden", type=int, default=50)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="draw posterior samples for one trace")
    i.add_argument("--model", required=True)
    i.add_argument("--cgm", required=True)
    i.add_argument("--samples", type=int, default=1000)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)

    b = sub.add_parser("baseline", help="run a reference method")
    b.add_argument("method", choices=("mcmc", "map"))
    b.add_argument("--cgm", required=True)
    b.add_argument("--prior", required=True)
    b.add_argument("--scenario", required=True)
    b.add_argument("--sigma", type=float, default=2.5)
    b.add_argument("--burn-in", type=int, default=10_000)
    b.add_argument("--steps", type=int, default=5_000)
    b.add_argument("--restarts", type=int, default=3)
    b.add_argument("--iters", type=int, default=400)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_baseline)

    e = sub.add_parser("evaluate", help="run an experiment suite")
    e.add_argument("--suite", choices=("params", "replay", "timing", "all"),
                   required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--prior", required=True)
    e.add_argument("--scenario", required=True)
    e.add_argument("--cases", type=int, default=50)
    e.add_argument("--posterior-n", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sensor-noise", type=float, default=2.0)
    e.add_argument("--sigma", type=float, default=2.5)
    e.add_argument("--mcmc-burn-in", type=int, default=2000)
    e.add_argument("--mcmc-steps", type=int, default=1000)
    e.add_argument("--map-restarts", type=int, default=2)
    e.add_argument("--map-iters", type=int, default=200)
    e.add_argument("--training-time", type=float, default=0.0,
                   help="training wall time to report in the timing suite")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(fn=cmd_evaluate)

    v = sub.add_parser("serve", help="serve inference over HTTP")
    v.add_argument("--model", required=True)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8080)
    v.add_argument("--ttl-min", type=float, default=30.0)
    v.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("t1dtwin: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except USAGE_ERRORS as exc:
        print(f"t1dtwin: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"t1dtwin: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
