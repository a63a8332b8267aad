"""
CATE Watch - Command Line
=========================
Entry point for simulating scenario streams, monitoring a stream for a change
in the conditional average treatment effect, calibrating thresholds, running
delay studies and the One-K vs Two-K curve comparison.

Usage:
    python app.py simulate --scenario 1 --d 3 --output stream.ndjson
    python app.py detect --input stream.ndjson --w 3 --h 20 --epsilon 0.8
    python app.py calibrate --scenario 1 --d 3 --w 3 --h 20 --gamma 20
    python app.py experiment --config configs/delay_study.json
    python app.py curves --output curves.csv
    python app.py advise --sigma 1 --n 40 --d 3 --w 3 --gamma 20 --gamma-alpha 1
    python app.py fit-propensity --input stream.ndjson --kind logistic
"""

import argparse
import itertools
import json
import logging
import math
import sys
from pathlib import Path

sys.path.append(str(Path(__file__).parent))

from database.results_db import ResultsDatabase
from utils.calibrate import (
    CalibrationSpec,
    TuningInputs,
    advisory_bandwidth,
    advisory_threshold,
    advisory_window,
    calibrate_epsilon,
    scenario_null_source,
)
from utils.detector import ESTIMATORS, DetectorConfig, OnlineDetector
from utils.harness import ExperimentConfig, curve_mse, markdown_table, onek_twok_curves, run_experiment
from utils.kernels import KERNEL_FAMILIES, KernelSpec
from utils.model import CateWatchError, EmptyData, NonContiguousTime, StreamMeta, validate_stream
from utils.propensity import PropensityModel, PropensityPolicy, fit_constant, fit_logistic
from utils.settings import Settings
from utils.simulate import SCENARIO_IDS, ScenarioSpec, derive_seed, generate, scenario_functions
from utils.stream_loader import infer_format, iter_ndjson_batches, load_stream, write_stream

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
EXIT_DOMAIN_ERROR = 2


def _delta(value):
    return math.inf if str(value).lower() in ("inf", "infinity", "none") else float(value)


def _float_list(value):
    return [float(v) for v in value.split(",") if v.strip()]


def _emit(document, output=None):
    text = json.dumps(document, indent=2)
    if output and output != "-":
        Path(output).write_text(text + "\n")
        logger.info(f"Wrote {output}")
    else:
        print(text)


def _kernel(args, settings):
    return KernelSpec(family=args.kernel or settings["kernel"], support_radius=args.support_radius)


# =====================================================
# SUB-COMMANDS
# =====================================================

def cmd_simulate(args, settings):
    spec = ScenarioSpec(
        id=args.scenario,
        d=args.d,
        T=args.T,
        n=args.n,
        delta=args.delta,
        seed=args.seed,
        replicate=args.replicate,
        noise_scale=args.noise_scale,
        share_innovations=args.share_innovations,
    )
    batches = generate(spec)
    write_stream(batches, args.output, fmt=args.format)
    return 0


def _batches(path, fmt):
    fmt = fmt or infer_format(path)
    if fmt == "ndjson":
        if path != "-" and not Path(path).exists():
            raise CateWatchError(f"Stream file not found: {path}")
        handle = sys.stdin if path == "-" else open(path)
        try:
            yield from iter_ndjson_batches(handle)
        finally:
            if handle is not sys.stdin:
                handle.close()
    else:
        yield from load_stream(path, fmt)


def _propensity_from_args(args, settings, training):
    if args.propensity:
        return PropensityModel.from_json(Path(args.propensity).read_text())
    if args.propensity_constant is not None:
        return PropensityModel("constant", clip=settings["propensity_clip"], p=args.propensity_constant)
    if args.propensity_kind == "logistic":
        return fit_logistic(
            training,
            with_intercept=args.with_intercept,
            tol=settings["logistic_tol"],
            max_iter=settings["logistic_max_iter"],
            clip=settings["propensity_clip"],
            max_halvings=settings["logistic_max_halvings"],
            beta_cap=settings["logistic_beta_cap"],
        )
    return fit_constant(training, clip=settings["propensity_clip"])


def cmd_detect(args, settings):
    supplied = bool(args.propensity) or args.propensity_constant is not None
    burn_in = 0 if supplied else (args.burn_in if args.burn_in is not None else 2 * args.w)

    stream = _batches(args.input, args.format)
    training = list(itertools.islice(stream, burn_in))
    if not supplied and not training:
        raise EmptyData("No batches available to fit the propensity model")

    meta, last_t = None, None
    if training:
        meta = StreamMeta(d=training[0].d)
        validate_stream(training, meta)
        last_t = training[-1].t
    model = _propensity_from_args(args, settings, training)
    if model.variant != "known":
        logger.info(f"Propensity model: {model.to_json()} (fitted on {len(training)} periods)")

    grid = None
    if args.grid:
        grid = json.loads(Path(args.grid).read_text())
    config = DetectorConfig(
        w=args.w,
        h=args.h,
        epsilon=args.epsilon,
        kernel=_kernel(args, settings),
        propensity=model,
        estimator=args.estimator,
        eval_policy="fixed-grid" if grid is not None else "current-window",
        grid_points=grid,
    )
    detector = OnlineDetector(config)

    for batch in stream:
        if meta is None:
            meta = StreamMeta(d=batch.d)
        if last_t is not None and batch.t != last_t + 1:
            raise NonContiguousTime(batch.t, last_t + 1)
        validate_stream([batch], meta)
        last_t = batch.t
        alert = detector.push(batch)
        if alert is not None:
            print(json.dumps(alert.to_dict()))
            return 0

    print(json.dumps({"ran_to_end": True, "t_last": detector.state.t_now}))
    return 0


def cmd_calibrate(args, settings):
    kind = scenario_functions(args.scenario, args.d).propensity_kind
    policy = PropensityPolicy(
        kind=kind,
        wiring=args.propensity_wiring,
        clip=settings["propensity_clip"],
        tol=settings["logistic_tol"],
        max_iter=settings["logistic_max_iter"],
    )
    base_seed = derive_seed(args.seed, "calibration")
    horizon = args.horizon or int(math.ceil(settings["horizon_factor"] * args.gamma))
    grid = _float_list(args.grid) if args.grid else None
    spec = CalibrationSpec(
        gamma=args.gamma,
        n_mc=args.n_mc or settings["n_mc"],
        horizon=horizon,
        mode="grid" if grid else args.search,
        eps_grid=tuple(grid) if grid else None,
        base_seed=base_seed,
        n_jobs=args.n_jobs or settings["n_jobs"],
    )
    source = scenario_null_source(args.scenario, args.d, n=args.n, seed=base_seed)
    result = calibrate_epsilon(source, args.w, args.h, _kernel(args, settings), policy, spec, estimator=args.estimator)
    _emit(result.to_dict(), args.output)
    return 0


def cmd_experiment(args, settings):
    config = ExperimentConfig.from_json(args.config)
    overrides = {}
    for name in ("reps", "n_mc", "n_jobs", "output_dir"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if overrides:
        config = config.with_changes(**overrides)

    db_path = args.db or settings["results_db"]
    ledger = ResultsDatabase(db_path) if db_path else None
    summary = run_experiment(config, results_db=ledger)
    print(markdown_table(summary.cells))
    return 0


def cmd_curves(args, settings):
    bandwidths = tuple(_float_list(args.bandwidths))
    if len(bandwidths) != 3:
        raise CateWatchError("--bandwidths needs three values: One-K h, treated h, control h")
    curves = onek_twok_curves(n=args.n, seed=args.seed, bandwidths=bandwidths, path=args.output)
    one, two = curve_mse(curves)
    print(json.dumps({"rows": len(curves), "mse_one_k": one, "mse_two_k": two}))
    return 0


def cmd_advise(args, settings):
    inputs = TuningInputs(
        sigma=args.sigma,
        n=args.n,
        d=args.d,
        w=args.w,
        gamma=args.gamma,
        gamma_alpha=args.gamma_alpha,
        delta=args.delta,
        kappa=args.kappa,
    )
    document = {
        "gamma_1": inputs.gamma_1,
        "bandwidth": advisory_bandwidth(inputs, args.case, c_h=args.c_h),
        "threshold": advisory_threshold(inputs, args.case, propensity_error=args.propensity_error, c_eps=args.c_eps),
    }
    if args.kappa is not None:
        document["window"] = advisory_window(inputs, c_1=args.c_1)
    _emit(document, args.output)
    return 0


def cmd_fit_propensity(args, settings):
    batches = load_stream(args.input, args.format)
    if args.burn_in is not None:
        batches = batches[: args.burn_in]
    validate_stream(batches, StreamMeta(d=batches[0].d) if batches else StreamMeta(d=1))
    if args.kind == "constant":
        model = fit_constant(batches, clip=settings["propensity_clip"])
    else:
        model = fit_logistic(
            batches,
            with_intercept=args.with_intercept,
            tol=settings["logistic_tol"],
            max_iter=settings["logistic_max_iter"],
            clip=settings["propensity_clip"],
            max_halvings=settings["logistic_max_halvings"],
            beta_cap=settings["logistic_beta_cap"],
        )
    logger.info(f"Fitted {args.kind} propensity on {len(batches)} batches")
    _emit(model.to_dict(), args.output)
    return 0


# =====================================================
# PARSER
# =====================================================

def _add_kernel_flags(parser):
    parser.add_argument("--kernel", choices=KERNEL_FAMILIES, default=None)
    parser.add_argument("--support-radius", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="catewatch", description="Online change detection in treatment effects")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--settings", default=None, help="JSON settings file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Write a simulated scenario stream")
    p.add_argument("--scenario", type=int, choices=SCENARIO_IDS, required=True)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--delta", type=_delta, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--share-innovations", action="store_true")
    p.add_argument("--format", choices=("ndjson", "csv"), default=None)
    p.add_argument("--output", default="-")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("detect", help="Monitor a stream and report the first alarm")
    p.add_argument("--input", default="-")
    p.add_argument("--format", choices=("ndjson", "csv"), default=None)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--estimator", choices=ESTIMATORS, default="one-k")
    p.add_argument("--propensity", default=None, help="JSON propensity model file")
    p.add_argument("--propensity-constant", type=float, default=None)
    p.add_argument("--propensity-kind", choices=("constant", "logistic"), default="constant")
    p.add_argument("--with-intercept", action="store_true")
    p.add_argument("--burn-in", type=int, default=None, help="Periods used to fit the propensity (default 2w)")
    p.add_argument("--grid", default=None, help="JSON file with fixed evaluation points")
    _add_kernel_flags(p)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("calibrate", help="Calibrate epsilon to a target ARL")
    p.add_argument("--scenario", type=int, choices=SCENARIO_IDS, required=True)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--n-mc", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--grid", default=None, help="Comma-separated candidate thresholds")
    p.add_argument("--search", choices=("realized", "bisect"), default="realized")
    p.add_argument("--estimator", choices=ESTIMATORS, default="one-k")
    p.add_argument("--propensity-wiring", choices=("pooled", "burn-in"), default="pooled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=None)
    p.add_argument("--output", default="-")
    _add_kernel_flags(p)
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("experiment", help="Run a paired delay study from a JSON configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--n-mc", type=int, default=None)
    p.add_argument("--n-jobs", type=int, default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--db", default=None, help="SQLite results ledger")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("curves", help="One-K vs Two-K curve comparison")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bandwidths", default="0.1,0.02,0.02")
    p.add_argument("--output", default=None)
    p.set_defaults(handler=cmd_curves)

    p = sub.add_parser("advise", help="Advisory bandwidth, threshold and window")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--gamma-alpha", type=float, required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--case", choices=("no-change", "one-change"), default="no-change")
    p.add_argument("--propensity-error", type=float, default=0.0)
    p.add_argument("--c-h", type=float, default=1.0)
    p.add_argument("--c-eps", type=float, default=1.0)
    p.add_argument("--c-1", type=float, default=1.0)
    p.add_argument("--output", default="-")
    p.set_defaults(handler=cmd_advise)

    p = sub.add_parser("fit-propensity", help="Fit and serialise a propensity model")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("ndjson", "csv"), default=None)
    p.add_argument("--kind", choices=("constant", "logistic"), default="logistic")
    p.add_argument("--with-intercept", action="store_true")
    p.add_argument("--burn-in", type=int, default=None, help="Fit on the first periods only")
    p.add_argument("--output", default="-")
    p.set_defaults(handler=cmd_fit_propensity)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings.load(args.settings)
    except CateWatchError as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.error(str(e))
        return EXIT_DOMAIN_ERROR

    level = (args.log_level or settings["log_level"]).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, stream=sys.stderr)

    try:
        return args.handler(args, settings)
    except CateWatchError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DOMAIN_ERROR


if __name__ == "__main__":
    sys.exit(main())
