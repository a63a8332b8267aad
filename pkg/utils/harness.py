"""
Experiment Harness
==================
Paired delay studies of the one-k detector against the difference-based (dk)
competitor, the One-K vs Two-K curve comparison, and result reporting.

Delay convention for one replicate with change time delta and horizon T:
- alarm at t <= delta: counted as a false alarm; the detector restarts and
  needs 2w fresh batches before it can alarm again
- first alarm at t > delta: delay = t - delta ('detected')
- no alarm after delta by T: contributes the censored value T - delta ('missed')
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import binomtest

from utils.calibrate import CalibrationSpec, calibrate_epsilon, scenario_null_source
from utils.detector import ESTIMATORS, DetectorConfig, alarms_with_restart, statistic_path
from utils.kernels import KernelSpec, nw_cate_arrays, transformed_outcomes, two_k_cate
from utils.model import CateWatchError, ReportError, TimeBatch
from utils.propensity import DEFAULT_CLIP, PropensityPolicy, fit_constant, predict_many
from utils.simulate import (
    CURVE_SAMPLE_SIZE,
    ScenarioSpec,
    curve_dataset,
    curve_tau,
    derive_seed,
    generate,
    scenario_functions,
)

logger = logging.getLogger(__name__)

CELL_KEYS = ["scenario", "d", "h", "gamma", "w", "estimator"]
CELL_COLUMNS = CELL_KEYS + [
    "epsilon",
    "arl_estimate",
    "arl_censored",
    "mean_delay",
    "sd_delay",
    "false_alarms",
    "missed",
    "reps",
]
RECORD_COLUMNS = CELL_KEYS + ["replicate", "epsilon", "delta_hat", "outcome", "delay", "false_alarms"]
REPORT_FORMATS = ("csv", "json", "markdown")
CURVE_GRID_SIZE = 512
DEFAULT_CURVE_BANDWIDTHS = (0.1, 0.02, 0.02)


# =====================================================
# CONFIGURATION
# =====================================================

@dataclass(frozen=True)
class ExperimentConfig:
    """
    One delay study: every (d, h, gamma, estimator) cell over `reps` paired replicates

    Attributes:
        name: label used for output files and the results ledger
        scenario: template; its d is replaced by each entry of d_list
        d_list, h_list, gamma_list: cell grid
        w: window half-width
        estimators: subset of ('one-k', 'dk')
        reps: replicates per cell
        n_mc: calibration replications per cell and estimator
        horizon_factor: calibration horizon as a multiple of gamma
        search: calibration search mode ('realized', 'grid' or 'bisect')
        eps_grid: candidate thresholds for the 'grid' search
        kernel: kernel specification
        propensity_wiring: 'pooled' or 'burn-in'
        propensity_clip: overlap clip
        with_intercept: logistic propensity carries an intercept
        eval_policy: detector evaluation policy
        base_seed: root of every derived seed
        n_jobs: joblib workers
        output_dir: directory for the CSV, markdown and per-replicate NDJSON outputs
    """
    name: str = "experiment"
    scenario: ScenarioSpec = field(default_factory=lambda: ScenarioSpec(id=1))
    d_list: tuple = (3, 6)
    h_list: tuple = (20.0, 4.0)
    gamma_list: tuple = (20.0, 40.0)
    w: int = 3
    estimators: tuple = ESTIMATORS
    reps: int = 50
    n_mc: int = 100
    horizon_factor: float = 10.0
    search: str = "realized"
    eps_grid: tuple | None = None
    kernel: KernelSpec = field(default_factory=KernelSpec)
    propensity_wiring: str = "pooled"
    propensity_clip: float = DEFAULT_CLIP
    with_intercept: bool = False
    eval_policy: str = "current-window"
    base_seed: int = 0
    n_jobs: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        for name in ("d_list", "h_list", "gamma_list", "estimators"):
            value = tuple(getattr(self, name))
            if not value:
                raise CateWatchError(f"Experiment list '{name}' must not be empty")
            object.__setattr__(self, name, value)
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise CateWatchError(f"Unknown estimators {unknown}; choose from {ESTIMATORS}")
        if self.reps < 1:
            raise CateWatchError(f"Need at least one replicate, got reps={self.reps}")
        if self.scenario.delta == math.inf:
            raise CateWatchError("Delay studies need a finite change time")

    @classmethod
    def from_dict(cls, document: dict) -> "ExperimentConfig":
        """Build from a JSON document; 'scenario' and 'kernel' are nested objects"""
        document = dict(document)
        known = set(cls.__dataclass_fields__)
        unknown = set(document) - known
        if unknown:
            raise CateWatchError(f"Unknown experiment configuration keys: {sorted(unknown)}")
        if "scenario" in document:
            scenario = dict(document["scenario"])
            if scenario.get("delta") in ("inf", None):
                scenario["delta"] = math.inf
            document["scenario"] = ScenarioSpec(**scenario)
        if "kernel" in document:
            document["kernel"] = KernelSpec(**document["kernel"])
        if document.get("eps_grid") is not None:
            document["eps_grid"] = tuple(document["eps_grid"])
        return cls(**document)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise CateWatchError(f"Experiment configuration not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def to_dict(self) -> dict:
        document = asdict(self)
        document["scenario"]["delta"] = self.scenario.delta if self.scenario.delta != math.inf else "inf"
        return document

    def with_changes(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def scenario_for(self, d) -> ScenarioSpec:
        return self.scenario.with_changes(d=d, seed=derive_seed(self.base_seed, "experiment"))

    def calibration_for(self, gamma) -> CalibrationSpec:
        return CalibrationSpec(
            gamma=gamma,
            n_mc=self.n_mc,
            horizon=int(math.ceil(self.horizon_factor * gamma)),
            mode=self.search,
            eps_grid=self.eps_grid,
            base_seed=derive_seed(self.base_seed, "calibration"),
            n_jobs=self.n_jobs,
        )

    def propensity_policy(self, d) -> PropensityPolicy:
        kind = scenario_functions(self.scenario.id, d).propensity_kind
        return PropensityPolicy(
            kind=kind, wiring=self.propensity_wiring, clip=self.propensity_clip, with_intercept=self.with_intercept
        )


@dataclass
class ExperimentSummary:
    """Per-cell aggregates and per-replicate records"""
    cells: pd.DataFrame
    records: pd.DataFrame

    @classmethod
    def empty(cls) -> "ExperimentSummary":
        return cls(pd.DataFrame(columns=CELL_COLUMNS), pd.DataFrame(columns=RECORD_COLUMNS))


# =====================================================
# DELAY CONVENTION
# =====================================================

def classify_alarm(delta_hat, delta, horizon):
    """(outcome, delay) for one replicate under the delay convention"""
    if delta_hat is None:
        return "missed", float(horizon - delta)
    if delta_hat <= delta:
        return "false_alarm", None
    return "detected", float(delta_hat - delta)


class ReplicateOutcome(NamedTuple):
    delta_hat: int | None
    outcome: str
    delay: float | None
    false_alarms: int


def restarted_outcome(times, values, epsilon, w, delta, horizon) -> ReplicateOutcome:
    """
    Replicate outcome when the detector restarts after each false alarm

    Alarms at or before delta are counted; the first alarm after delta is the
    change-point estimate.
    """
    alarms = alarms_with_restart(times, values, epsilon, w)
    false_alarms = sum(t <= delta for t in alarms)
    delta_hat = next((t for t in alarms if t > delta), None)
    outcome, delay = classify_alarm(delta_hat, delta, horizon)
    return ReplicateOutcome(delta_hat, outcome, delay, false_alarms)


def aggregate_delays(delays):
    """Mean and sd (ddof=1, 0 for a single value) of the recorded delays"""
    values = np.asarray([v for v in delays if v is not None], dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), sd


# =====================================================
# DELAY STUDY
# =====================================================

def replicate_stream(config: ExperimentConfig, d, replicate) -> list:
    """The change stream of one replicate; every estimator and h consumes this exact stream"""
    return generate(config.scenario_for(d).with_changes(replicate=replicate))


def _replicate_paths(config: ExperimentConfig, d, replicate, policy: PropensityPolicy):
    stream = replicate_stream(config, d, replicate)
    model, monitored = policy.resolve(stream, config.w)
    paths = {}
    for h in config.h_list:
        for estimator in config.estimators:
            detector = DetectorConfig(
                w=config.w,
                h=h,
                epsilon=math.inf,
                kernel=config.kernel,
                propensity=model,
                estimator=estimator,
                eval_policy=config.eval_policy,
            )
            paths[(h, estimator)] = statistic_path(monitored, detector)
    return replicate, paths


def run_experiment(config: ExperimentConfig, results_db=None) -> ExperimentSummary:
    """
    Run a paired delay study

    For every d the replicate streams are generated once; both estimators and
    every bandwidth read the same stream. Thresholds are calibrated per
    (d, h, gamma, estimator) on no-change streams.

    Args:
        config: experiment configuration
        results_db: optional ResultsDatabase receiving the run

    Returns:
        ExperimentSummary
    """
    spec = config.scenario
    run_id = results_db.start_run(config.name, config.to_dict(), config.base_seed) if results_db else None
    cells, records = [], []

    for d in config.d_list:
        policy = config.propensity_policy(d)
        null_source = scenario_null_source(
            spec.id, d, n=spec.n, seed=derive_seed(config.base_seed, "calibration"), noise_scale=spec.noise_scale
        )

        if config.n_jobs == 1:
            results = [_replicate_paths(config, d, r, policy) for r in range(config.reps)]
        else:
            results = Parallel(n_jobs=config.n_jobs)(
                delayed(_replicate_paths)(config, d, r, policy) for r in range(config.reps)
            )
        results = sorted(results, key=lambda item: item[0])

        for h in config.h_list:
            for gamma in config.gamma_list:
                for estimator in config.estimators:
                    calibration = calibrate_epsilon(
                        null_source,
                        config.w,
                        h,
                        config.kernel,
                        policy,
                        config.calibration_for(gamma),
                        estimator=estimator,
                        eval_policy=config.eval_policy,
                    )
                    key = {"scenario": spec.id, "d": d, "h": h, "gamma": gamma, "w": config.w, "estimator": estimator}
                    cell_records = []
                    for replicate, paths in results:
                        times, values = paths[(h, estimator)]
                        result = restarted_outcome(times, values, calibration.epsilon, config.w, spec.delta, spec.T)
                        cell_records.append(
                            {
                                **key,
                                "replicate": replicate,
                                "epsilon": calibration.epsilon,
                                "delta_hat": result.delta_hat,
                                "outcome": result.outcome,
                                "delay": result.delay,
                                "false_alarms": result.false_alarms,
                            }
                        )

                    mean_delay, sd_delay = aggregate_delays(r["delay"] for r in cell_records)
                    cell = {
                        **key,
                        "epsilon": calibration.epsilon,
                        "arl_estimate": calibration.arl.mean,
                        "arl_censored": calibration.arl.censored,
                        "mean_delay": mean_delay,
                        "sd_delay": sd_delay,
                        "false_alarms": sum(r["false_alarms"] for r in cell_records),
                        "missed": sum(r["outcome"] == "missed" for r in cell_records),
                        "reps": config.reps,
                    }
                    cells.append(cell)
                    records.extend(cell_records)
                    logger.info(
                        f"Cell S{spec.id} d={d} h={h} gamma={gamma} {estimator}: delay {mean_delay:.1f} "
                        f"({sd_delay:.1f}), false alarms {cell['false_alarms']}, missed {cell['missed']}"
                    )

                    if results_db:
                        results_db.record_calibration(run_id, key, calibration)
                        results_db.record_cell(run_id, cell)
                        results_db.record_replicates(run_id, cell_records)

    summary = ExperimentSummary(pd.DataFrame(cells, columns=CELL_COLUMNS), pd.DataFrame(records, columns=RECORD_COLUMNS))
    if results_db:
        results_db.finish_run(run_id)
    if config.output_dir:
        write_outputs(summary, config.output_dir, config.name)
    return summary


class SignTestResult(NamedTuple):
    wins: int
    losses: int
    ties: int
    p_value: float


def paired_sign_test(records: pd.DataFrame, first="one-k", second="dk") -> SignTestResult:
    """
    One-sided sign test that `first` detects sooner than `second`

    Pairs are matched on cell and replicate; pairs where either side carries
    no delay are dropped.
    """
    pair_keys = ["scenario", "d", "h", "gamma", "w", "replicate"]
    a = records[records["estimator"] == first].set_index(pair_keys)["delay"]
    b = records[records["estimator"] == second].set_index(pair_keys)["delay"]
    paired = pd.concat([a.rename("first"), b.rename("second")], axis=1, join="inner").dropna()
    wins = int((paired["first"] < paired["second"]).sum())
    losses = int((paired["first"] > paired["second"]).sum())
    ties = int(len(paired) - wins - losses)
    if wins + losses == 0:
        return SignTestResult(wins, losses, ties, 1.0)
    p_value = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
    return SignTestResult(wins, losses, ties, float(p_value))


# =====================================================
# ONE-K VS TWO-K CURVES
# =====================================================

def onek_twok_estimates(batch: TimeBatch, grid, bandwidths=DEFAULT_CURVE_BANDWIDTHS, kernel=None, clip=DEFAULT_CLIP):
    """
    One-K and Two-K estimates over a grid from one cross-section

    Args:
        batch: cross-section (pi-hat is the treated fraction of the batch)
        grid: (m, d) evaluation points
        bandwidths: (h for One-K, h for the treated mean, h for the control mean)

    Returns:
        tuple: (one_k, two_k) arrays; NaN where a ratio has no kernel mass
    """
    kernel = kernel or KernelSpec()
    h_one, h_treated, h_control = bandwidths
    grid = np.asarray(grid, dtype=float).reshape(-1, batch.d)
    model = fit_constant([batch], clip=clip)
    y_hat = transformed_outcomes(batch.y, batch.z, predict_many(model, batch.x))
    one_k, _ = nw_cate_arrays(y_hat, batch.x, kernel, h_one, grid)
    two_k = two_k_cate(batch.y, batch.x, batch.z, kernel, h_treated, h_control, grid)
    return one_k, two_k


def onek_twok_curves(
    n=CURVE_SAMPLE_SIZE, seed=0, bandwidths=DEFAULT_CURVE_BANDWIDTHS, kernel=None, grid_size=CURVE_GRID_SIZE, path=None
) -> pd.DataFrame:
    """
    One-K vs Two-K estimates of the one-dimensional comparison CATE

    Returns:
        DataFrame: columns x, true_tau, one_k, two_k over grid_size points of [0, 1]
    """
    if n < 10:
        raise CateWatchError(f"The curve comparison needs n >= 10, got {n}")
    batch = curve_dataset(n=n, seed=seed)
    grid = np.linspace(0.0, 1.0, grid_size)
    one_k, two_k = onek_twok_estimates(batch, grid[:, None], bandwidths=bandwidths, kernel=kernel)
    curves = pd.DataFrame({"x": grid, "true_tau": curve_tau(grid), "one_k": one_k, "two_k": two_k})
    if path:
        try:
            curves.to_csv(path, index=False)
        except OSError as e:
            raise ReportError(f"Cannot write curves to {path}: {e}") from e
        logger.info(f"Wrote {len(curves)} curve points to {path}")
    return curves


def curve_mse(curves: pd.DataFrame):
    """(One-K MSE, Two-K MSE) against the true CATE, ignoring points without mass"""
    one = np.nanmean((curves["one_k"] - curves["true_tau"]) ** 2)
    two = np.nanmean((curves["two_k"] - curves["true_tau"]) ** 2)
    return float(one), float(two)


# =====================================================
# REPORTING
# =====================================================

def markdown_table(cells: pd.DataFrame) -> str:
    if cells.empty:
        return "| d | h |\n|---|---|\n"
    frame = cells.copy()
    frame["column"] = frame.apply(lambda r: f"gamma={r['gamma']:g} {r['estimator']}", axis=1)
    frame["value"] = frame.apply(
        lambda r: "n/a" if pd.isna(r["mean_delay"]) else f"{r['mean_delay']:.1f} ({r['sd_delay']:.1f})", axis=1
    )
    columns = list(dict.fromkeys(frame.sort_values(["gamma"], kind="stable")["column"]))
    table = frame.pivot_table(index=["d", "h"], columns="column", values="value", aggfunc="first", sort=False)
    table = table.reindex(columns=columns).reset_index()
    table.columns.name = None
    return table.to_markdown(index=False) + "\n"


def report(summary: ExperimentSummary, fmt, path):
    """
    Serialise the per-cell summary

    Args:
        summary: experiment summary
        fmt: 'csv', 'json' or 'markdown' (rows d x h, columns gamma x estimator)
        path: output file

    Raises:
        ReportError: unknown format or unwritable path
    """
    if fmt not in REPORT_FORMATS:
        raise ReportError(f"Unknown report format '{fmt}'; choose from {REPORT_FORMATS}")
    cells = summary.cells.reindex(columns=CELL_COLUMNS)
    try:
        if fmt == "csv":
            cells.to_csv(path, index=False)
        elif fmt == "json":
            Path(path).write_text(cells.to_json(orient="records", indent=2, double_precision=15))
        else:
            Path(path).write_text(markdown_table(cells))
    except OSError as e:
        raise ReportError(f"Cannot write {fmt} report to {path}: {e}") from e
    logger.info(f"Wrote {len(cells)} summary rows to {path}")


def write_replicate_log(summary: ExperimentSummary, path):
    """One JSON object per replicate record"""
    try:
        with open(path, "w") as handle:
            for record in summary.records.to_dict(orient="records"):
                clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in record.items()}
                handle.write(json.dumps(clean, default=_json_default) + "\n")
    except OSError as e:
        raise ReportError(f"Cannot write replicate log to {path}: {e}") from e


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Cannot serialise {type(value).__name__}")


def write_outputs(summary: ExperimentSummary, output_dir, name):
    """CSV, markdown and per-replicate NDJSON outputs under output_dir"""
    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"Cannot create output directory {output_dir}: {e}") from e
    report(summary, "csv", output_dir / f"{name}_summary.csv")
    report(summary, "markdown", output_dir / f"{name}_summary.md")
    write_replicate_log(summary, output_dir / f"{name}_replicates.ndjson")


def load_summary_csv(path) -> pd.DataFrame:
    """Read a CSV summary written by report()"""
    if not Path(path).exists():
        raise ReportError(f"Summary file not found: {path}")
    return pd.read_csv(path)
