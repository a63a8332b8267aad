"""
Run the Simulation Study
========================
Scripted end-to-end run of the delay studies and the curve comparison

This script:
1. Loads the experiment configurations
2. Runs the w = 3 delay study for Scenarios 1-4
3. Runs the w = 7 robustness study for Scenarios 1-4
4. Runs the One-K vs Two-K curve comparison over 10 seeds
5. Prints the summary tables and paired sign tests

Usage:
    python run_studies.py [--smoke] [--n-jobs 4] [--db results/ledger.db]
"""

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

sys.path.append(str(Path(__file__).parent))

from database.results_db import ResultsDatabase
from utils.harness import (
    ExperimentConfig,
    curve_mse,
    markdown_table,
    onek_twok_curves,
    paired_sign_test,
    run_experiment,
)
from utils.model import CateWatchError
from utils.simulate import SCENARIO_IDS

CONFIG_DIR = Path(__file__).parent / "configs"
TOTAL_STEPS = 5


def print_header(title):
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70)


def print_step(step, total, description):
    print(f"\n[{step}/{total}] {description}...")


def load_configs(smoke, n_jobs):
    print_step(1, TOTAL_STEPS, "Loading experiment configurations")
    names = ["smoke"] if smoke else ["delay_study", "robustness_study"]
    configs = {}
    for name in names:
        config = ExperimentConfig.from_json(CONFIG_DIR / f"{name}.json")
        if n_jobs:
            config = config.with_changes(n_jobs=n_jobs)
        configs[name] = config
        logger.info(f"Loaded {name}: w={config.w}, reps={config.reps}, n_mc={config.n_mc}")
    return configs


def run_study(step, title, config, ledger):
    """Run one configuration for every scenario and print its tables"""
    print_step(step, TOTAL_STEPS, title)
    cells, records = [], []
    for scenario_id in SCENARIO_IDS:
        scenario = config.scenario.with_changes(id=scenario_id)
        output_dir = f"{config.output_dir}/scenario{scenario_id}" if config.output_dir else None
        scenario_config = config.with_changes(
            name=f"{config.name}_s{scenario_id}", scenario=scenario, output_dir=output_dir
        )
        summary = run_experiment(scenario_config, results_db=ledger)

        print_header(f"{config.name.upper()} - SCENARIO {scenario_id} (w={config.w})")
        print(markdown_table(summary.cells))
        if {"one-k", "dk"} <= set(config.estimators):
            test = paired_sign_test(summary.records)
            print(
                f"Paired sign test one-k < dk: wins={test.wins}, losses={test.losses}, "
                f"ties={test.ties}, p={test.p_value:.4f}"
            )
        cells.append(summary.cells)
        records.append(summary.records)
    return pd.concat(cells, ignore_index=True), pd.concat(records, ignore_index=True)


def run_curves(step, seeds=10):
    print_step(step, TOTAL_STEPS, "Comparing One-K and Two-K curves")
    rows = []
    for seed in range(seeds):
        one, two = curve_mse(onek_twok_curves(seed=seed))
        rows.append({"seed": seed, "mse_one_k": one, "mse_two_k": two, "one_k_better": one < two})
    table = pd.DataFrame(rows)
    print(table.to_markdown(index=False))
    logger.info(f"One-K beats Two-K on {int(table['one_k_better'].sum())} of {seeds} seeds")
    return table


def main(argv=None):
    parser = argparse.ArgumentParser(description="Run the simulation study")
    parser.add_argument("--smoke", action="store_true", help="Small configuration for a quick check")
    parser.add_argument("--n-jobs", type=int, default=None)
    parser.add_argument("--db", default=None, help="SQLite results ledger")
    args = parser.parse_args(argv)

    print_header("CATE WATCH - SIMULATION STUDY")
    try:
        configs = load_configs(args.smoke, args.n_jobs)
        ledger = ResultsDatabase(args.db) if args.db else None

        step = 2
        for name, config in configs.items():
            title = "Running the robustness study" if name == "robustness_study" else "Running the delay study"
            run_study(step, title, config, ledger)
            step += 1
        if args.smoke:
            step = 4
        run_curves(step)

        print_step(TOTAL_STEPS, TOTAL_STEPS, "Summarising")
        if ledger:
            for table, count in ledger.get_database_stats().items():
                print(f"   {table}: {count} rows")
        print_header("STUDY COMPLETE")
        return True
    except CateWatchError as e:
        logger.error(f"Study failed: {e}")
        return False


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
