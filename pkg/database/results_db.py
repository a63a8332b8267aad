"""
Results Ledger for CATE Watch
=============================
SQLite ledger of experiment runs, threshold calibrations, per-cell delay
summaries and per-replicate alarm records.
"""

import json
import logging
import math
import sqlite3
from contextlib import contextmanager
from pathlib import Path

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).parent / "schema.sql"
TABLES = ["runs", "calibrations", "experiment_cells", "replicate_records"]


def _nullable(value):
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


class ResultsDatabase:
    """Manages every write to and read from the results ledger"""

    def __init__(self, db_path):
        self.db_path = Path(db_path)
        self.ensure_database_exists()

    @contextmanager
    def get_connection(self):
        """
        Connection with commit on success and rollback on error

        Usage:
            with ledger.get_connection() as conn:
                conn.execute("SELECT * FROM runs")
        """
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys = ON")
        try:
            yield conn
            conn.commit()
        except Exception as e:
            conn.rollback()
            logger.error(f"Database error: {e}")
            raise
        finally:
            conn.close()

    def ensure_database_exists(self):
        """Create the ledger and its tables if needed"""
        if not self.db_path.exists():
            logger.info(f"Creating results ledger at {self.db_path}")
            self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.create_tables()

    def create_tables(self):
        with self.get_connection() as conn:
            conn.executescript(SCHEMA_PATH.read_text())

    # =====================================================
    # RUNS
    # =====================================================

    def start_run(self, name, config, base_seed):
        """
        Register an experiment run

        Args:
            name: run label
            config: configuration document (stored as JSON)
            base_seed: root seed of the run

        Returns:
            int: run_id
        """
        with self.get_connection() as conn:
            cursor = conn.execute(
                "INSERT INTO runs (name, config_json, base_seed) VALUES (?, ?, ?)",
                (name, json.dumps(config, default=str), int(base_seed)),
            )
            run_id = cursor.lastrowid
        logger.info(f"Started run '{name}' (ID: {run_id})")
        return run_id

    def finish_run(self, run_id):
        with self.get_connection() as conn:
            conn.execute("UPDATE runs SET finished_at = CURRENT_TIMESTAMP WHERE run_id = ?", (run_id,))
        logger.info(f"Finished run ID: {run_id}")

    # =====================================================
    # CALIBRATIONS AND CELLS
    # =====================================================

    def record_calibration(self, run_id, key, calibration):
        """Store one calibrated threshold; key holds scenario, d, h, gamma, w, estimator"""
        with self.get_connection() as conn:
            cursor = conn.execute(
                """
                INSERT INTO calibrations (
                    run_id, scenario, d, h, gamma, w, estimator,
                    epsilon, arl_estimate, arl_sd, censored, n_mc
                ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (
                    run_id,
                    int(key["scenario"]),
                    int(key["d"]),
                    float(key["h"]),
                    float(key["gamma"]),
                    int(key["w"]),
                    key["estimator"],
                    float(calibration.epsilon),
                    float(calibration.arl.mean),
                    float(calibration.arl.sd),
                    int(calibration.arl.censored),
                    int(calibration.arl.n_runs),
                ),
            )
            calibration_id = cursor.lastrowid
        logger.info(f"Recorded calibration epsilon={calibration.epsilon:.5f} (ID: {calibration_id})")
        return calibration_id

    def record_cell(self, run_id, cell):
        with self.get_connection() as conn:
            cursor = conn.execute(
                """
                INSERT INTO experiment_cells (
                    run_id, scenario, d, h, gamma, estimator, epsilon,
                    mean_delay, sd_delay, false_alarms, missed, reps
                ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (
                    run_id,
                    int(cell["scenario"]),
                    int(cell["d"]),
                    float(cell["h"]),
                    float(cell["gamma"]),
                    cell["estimator"],
                    float(cell["epsilon"]),
                    _nullable(cell["mean_delay"]),
                    _nullable(cell["sd_delay"]),
                    int(cell["false_alarms"]),
                    int(cell["missed"]),
                    int(cell["reps"]),
                ),
            )
            return cursor.lastrowid

    def record_replicates(self, run_id, records):
        """Bulk insert per-replicate records"""
        rows = [
            (
                run_id,
                int(r["scenario"]),
                int(r["d"]),
                float(r["h"]),
                float(r["gamma"]),
                r["estimator"],
                int(r["replicate"]),
                None if r["delta_hat"] is None else int(r["delta_hat"]),
                r["outcome"],
                _nullable(r["delay"]),
                int(r.get("false_alarms", 0)),
            )
            for r in records
        ]
        with self.get_connection() as conn:
            conn.executemany(
                """
                INSERT INTO replicate_records (
                    run_id, scenario, d, h, gamma, estimator, replicate, delta_hat, outcome, delay, false_alarms
                ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                rows,
            )
        logger.info(f"Recorded {len(rows)} replicate records for run ID: {run_id}")

    # =====================================================
    # QUERIES
    # =====================================================

    def get_run(self, run_id):
        with self.get_connection() as conn:
            row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
            return dict(row) if row else None

    def get_cells(self, run_id):
        """Cells of a run in insertion order"""
        return self.execute_query("SELECT * FROM experiment_cells WHERE run_id = ? ORDER BY cell_id", (run_id,))

    def execute_query(self, query, params=None):
        with self.get_connection() as conn:
            cursor = conn.execute(query, params or ())
            return [dict(row) for row in cursor.fetchall()]

    def get_table_count(self, table_name):
        if table_name not in TABLES:
            raise ValueError(f"Unknown table '{table_name}'")
        with self.get_connection() as conn:
            return conn.execute(f"SELECT COUNT(*) AS count FROM {table_name}").fetchone()["count"]

    def get_database_stats(self):
        return {table: self.get_table_count(table) for table in TABLES}
