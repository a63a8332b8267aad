"""
Settings for CATE Watch
=======================
Typed defaults table, overlaid first by a JSON settings file and then by
CATEWATCH_<KEY> environment variables.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

from utils.model import CateWatchError

logger = logging.getLogger(__name__)

ENV_PREFIX = "CATEWATCH_"

# (key, default, type, description)
DEFAULT_SETTINGS = [
    ("log_level", "INFO", "string", "Logging level for the command-line tools"),
    ("propensity_clip", "0.01", "float", "Overlap clip applied to every propensity prediction"),
    ("logistic_tol", "1e-8", "float", "Gradient sup-norm at which the Newton fit stops"),
    ("logistic_max_iter", "100", "integer", "Newton iteration budget"),
    ("logistic_max_halvings", "30", "integer", "Step halvings allowed per Newton iteration"),
    ("logistic_beta_cap", "30", "float", "Coefficient sup-norm treated as separation"),
    ("n_mc", "100", "integer", "Monte-Carlo replications per threshold calibration"),
    ("reps", "50", "integer", "Replicates per experiment cell"),
    ("n_jobs", "1", "integer", "joblib workers for replicate fan-out"),
    ("kernel", "gaussian", "string", "Default kernel family"),
    ("horizon_factor", "10", "float", "Calibration horizon as a multiple of the target ARL"),
    ("results_db", "", "string", "SQLite results ledger path (empty disables it)"),
]


def _parse_bool(value):
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


_CASTS = {"string": str, "float": float, "integer": int, "boolean": _parse_bool}


def _cast(key, value, stype):
    try:
        return _CASTS[stype](value)
    except (TypeError, ValueError) as e:
        raise CateWatchError(f"Setting '{key}' expects a {stype}, got {value!r}") from e


class Settings:
    """Resolved settings; read with settings['key'] or settings.get('key')"""

    def __init__(self, values=None):
        self._types = {key: stype for key, _, stype, _ in DEFAULT_SETTINGS}
        self._values = {key: _cast(key, default, stype) for key, default, stype, _ in DEFAULT_SETTINGS}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in self._types:
            raise CateWatchError(f"Unknown setting '{key}'")
        self._values[key] = _cast(key, value, self._types[key])

    def __getitem__(self, key):
        return self._values[key]

    def get(self, key, default=None):
        return self._values.get(key, default)

    def as_dict(self) -> dict:
        return dict(self._values)

    @classmethod
    def load(cls, path=None, environ=None) -> "Settings":
        """
        Resolve settings

        Args:
            path: optional JSON file of {key: value}
            environ: mapping searched for CATEWATCH_<KEY> (defaults to os.environ)

        Returns:
            Settings
        """
        settings = cls()
        if path:
            path = Path(path)
            if not path.exists():
                raise CateWatchError(f"Settings file not found: {path}")
            try:
                document = json.loads(path.read_text())
            except json.JSONDecodeError as e:
                raise CateWatchError(f"Settings file {path} is not valid JSON: {e}") from e
            for key, value in document.items():
                settings.set(key, value)
            logger.debug(f"Loaded {len(document)} settings from {path}")

        environ = os.environ if environ is None else environ
        for key, _, _, _ in DEFAULT_SETTINGS:
            name = ENV_PREFIX + key.upper()
            if name in environ:
                settings.set(key, environ[name])
                logger.debug(f"Setting {key} taken from {name}")
        return settings
