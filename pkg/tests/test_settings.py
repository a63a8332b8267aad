"""
Tests for the settings table and its file and environment overlays
"""

import json

import pytest

from utils.model import CateWatchError
from utils.settings import DEFAULT_SETTINGS, Settings


class TestDefaults:
    def test_every_default_is_typed(self):
        settings = Settings()
        assert len(settings.as_dict()) == len(DEFAULT_SETTINGS)
        assert settings["propensity_clip"] == 0.01
        assert settings["n_mc"] == 100
        assert settings["kernel"] == "gaussian"
        assert settings["results_db"] == ""

    def test_get_with_default(self):
        assert Settings().get("not_a_setting", 3) == 3


class TestOverlays:
    def test_file_overlay(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"n_mc": "25", "propensity_clip": 0.05}))
        settings = Settings.load(path, environ={})
        assert settings["n_mc"] == 25
        assert settings["propensity_clip"] == 0.05

    def test_environment_wins_over_file(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"reps": 10}))
        settings = Settings.load(path, environ={"CATEWATCH_REPS": "4", "CATEWATCH_N_JOBS": "2"})
        assert settings["reps"] == 4
        assert settings["n_jobs"] == 2

    def test_unrelated_environment_is_ignored(self):
        settings = Settings.load(environ={"REPS": "4", "CATEWATCH_UNKNOWN": "1"})
        assert settings["reps"] == 50


class TestErrors:
    def test_unknown_key(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"colour": "blue"}))
        with pytest.raises(CateWatchError, match="Unknown setting"):
            Settings.load(path, environ={})

    def test_bad_cast(self):
        with pytest.raises(CateWatchError, match="expects a integer"):
            Settings.load(environ={"CATEWATCH_N_MC": "many"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(CateWatchError, match="not found"):
            Settings.load(tmp_path / "absent.json", environ={})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text("{not json")
        with pytest.raises(CateWatchError, match="not valid JSON"):
            Settings.load(path, environ={})
