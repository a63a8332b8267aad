"""
Tests for reading and writing NDJSON and CSV observation streams
"""

import io
import json

import numpy as np
import pandas as pd
import pytest

from utils.model import CateWatchError, DimensionMismatch, NonBinaryTreatment, StreamMeta, validate_stream
from utils.stream_loader import (
    batches_to_frame,
    frame_to_batches,
    infer_format,
    iter_ndjson_batches,
    load_ndjson,
    load_stream,
    ndjson_records,
    write_stream,
)


def _assert_same_stream(loaded, original):
    assert [b.t for b in loaded] == [b.t for b in original]
    for a, b in zip(loaded, original):
        assert np.array_equal(a.subjects, b.subjects)
        assert np.array_equal(a.z, b.z)
        assert np.allclose(a.y, b.y, rtol=1e-15, atol=0.0)
        assert np.allclose(a.x, b.x, rtol=1e-15, atol=0.0)


class TestInferFormat:
    @pytest.mark.parametrize(
        "path, expected",
        [("stream.csv", "csv"), ("STREAM.CSV", "csv"), ("stream.ndjson", "ndjson"), ("-", "ndjson")],
    )
    def test_suffix(self, path, expected):
        assert infer_format(path) == expected


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["stream.ndjson", "stream.csv"])
    def test_write_then_load(self, random_stream, tmp_path, name):
        batches = random_stream(T=5, n=4, d=3)
        path = tmp_path / name
        write_stream(batches, path)
        _assert_same_stream(load_stream(path), batches)

    def test_csv_header(self, random_stream, tmp_path):
        path = tmp_path / "stream.csv"
        write_stream(random_stream(T=2, n=3, d=2), path)
        assert path.read_text().splitlines()[0] == "t,i,y,x1,x2,z"

    def test_ndjson_records(self, make_batch, tmp_path):
        batch = make_batch(3, [1.5, -0.25], [[0.1, 0.2], [0.3, 0.4]], [1, 0], subjects=[7, 9])
        path = tmp_path / "stream.ndjson"
        write_stream([batch], path)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert records == [
            {"t": 3, "i": 7, "y": 1.5, "x": [0.1, 0.2], "z": 1},
            {"t": 3, "i": 9, "y": -0.25, "x": [0.3, 0.4], "z": 0},
        ]

    def test_explicit_format_overrides_suffix(self, random_stream, tmp_path):
        batches = random_stream(T=3)
        path = tmp_path / "stream.txt"
        write_stream(batches, path, fmt="csv")
        _assert_same_stream(load_stream(path, fmt="csv"), batches)

    def test_empty_ndjson_stream(self, tmp_path):
        path = tmp_path / "empty.ndjson"
        write_stream([], path)
        assert path.read_text() == ""


class TestLoadErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CateWatchError, match="not found"):
            load_stream(tmp_path / "absent.ndjson")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(CateWatchError):
            load_stream(tmp_path / "stream.ndjson", fmt="parquet")

    def test_ragged_covariates(self, tmp_path):
        path = tmp_path / "ragged.ndjson"
        path.write_text(
            '{"t": 1, "i": 1, "y": 0.0, "x": [0.1, 0.2], "z": 1}\n'
            '{"t": 1, "i": 2, "y": 0.0, "x": [0.1], "z": 0}\n'
        )
        with pytest.raises(DimensionMismatch) as excinfo:
            load_stream(path)
        assert (excinfo.value.got, excinfo.value.expected) == (1, 2)

    def test_scalar_covariate(self):
        source = io.StringIO('{"t": 1, "i": 7, "y": 0.1, "x": 0.5, "z": 1}\n')
        with pytest.raises(CateWatchError, match="t=1, subject=7"):
            load_ndjson(source)

    def test_scalar_covariate_in_the_incremental_reader(self):
        with pytest.raises(CateWatchError, match="must be a list"):
            list(iter_ndjson_batches(['{"t": 1, "i": 1, "y": 0.1, "x": 0.5, "z": 1}']))

    def test_non_numeric_covariate(self, tmp_path):
        path = tmp_path / "stream.csv"
        path.write_text("t,i,y,x1,z\n1,1,0.5,high,1\n")
        with pytest.raises(CateWatchError, match="Non-numeric"):
            load_stream(path)

    def test_missing_field(self):
        with pytest.raises(CateWatchError, match="missing"):
            frame_to_batches(pd.DataFrame({"t": [1], "i": [1], "x1": [0.5], "z": [1]}))

    def test_non_binary_treatment(self, tmp_path):
        path = tmp_path / "stream.csv"
        path.write_text("t,i,y,x1,z\n1,1,0.5,0.2,2\n")
        batches = load_stream(path)
        with pytest.raises(NonBinaryTreatment):
            validate_stream(batches, StreamMeta(d=1))


class TestFrames:
    def test_covariate_columns_are_ordered_numerically(self):
        df = pd.DataFrame({"t": [1], "i": [1], "y": [0.0], "x10": [10.0], "x2": [2.0], "x1": [1.0], "z": [0]})
        batch = frame_to_batches(df)[0]
        assert batch.x.tolist() == [[1.0, 2.0, 10.0]]

    def test_batches_are_grouped_by_period(self, random_stream):
        batches = random_stream(T=4, n=3)
        frame = batches_to_frame(batches).sample(frac=1.0, random_state=0)
        regrouped = frame_to_batches(frame.sort_values(["t", "i"]))
        assert [b.t for b in regrouped] == [1, 2, 3, 4]
        assert all(b.n == 3 for b in regrouped)

    def test_ndjson_layout_keeps_vectors(self, random_stream):
        frame = batches_to_frame(random_stream(T=1, n=2, d=3), layout="ndjson")
        assert list(frame.columns) == ["t", "i", "y", "x", "z"]
        assert len(frame["x"].iloc[0]) == 3


class TestIncrementalReader:
    def test_matches_whole_stream_reader(self, random_stream):
        batches = random_stream(T=4, n=3)
        lines = [json.dumps(record) for record in ndjson_records(batches)]
        _assert_same_stream(list(iter_ndjson_batches(lines)), batches)

    def test_blank_lines_are_skipped(self):
        lines = ['{"t": 1, "i": 1, "y": 0.0, "x": [0.5], "z": 1}', "", "  ", '{"t": 2, "i": 1, "y": 1.0, "x": [0.5], "z": 0}']
        assert [b.t for b in iter_ndjson_batches(lines)] == [1, 2]

    def test_malformed_line_reports_its_number(self):
        lines = io.StringIO('{"t": 1, "i": 1, "y": 0.0, "x": [0.5], "z": 1}\n{oops\n')
        with pytest.raises(CateWatchError, match="line 2"):
            list(iter_ndjson_batches(lines))

    def test_missing_key(self):
        with pytest.raises(CateWatchError, match="missing"):
            list(iter_ndjson_batches(['{"t": 1, "i": 1, "x": [0.5], "z": 1}']))
