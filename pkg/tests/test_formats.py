# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import os
import json
import numpy as np
import pytest

from gscutils import formats as fm
from gscutils import selection as sel
from gscutils import asymptotics as asy
from gscutils.data import ScoreId, ScoreVector
from gscutils.errors import FormatError


def test_bin_round_trip_is_bit_identical(tmp_path, rng):
	m = rng.normal(size=(17, 5)).astype(np.float32)
	path = str(tmp_path / "m.bin")
	fm.write_matrix(path, m)

	back = fm.read_matrix(path)
	assert back.dtype == np.float64
	assert np.array_equal(back.astype(np.float32), m)
	assert os.path.getsize(path) == 14 + 4 * m.size

	with open(path, "rb") as f:
		assert f.read(4) == b"SCLG"


def test_csv_round_trip(tmp_path, rng):
	m = rng.normal(size=(6, 3))
	path = str(tmp_path / "m.csv")
	fm.write_matrix(path, m, header=["a", "b", "c"])
	assert np.array_equal(fm.read_matrix(path), m)

	with open(path) as f:
		assert f.readline().strip() == "a,b,c"


def test_ragged_csv_names_the_line(tmp_path):
	path = tmp_path / "bad.csv"
	path.write_text("c0,c1\n1.0,2.0\n3.0\n")
	with pytest.raises(FormatError) as e:
		fm.read_matrix(str(path))
	assert e.value.line == 3
	assert "line 3" in str(e.value) and "expected 2 fields" in str(e.value)


def test_csv_not_a_number(tmp_path):
	path = tmp_path / "bad.csv"
	path.write_text("c0\n1.0\nfoo\n")
	with pytest.raises(FormatError) as e:
		fm.read_matrix(str(path))
	assert e.value.line == 3


def test_csv_needs_a_header(tmp_path):
	path = tmp_path / "empty.csv"
	path.write_text("")
	with pytest.raises(FormatError):
		fm.read_matrix(str(path))


def test_bin_errors(tmp_path):
	path = tmp_path / "m.bin"
	fm.write_matrix(str(path), np.ones((2, 2)))
	good = path.read_bytes()

	path.write_bytes(b"XXXX" + good[4:])
	with pytest.raises(FormatError) as e:
		fm.read_matrix(str(path))
	assert e.value.offset == 0 and "bad magic" in str(e.value)

	path.write_bytes(good[:-3])
	with pytest.raises(FormatError):
		fm.read_matrix(str(path))

	path.write_bytes(good[:6])
	with pytest.raises(FormatError) as e:
		fm.read_matrix(str(path))
	assert "truncated header" in str(e.value)

	path.write_bytes(good[:4] + b"\x02\x00" + good[6:])
	with pytest.raises(FormatError) as e:
		fm.read_matrix(str(path))
	assert "unsupported version" in str(e.value)


def test_missing_file(tmp_path):
	with pytest.raises(FormatError):
		fm.read_matrix(str(tmp_path / "nope.csv"))


def test_labels(tmp_path):
	path = str(tmp_path / "labels.csv")
	fm.write_matrix(path, np.array([[0], [2], [-1]]), header=["label"])
	assert fm.read_labels(path).tolist() == [0, 2, -1]

	(tmp_path / "frac.csv").write_text("label\n0\n1.5\n")
	with pytest.raises(FormatError):
		fm.read_labels(str(tmp_path / "frac.csv"))

	wide = str(tmp_path / "wide.csv")
	fm.write_matrix(wide, np.ones((2, 2)))
	with pytest.raises(FormatError):
		fm.read_vector(wide)


def test_format_from_path():
	assert fm.MatrixFormat.from_path("x.bin") == fm.MatrixFormat.BIN
	assert fm.MatrixFormat.from_path("x.SCLG") == fm.MatrixFormat.BIN
	assert fm.MatrixFormat.from_path("x.csv") == fm.MatrixFormat.CSV
	assert fm.MatrixFormat.parse(" BIN ") == fm.MatrixFormat.BIN


def test_atomic_write_leaves_nothing_behind(tmp_path):
	path = tmp_path / "out.csv"
	with pytest.raises(RuntimeError):
		with fm.atomic_write(str(path)) as f:
			f.write("half")
			raise RuntimeError("boom")

	assert list(tmp_path.iterdir()) == []

	fm.write_csv(str(path), ["a"], [[1]])
	assert [p.name for p in tmp_path.iterdir()] == ["out.csv"]


def test_cells():
	out = fm.format_csv(["a", "b", "c", "d"], [[None, True, 3, 0.1]])
	assert out == "a,b,c,d\n,1,3,0.1\n"


def test_json_is_canonical():
	s = fm.dumps_json({ "b": np.float64(0.5), "a": np.int64(2), "c": np.array([1, 2]) })
	assert s == json.dumps({ "a": 2, "b": 0.5, "c": [1, 2] }, indent=2, sort_keys=True) + "\n"

	with pytest.raises(ValueError):
		fm.dumps_json({ "x": float("nan") })


def test_typed_writers(tmp_path):
	curve = sel.rc_curve([0.9, 0.8, 0.1], [0, 1, 0])
	fm.write_curve(str(tmp_path / "rc.csv"), curve)
	assert (tmp_path / "rc.csv").read_text().splitlines()[0] == "coverage,risk"
	assert len((tmp_path / "rc.csv").read_text().splitlines()) == 4

	fm.write_scores(str(tmp_path / "s.csv"), ScoreVector.create([0.5, 0.25], ScoreId.ENERGY))
	assert (tmp_path / "s.csv").read_text() == "row,energy\n0,0.5\n1,0.25\n"

	fm.write_histogram(str(tmp_path / "h.csv"), np.array([0.0, 0.5, 1.0]), { "x": np.array([3, 4]) })
	assert (tmp_path / "h.csv").read_text() == "bin_lo,bin_hi,x\n0.0,0.5,3\n0.5,1.0,4\n"

	report = asy.convergence_sweep([[2.0, 0.0], [1.0, 0.0]], [0.0, 1.0], score_ids=[ScoreId.SR_ENT])
	fm.write_asymptotic_report(str(tmp_path / "a.csv"), report)
	lines = (tmp_path / "a.csv").read_text().splitlines()
	assert lines[0] == "score,lambda,max_ratio_err,kendall_tau,skipped_rows"
	assert lines[1] == "sr_ent,0.0,,,0"
