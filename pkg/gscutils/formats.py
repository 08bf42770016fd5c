#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import os
import io
import csv
import enum
import json
import struct
import tempfile
import contextlib
import numpy as np

from typing import *
from gscutils.errors import FormatError, PreconditionError

if TYPE_CHECKING:
	from gscutils.data import ScoreVector
	from gscutils.selection import RCCurve
	from gscutils.synthetic import ScoreGrid
	from gscutils.asymptotics import AsymptoticReport

BIN_MAGIC = b"SCLG"
BIN_VERSION = 1

# magic, version u16, rows u32, cols u32; little-endian, no padding
_BIN_HEADER = struct.Struct("<4sHII")


class MatrixFormat(enum.Enum):
	CSV = "csv"
	BIN = "bin"

	def __str__(self) -> str:
		return self.value

	@staticmethod
	def parse(s: str) -> "MatrixFormat":
		try:
			return MatrixFormat(s.strip().lower())
		except ValueError:
			raise PreconditionError(f"unknown matrix format '{s}' (expected csv or bin)")

	@staticmethod
	def from_path(path: str) -> "MatrixFormat":
		ext = os.path.splitext(path)[1].lower()
		return MatrixFormat.BIN if ext in (".bin", ".sclg") else MatrixFormat.CSV


@contextlib.contextmanager
def atomic_write(path: str, mode: str = "w") -> Iterator[IO[Any]]:
	"""Write to a temporary file next to `path`, then rename it into place."""
	folder = os.path.dirname(os.path.abspath(path))
	os.makedirs(folder, exist_ok=True)

	fd, tmp = tempfile.mkstemp(dir=folder, prefix=f".{os.path.basename(path)}.", suffix=".tmp")
	try:
		kwargs = { "newline": "" } if "b" not in mode else {}
		with os.fdopen(fd, mode, **kwargs) as f:
			yield f
		os.replace(tmp, path)
	except BaseException:
		if os.path.exists(tmp):
			os.remove(tmp)
		raise


def read_matrix(path: str, fmt: Optional[MatrixFormat] = None) -> np.ndarray:
	fmt = fmt or MatrixFormat.from_path(path)
	if not os.path.exists(path):
		raise FormatError(path, "file does not exist")

	match fmt:
		case MatrixFormat.CSV:
			return _read_csv(path)
		case MatrixFormat.BIN:
			return _read_bin(path)


def write_matrix(path: str, m: Any, fmt: Optional[MatrixFormat] = None, header: Optional[Sequence[str]] = None):
	fmt = fmt or MatrixFormat.from_path(path)
	a = np.atleast_2d(np.asarray(m))
	if a.ndim != 2:
		raise PreconditionError(f"can only write matrices, got {a.ndim} dimensions")

	match fmt:
		case MatrixFormat.CSV:
			cols = list(header) if header is not None else [f"c{j}" for j in range(a.shape[1])]
			if len(cols) != a.shape[1]:
				raise PreconditionError(f"{len(cols)} header columns for a matrix with {a.shape[1]}")
			write_csv(path, cols, a.tolist())

		case MatrixFormat.BIN:
			with atomic_write(path, "wb") as f:
				f.write(_BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, a.shape[0], a.shape[1]))
				f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_csv(path: str) -> np.ndarray:
	with open(path, "r", newline="") as f:
		reader = csv.reader(f)
		header = next(reader, None)
		if header is None:
			raise FormatError(path, "empty file (expected a header row)", line=1)

		cols = len(header)
		rows: list[list[float]] = []
		for row in reader:
			line = reader.line_num
			if len(row) == 0:
				continue
			if len(row) != cols:
				raise FormatError(path, f"expected {cols} fields, found {len(row)}", line=line)
			try:
				rows.append([float(x) for x in row])
			except ValueError as e:
				raise FormatError(path, f"not a number ({e})", line=line)

	return np.asarray(rows, dtype=np.float64).reshape(len(rows), cols)


def _read_bin(path: str) -> np.ndarray:
	with open(path, "rb") as f:
		data = f.read()

	if len(data) < _BIN_HEADER.size:
		raise FormatError(path, f"truncated header ({len(data)} bytes)", offset=len(data))

	magic, version, rows, cols = _BIN_HEADER.unpack_from(data, 0)
	if magic != BIN_MAGIC:
		raise FormatError(path, "bad magic", offset=0)
	if version != BIN_VERSION:
		raise FormatError(path, f"unsupported version {version}", offset=4)

	want = _BIN_HEADER.size + 4 * rows * cols
	if len(data) != want:
		raise FormatError(path, f"expected {want} bytes for a {rows}x{cols} matrix, found {len(data)}", offset=min(len(data), want))

	m = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=_BIN_HEADER.size)
	return m.reshape(rows, cols).astype(np.float64)


def read_vector(path: str, fmt: Optional[MatrixFormat] = None) -> np.ndarray:
	"""A single row or a single column, flattened."""
	m = read_matrix(path, fmt)
	if m.shape[0] > 1 and m.shape[1] > 1:
		raise FormatError(path, f"expected a single row or column, found {m.shape[0]}x{m.shape[1]}")
	return m.reshape(-1)


def read_labels(path: str, fmt: Optional[MatrixFormat] = None) -> np.ndarray:
	v = read_vector(path, fmt)
	if not np.all(np.isfinite(v)) or not np.all(v == np.round(v)):
		i = int(np.flatnonzero(~np.isfinite(v) | (v != np.round(v)))[0])
		raise FormatError(path, f"label {i} is not an integer ({v[i]!r})")
	return v.astype(np.int64)


def _cell(v: Any) -> str:
	if v is None:
		return ""
	if isinstance(v, (bool, np.bool_)):
		return "1" if v else "0"
	if isinstance(v, (int, np.integer)):
		return str(int(v))
	if isinstance(v, (float, np.floating)):
		# shortest representation that round-trips
		return repr(float(v))
	return str(v)


def format_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
	buf = io.StringIO()
	w = csv.writer(buf, lineterminator="\n")
	w.writerow(header)
	for row in rows:
		w.writerow([_cell(v) for v in row])
	return buf.getvalue()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
	with atomic_write(path) as f:
		f.write(format_csv(header, rows))


def dumps_json(obj: Any) -> str:
	return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def write_json(path: str, obj: Any):
	with atomic_write(path) as f:
		f.write(dumps_json(obj))


def _json_default(o: Any) -> Any:
	if isinstance(o, np.integer):
		return int(o)
	if isinstance(o, np.floating):
		return float(o)
	if isinstance(o, np.bool_):
		return bool(o)
	if isinstance(o, np.ndarray):
		return o.tolist()
	raise TypeError(f"cannot serialise {type(o).__name__}")


def write_curve(path: str, curve: "RCCurve"):
	write_csv(path, ["coverage", "risk"], curve.rows())


def write_scores(path: str, scores: "ScoreVector"):
	write_csv(path, ["row", str(scores.score_id)], enumerate(scores.values.tolist()))


def write_grid(path: str, grid: "ScoreGrid"):
	"""Long form, one (x, y, value) per grid point, row-major over y then x."""
	gx, gy = np.meshgrid(grid.xs, grid.ys)
	write_csv(path, ["x", "y", "value"], zip(gx.ravel().tolist(), gy.ravel().tolist(), grid.values.ravel().tolist()))


def write_histogram(path: str, edges: np.ndarray, counts: Mapping[str, np.ndarray]):
	names = list(counts.keys())
	rows = ([edges[i], edges[i + 1], *(counts[n][i] for n in names)] for i in range(len(edges) - 1))
	write_csv(path, ["bin_lo", "bin_hi", *names], rows)


def write_asymptotic_report(path: str, report: "AsymptoticReport"):
	write_csv(
	    path,
	    ["score", "lambda", "max_ratio_err", "kendall_tau", "skipped_rows"],
	    ([e.score, e.lam, e.max_ratio_err, e.kendall_tau, e.skipped_rows] for e in report.entries),
	)
