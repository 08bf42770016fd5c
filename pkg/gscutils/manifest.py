#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

"""
Dataset manifests. A manifest is a JSON document listing the files that make up one evaluation
set, e.g.

    {
      "K": 10, "D": 512,
      "entries": [
        { "split": "val",      "kind": "logits",   "path": "val_logits.bin", "shift": "in" },
        { "split": "val",      "kind": "labels",   "path": "val_labels.csv" },
        { "split": "val",      "kind": "features", "path": "val_feats.bin", "format": "bin" },
        { "split": "sketch",   "kind": "logits",   "path": "sketch.bin",     "shift": "cov" },
        { "split": "sketch",   "kind": "labels",   "path": "sketch_labels.csv" },
        { "split": "openimg",  "kind": "logits",   "path": "open.bin",       "shift": "label" },
        { "kind": "weight_norms", "path": "head_norms.csv" }
      ]
    }

Paths are relative to the manifest. The format defaults from the file extension; `K` and `D` may be
given per entry or once for the whole manifest. Label-shifted splits may omit their labels file.
"""

import os
import json
import numpy as np

from typing import *
from gscutils import msg
from dataclasses import dataclass
from gscutils import formats
from gscutils.formats import MatrixFormat
from gscutils.data import EvalSet, ClassifierHead, ShiftTag, SHIFT_LABEL_SENTINEL, validate
from gscutils.errors import GscError, ManifestError, ValidationError

KINDS = ("logits", "features", "labels", "weight_norms")


@dataclass(frozen=True)
class ManifestEntry:
	split: Optional[str]
	kind: str
	path: str
	format: MatrixFormat
	shift: ShiftTag
	k: Optional[int]
	d: Optional[int]

	@staticmethod
	def load(obj: Any, idx: int, base: str, k: Optional[int], d: Optional[int]) -> tuple[Optional["ManifestEntry"], list[str]]:
		where = f"entry {idx}"
		if not isinstance(obj, dict):
			return None, [f"{where}: expected an object"]

		problems: list[str] = []
		kind = obj.get("kind")
		if kind not in KINDS:
			problems.append(f"{where}: unknown kind {kind!r} (expected one of {', '.join(KINDS)})")

		path = obj.get("path")
		if not isinstance(path, str):
			problems.append(f"{where}: missing 'path'")

		split = obj.get("split")
		if kind != "weight_norms" and not isinstance(split, str):
			problems.append(f"{where}: '{kind}' entries need a 'split' name")

		try:
			fmt = MatrixFormat.parse(obj["format"]) if "format" in obj else None
			shift = ShiftTag.parse(obj["shift"]) if "shift" in obj else ShiftTag.IN_D
		except GscError as e:
			problems.append(f"{where}: {e}")
			fmt, shift = None, ShiftTag.IN_D

		ek, ed = obj.get("K", k), obj.get("D", d)
		for name, v in (("K", ek), ("D", ed)):
			if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
				problems.append(f"{where}: '{name}' must be a positive integer, got {v!r}")

		if problems:
			return None, problems

		full = path if os.path.isabs(path) else os.path.join(base, path)
		return ManifestEntry(
		    split=split,
		    kind=kind,
		    path=full,
		    format=fmt or MatrixFormat.from_path(full),
		    shift=shift,
		    k=ek,
		    d=ed,
		), []


@dataclass(frozen=True)
class Manifest:
	path: str
	entries: list[ManifestEntry]

	def splits(self) -> list[str]:
		"""Split names in order of first appearance."""
		out: list[str] = []
		for e in self.entries:
			if e.split is not None and e.split not in out:
				out.append(e.split)
		return out

	def entry(self, split: Optional[str], kind: str) -> Optional[ManifestEntry]:
		for e in self.entries:
			if e.split == split and e.kind == kind:
				return e
		return None

	@staticmethod
	def load(path: str) -> "Manifest":
		try:
			with open(path, "r") as f:
				doc = json.load(f)
		except FileNotFoundError:
			raise ManifestError([f"manifest '{path}' does not exist"])
		except json.JSONDecodeError as e:
			raise ManifestError([f"manifest '{path}' is not valid JSON: {e}"])

		if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
			raise ManifestError([f"manifest '{path}' needs an 'entries' list"])

		base = os.path.dirname(os.path.abspath(path))
		entries: list[ManifestEntry] = []
		problems: list[str] = []

		for i, obj in enumerate(doc["entries"]):
			e, p = ManifestEntry.load(obj, i, base, doc.get("K"), doc.get("D"))
			problems.extend(p)
			if e is not None:
				entries.append(e)

		seen: set[tuple[Optional[str], str]] = set()
		for e in entries:
			if (e.split, e.kind) in seen:
				problems.append(f"split '{e.split}' lists '{e.kind}' more than once")
			seen.add((e.split, e.kind))

		m = Manifest(path, entries)
		for s in m.splits():
			if m.entry(s, "logits") is None:
				problems.append(f"split '{s}' has no logits")

		if problems:
			raise ManifestError(problems)

		return m


@dataclass(frozen=True, eq=False)
class LoadedSplit:
	name: str
	shift: ShiftTag
	logits: np.ndarray
	labels: np.ndarray
	features: Optional[np.ndarray]


def _read_all(m: Manifest) -> tuple[dict[tuple[Optional[str], str], np.ndarray], list[str]]:
	"""Read every file and check it against the declared shapes; nothing is computed until all pass."""
	arrays: dict[tuple[Optional[str], str], np.ndarray] = {}
	problems: list[str] = []

	for e in m.entries:
		if not os.path.exists(e.path):
			problems.append(f"{e.kind} file '{e.path}' does not exist")

	if problems:
		return arrays, problems

	for e in m.entries:
		try:
			if e.kind == "labels":
				a = formats.read_labels(e.path, e.format)
			elif e.kind == "weight_norms":
				a = formats.read_vector(e.path, e.format)
			else:
				a = formats.read_matrix(e.path, e.format)
		except GscError as err:
			problems.append(str(err))
			continue

		if e.kind == "logits" and e.k is not None and a.shape[1] != e.k:
			problems.append(f"'{e.path}': expected K={e.k} columns, found {a.shape[1]}")
		elif e.kind == "features" and e.d is not None and a.shape[1] != e.d:
			problems.append(f"'{e.path}': expected D={e.d} columns, found {a.shape[1]}")
		elif e.kind == "weight_norms" and e.k is not None and a.shape[0] != e.k:
			problems.append(f"'{e.path}': expected K={e.k} weight norms, found {a.shape[0]}")

		arrays[(e.split, e.kind)] = a

	# row counts and widths must agree within a split and across splits
	widths: dict[str, set[int]] = { "logits": set(), "features": set() }
	for s in m.splits():
		z = arrays.get((s, "logits"))
		if z is None:
			continue
		widths["logits"].add(z.shape[1])

		for kind in ("labels", "features"):
			a = arrays.get((s, kind))
			if a is not None and a.shape[0] != z.shape[0]:
				problems.append(f"split '{s}': {z.shape[0]} logit rows but {a.shape[0]} {kind} rows")
			if a is not None and kind == "features":
				widths["features"].add(a.shape[1])

		if arrays.get((s, "labels")) is None and m.entry(s, "logits").shift != ShiftTag.SHIFT_LABEL:
			problems.append(f"split '{s}' has no labels (only label-shifted splits may omit them)")

	for kind, w in widths.items():
		if len(w) > 1:
			problems.append(f"splits disagree on the number of {kind} columns: {sorted(w)}")

	with_features = [s for s in m.splits() if (s, "features") in arrays]
	if with_features and len(with_features) != len(m.splits()):
		problems.append(f"features are given for {', '.join(with_features)} but not for every split")

	return arrays, problems


def load_splits(m: Manifest) -> tuple[list[LoadedSplit], Optional[np.ndarray]]:
	arrays, problems = _read_all(m)
	if problems:
		raise ManifestError(problems)

	splits: list[LoadedSplit] = []
	for s in m.splits():
		z = arrays[(s, "logits")]
		shift = m.entry(s, "logits").shift
		labels = arrays.get((s, "labels"))
		if labels is None:
			labels = np.full(z.shape[0], SHIFT_LABEL_SENTINEL, dtype=np.int64)

		splits.append(LoadedSplit(s, shift, z, labels, arrays.get((s, "features"))))

	return splits, arrays.get((None, "weight_norms"))


def load_evalset(path: str) -> tuple[EvalSet, Optional[ClassifierHead]]:
	"""Load, shape-check and validate a manifest; splits are stacked in manifest order."""
	m = Manifest.load(path)
	splits, norms = load_splits(m)

	msg.log(f"Loaded {len(splits)} split{'' if len(splits) == 1 else 's'} from '{os.path.basename(path)}'")
	with msg.Indent():
		for s in splits:
			msg.log2(f"{s.name}: {s.logits.shape[0]} rows ({s.shift.name})")

	has_features = all(s.features is not None for s in splits)
	es = EvalSet.create(
	    np.concatenate([s.logits for s in splits]),
	    np.concatenate([s.labels for s in splits]),
	    np.concatenate([np.full(s.logits.shape[0], int(s.shift), dtype=np.int8) for s in splits]),
	    np.concatenate([cast(np.ndarray, s.features) for s in splits]) if has_features else None,
	)

	head = ClassifierHead.create(norms) if norms is not None else None
	if (violations := validate(es, head)):
		raise ValidationError(violations)

	return es, head


def write_manifest(path: str, es: EvalSet, head: Optional[ClassifierHead] = None, fmt: MatrixFormat = MatrixFormat.CSV):
	"""Write `es` as one split per shift tag, plus a manifest that reads it back."""
	folder = os.path.dirname(os.path.abspath(path))
	ext = str(fmt)

	entries: list[dict[str, Any]] = []
	for tag in ShiftTag:
		rows = es.rows_tagged(tag)
		if len(rows) == 0:
			continue

		name = tag.name.lower()
		formats.write_matrix(f"{folder}/{name}_logits.{ext}", es.logits[rows], fmt, [f"z{j}" for j in range(es.k)])
		formats.write_matrix(f"{folder}/{name}_labels.csv", es.labels[rows][:, None], MatrixFormat.CSV, ["label"])
		entries.append({ "split": name, "kind": "logits", "path": f"{name}_logits.{ext}", "shift": _shift_key(tag) })
		entries.append({ "split": name, "kind": "labels", "path": f"{name}_labels.csv" })

		if es.features is not None:
			d = es.features.shape[1]
			formats.write_matrix(f"{folder}/{name}_features.{ext}", es.features[rows], fmt, [f"h{j}" for j in range(d)])
			entries.append({ "split": name, "kind": "features", "path": f"{name}_features.{ext}" })

	if head is not None:
		formats.write_matrix(f"{folder}/weight_norms.csv", head.weight_norms[None, :], MatrixFormat.CSV, [f"w{j}" for j in range(head.k)])
		entries.append({ "kind": "weight_norms", "path": "weight_norms.csv" })

	doc: dict[str, Any] = { "K": es.k, "entries": entries }
	if es.features is not None:
		doc["D"] = int(es.features.shape[1])

	formats.write_json(path, doc)


def _shift_key(tag: ShiftTag) -> str:
	return { ShiftTag.IN_D: "in", ShiftTag.SHIFT_COV: "cov", ShiftTag.SHIFT_LABEL: "label" }[tag]
