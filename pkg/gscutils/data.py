#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import enum
import numpy as np

from typing import *
from gscutils import msg
from dataclasses import dataclass
from gscutils.errors import GscError, InsufficientCalibrationData, PreconditionError

# label used for samples whose groundtruth lies outside the classifier's label space
SHIFT_LABEL_SENTINEL = -1

NORM_RTOL = 1e-9


class ShiftTag(enum.IntEnum):
	IN_D = 0
	SHIFT_COV = 1
	SHIFT_LABEL = 2

	@staticmethod
	def parse(s: str) -> "ShiftTag":
		match s.strip().lower():
			case "in" | "ind" | "in-d":
				return ShiftTag.IN_D
			case "cov" | "shiftcov" | "shift-cov":
				return ShiftTag.SHIFT_COV
			case "label" | "shiftlabel" | "shift-label":
				return ShiftTag.SHIFT_LABEL
			case _:
				raise PreconditionError(f"unknown shift tag '{s}'")


class ScoreId(enum.Enum):
	SR_MAX = "sr_max"
	SR_DOCTOR = "sr_doctor"
	SR_ENT = "sr_ent"
	CONF_MARGIN = "conf_margin"
	GEO_MARGIN = "geo_margin"
	RL_MAX = "rl_max"
	ENERGY = "energy"
	KNN = "knn"
	VIM = "vim"
	SIRC = "sirc"

	def __str__(self) -> str:
		return self.value

	@staticmethod
	def parse(s: str) -> "ScoreId":
		key = s.strip().lower().replace('-', '_')
		aliases = { "rl_conf_m": "conf_margin", "rl_geo_m": "geo_margin", "msp": "sr_max", "doctor": "sr_doctor" }
		try:
			return ScoreId(aliases.get(key, key))
		except ValueError:
			raise PreconditionError(f"unknown score '{s}' (expected one of {', '.join(x.value for x in ScoreId)})")


SR_SCORES = (ScoreId.SR_MAX, ScoreId.SR_DOCTOR, ScoreId.SR_ENT)
MARGIN_SCORES = (ScoreId.CONF_MARGIN, ScoreId.GEO_MARGIN)


def _frozen(a: Optional[np.ndarray], dtype: Any) -> Optional[np.ndarray]:
	if a is None:
		return None

	out = np.array(a, dtype=dtype, copy=True)
	out.setflags(write=False)
	return out


@dataclass(frozen=True, eq=False)
class EvalSet:
	logits: np.ndarray
	labels: np.ndarray
	shift_tags: np.ndarray
	features: Optional[np.ndarray] = None

	@property
	def n(self) -> int:
		return int(self.logits.shape[0])

	@property
	def k(self) -> int:
		return int(self.logits.shape[1])

	def rows_tagged(self, tag: ShiftTag) -> np.ndarray:
		return np.flatnonzero(self.shift_tags == tag)

	@staticmethod
	def create(
	    logits: Any,
	    labels: Any,
	    shift_tags: Optional[Any] = None,
	    features: Optional[Any] = None,
	) -> "EvalSet":
		"""
		Build an immutable EvalSet. When `shift_tags` is omitted, rows labelled with the sentinel
		are tagged ShiftLabel and everything else In-D. No invariant checking happens here; see `validate`.
		"""
		z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
		y = np.asarray(labels, dtype=np.int64).reshape(-1)

		if shift_tags is None:
			tags = np.where(y == SHIFT_LABEL_SENTINEL, ShiftTag.SHIFT_LABEL, ShiftTag.IN_D)
		else:
			tags = np.asarray([ShiftTag.parse(t) if isinstance(t, str) else int(t) for t in shift_tags], dtype=np.int8)

		feats = None if features is None else np.atleast_2d(np.asarray(features, dtype=np.float64))

		return EvalSet(
		    logits=cast(np.ndarray, _frozen(z, np.float64)),
		    labels=cast(np.ndarray, _frozen(y, np.int64)),
		    shift_tags=cast(np.ndarray, _frozen(tags, np.int8)),
		    features=_frozen(feats, np.float64),
		)


@dataclass(frozen=True, eq=False)
class ClassifierHead:
	weight_norms: np.ndarray
	weights: Optional[np.ndarray] = None
	bias: Optional[np.ndarray] = None

	@property
	def k(self) -> int:
		return int(self.weight_norms.shape[0])

	@staticmethod
	def create(weight_norms: Any, weights: Optional[Any] = None, bias: Optional[Any] = None) -> "ClassifierHead":
		return ClassifierHead(
		    weight_norms=cast(np.ndarray, _frozen(np.asarray(weight_norms).reshape(-1), np.float64)),
		    weights=_frozen(weights, np.float64),
		    bias=_frozen(None if bias is None else np.asarray(bias).reshape(-1), np.float64),
		)

	@staticmethod
	def from_weights(weights: Any, bias: Optional[Any] = None) -> "ClassifierHead":
		w = np.asarray(weights, dtype=np.float64)
		return ClassifierHead.create(np.linalg.norm(w, axis=0), w, bias)

	@staticmethod
	def unit(k: int) -> "ClassifierHead":
		return ClassifierHead.create(np.ones(k))


@dataclass(frozen=True, eq=False)
class ScoreVector:
	values: np.ndarray
	score_id: ScoreId

	def __len__(self) -> int:
		return int(self.values.shape[0])

	@staticmethod
	def create(values: Any, score_id: ScoreId) -> "ScoreVector":
		"""
		Infinite scores are clamped to the largest finite doubles (the ordering is preserved);
		NaN has no position in an ordering and is rejected.
		"""
		v = np.asarray(values, dtype=np.float64).reshape(-1)
		if np.isnan(v).any():
			raise GscError(f"score '{score_id}' produced NaN at row {int(np.flatnonzero(np.isnan(v))[0])}")

		if (bad := int((~np.isfinite(v)).sum())) > 0:
			msg.warn2(f"Clamping {bad} infinite '{score_id}' score{'' if bad == 1 else 's'}")
			fi = np.finfo(np.float64)
			v = np.clip(v, fi.min, fi.max)

		return ScoreVector(cast(np.ndarray, _frozen(v, np.float64)), score_id)


@dataclass(frozen=True, eq=False)
class CalibrationSubset:
	indices: np.ndarray
	seed: int

	def __len__(self) -> int:
		return int(self.indices.shape[0])


def validate(es: EvalSet, head: Optional[ClassifierHead] = None) -> list[str]:
	"""Check every EvalSet (and optional ClassifierHead) invariant; returns one message per violation."""
	out: list[str] = []

	z = es.logits
	if z.ndim != 2:
		return [f"logits must be a matrix, got {z.ndim} dimension(s)"]

	n, k = z.shape
	if n < 1:
		out.append("logits: need at least one row")
	if k < 2:
		out.append(f"logits: need at least 2 classes, got {k}")

	for i, j in np.argwhere(~np.isfinite(z)):
		out.append(f"non-finite logit ({i},{j})")

	if es.labels.shape != (n, ):
		out.append(f"labels: expected {n} entries, got {es.labels.shape[0]}")
	if es.shift_tags.shape != (n, ):
		out.append(f"shift_tags: expected {n} entries, got {es.shift_tags.shape[0]}")

	if es.labels.shape == (n, ) and es.shift_tags.shape == (n, ):
		for i in np.flatnonzero((es.labels < SHIFT_LABEL_SENTINEL) | (es.labels >= k)):
			out.append(f"row {i}: label {es.labels[i]} outside 0..{k - 1}")

		for i in np.flatnonzero(~np.isin(es.shift_tags, [int(t) for t in ShiftTag])):
			out.append(f"row {i}: unknown shift tag {es.shift_tags[i]}")

		is_sentinel = es.labels == SHIFT_LABEL_SENTINEL
		is_label_shift = es.shift_tags == ShiftTag.SHIFT_LABEL

		for i in np.flatnonzero(is_label_shift & ~is_sentinel):
			out.append(f"row {i}: tagged ShiftLabel but label is {es.labels[i]} (expected {SHIFT_LABEL_SENTINEL})")

		for i in np.flatnonzero(is_sentinel & ~is_label_shift):
			tag = ShiftTag(int(es.shift_tags[i])).name if int(es.shift_tags[i]) in [int(t) for t in ShiftTag] else "?"
			out.append(f"row {i}: label {SHIFT_LABEL_SENTINEL} but tagged {tag}")

	if (f := es.features) is not None:
		if f.ndim != 2 or f.shape[0] != n:
			out.append(f"features: expected {n} rows, got shape {f.shape}")
		elif not np.isfinite(f).all():
			i, j = np.argwhere(~np.isfinite(f))[0]
			out.append(f"non-finite feature ({i},{j})")

	if head is not None:
		out.extend(_validate_head(head, k, None if es.features is None else es.features.shape[-1]))

	return out


def _validate_head(head: ClassifierHead, k: int, d: Optional[int]) -> list[str]:
	out: list[str] = []

	norms = head.weight_norms
	if norms.shape != (k, ):
		return [f"weight_norms: expected {k} entries, got {norms.shape[0]}"]

	for j in np.flatnonzero(~(np.isfinite(norms) & (norms > 0))):
		out.append(f"weight_norms[{j}] = {norms[j]} is not strictly positive")

	if (w := head.weights) is not None:
		if w.ndim != 2 or w.shape[1] != k:
			out.append(f"weights: expected D x {k}, got shape {w.shape}")
		else:
			if d is not None and w.shape[0] != d:
				out.append(f"weights: expected {d} rows to match features, got {w.shape[0]}")

			col = np.linalg.norm(w, axis=0)
			for j in np.flatnonzero(~np.isclose(col, norms, rtol=NORM_RTOL, atol=0.0)):
				out.append(f"weights column {j} has norm {col[j]:.12g}, weight_norms says {norms[j]:.12g}")

	if (b := head.bias) is not None and b.shape != (k, ):
		out.append(f"bias: expected {k} entries, got {b.shape[0]}")

	return out


def draw_calibration(es: EvalSet, seed: int, multiplier: int = 5) -> CalibrationSubset:
	"""
	Draw `multiplier * K` distinct In-D rows uniformly without replacement. Classes are not
	balanced: the draw may be imbalanced like any practical calibration set.
	"""
	need = multiplier * es.k
	rows = es.rows_tagged(ShiftTag.IN_D)

	if len(rows) < need:
		raise InsufficientCalibrationData(f"need {need} In-D rows for calibration (K={es.k}), only {len(rows)} available")

	rng = np.random.default_rng(seed)
	picked = rng.choice(rows, size=need, replace=False)
	return CalibrationSubset(cast(np.ndarray, _frozen(np.sort(picked), np.int64)), seed)


def subset(es: EvalSet, mask: np.ndarray) -> EvalSet:
	keep = np.asarray(mask, dtype=bool)
	return EvalSet.create(
	    es.logits[keep],
	    es.labels[keep],
	    es.shift_tags[keep],
	    None if es.features is None else es.features[keep],
	)


SPLIT_MIXES: dict[str, tuple[ShiftTag, ...]] = {
    "in": (ShiftTag.IN_D, ),
    "in+cov": (ShiftTag.IN_D, ShiftTag.SHIFT_COV),
    "in+label": (ShiftTag.IN_D, ShiftTag.SHIFT_LABEL),
    "all": (ShiftTag.IN_D, ShiftTag.SHIFT_COV, ShiftTag.SHIFT_LABEL),
}


def mix_mask(es: EvalSet, mix: str) -> np.ndarray:
	if mix not in SPLIT_MIXES:
		raise PreconditionError(f"unknown split mix '{mix}' (expected one of {', '.join(SPLIT_MIXES)})")

	return np.isin(es.shift_tags, [int(t) for t in SPLIT_MIXES[mix]])


def split_mix(es: EvalSet, mix: str) -> EvalSet:
	return subset(es, mix_mask(es, mix))
