#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import scipy.stats
import sklearn.metrics as sk

from typing import *
from dataclasses import dataclass, field
from gscutils import selection, scores as sc
from gscutils.data import EvalSet, ShiftTag
from gscutils.errors import DegenerateClasses, MissingShiftLabel, PreconditionError

DEFAULT_TPR = 0.95


@dataclass(frozen=True, eq=False)
class BinaryDetectionSet:
	scores: np.ndarray
	positive_mask: np.ndarray

	@staticmethod
	def create(scores: Any, positive_mask: Any) -> "BinaryDetectionSet":
		s = np.asarray(scores, dtype=np.float64).reshape(-1)
		p = np.asarray(positive_mask, dtype=bool).reshape(-1)

		if s.shape != p.shape:
			raise PreconditionError(f"{len(s)} scores but {len(p)} labels")

		pos = int(p.sum())
		if pos == 0 or pos == len(p):
			raise DegenerateClasses(f"need both positives and negatives, got {pos} of {len(p)} positive")

		return BinaryDetectionSet(s, p)


def auroc(d: BinaryDetectionSet) -> float:
	"""Probability that a random positive outscores a random negative, ties counting one half."""
	ranks = scipy.stats.rankdata(d.scores, method="average")
	pos = int(d.positive_mask.sum())
	neg = len(d.scores) - pos

	u = float(ranks[d.positive_mask].sum()) - pos * (pos + 1) / 2
	return u / (pos * neg)


def aupr(d: BinaryDetectionSet) -> float:
	# step-wise: precision at each recall increment, tied scores form one step
	return float(sk.average_precision_score(d.positive_mask, d.scores))


def fpr_at_tpr(d: BinaryDetectionSet, tpr_target: float = DEFAULT_TPR) -> float:
	if not (0 < tpr_target <= 1):
		raise PreconditionError(f"TPR target must lie in (0, 1], got {tpr_target}")

	fpr, tpr, _ = sk.roc_curve(d.positive_mask, d.scores, drop_intermediate=False)
	# thresholds decrease along the curve, so the first hit is the largest threshold that works
	return float(fpr[int(np.flatnonzero(tpr >= tpr_target)[0])])


def detection_metrics(d: BinaryDetectionSet, tpr_target: float = DEFAULT_TPR) -> dict[str, float]:
	return {
	    "auroc": auroc(d),
	    "aupr": aupr(d),
	    f"fpr@{tpr_target:g}tpr": fpr_at_tpr(d, tpr_target),
	}


HISTOGRAM_GROUPS = ("correct_ind", "wrong_ind", "shift_label")


@dataclass(frozen=True, eq=False)
class OodScReport:
	metrics: dict[str, dict[str, float]]
	curve: selection.RCCurve
	aurc: float
	rc_monotone: bool
	bin_edges: np.ndarray
	histograms: dict[str, np.ndarray] = field(default_factory=dict)

	def to_json(self) -> dict[str, Any]:
		out: dict[str, Any] = {}
		for view, m in self.metrics.items():
			for name, value in m.items():
				out[f"{view}.{name}"] = value

		out["aurc"] = self.aurc
		out["rc_monotone"] = self.rc_monotone
		return out


def rc_is_monotone(curve: selection.RCCurve, tol: float = 0.0) -> bool:
	"""True when the selection risk never drops as coverage grows (rejecting more never hurts)."""
	return bool(np.all(np.diff(curve.risks) >= -tol))


def ood_vs_sc_report(es: EvalSet, scores: Any, tpr_target: float = DEFAULT_TPR, bins: int = 30) -> OodScReport:
	"""
	The same scores judged two ways: as an OOD detector (In-D positive, label-shifted negative)
	and as a selective classifier (RC curve over the whole mixed set).
	"""
	s = selection._values(scores).astype(np.float64).reshape(-1)
	if len(s) != es.n:
		raise PreconditionError(f"{len(s)} scores for {es.n} rows")

	is_ind = es.shift_tags == ShiftTag.IN_D
	is_label = es.shift_tags == ShiftTag.SHIFT_LABEL
	if not is_label.any():
		raise MissingShiftLabel("the OOD view needs at least one label-shifted row")

	loss = selection.losses(es)
	correct = loss.values == 0

	keep = is_ind | is_label
	metrics = {
	    "in_vs_label": detection_metrics(BinaryDetectionSet.create(s[keep], is_ind[keep]), tpr_target),
	}
	if correct.any() and (~correct).any():
		metrics["correct_vs_error"] = detection_metrics(BinaryDetectionSet.create(s, correct), tpr_target)

	curve = selection.rc_curve(s, loss)

	edges = np.histogram_bin_edges(s, bins=bins)
	groups = {
	    "correct_ind": is_ind & correct,
	    "wrong_ind": is_ind & ~correct,
	    "shift_label": is_label,
	}
	hists = { name: np.histogram(s[mask], bins=edges)[0] for name, mask in groups.items() }

	return OodScReport(
	    metrics=metrics,
	    curve=curve,
	    aurc=selection.aurc(curve),
	    rc_monotone=rc_is_monotone(curve),
	    bin_edges=edges,
	    histograms=hists,
	)


def appendix_c_fixture(seed: int = 0, n_correct: int = 80, n_wrong: int = 20, n_shift: int = 20) -> tuple[EvalSet, dict[str, np.ndarray]]:
	"""
	A mixed set on which OOD metrics and selective-classification metrics disagree.

	`shift_detector` pushes every label-shifted row below all In-D rows (perfect AUROC) but is blind
	to In-D mistakes, which it scores highest. `conf_margin` is the actual confidence margin of the
	logits: confident on correct rows, small on label-shifted rows, smallest on mistakes.
	"""
	rng = np.random.default_rng(seed)
	k = 3

	def _rows(n: int, gap_lo: float, gap_hi: float) -> np.ndarray:
		top = rng.uniform(2.0, 4.0, size=n)
		gap = rng.uniform(gap_lo, gap_hi, size=n)
		third = top - gap - rng.uniform(1.0, 2.0, size=n)
		return np.stack([top, top - gap, third], axis=1)

	z = np.concatenate([
	    _rows(n_correct, 3.0, 5.0),
	    _rows(n_wrong, 0.05, 0.5),
	    _rows(n_shift, 1.0, 2.0),
	])

	# class 0 always has the top logit; wrong rows carry the runner-up's label
	labels = np.concatenate([np.zeros(n_correct), np.ones(n_wrong), -np.ones(n_shift)]).astype(np.int64)
	tags = np.concatenate([
	    np.full(n_correct + n_wrong, ShiftTag.IN_D),
	    np.full(n_shift, ShiftTag.SHIFT_LABEL),
	]).astype(np.int8)

	detector = np.concatenate([
	    rng.uniform(5.0, 9.0, size=n_correct),
	    rng.uniform(9.0, 10.0, size=n_wrong),
	    rng.uniform(0.0, 1.0, size=n_shift),
	])

	# shuffle rows and permute class columns so nothing depends on position
	perm = rng.permutation(len(labels))
	cols = rng.permutation(k)
	z = z[perm][:, cols]
	inverse = np.argsort(cols)
	labels = np.where(labels[perm] >= 0, inverse[np.maximum(labels[perm], 0)], -1)

	es = EvalSet.create(z, labels, tags[perm])
	return es, { "shift_detector": detector[perm], "conf_margin": sc.conf_margin(es.logits) }
