#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import math
import numpy as np

from typing import *
from dataclasses import dataclass
from gscutils.data import EvalSet, ScoreVector, SHIFT_LABEL_SENTINEL
from gscutils.errors import EmptyPrefix, InfeasibleTarget, PreconditionError

# floor(alpha * N) must not lose a whole prefix to rounding (0.29 * 100 = 28.999...)
_FLOOR_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class LossVector:
	values: np.ndarray

	def __len__(self) -> int:
		return int(self.values.shape[0])

	def error_rate(self) -> float:
		return int(self.values.sum()) / len(self)


@dataclass(frozen=True, eq=False)
class RCCurve:
	coverages: np.ndarray
	risks: np.ndarray
	order: np.ndarray

	def __len__(self) -> int:
		return int(self.risks.shape[0])

	def rows(self) -> Iterator[tuple[float, float]]:
		return zip(self.coverages.tolist(), self.risks.tolist())

	def equals(self, other: "RCCurve") -> bool:
		return (
		    np.array_equal(self.coverages, other.coverages) and np.array_equal(self.risks, other.risks)
		    and np.array_equal(self.order, other.order)
		)


@dataclass(frozen=True)
class CoverageAtLeast:
	omega: float

	def __str__(self) -> str:
		return f"coverage >= {self.omega:g}"


@dataclass(frozen=True)
class RiskAtMost:
	lam: float

	def __str__(self) -> str:
		return f"risk <= {self.lam:g}"


Target = Union[CoverageAtLeast, RiskAtMost]


def parse_target(s: str) -> Target:
	kind, _, value = s.partition(':')
	try:
		v = float(value)
	except ValueError:
		raise PreconditionError(f"invalid target '{s}' (expected coverage:<w> or risk:<l>)")

	match kind.strip().lower():
		case "coverage":
			return CoverageAtLeast(v)
		case "risk":
			return RiskAtMost(v)
		case _:
			raise PreconditionError(f"invalid target '{s}' (expected coverage:<w> or risk:<l>)")


@dataclass(frozen=True)
class ThresholdReport:
	gamma: float
	gamma_upper: float
	achieved_coverage: float
	achieved_risk: float
	target: str

	def to_json(self) -> dict[str, Any]:
		return {
		    "gamma": self.gamma,
		    "gamma_upper": self.gamma_upper,
		    "achieved_coverage": self.achieved_coverage,
		    "achieved_risk": self.achieved_risk,
		    "target": self.target,
		}


def _values(x: Union[ScoreVector, LossVector, np.ndarray, Sequence[float]]) -> np.ndarray:
	if isinstance(x, (ScoreVector, LossVector)):
		return x.values
	return np.asarray(x)


def _pair(scores: Any, losses: Any) -> tuple[np.ndarray, np.ndarray]:
	s = _values(scores).astype(np.float64, copy=False).reshape(-1)
	l = _values(losses).astype(np.int64, copy=False).reshape(-1)
	if s.shape != l.shape:
		raise PreconditionError(f"{len(s)} scores but {len(l)} losses")
	return s, l


def losses(es: EvalSet) -> LossVector:
	"""0/1 loss of the argmax-of-logits prediction (lowest class index wins ties); label-shifted rows always lose."""
	pred = np.argmax(es.logits, axis=1)
	wrong = (pred != es.labels) | (es.labels == SHIFT_LABEL_SENTINEL)
	v = wrong.astype(np.int8)
	v.setflags(write=False)
	return LossVector(v)


def select(scores: Any, gamma: float) -> np.ndarray:
	return _values(scores) > gamma


def coverage_risk(scores: Any, losses: Any, gamma: float) -> tuple[float, float]:
	s, l = _pair(scores, losses)
	mask = s > gamma

	accepted = int(mask.sum())
	if accepted == 0:
		return 0.0, 0.0

	return accepted / len(s), int(l[mask].sum()) / accepted


def rc_curve(scores: Any, losses: Any) -> RCCurve:
	s, l = _pair(scores, losses)
	n = len(s)
	if n < 1:
		raise PreconditionError("an RC curve needs at least one sample")

	order = np.argsort(-s, kind="stable")
	k = np.arange(1, n + 1)
	return RCCurve(coverages=k / n, risks=np.cumsum(l[order]) / k, order=order)


def rc_curve_bruteforce(scores: Any, losses: Any) -> RCCurve:
	"""
	Reference construction: sweep the strict threshold from +inf down through the midpoints between
	distinct scores to -inf, and add each newly accepted tie group in ascending index order.
	"""
	s, l = _pair(scores, losses)
	n = len(s)
	if n < 1:
		raise PreconditionError("an RC curve needs at least one sample")

	distinct = np.unique(s)[::-1]
	thresholds = [math.inf]
	for hi, lo in zip(distinct[:-1], distinct[1:]):
		mid = lo + (hi - lo) / 2
		thresholds.append(mid if lo < mid < hi else lo)
	thresholds.append(-math.inf)

	order: list[int] = []
	accepted = np.zeros(n, dtype=bool)
	for gamma in thresholds:
		now = s > gamma
		order.extend(int(i) for i in np.flatnonzero(now & ~accepted))
		accepted = now

	coverages = np.empty(n)
	risks = np.empty(n)
	for k in range(1, n + 1):
		coverages[k - 1] = k / n
		risks[k - 1] = int(l[order[:k]].sum()) / k

	return RCCurve(coverages=coverages, risks=risks, order=np.asarray(order, dtype=np.intp))


def aurc(curve: RCCurve) -> float:
	return float(curve.risks.mean())


def _prefix_len(curve: RCCurve, level: float) -> int:
	return int(math.floor(level * len(curve) + _FLOOR_EPS))


def aurc_alpha(curve: RCCurve, alpha: float) -> float:
	"""Mean risk over the prefixes with coverage <= alpha, i.e. the partial area normalised by alpha."""
	if not (0 < alpha <= 1):
		raise PreconditionError(f"alpha must lie in (0, 1], got {alpha}")

	if (m := _prefix_len(curve, alpha)) == 0:
		raise EmptyPrefix(f"no coverage level <= {alpha:g} with {len(curve)} samples")

	return float(curve.risks[:m].mean())


def risk_at_coverage(curve: RCCurve, coverage: float) -> float:
	if (m := _prefix_len(curve, coverage)) == 0:
		raise EmptyPrefix(f"no coverage level <= {coverage:g} with {len(curve)} samples")
	return float(curve.risks[min(m, len(curve)) - 1])


def alpha_key(alpha: float) -> str:
	return f"aurc_{alpha:.1f}" if round(alpha, 1) == alpha else f"aurc_{alpha:g}"


def aurc_summary(curve: RCCurve, alphas: Iterable[float]) -> dict[str, float]:
	return { alpha_key(a): aurc_alpha(curve, a) for a in alphas }


def aurc_table(curves: Mapping[str, RCCurve], alphas: Iterable[float]) -> dict[str, dict[str, float]]:
	alphas = list(alphas)
	return { name: aurc_summary(c, alphas) for name, c in curves.items() }


def calibrate_threshold(scores: Any, losses: Any, target: Target) -> ThresholdReport:
	"""
	Pick a strict threshold on calibration data. Tied scores cannot be split by a threshold, so the
	candidates are whole tie groups; the returned gamma is the score of the first rejected group
	(any value in [gamma, gamma_upper) selects the same samples).
	"""
	s, l = _pair(scores, losses)
	n = len(s)
	if n < 1:
		raise PreconditionError("calibration needs at least one sample")

	order = np.argsort(-s, kind="stable")
	sorted_s = s[order]
	cum_loss = np.cumsum(l[order])

	# group i (0-based) ends at position ends[i]; accepting groups 0..i is one achievable selection
	ends = np.append(np.flatnonzero(sorted_s[1:] != sorted_s[:-1]), n - 1)
	counts = ends + 1
	covs = counts / n
	risks = cum_loss[ends] / counts

	match target:
		case CoverageAtLeast(omega=omega):
			if omega > 1:
				raise InfeasibleTarget(f"coverage {omega:g} exceeds 1")
			if omega <= 0:
				top = float(sorted_s[0])
				return ThresholdReport(top, math.inf, 0.0, 0.0, str(target))
			i = int(np.flatnonzero(covs >= omega)[0])

		case RiskAtMost(lam=lam):
			ok = np.flatnonzero(risks <= lam)
			if len(ok) == 0:
				raise InfeasibleTarget(f"no selection reaches risk <= {lam:g} (minimum achievable {risks.min():.6g})")
			i = int(ok[-1])

		case _:
			raise PreconditionError(f"unknown target {target!r}")

	upper = float(sorted_s[ends[i]])
	if i + 1 < len(ends):
		gamma = float(sorted_s[ends[i] + 1])
	else:
		gamma = float(np.nextafter(upper, -math.inf))

	return ThresholdReport(gamma, upper, float(covs[i]), float(risks[i]), str(target))
