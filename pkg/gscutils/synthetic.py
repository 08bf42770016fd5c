#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import math
import numpy as np
import scipy.stats
import scipy.special
import scipy.integrate

from typing import *
from dataclasses import dataclass
from gscutils import selection, scores as sc
from gscutils.data import EvalSet, ClassifierHead, ScoreId
from gscutils.errors import PreconditionError

_H = math.sqrt(2) / 2

DEFAULT_VARIANCE = 0.15
DEFAULT_GRID = (-2.0, 2.0, 201)

# MC oracle runs are chunked to keep memory flat
_MC_CHUNK = 250_000


@dataclass(frozen=True, eq=False)
class MixtureSpec:
	"""Four isotropic Gaussians centred on the unit diagonals, one class per component."""
	means: np.ndarray
	variance: float
	weights: np.ndarray

	def __post_init__(self):
		if not np.allclose(np.linalg.norm(self.means, axis=1), 1.0, rtol=0, atol=1e-12):
			raise PreconditionError("mixture means must have unit norm")
		if not math.isclose(float(self.weights.sum()), 1.0, abs_tol=1e-12):
			raise PreconditionError("mixture weights must sum to 1")
		if not self.variance > 0:
			raise PreconditionError(f"mixture variance must be positive, got {self.variance}")

	@property
	def sigma(self) -> float:
		return math.sqrt(self.variance)

	@staticmethod
	def default(variance: float = DEFAULT_VARIANCE) -> "MixtureSpec":
		means = np.array([[_H, _H], [-_H, _H], [-_H, -_H], [_H, -_H]])
		return MixtureSpec(means, variance, np.full(4, 0.25))


@dataclass(frozen=True)
class PerturbationCase:
	case_id: int
	half_width: float

	@staticmethod
	def of(case_id: int) -> "PerturbationCase":
		widths = { 1: 0.0, 2: 0.5, 3: 2.0 }
		if case_id not in widths:
			raise PreconditionError(f"unknown perturbation case {case_id} (expected 1, 2 or 3)")
		return PerturbationCase(case_id, widths[case_id])


@dataclass(frozen=True, eq=False)
class LinearClassifier2D:
	weights: np.ndarray

	@staticmethod
	def optimal(spec: MixtureSpec) -> "LinearClassifier2D":
		# the component means, as columns, with zero bias
		return LinearClassifier2D(np.ascontiguousarray(spec.means.T))

	def head(self) -> ClassifierHead:
		return ClassifierHead.from_weights(self.weights)

	def predict(self, points: Any) -> np.ndarray:
		return np.argmax(logits_2d(self, points), axis=-1)


@dataclass(frozen=True, eq=False)
class MixtureSample:
	points: np.ndarray
	labels: np.ndarray
	seed: int


def sample_mixture(spec: MixtureSpec, n: int, seed: int) -> MixtureSample:
	if n < 1:
		raise PreconditionError(f"need at least one sample, got n={n}")

	rng = np.random.default_rng(seed)
	labels = rng.choice(len(spec.weights), size=n, p=spec.weights)
	points = spec.means[labels] + rng.normal(scale=spec.sigma, size=(n, 2))
	return MixtureSample(points, labels.astype(np.int64), seed)


def sample_per_class(spec: MixtureSpec, per_class: int, seed: int) -> MixtureSample:
	if per_class < 1:
		raise PreconditionError(f"need at least one sample per class, got {per_class}")

	rng = np.random.default_rng(seed)
	labels = np.repeat(np.arange(len(spec.weights)), per_class)
	points = spec.means[labels] + rng.normal(scale=spec.sigma, size=(len(labels), 2))
	return MixtureSample(points, labels.astype(np.int64), seed)


def logits_2d(classifier: LinearClassifier2D, points: Any) -> np.ndarray:
	return np.asarray(points, dtype=np.float64) @ classifier.weights


def mixture_evalset(sample: MixtureSample, classifier: LinearClassifier2D) -> tuple[EvalSet, ClassifierHead]:
	"""All rows In-D; the 2D points double as the feature representation."""
	es = EvalSet.create(logits_2d(classifier, sample.points), sample.labels, None, sample.points)
	return es, classifier.head()


def posterior(spec: MixtureSpec, points: Any) -> np.ndarray:
	x = np.atleast_2d(np.asarray(points, dtype=np.float64))
	sq = ((x[:, None, :] - spec.means[None, :, :])**2).sum(axis=-1)
	logp = -sq / (2 * spec.variance) + np.log(spec.weights)
	return scipy.special.softmax(logp, axis=-1)


def posterior_score(spec: MixtureSpec, points: Any) -> np.ndarray:
	p = posterior(spec, points).max(axis=-1)
	return p[0] if np.ndim(points) == 1 else p


def robustness_radius(classifier: LinearClassifier2D, points: Any) -> np.ndarray:
	"""
	Distance from each point to the nearest decision boundary of the argmax rule, i.e. to the
	closest pairwise hyperplane (w_y - w_j)^T x = 0 of its predicted class y.
	"""
	x = np.atleast_2d(np.asarray(points, dtype=np.float64))
	w = classifier.weights
	y = np.argmax(x @ w, axis=-1)

	diff = w[:, y].T[:, :, None] - w[None, :, :]                 # (n, 2, K): w_y - w_j
	norm = np.linalg.norm(diff, axis=1)                          # (n, K)
	dist = np.einsum("nd,ndk->nk", x, diff)

	with np.errstate(divide="ignore", invalid="ignore"):
		dist = np.where(norm > 0, dist / np.where(norm > 0, norm, 1.0), np.inf)

	dist[np.arange(len(x)), y] = np.inf
	r = np.maximum(dist.min(axis=-1), 0.0)
	return r[0] if np.ndim(points) == 1 else r


def perturb(points: Any, case: PerturbationCase, seed: int) -> np.ndarray:
	x = np.array(points, dtype=np.float64, copy=True)
	if case.half_width == 0:
		return x

	rng = np.random.default_rng(seed)
	return x + rng.uniform(-case.half_width, case.half_width, size=x.shape)


def mixture_error_exact(spec: MixtureSpec, half_width: float = 0.0) -> float:
	"""
	Full-coverage error of the optimal classifier. Its decision regions are the quadrants, so a
	sample is correct iff both coordinates keep their sign; with independent coordinates this is
	P(m + g + u > 0)^2 for g ~ N(0, variance), u ~ U(-h, h) and m = sqrt(2)/2.
	"""
	m, s = _H, spec.sigma
	if half_width == 0:
		p = float(scipy.stats.norm.cdf(m / s))
	else:
		h = half_width
		p = scipy.integrate.quad(lambda u: scipy.stats.norm.cdf((m + u) / s), -h, h, epsabs=1e-13, epsrel=1e-12)[0] / (2 * h)

	return 1.0 - p * p


def bayes_error_mc(spec: MixtureSpec, n: int, seed: int, case: Optional[PerturbationCase] = None) -> tuple[float, float]:
	"""Monte-Carlo full-coverage error of the optimal classifier, with its standard error."""
	if n < 1:
		raise PreconditionError(f"need at least one sample, got n={n}")

	classifier = LinearClassifier2D.optimal(spec)
	ss = np.random.SeedSequence(seed)

	wrong = 0
	done = 0
	for child in ss.spawn(math.ceil(n / _MC_CHUNK)):
		m = min(_MC_CHUNK, n - done)
		sample = sample_mixture(spec, m, int(child.generate_state(1)[0]))
		points = sample.points
		if case is not None:
			points = perturb(points, case, int(child.generate_state(2)[1]))

		wrong += int((classifier.predict(points) != sample.labels).sum())
		done += m

	p = wrong / n
	return p, math.sqrt(p * (1 - p) / n)


# a score usable on the synthetic mixture: one of the logit scores, or the true posterior
SyntheticScore = Union[ScoreId, Literal["s_post"]]


def synthetic_scores(
    spec: MixtureSpec,
    classifier: LinearClassifier2D,
    points: Any,
    score: SyntheticScore,
    lam: float = 1.0,
) -> np.ndarray:
	if score == "s_post":
		return posterior_score(spec, np.atleast_2d(points))

	z = lam * logits_2d(classifier, np.atleast_2d(points))
	if score == ScoreId.GEO_MARGIN:
		return sc.geo_margin(z, classifier.head())
	elif score in sc.ROW_LOCAL:
		return sc.ROW_LOCAL[cast(ScoreId, score)](z)

	raise PreconditionError(f"'{score}' needs calibration data and is not available on the synthetic grid")


def score_name(score: SyntheticScore) -> str:
	return str(score)


@dataclass(frozen=True, eq=False)
class ScaledRcTable:
	"""RC curves keyed by (score, lambda); reference curves carry lambda None."""
	sample: MixtureSample
	curves: dict[tuple[str, Optional[float]], selection.RCCurve]


def scaled_rc_experiment(
    spec: MixtureSpec,
    n: int,
    seed: int,
    lambdas: Sequence[float],
    score_ids: Sequence[ScoreId] = (ScoreId.SR_MAX, ScoreId.SR_DOCTOR, ScoreId.SR_ENT),
) -> ScaledRcTable:
	return scaled_rc_curves(spec, sample_mixture(spec, n, seed), lambdas, score_ids)


def scaled_rc_curves(
    spec: MixtureSpec,
    sample: MixtureSample,
    lambdas: Sequence[float],
    score_ids: Sequence[ScoreId] = (ScoreId.SR_MAX, ScoreId.SR_DOCTOR, ScoreId.SR_ENT),
) -> ScaledRcTable:
	"""
	RC curves of each score on the scaled logits lambda * f(x). The classifier's decisions (and hence
	the losses) are the same for every lambda > 0; only the score orderings move.
	"""
	if any(not lam > 0 for lam in lambdas):
		raise PreconditionError(f"scale factors must be positive, got {list(lambdas)}")

	classifier = LinearClassifier2D.optimal(spec)
	loss = (classifier.predict(sample.points) != sample.labels).astype(np.int64)

	curves: dict[tuple[str, Optional[float]], selection.RCCurve] = {}
	for score in score_ids:
		for lam in lambdas:
			s = synthetic_scores(spec, classifier, sample.points, score, lam)
			curves[(str(score), float(lam))] = selection.rc_curve(s, loss)

	for ref in (ScoreId.CONF_MARGIN, ScoreId.GEO_MARGIN, "s_post"):
		s = synthetic_scores(spec, classifier, sample.points, cast(SyntheticScore, ref))
		curves[(str(ref), None)] = selection.rc_curve(s, loss)

	return ScaledRcTable(sample, curves)


def sample_losses(classifier: LinearClassifier2D, points: Any, labels: Any) -> np.ndarray:
	return (classifier.predict(points) != np.asarray(labels)).astype(np.int64)


@dataclass(frozen=True, eq=False)
class RejectionPattern:
	selected: np.ndarray
	origin_distance: np.ndarray
	radius: np.ndarray

	def selected_radii(self) -> np.ndarray:
		return self.radius[self.selected]

	def rejected_radii(self) -> np.ndarray:
		return self.radius[~self.selected]


def rejection_pattern(classifier: LinearClassifier2D, points: Any, scores: Any, coverage: float) -> RejectionPattern:
	"""Which samples survive at `coverage` (top floor(coverage * N) by score, ties by index)."""
	x = np.atleast_2d(np.asarray(points, dtype=np.float64))
	s = np.asarray(scores, dtype=np.float64).reshape(-1)

	if len(s) != len(x):
		raise PreconditionError(f"{len(s)} scores for {len(x)} points")
	if not (0 <= coverage <= 1):
		raise PreconditionError(f"coverage must lie in [0, 1], got {coverage}")

	order = np.argsort(-s, kind="stable")
	keep = int(math.floor(coverage * len(s) + 1e-9))

	selected = np.zeros(len(s), dtype=bool)
	selected[order[:keep]] = True

	return RejectionPattern(selected, np.linalg.norm(x, axis=1), robustness_radius(classifier, x))


def selected_radii(classifier: LinearClassifier2D, points: Any, scores: Any, coverage: float) -> np.ndarray:
	return rejection_pattern(classifier, points, scores, coverage).selected_radii()


def radius_histogram(radii: Any, bins: int, upper: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
	r = np.asarray(radii, dtype=np.float64)
	hi = upper if upper is not None else (float(r.max()) if len(r) > 0 else 1.0)
	return np.histogram(r, bins=bins, range=(0.0, max(hi, 1e-12)))


@dataclass(frozen=True, eq=False)
class ScoreGrid:
	xs: np.ndarray
	ys: np.ndarray
	values: np.ndarray


def score_grid(
    classifier: LinearClassifier2D,
    score: SyntheticScore,
    grid: tuple[float, float, int] = DEFAULT_GRID,
    spec: Optional[MixtureSpec] = None,
) -> ScoreGrid:
	"""Score values on a regular grid; values[i, j] belongs to the point (xs[j], ys[i])."""
	lo, hi, n = grid
	if n < 1 or not hi >= lo:
		raise PreconditionError(f"invalid grid {grid}")
	if score == "s_post" and spec is None:
		raise PreconditionError("the posterior score needs the mixture spec")

	xs = np.linspace(lo, hi, int(n))
	ys = np.linspace(lo, hi, int(n))
	gx, gy = np.meshgrid(xs, ys)
	points = np.stack([gx.ravel(), gy.ravel()], axis=1)

	values = synthetic_scores(spec or MixtureSpec.default(), classifier, points, score)
	return ScoreGrid(xs, ys, values.reshape(len(ys), len(xs)))
