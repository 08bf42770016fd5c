#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import scipy.special

from typing import *
from gscutils import msg
from dataclasses import dataclass
from scipy.spatial.distance import cdist
from gscutils.data import EvalSet, ClassifierHead, ScoreVector, CalibrationSubset, ScoreId
from gscutils.errors import *

# every scorer takes either a single logit row (K,) or a matrix of rows (N, K), and works along
# the last axis; a row gives back a numpy scalar, a matrix gives back a vector of length N.

ORTHONORMAL_TOL = 1e-8
SPECTRUM_TOL = 1e-12
VARIANCE_TOL = 1e-12

# exp() overflows past this; the SIRC gate is clamped here
_MAX_EXP = 700.0

KNN_BLOCK_ROWS = 4096


@dataclass(frozen=True, eq=False)
class SortedLogitView:
	values: np.ndarray
	order: np.ndarray

	@staticmethod
	def of(z: Any) -> "SortedLogitView":
		"""Descending logits; equal logits keep ascending class order."""
		z = np.asarray(z, dtype=np.float64)
		order = np.argsort(-z, axis=-1, kind="stable")
		return SortedLogitView(np.take_along_axis(z, order, axis=-1), order)


@dataclass(frozen=True, eq=False)
class KnnConfig:
	k: int
	reference: CalibrationSubset

	@staticmethod
	def create(k: int, reference: CalibrationSubset) -> "KnnConfig":
		if len(reference) == 0:
			raise EmptyReference("KNN reference set is empty")
		if not (1 <= k <= len(reference)):
			raise PreconditionError(f"KNN needs 1 <= k <= {len(reference)}, got k={k}")
		return KnnConfig(k, reference)


@dataclass(frozen=True, eq=False)
class VimConfig:
	principal_dim: int
	principal_basis: np.ndarray
	alpha: float
	center: np.ndarray

	def __post_init__(self):
		b = self.principal_basis
		if b.ndim != 2 or b.shape[1] != self.principal_dim:
			raise PreconditionError(f"principal basis must be D x {self.principal_dim}, got {b.shape}")
		if not np.allclose(b.T @ b, np.eye(self.principal_dim), rtol=0, atol=ORTHONORMAL_TOL):
			raise PreconditionError("principal basis columns are not orthonormal")
		if self.alpha < 0:
			raise PreconditionError(f"ViM alpha must be non-negative, got {self.alpha}")

	def residual(self, features: Any) -> np.ndarray:
		x = np.asarray(features, dtype=np.float64) - self.center
		b = self.principal_basis
		return np.linalg.norm(x - (x @ b) @ b.T, axis=-1)


@dataclass(frozen=True)
class SircConfig:
	a: float
	b: float
	secondary: ScoreId

	def __post_init__(self):
		if not self.b > 0:
			raise PreconditionError(f"SIRC needs b > 0, got {self.b}")


def _top(z: Any) -> tuple[np.ndarray, np.ndarray]:
	z = np.asarray(z, dtype=np.float64)
	if z.shape[-1] < 2:
		raise PreconditionError(f"need at least 2 logits per row, got {z.shape[-1]}")
	return z, z.max(axis=-1, keepdims=True)


def _tail_sums(z: Any) -> tuple[np.ndarray, np.ndarray]:
	"""
	S1 = sum_{j>=2} exp(z_(j) - z_(1)), S2 = sum_{j>=2} exp(2 (z_(j) - z_(1))); the top entry
	itself is left out so that tiny tails are not swallowed by the leading 1.
	"""
	z, zmax = _top(z)
	e = np.exp(z - zmax)
	top = np.argmax(z, axis=-1)[..., None]
	np.put_along_axis(e, top, 0.0, axis=-1)
	return e.sum(axis=-1), (e * e).sum(axis=-1)


def softmax(z: Any) -> np.ndarray:
	return scipy.special.softmax(np.asarray(z, dtype=np.float64), axis=-1)


def sr_max(z: Any) -> np.ndarray:
	s1, _ = _tail_sums(z)
	return 1.0 / (1.0 + s1)


def _sr_deficit(z: Any) -> np.ndarray:
	# 1 - sr_max, without cancellation
	s1, _ = _tail_sums(z)
	return s1 / (1.0 + s1)


def sr_doctor(z: Any) -> np.ndarray:
	s1, s2 = _tail_sums(z)
	return (s2 - 2.0 * s1 - s1 * s1) / (1.0 + s2)


def sr_ent(z: Any) -> np.ndarray:
	z, zmax = _top(z)
	s1, _ = _tail_sums(z)
	logp = (z - zmax) - np.log1p(s1)[..., None]
	return (np.exp(logp) * logp).sum(axis=-1)


def conf_margin(z: Any) -> np.ndarray:
	z, _ = _top(z)
	two = np.partition(z, -2, axis=-1)[..., -2:]
	return two[..., 1] - two[..., 0]


def signed_distances(z: Any, head: Optional[ClassifierHead]) -> np.ndarray:
	if head is None or head.weight_norms is None:
		raise MissingHead("signed distances need the classifier head's weight norms")

	z = np.asarray(z, dtype=np.float64)
	if head.weight_norms.shape[0] != z.shape[-1]:
		raise ShapeMismatch(f"head has {head.weight_norms.shape[0]} classes, logits have {z.shape[-1]}")

	return z / head.weight_norms


def geo_margin(z: Any, head: Optional[ClassifierHead]) -> np.ndarray:
	return conf_margin(signed_distances(z, head))


def rl_max(z: Any) -> np.ndarray:
	return np.asarray(z, dtype=np.float64).max(axis=-1)


def energy(z: Any) -> np.ndarray:
	return scipy.special.logsumexp(np.asarray(z, dtype=np.float64), axis=-1)


def knn_scores(es: EvalSet, cfg: KnnConfig, rows: Optional[np.ndarray] = None) -> np.ndarray:
	"""
	Negated distance (Euclidean, raw logit space) to the k-th nearest calibration row. A query
	row that is itself part of the reference set is not its own neighbour.
	"""
	ref_idx = cfg.reference.indices
	if len(ref_idx) == 0:
		raise EmptyReference("KNN reference set is empty")

	rows = np.arange(es.n) if rows is None else np.asarray(rows, dtype=np.int64).reshape(-1)
	ref = es.logits[ref_idx]

	in_ref = np.isin(rows, ref_idx)
	if in_ref.any() and cfg.k > len(ref_idx) - 1:
		raise EmptyReference(f"only {len(ref_idx) - 1} reference rows remain once the query is excluded (k={cfg.k})")

	out = np.empty(len(rows), dtype=np.float64)
	for start in range(0, len(rows), KNN_BLOCK_ROWS):
		block = rows[start:start + KNN_BLOCK_ROWS]
		d = cdist(es.logits[block], ref, metric="euclidean")

		# hide each query's own reference entry
		hit_r, hit_c = np.nonzero(block[:, None] == ref_idx[None, :])
		d[hit_r, hit_c] = np.inf

		out[start:start + len(block)] = -np.partition(d, cfg.k - 1, axis=1)[:, cfg.k - 1]

	return out


def knn_score(es: EvalSet, cfg: KnnConfig, query_row: int) -> float:
	return float(knn_scores(es, cfg, np.array([query_row]))[0])


def default_vim_dim(d: int, cal_size: int) -> int:
	return max(1, min(d // 2, d - 1, cal_size - 1))


def fit_vim(es: EvalSet, head: Optional[ClassifierHead], cal: CalibrationSubset, principal_dim: int) -> VimConfig:
	"""
	Principal subspace of the mean-centred calibration features; the residual scale alpha makes
	the residual comparable to the calibration max-logit.
	"""
	if es.features is None:
		raise MissingFeatures("ViM needs penultimate-layer features")

	feats = es.features[cal.indices]
	m, d = feats.shape

	if not (1 <= principal_dim < d):
		raise PreconditionError(f"ViM principal_dim must be in [1, {d - 1}], got {principal_dim}")
	if m <= principal_dim:
		raise PreconditionError(f"ViM needs more than {principal_dim} calibration rows, got {m}")

	if head is not None and head.weights is not None and head.weights.shape[0] != d:
		raise ShapeMismatch(f"head weights have {head.weights.shape[0]} rows, features have {d} columns")

	center = feats.mean(axis=0)
	_, sv, vt = np.linalg.svd(feats - center, full_matrices=False)

	if (rank := int((sv > SPECTRUM_TOL).sum())) < principal_dim:
		raise DegenerateSpectrum(f"calibration features have rank {rank}, fewer than principal_dim={principal_dim}")

	basis = np.ascontiguousarray(vt[:principal_dim].T)
	cfg = VimConfig(principal_dim, basis, 0.0, center)

	mean_residual = float(cfg.residual(feats).mean())
	mean_max_logit = float(rl_max(es.logits[cal.indices]).mean())

	if mean_residual <= SPECTRUM_TOL:
		msg.warn2("Calibration features lie in the principal subspace; ViM reduces to energy")
		alpha = 0.0
	else:
		alpha = abs(mean_max_logit) / mean_residual

	return VimConfig(principal_dim, basis, alpha, center)


def vim_score(feature_row: Any, z: Any, cfg: VimConfig) -> np.ndarray:
	return energy(z) - cfg.alpha * cfg.residual(feature_row)


# scores that only need the logit rows (and possibly the head); these can gate SIRC
ROW_LOCAL = {
    ScoreId.SR_MAX: sr_max,
    ScoreId.SR_DOCTOR: sr_doctor,
    ScoreId.SR_ENT: sr_ent,
    ScoreId.CONF_MARGIN: conf_margin,
    ScoreId.RL_MAX: rl_max,
    ScoreId.ENERGY: energy,
}


def _row_local(score_id: ScoreId, z: np.ndarray, head: Optional[ClassifierHead]) -> np.ndarray:
	if score_id == ScoreId.GEO_MARGIN:
		return geo_margin(z, head)
	elif score_id in ROW_LOCAL:
		return ROW_LOCAL[score_id](z)

	raise PreconditionError(f"'{score_id}' cannot be used as a SIRC secondary score")


def fit_sirc_moments(s2: Any, secondary: ScoreId = ScoreId.ENERGY) -> SircConfig:
	s2 = np.asarray(s2, dtype=np.float64)
	std = float(s2.std()) if len(s2) > 0 else 0.0

	if not std >= VARIANCE_TOL:
		raise ZeroVariance(f"secondary score '{secondary}' has no spread over the calibration rows (std={std:.3g})")

	return SircConfig(a=float(s2.mean()) - 3.0 * std, b=1.0 / std, secondary=secondary)


def fit_sirc(
    es: EvalSet,
    cal: CalibrationSubset,
    secondary: ScoreId,
    head: Optional[ClassifierHead] = None,
) -> SircConfig:
	s2 = _row_local(secondary, es.logits[cal.indices], head)
	return fit_sirc_moments(s2, secondary)


def sirc_score(z: Any, s2: Any, cfg: SircConfig) -> np.ndarray:
	gate = 1.0 + np.exp(np.minimum(-cfg.b * (np.asarray(s2, dtype=np.float64) - cfg.a), _MAX_EXP))
	return -_sr_deficit(z) * gate


@dataclass(frozen=True, eq=False)
class ScoreConfigs:
	head: Optional[ClassifierHead] = None
	knn: Optional[KnnConfig] = None
	vim: Optional[VimConfig] = None
	sirc: Optional[SircConfig] = None


def fit_configs(
    es: EvalSet,
    score_id: ScoreId,
    *,
    head: Optional[ClassifierHead] = None,
    cal: Optional[CalibrationSubset] = None,
    knn_k: int = 2,
    vim_dim: Optional[int] = None,
    sirc_secondary: ScoreId = ScoreId.ENERGY,
) -> ScoreConfigs:
	"""Fit whatever calibration-dependent configuration `score_id` needs, and nothing else."""
	knn = vim = sirc = None

	if score_id in (ScoreId.KNN, ScoreId.VIM, ScoreId.SIRC) and cal is None:
		raise PreconditionError(f"'{score_id}' needs a calibration subset")

	if score_id == ScoreId.KNN:
		knn = KnnConfig.create(knn_k, cast(CalibrationSubset, cal))

	elif score_id == ScoreId.VIM:
		if es.features is None:
			raise MissingFeatures("ViM needs penultimate-layer features")
		cal = cast(CalibrationSubset, cal)
		dim = vim_dim if vim_dim is not None else default_vim_dim(es.features.shape[1], len(cal))
		vim = fit_vim(es, head, cal, dim)

	elif score_id == ScoreId.SIRC:
		sirc = fit_sirc(es, cast(CalibrationSubset, cal), sirc_secondary, head)

	return ScoreConfigs(head=head, knn=knn, vim=vim, sirc=sirc)


def score_set(es: EvalSet, score_id: ScoreId, configs: Optional[ScoreConfigs] = None) -> ScoreVector:
	"""Score every row of `es`; rows are independent, so this is the row scorer applied to the matrix."""
	cfg = configs or ScoreConfigs()
	z = es.logits

	match score_id:
		case ScoreId.GEO_MARGIN:
			values = geo_margin(z, cfg.head)

		case ScoreId.KNN:
			if cfg.knn is None:
				raise PreconditionError("KNN scoring needs a fitted KnnConfig")
			values = knn_scores(es, cfg.knn)

		case ScoreId.VIM:
			if es.features is None:
				raise MissingFeatures("ViM needs penultimate-layer features")
			if cfg.vim is None:
				raise PreconditionError("ViM scoring needs a fitted VimConfig")
			values = vim_score(es.features, z, cfg.vim)

		case ScoreId.SIRC:
			if cfg.sirc is None:
				raise PreconditionError("SIRC scoring needs a fitted SircConfig")
			values = sirc_score(z, _row_local(cfg.sirc.secondary, z, cfg.head), cfg.sirc)

		case _:
			values = ROW_LOCAL[score_id](z)

	return ScoreVector.create(values, score_id)
