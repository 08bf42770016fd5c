#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

"""
Large-scale behaviour of the softmax-response scores.

With g = z_(1) - z_(2) > 0 and x = -lambda * g, the three SR scores of lambda * z behave like

    SR_max    ~ exp(-e^x)
    SR_doctor ~ 1 - exp(2 e^x)
    SR_ent    ~ -e^x          (only after taking log(-.) of both sides)

Everything here is evaluated through "log-deficits", strictly monotone transforms of each score
that stay representable where the scores themselves round to 1 or 0:

    D_max    = log(-log SR_max)  = log(log1p(S1))
    D_doctor = log(-SR_doctor)   = log(2 S1 + S1^2 - S2) - log1p(S2)
    D_ent    = log(-SR_ent)      = logsumexp_i(log p_i + log(-log p_i))

where S_p = sum_{j>=2} exp(p * lambda (z_(j) - z_(1))). A larger score is a smaller log-deficit.

Remainders (T = sum_{j>=3} e^{lambda (z_(j) - z_(1))}, u = e^x):

    SR_max    |ratio - 1| ~ T + u^2 / 2             < tol once lambda >= log(2 / tol) / g
    SR_doctor |ratio - 1| ~ T / u + u               < tol once lambda >= log(2 / tol) / min(g, z_(2) - z_(3))
    SR_ent    |D_ent / x - 1| ~ log1p(lambda g) / (lambda g)
                                                    < 1e-6 only once lambda g >~ 1.7e7
"""

import math
import numpy as np
import scipy.stats
import scipy.special
import scipy.optimize

from typing import *
from gscutils import msg
from dataclasses import dataclass
from gscutils import scores as sc
from gscutils.data import ScoreId, SR_SCORES
from gscutils.errors import TiedTopLogits, PreconditionError

TIE_GAP = 1e-9
RATIO_TOL = 1e-6

# below this, exp() underflows and log(log1p(exp(y))) == log(expm1(exp(y))) == y to double precision
_LOG_TINY = -700.0


def _log_softplus_log(y: np.ndarray) -> np.ndarray:
	# log(log1p(exp(y)))
	y = np.asarray(y, dtype=np.float64)
	with np.errstate(divide="ignore", over="ignore"):
		return np.where(y < _LOG_TINY, y, np.log(np.log1p(np.exp(np.maximum(y, _LOG_TINY)))))


def _log_expm1_exp(y: np.ndarray) -> np.ndarray:
	# log(expm1(exp(y)))
	y = np.asarray(y, dtype=np.float64)
	with np.errstate(divide="ignore", over="ignore"):
		return np.where(y < _LOG_TINY, y, np.log(np.expm1(np.exp(np.maximum(y, _LOG_TINY)))))


def _gaps(z: np.ndarray, lam: float) -> np.ndarray:
	"""lambda * (z_(j) - z_(1)) for j >= 2, per row, sorted descending."""
	v = np.sort(np.atleast_2d(z), axis=-1)[:, ::-1]
	return lam * (v[:, 1:] - v[:, :1])


def top_gap(z: Any) -> np.ndarray:
	v = np.sort(np.atleast_2d(np.asarray(z, dtype=np.float64)), axis=-1)
	return v[:, -1] - v[:, -2]


def log_deficit(score_id: ScoreId, z: Any, lam: float) -> np.ndarray:
	"""Strictly decreasing transform of the SR score of lambda * z, one value per row."""
	d = _gaps(np.asarray(z, dtype=np.float64), lam)
	log_s1 = scipy.special.logsumexp(d, axis=-1)

	match score_id:
		case ScoreId.SR_MAX:
			return _log_softplus_log(log_s1)

		case ScoreId.SR_DOCTOR:
			log_s2 = scipy.special.logsumexp(2 * d, axis=-1)
			terms = [math.log(2) + log_s1]
			if d.shape[1] >= 2:
				i, j = np.triu_indices(d.shape[1], k=1)
				terms.append(math.log(2) + scipy.special.logsumexp(d[:, i] + d[:, j], axis=-1))
			return np.logaddexp.reduce(np.stack(terms), axis=0) - np.logaddexp(0.0, log_s2)

		case ScoreId.SR_ENT:
			lse = np.logaddexp(0.0, log_s1)                       # log(1 + S1) = -log p_(1)
			log_lse = _log_softplus_log(log_s1)
			top = -lse + log_lse
			rest = (d - lse[:, None]) + np.log(lse[:, None] - d)
			return np.logaddexp(top, scipy.special.logsumexp(rest, axis=-1))

		case _:
			raise PreconditionError(f"'{score_id}' is not a softmax-response score")


def log_deficit_asymptote(score_id: ScoreId, gap: Any, lam: float) -> np.ndarray:
	x = -lam * np.asarray(gap, dtype=np.float64)
	match score_id:
		case ScoreId.SR_MAX | ScoreId.SR_ENT:
			return x
		case ScoreId.SR_DOCTOR:
			return _log_expm1_exp(math.log(2) + x)
		case _:
			raise PreconditionError(f"'{score_id}' is not a softmax-response score")


def asymptote(score_id: ScoreId, z: Any, lam: float) -> float:
	"""The closed-form large-lambda equivalent of the SR score of lambda * z."""
	g = float(top_gap(z)[0])
	if g < TIE_GAP:
		raise TiedTopLogits(f"top two logits are tied (gap {g:.3g})")

	# e^{lambda (z_(2) - z_(1))}, from the log-domain gap
	u = math.exp(-lam * g)
	match score_id:
		case ScoreId.SR_MAX:
			return math.exp(-u)
		case ScoreId.SR_DOCTOR:
			return -math.expm1(2 * u)
		case ScoreId.SR_ENT:
			return -u
		case _:
			raise PreconditionError(f"'{score_id}' is not a softmax-response score")


def ratio_error(score_id: ScoreId, z: Any, lam: float) -> np.ndarray:
	"""
	|score / asymptote - 1| per row for SR_max and SR_doctor; for SR_ent, whose equivalence only
	holds on the log(-.) scale, |log(-SR_ent) / log(-asymptote) - 1|.
	"""
	z = np.atleast_2d(np.asarray(z, dtype=np.float64))
	g = top_gap(z)
	if (g < TIE_GAP).any():
		raise TiedTopLogits(f"row {int(np.flatnonzero(g < TIE_GAP)[0])} has tied top logits")

	actual = log_deficit(score_id, z, lam)
	asym = log_deficit_asymptote(score_id, g, lam)

	match score_id:
		case ScoreId.SR_MAX:
			# log SR_max - log asym = e^x - log1p(S1) = exp(asym) - exp(actual)
			return np.abs(np.expm1(np.exp(asym) - np.exp(actual)))
		case ScoreId.SR_DOCTOR:
			return np.abs(np.expm1(actual - asym))
		case ScoreId.SR_ENT:
			with np.errstate(divide="ignore", invalid="ignore"):
				return np.where(asym != 0, np.abs(actual / asym - 1.0), np.nan)
		case _:
			raise PreconditionError(f"'{score_id}' is not a softmax-response score")


def ratio_threshold(score_id: ScoreId, z: Any, tol: float = RATIO_TOL) -> float:
	"""Smallest lambda from which the leading remainder term drops below `tol` for this row."""
	v = np.sort(np.asarray(z, dtype=np.float64).reshape(-1))[::-1]
	g = float(v[0] - v[1])
	if g < TIE_GAP:
		raise TiedTopLogits(f"top two logits are tied (gap {g:.3g})")

	budget = -math.log(tol / 2.0)
	match score_id:
		case ScoreId.SR_MAX:
			return budget / g
		case ScoreId.SR_DOCTOR:
			second = float(v[1] - v[2]) if len(v) > 2 else math.inf
			return budget / min(g, second)
		case ScoreId.SR_ENT:
			t = scipy.optimize.brentq(lambda t: math.log1p(t) / t - tol, 1.0, 1e15, xtol=1e-6)
			return t / g
		case _:
			raise PreconditionError(f"'{score_id}' is not a softmax-response score")


@dataclass(frozen=True)
class AsymptoticEntry:
	score: str
	lam: float
	max_ratio_err: Optional[float]
	kendall_tau: Optional[float]
	skipped_rows: int

	@property
	def all_ties(self) -> bool:
		return self.kendall_tau is None


@dataclass(frozen=True)
class AsymptoticReport:
	entries: list[AsymptoticEntry]

	def get(self, score: ScoreId, lam: float) -> AsymptoticEntry:
		for e in self.entries:
			if e.score == str(score) and e.lam == lam:
				return e
		raise KeyError(f"no entry for ({score}, {lam})")

	def taus(self, score: ScoreId) -> list[Optional[float]]:
		return [e.kendall_tau for e in self.entries if e.score == str(score)]


def kendall_tau(a: Any, b: Any) -> Optional[float]:
	"""Kendall's tau-b, or None when either ordering is a single tie."""
	a = np.asarray(a)
	b = np.asarray(b)
	if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
		return None
	return float(scipy.stats.kendalltau(a, b).statistic)


def convergence_sweep(
    rows: Any,
    lambdas: Sequence[float],
    min_gap: float = TIE_GAP,
    score_ids: Sequence[ScoreId] = SR_SCORES,
) -> AsymptoticReport:
	"""
	For every lambda: the worst ratio error over the rows, and the Kendall tau between each SR
	score's ordering of the rows and the confidence-margin ordering. Rows with (near-)tied top
	logits fall outside the lemma and are skipped.
	"""
	z = np.atleast_2d(np.asarray(rows, dtype=np.float64))
	if any(lam < 0 for lam in lambdas):
		raise PreconditionError(f"scale factors must be non-negative, got {list(lambdas)}")

	keep = top_gap(z) >= min_gap
	skipped = int((~keep).sum())
	if skipped > 0:
		msg.warn2(f"Skipping {skipped} row{'' if skipped == 1 else 's'} with tied top logits")

	z = z[keep]
	margin = sc.conf_margin(z) if len(z) > 0 else np.zeros(0)

	entries: list[AsymptoticEntry] = []
	for score in score_ids:
		for lam in lambdas:
			if len(z) == 0:
				entries.append(AsymptoticEntry(str(score), float(lam), None, None, skipped))
				continue

			err = ratio_error(score, z, lam)
			worst = None if np.isnan(err).any() else float(err.max())
			tau = kendall_tau(-log_deficit(score, z, lam), margin)
			entries.append(AsymptoticEntry(str(score), float(lam), worst, tau, skipped))

	return AsymptoticReport(entries)


def monotonicity_check(gaps: Any, lam: float) -> bool:
	"""Whether every asymptotic form is strictly increasing in the top-two gap over `gaps`."""
	g = np.asarray(gaps, dtype=np.float64).reshape(-1)
	if (g <= 0).any():
		raise PreconditionError("top-two gaps must be positive")

	g = np.unique(g)
	if len(g) < 2:
		return True

	# the asymptotes increase in g exactly when their log-deficits decrease
	return all(bool(np.all(np.diff(log_deficit_asymptote(s, g, lam)) < 0)) for s in SR_SCORES)


def random_gapped_rows(n: int, k: int, seed: int, min_gap: float = 0.1, spacing: float = 0.1) -> np.ndarray:
	"""
	Logit rows whose top-two gaps are distinct, at least `min_gap` and `spacing` apart, with the
	remaining logits well below the runner-up.
	"""
	if k < 2 or n < 1:
		raise PreconditionError(f"need n >= 1 rows of k >= 2 logits, got n={n}, k={k}")

	rng = np.random.default_rng(seed)
	gaps = min_gap + spacing * rng.permutation(n)
	top = rng.normal(size=n)
	rest = (top - gaps)[:, None] - rng.uniform(5.0, 10.0, size=(n, k - 2))
	z = np.concatenate([top[:, None], (top - gaps)[:, None], rest], axis=1)

	# scatter the classes so the top logit is not always in column 0
	return np.take_along_axis(z, np.argsort(rng.random((n, k)), axis=1), axis=1)
