# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import math
import numpy as np
import pytest

from gscutils import scores as sc
from gscutils.data import EvalSet, ClassifierHead, CalibrationSubset, ScoreId, draw_calibration
from gscutils.errors import (
    MissingHead,
    MissingFeatures,
    EmptyReference,
    ZeroVariance,
    DegenerateSpectrum,
    PreconditionError,
    ShapeMismatch,
)


def _probs(z):
	z = np.asarray(z, dtype=np.float64)
	e = np.exp(z - z.max())
	return e / e.sum()


class TestSoftmaxScores:
	def test_softmax(self):
		assert np.allclose(sc.softmax([0.0, 0.0]), [0.5, 0.5], rtol=0, atol=1e-15)
		assert np.allclose(sc.softmax([1000.0, 0.0]), [1.0, 0.0], rtol=0, atol=1e-12)
		assert np.allclose(sc.softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=0, atol=1e-12)

	def test_uniform_logits(self):
		z = np.zeros(4)
		assert sc.sr_max(z) == pytest.approx(0.25, abs=1e-15)
		assert sc.sr_doctor(z) == pytest.approx(-3.0, abs=1e-12)
		assert sc.sr_ent(z) == pytest.approx(-math.log(4), abs=1e-12)

	def test_direct_evaluation(self):
		z = [3.0, 1.0, 0.0]
		p = _probs(z)
		assert sc.sr_max(z) == pytest.approx(p.max(), rel=1e-14)
		assert sc.sr_doctor(z) == pytest.approx(1 - 1 / (p @ p), rel=1e-12)
		assert sc.sr_ent(z) == pytest.approx(float((p * np.log(p)).sum()), rel=1e-12)

	def test_degenerate_distribution(self):
		z = [50.0, 0.0, 0.0, 0.0]
		assert sc.sr_max(z) == pytest.approx(1.0, abs=1e-15)
		assert abs(sc.sr_doctor(z)) < 1e-20
		assert abs(sc.sr_ent(z)) < 1e-18
		assert sc.sr_doctor(z) <= 0 and sc.sr_ent(z) <= 0

	def test_shift_invariance(self, rng):
		z = rng.normal(size=(30, 5))
		c = rng.normal(size=(30, 1)) * 10
		for f in (sc.sr_max, sc.sr_doctor, sc.sr_ent, sc.conf_margin):
			assert np.allclose(f(z), f(z + c), rtol=1e-9, atol=1e-12)

		assert np.allclose(sc.rl_max(z + c), sc.rl_max(z) + c[:, 0], rtol=0, atol=1e-12)
		assert np.allclose(sc.energy(z + c), sc.energy(z) + c[:, 0], rtol=0, atol=1e-12)

	def test_ranges(self, rng):
		z = rng.normal(scale=3.0, size=(200, 6))
		assert np.all((sc.sr_max(z) > 1 / 6) & (sc.sr_max(z) <= 1))
		assert np.all((sc.sr_doctor(z) > 1 - 6) & (sc.sr_doctor(z) <= 0))
		assert np.all((sc.sr_ent(z) >= -math.log(6) - 1e-12) & (sc.sr_ent(z) <= 0))

	def test_scale_sensitivity_witness(self):
		# search a grid of row pairs for an sr_max order flip between lambda=0.1 and lambda=4
		candidates = [np.array([1.0, g, -10.0, -10.0]) for g in np.linspace(0.0, 0.99, 12)]
		candidates += [np.array([1.0 + g, 0.0, 0.0, 0.0]) for g in np.linspace(0.0, 0.3, 7)]

		flips = 0
		for a in candidates:
			for b in candidates:
				lo = np.sign(sc.sr_max(0.1 * a) - sc.sr_max(0.1 * b))
				hi = np.sign(sc.sr_max(4.0 * a) - sc.sr_max(4.0 * b))
				flips += int(lo * hi < 0)

		assert flips > 0


class TestMargins:
	def test_conf_margin(self):
		assert sc.conf_margin([3.0, 1.0, 0.0]) == 2.0
		assert sc.conf_margin([2.0, 2.0, 0.0]) == 0.0
		assert sc.conf_margin(7.5 * np.array([3.0, 1.0, 0.0])) == pytest.approx(15.0)

	def test_signed_distances(self):
		assert np.array_equal(sc.signed_distances([2.0, 2.0], ClassifierHead.create([1.0, 2.0])), [2.0, 1.0])
		with pytest.raises(MissingHead):
			sc.signed_distances([1.0, 0.0], None)
		with pytest.raises(ShapeMismatch):
			sc.signed_distances([1.0, 0.0, 2.0], ClassifierHead.create([1.0, 1.0]))

	def test_geo_margin_reorders_classes(self):
		head = ClassifierHead.create([3.0, 1.0, 1.0])
		z = np.array([3.0, 2.9, 0.0])
		d = sc.signed_distances(z, head)
		assert np.argmax(d) == 1 and np.argmax(z) == 0
		assert sc.geo_margin(z, head) == pytest.approx(1.9, abs=1e-12)

	def test_geo_margin_with_unit_norms_is_conf_margin(self, rng):
		z = rng.normal(size=(50, 7))
		assert np.array_equal(sc.geo_margin(z, ClassifierHead.unit(7)), sc.conf_margin(z))

	@pytest.mark.parametrize("lam", [1e-3, 1e-2, 0.1, 0.5, 2.0, 10.0, 1e2, 1e3])
	def test_scale_invariance_of_orderings(self, rng, lam):
		for _ in range(25):
			n, k = int(rng.integers(1, 101)), int(rng.integers(2, 21))
			z = rng.normal(scale=2.0, size=(n, k))
			head = ClassifierHead.create(rng.uniform(0.5, 2.0, size=k))

			for f in (sc.conf_margin, lambda x: sc.geo_margin(x, head)):
				base = np.argsort(-f(z), kind="stable")
				assert np.array_equal(np.argsort(-f(lam * z), kind="stable"), base)


def test_rl_max_and_energy():
	assert sc.rl_max([3.0, 1.0, 0.0]) == 3.0
	assert sc.energy([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
	assert sc.energy([1000.0, 0.0]) == pytest.approx(1000.0, abs=1e-9)
	assert sc.energy([3.0, 1.0, 0.0]) == pytest.approx(math.log(math.exp(3) + math.exp(1) + 1), rel=1e-14)


def _knn_set(rows) -> EvalSet:
	rows = np.asarray(rows, dtype=np.float64)
	return EvalSet.create(rows, np.zeros(len(rows), dtype=int))


class TestKnn:
	def test_identical_reference_row(self):
		es = _knn_set([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0]])
		cfg = sc.KnnConfig.create(1, CalibrationSubset(np.array([1, 2]), 0))
		# row 0 is not in the reference set, so its twin counts
		assert sc.knn_score(es, cfg, 0) == 0.0

	def test_kth_order_statistic(self):
		es = _knn_set([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [-5.0, 0.0]])
		cfg = sc.KnnConfig.create(2, CalibrationSubset(np.array([1, 2, 3]), 0))
		assert sc.knn_score(es, cfg, 0) == pytest.approx(-2.0)

	def test_query_excluded_from_its_own_neighbours(self):
		es = _knn_set([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
		cfg = sc.KnnConfig.create(1, CalibrationSubset(np.array([0, 1, 2]), 0))
		assert sc.knn_score(es, cfg, 0) == pytest.approx(-1.0)

		with pytest.raises(EmptyReference):
			sc.knn_score(es, sc.KnnConfig.create(3, CalibrationSubset(np.array([0, 1, 2]), 0)), 0)

	def test_empty_reference(self):
		with pytest.raises(EmptyReference):
			sc.KnnConfig.create(1, CalibrationSubset(np.zeros(0, dtype=np.int64), 0))

	def test_matches_brute_force(self, rng):
		z = rng.normal(size=(40, 5))
		es = _knn_set(z)
		ref = np.sort(rng.choice(40, size=15, replace=False))
		cfg = sc.KnnConfig.create(3, CalibrationSubset(ref, 0))

		got = sc.knn_scores(es, cfg)
		for i in range(40):
			d = sorted(float(np.sqrt(((z[i] - z[j])**2).sum())) for j in ref if j != i)
			assert got[i] == pytest.approx(-d[2], abs=1e-9)


def _vim_set(rng, n=60, d=5, k=3, rank=None) -> EvalSet:
	feats = rng.normal(size=(n, d))
	if rank is not None:
		feats = rng.normal(size=(n, rank)) @ rng.normal(size=(rank, d))
	z = feats @ rng.normal(size=(d, k))
	return EvalSet.create(z, np.argmax(z, axis=1), None, feats)


class TestVim:
	def test_exact_subspace_has_zero_residual(self, rng):
		es = _vim_set(rng, rank=2)
		cal = CalibrationSubset(np.arange(30), 0)
		cfg = sc.fit_vim(es, None, cal, 2)
		assert np.all(cfg.residual(es.features[cal.indices]) < 1e-9)

	def test_hyperplane_residual_matches_projector(self, rng):
		es = _vim_set(rng)
		cal = CalibrationSubset(np.arange(40), 0)
		cfg = sc.fit_vim(es, None, cal, 4)

		b = cfg.principal_basis
		assert np.allclose(b.T @ b, np.eye(4), atol=1e-10)

		proj = np.eye(5) - b @ b.T
		x = es.features - es.features[cal.indices].mean(axis=0)
		oracle = np.linalg.norm(x @ proj.T, axis=1)
		assert np.allclose(cfg.residual(es.features), oracle, rtol=0, atol=1e-9)

		score = sc.vim_score(es.features, es.logits, cfg)
		assert np.allclose(score, sc.energy(es.logits) - cfg.alpha * oracle, rtol=0, atol=1e-9)

	def test_alpha_matches_scales(self, rng):
		es = _vim_set(rng)
		cal = CalibrationSubset(np.arange(40), 0)
		cfg = sc.fit_vim(es, None, cal, 2)
		expected = abs(sc.rl_max(es.logits[:40]).mean()) / cfg.residual(es.features[:40]).mean()
		assert cfg.alpha == pytest.approx(expected, rel=1e-12)

	def test_zero_alpha_is_energy(self, rng):
		es = _vim_set(rng)
		cfg = sc.fit_vim(es, None, CalibrationSubset(np.arange(40), 0), 2)
		zero = sc.VimConfig(cfg.principal_dim, cfg.principal_basis, 0.0, cfg.center)
		assert np.array_equal(sc.vim_score(es.features, es.logits, zero), sc.energy(es.logits))

	def test_errors(self, rng):
		es = _vim_set(rng, rank=1)
		with pytest.raises(DegenerateSpectrum):
			sc.fit_vim(es, None, CalibrationSubset(np.arange(30), 0), 3)

		no_feats = EvalSet.create(es.logits, es.labels)
		with pytest.raises(MissingFeatures):
			sc.fit_vim(no_feats, None, CalibrationSubset(np.arange(30), 0), 2)
		with pytest.raises(MissingFeatures):
			sc.score_set(no_feats, ScoreId.VIM, sc.ScoreConfigs())

	def test_non_orthonormal_basis_is_rejected(self):
		with pytest.raises(PreconditionError):
			sc.VimConfig(1, np.array([[1.0], [1.0]]), 1.0, np.zeros(2))


class TestSirc:
	def test_moments(self, rng):
		s2 = rng.standard_normal(20000)
		cfg = sc.fit_sirc_moments(s2)
		assert cfg.a == pytest.approx(-3.0, abs=0.1)
		assert cfg.b == pytest.approx(1.0, abs=0.05)

	def test_zero_variance(self):
		with pytest.raises(ZeroVariance):
			sc.fit_sirc_moments(np.full(10, 2.0))
		with pytest.raises(ZeroVariance):
			sc.fit_sirc_moments(np.array([4.0]))

	def test_formula(self, rng):
		cfg = sc.SircConfig(a=-1.0, b=2.0, secondary=ScoreId.ENERGY)
		z = rng.normal(size=(10, 4))
		s2 = rng.normal(size=10)
		want = -(1 - sc.sr_max(z)) * (1 + np.exp(-2.0 * (s2 + 1.0)))
		assert np.allclose(sc.sirc_score(z, s2, cfg), want, rtol=1e-12, atol=0)

	def test_limits(self):
		cfg = sc.SircConfig(a=0.0, b=1.0, secondary=ScoreId.ENERGY)
		assert sc.sirc_score([800.0, 0.0, 0.0], 0.0, cfg) == 0.0

		z = np.array([1.0, 0.5, 0.0])
		assert sc.sirc_score(z, 1e6, cfg) == pytest.approx(-(1 - sc.sr_max(z)), rel=1e-12)
		assert np.isfinite(sc.sirc_score(z, -1e6, cfg))

	def test_secondary_must_be_row_local(self, mixed_set):
		cal = draw_calibration(mixed_set, 0)
		with pytest.raises(PreconditionError):
			sc.fit_sirc(mixed_set, cal, ScoreId.KNN)


class TestScoreSet:
	def test_conf_margin_vector(self, tiny_set):
		v = sc.score_set(tiny_set, ScoreId.CONF_MARGIN)
		assert v.score_id == ScoreId.CONF_MARGIN
		assert np.allclose(v.values, [1.0, 2.0, 0.5, 0.1])

	def test_matches_row_loop(self, mixed_set):
		head = ClassifierHead.create(np.linspace(0.5, 2.0, mixed_set.k))
		cal = draw_calibration(mixed_set, 3)

		for score_id in ScoreId:
			cfg = sc.fit_configs(mixed_set, score_id, head=head, cal=cal, vim_dim=3)
			whole = sc.score_set(mixed_set, score_id, cfg).values

			for i in range(0, mixed_set.n, 17):
				z = mixed_set.logits[i]
				match score_id:
					case ScoreId.GEO_MARGIN:
						row = sc.geo_margin(z, head)
					case ScoreId.KNN:
						row = sc.knn_score(mixed_set, cfg.knn, i)
					case ScoreId.VIM:
						row = sc.vim_score(mixed_set.features[i], z, cfg.vim)
					case ScoreId.SIRC:
						row = sc.sirc_score(z, sc.energy(z), cfg.sirc)
					case _:
						row = sc.ROW_LOCAL[score_id](z)

				assert whole[i] == pytest.approx(float(row), rel=1e-12, abs=1e-12)

	def test_is_pure(self, mixed_set):
		a = sc.score_set(mixed_set, ScoreId.SR_ENT).values
		b = sc.score_set(mixed_set, ScoreId.SR_ENT).values
		assert a.tobytes() == b.tobytes()

	def test_missing_calibration(self, mixed_set):
		with pytest.raises(PreconditionError):
			sc.fit_configs(mixed_set, ScoreId.KNN)
		with pytest.raises(MissingHead):
			sc.score_set(mixed_set, ScoreId.GEO_MARGIN)
