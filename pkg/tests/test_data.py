# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import pytest

from gscutils.data import (
    EvalSet,
    ClassifierHead,
    ScoreVector,
    ScoreId,
    ShiftTag,
    validate,
    draw_calibration,
    split_mix,
    mix_mask,
)
from gscutils.errors import GscError, InsufficientCalibrationData, PreconditionError


def test_well_formed_set_has_no_violations():
	es = EvalSet.create([[1.0, 0.0], [0.0, 1.0], [0.5, 0.2]], [0, 1, 1])
	assert validate(es) == []


def test_sentinel_label_tagged_in_distribution_is_reported():
	es = EvalSet.create([[1.0, 0.0], [0.0, 1.0]], [-1, 1], [ShiftTag.IN_D, ShiftTag.IN_D])
	violations = validate(es)
	assert len(violations) == 1
	assert "row 0" in violations[0]


def test_nan_logit_is_reported_by_position():
	es = EvalSet.create([[1.0, np.nan], [0.0, 1.0]], [0, 1])
	assert "non-finite logit (0,1)" in validate(es)


def test_label_shift_tag_needs_sentinel_label():
	es = EvalSet.create([[1.0, 0.0], [0.0, 1.0]], [0, 1], [ShiftTag.IN_D, ShiftTag.SHIFT_LABEL])
	violations = validate(es)
	assert len(violations) == 1
	assert "row 1" in violations[0] and "ShiftLabel" in violations[0]


def test_out_of_range_label_and_bad_feature_rows():
	es = EvalSet.create([[1.0, 0.0], [0.0, 1.0]], [0, 5], None, np.zeros((3, 4)))
	violations = validate(es)
	assert any("label 5" in v for v in violations)
	assert any(v.startswith("features") for v in violations)


def test_single_class_is_rejected():
	es = EvalSet.create([[1.0], [2.0]], [0, 0])
	assert any("at least 2 classes" in v for v in validate(es))


def test_head_checks():
	es = EvalSet.create([[1.0, 0.0, 2.0]], [0])
	assert validate(es, ClassifierHead.create([1.0, 2.0, 3.0])) == []

	bad = validate(es, ClassifierHead.create([1.0, 0.0, 3.0]))
	assert len(bad) == 1 and "weight_norms[1]" in bad[0]

	w = np.array([[3.0, 0.0, 1.0], [4.0, 1.0, 0.0]])
	assert validate(es, ClassifierHead.from_weights(w)) == []
	assert len(validate(es, ClassifierHead.create([5.0, 1.0, 2.0], w))) == 1


def test_default_tags_follow_the_sentinel():
	es = EvalSet.create([[1.0, 0.0], [0.0, 1.0], [0.3, 0.3]], [0, -1, 1])
	assert es.shift_tags.tolist() == [ShiftTag.IN_D, ShiftTag.SHIFT_LABEL, ShiftTag.IN_D]


def test_eval_set_is_immutable():
	z = np.array([[1.0, 0.0]])
	es = EvalSet.create(z, [0])
	with pytest.raises(ValueError):
		es.logits[0, 0] = 5.0

	# the caller's array is copied, not aliased
	z[0, 0] = 7.0
	assert es.logits[0, 0] == 1.0


def _in_d_set(rng: np.random.Generator, n_in: int, k: int) -> EvalSet:
	z = rng.normal(size=(n_in + 10, k))
	labels = np.concatenate([rng.integers(0, k, size=n_in), -np.ones(10, dtype=int)])
	return EvalSet.create(z, labels)


def test_draw_calibration_is_deterministic_and_in_distribution(rng):
	es = _in_d_set(rng, 200, 10)
	a = draw_calibration(es, seed=7)
	b = draw_calibration(es, seed=7)

	assert len(a) == 50
	assert np.array_equal(a.indices, b.indices)
	assert len(np.unique(a.indices)) == 50
	assert np.all(es.shift_tags[a.indices] == ShiftTag.IN_D)

	c = draw_calibration(es, seed=8)
	assert len(c) == 50 and not np.array_equal(a.indices, c.indices)
	assert np.all(es.shift_tags[c.indices] == ShiftTag.IN_D)


def test_draw_calibration_needs_enough_rows(rng):
	es = _in_d_set(rng, 49, 10)
	with pytest.raises(InsufficientCalibrationData):
		draw_calibration(es, seed=0)


def test_split_mix_selects_shift_types(mixed_set):
	assert split_mix(mixed_set, "in").n == 120
	assert split_mix(mixed_set, "in+cov").n == 160
	assert split_mix(mixed_set, "in+label").n == 160
	assert split_mix(mixed_set, "all").n == 200

	sub = split_mix(mixed_set, "in+label")
	assert sub.features is not None and sub.features.shape == (160, 6)
	assert validate(sub) == []

	with pytest.raises(PreconditionError):
		split_mix(mixed_set, "everything")


def test_score_vector_clamps_infinities_and_rejects_nan():
	v = ScoreVector.create([1.0, -np.inf, np.inf], ScoreId.ENERGY)
	assert np.isfinite(v.values).all()
	assert v.values[1] < v.values[0] < v.values[2]

	with pytest.raises(GscError):
		ScoreVector.create([0.0, np.nan], ScoreId.ENERGY)


def test_score_id_parsing():
	assert ScoreId.parse("SR-MAX") == ScoreId.SR_MAX
	assert ScoreId.parse("rl_conf_m") == ScoreId.CONF_MARGIN
	assert str(ScoreId.GEO_MARGIN) == "geo_margin"
	with pytest.raises(PreconditionError):
		ScoreId.parse("mahalanobis")


def test_mix_mask_matches_split_mix(mixed_set):
	mask = mix_mask(mixed_set, "in+cov")
	assert mask.tolist() == [True] * 160 + [False] * 40
	assert np.array_equal(split_mix(mixed_set, "in+cov").logits, mixed_set.logits[mask])

	with pytest.raises(PreconditionError):
		mix_mask(mixed_set, "label")
