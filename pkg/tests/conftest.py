# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import pytest

from typing import *
from gscutils import msg
from gscutils import synthetic as syn
from gscutils.data import EvalSet, ShiftTag


@pytest.fixture(autouse=True)
def _quiet():
	msg.set_quiet(True)
	yield
	msg.set_quiet(False)


@pytest.fixture
def rng() -> np.random.Generator:
	return np.random.default_rng(12345)


@pytest.fixture
def tiny_set() -> EvalSet:
	"""Three In-D rows (one misclassified) and one label-shifted row."""
	return EvalSet.create(
	    [[2.0, 1.0, 0.0], [0.0, 3.0, 1.0], [1.0, 0.5, 0.2], [0.3, 0.2, 0.1]],
	    [0, 1, 2, -1],
	)


def make_mixed_set(rng: np.random.Generator, n_in: int = 120, n_cov: int = 40, n_label: int = 40, k: int = 4, d: int = 6) -> EvalSet:
	"""Random logits with features, all three shift tags present."""
	n = n_in + n_cov + n_label
	feats = rng.normal(size=(n, d))
	weights = rng.normal(size=(d, k))
	z = feats @ weights + 0.5 * rng.normal(size=(n, k))

	labels = np.argmax(z + rng.normal(scale=1.0, size=(n, k)), axis=1)
	labels[n_in + n_cov:] = -1
	tags = np.concatenate([
	    np.full(n_in, ShiftTag.IN_D),
	    np.full(n_cov, ShiftTag.SHIFT_COV),
	    np.full(n_label, ShiftTag.SHIFT_LABEL),
	])
	return EvalSet.create(z, labels, tags, feats)


@pytest.fixture
def mixed_set(rng: np.random.Generator) -> EvalSet:
	return make_mixed_set(rng)


@pytest.fixture(scope="session")
def mixture() -> syn.MixtureSpec:
	return syn.MixtureSpec.default()


@pytest.fixture(scope="session")
def mixture_sample(mixture: syn.MixtureSpec) -> syn.MixtureSample:
	return syn.sample_per_class(mixture, 500, seed=0)
