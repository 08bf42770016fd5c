#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import os
import tomllib

from typing import *
from gscutils import msg
from dataclasses import dataclass
from gscutils.errors import ConfigError

__global_config: Optional["Config"] = None


def config() -> "Config":
	global __global_config
	if __global_config is None:
		__global_config = Config.defaults()
	return __global_config


def _set_config(cfg: "Config") -> "Config":
	global __global_config
	__global_config = cfg
	return __global_config


DEFAULT_KNN_K = 2
DEFAULT_SIRC_SECONDARY = "energy"
DEFAULT_CALIBRATION_MULTIPLIER = 5


@dataclass(eq=True, frozen=True)
class ScoresConfig:
	knn_k: int
	vim_dim: Optional[int]
	sirc_secondary: str
	calibration_multiplier: int

	@staticmethod
	def load(obj: Optional[dict[str, Any]]) -> "ScoresConfig":
		if obj is None:
			obj = {}

		_check_keys(obj, "scores", { "knn-k", "vim-dim", "sirc-secondary", "calibration-multiplier" })
		return ScoresConfig(
		    knn_k=_get(obj, "knn-k", "scores", int, DEFAULT_KNN_K),
		    vim_dim=_get(obj, "vim-dim", "scores", int, None),
		    sirc_secondary=_get(obj, "sirc-secondary", "scores", str, DEFAULT_SIRC_SECONDARY),
		    calibration_multiplier=_get(obj, "calibration-multiplier", "scores", int, DEFAULT_CALIBRATION_MULTIPLIER),
		)


DEFAULT_PER_CLASS = 500
DEFAULT_VARIANCE = 0.15
DEFAULT_LAMBDAS = (0.1, 1.0, 2.0, 4.0)
DEFAULT_GRID = (-2.0, 2.0, 201)
DEFAULT_COVERAGE = 0.8


@dataclass(eq=True, frozen=True)
class SyntheticConfig:
	per_class: int
	variance: float
	lambdas: tuple[float, ...]
	grid: tuple[float, float, int]
	coverage: float
	seed: int

	@staticmethod
	def load(obj: Optional[dict[str, Any]]) -> "SyntheticConfig":
		if obj is None:
			obj = {}

		_check_keys(obj, "synthetic", { "per-class", "variance", "lambdas", "grid", "coverage", "seed" })

		grid = _get(obj, "grid", "synthetic", list, list(DEFAULT_GRID))
		if len(grid) != 3:
			raise ConfigError(f"'synthetic.grid' must be [lo, hi, n], got {grid}")

		return SyntheticConfig(
		    per_class=_get(obj, "per-class", "synthetic", int, DEFAULT_PER_CLASS),
		    variance=float(_get(obj, "variance", "synthetic", (int, float), DEFAULT_VARIANCE)),
		    lambdas=tuple(map(float, _get(obj, "lambdas", "synthetic", list, list(DEFAULT_LAMBDAS)))),
		    grid=(float(grid[0]), float(grid[1]), int(grid[2])),
		    coverage=float(_get(obj, "coverage", "synthetic", (int, float), DEFAULT_COVERAGE)),
		    seed=_get(obj, "seed", "synthetic", int, 0),
		)


DEFAULT_ASYMPTOTIC_LAMBDAS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0)
DEFAULT_MIN_GAP = 1e-9
DEFAULT_ROWS = 50


@dataclass(eq=True, frozen=True)
class AsymptoticsConfig:
	lambdas: tuple[float, ...]
	min_gap: float
	rows: int

	@staticmethod
	def load(obj: Optional[dict[str, Any]]) -> "AsymptoticsConfig":
		if obj is None:
			obj = {}

		_check_keys(obj, "asymptotics", { "lambdas", "min-gap", "rows" })
		return AsymptoticsConfig(
		    lambdas=tuple(map(float, _get(obj, "lambdas", "asymptotics", list, list(DEFAULT_ASYMPTOTIC_LAMBDAS)))),
		    min_gap=float(_get(obj, "min-gap", "asymptotics", (int, float), DEFAULT_MIN_GAP)),
		    rows=_get(obj, "rows", "asymptotics", int, DEFAULT_ROWS),
		)


DEFAULT_ALPHAS = (0.1, 0.5, 1.0)
DEFAULT_TPR = 0.95
DEFAULT_BINS = 30


@dataclass(eq=True, frozen=True)
class ReportConfig:
	alphas: tuple[float, ...]
	tpr: float
	bins: int

	@staticmethod
	def load(obj: Optional[dict[str, Any]]) -> "ReportConfig":
		if obj is None:
			obj = {}

		_check_keys(obj, "report", { "alphas", "tpr", "bins" })
		return ReportConfig(
		    alphas=tuple(map(float, _get(obj, "alphas", "report", list, list(DEFAULT_ALPHAS)))),
		    tpr=float(_get(obj, "tpr", "report", (int, float), DEFAULT_TPR)),
		    bins=_get(obj, "bins", "report", int, DEFAULT_BINS),
		)


@dataclass(eq=True, frozen=True)
class Config:
	scores: ScoresConfig
	synthetic: SyntheticConfig
	asymptotics: AsymptoticsConfig
	report: ReportConfig

	@staticmethod
	def defaults() -> "Config":
		return Config.from_dict({})

	@staticmethod
	def from_dict(f: dict[str, Any]) -> "Config":
		for section in f.keys() - { "scores", "synthetic", "asymptotics", "report" }:
			msg.warn(f"Ignoring unknown config section '{section}'")

		return Config(
		    ScoresConfig.load(f.get("scores")),
		    SyntheticConfig.load(f.get("synthetic")),
		    AsymptoticsConfig.load(f.get("asymptotics")),
		    ReportConfig.load(f.get("report")),
		)

	@staticmethod
	def load(path: Optional[str]) -> "Config":
		if path is None:
			return _set_config(Config.defaults())

		with open(path, "rb") as file:
			try:
				f = tomllib.load(file)
			except tomllib.TOMLDecodeError as e:
				raise ConfigError(f"Invalid config file '{path}': {e}")

		return _set_config(Config.from_dict(f))


def find_config_file(path: str) -> Optional[str]:
	if os.path.exists(path):
		return path

	xdg_home = os.getenv("XDG_CONFIG_HOME", f"{os.getenv('HOME')}/.config")
	cfg = f"{xdg_home}/gscutils/config.toml"
	if os.path.exists(cfg):
		return cfg

	return None


def _check_keys(c: dict[str, Any], section: str, known: set[str]):
	for k in sorted(c.keys() - known):
		msg.warn(f"Ignoring unknown key '{k}' in section '{section}'")


def _get(c: dict[str, Any], k: str, section: str, ty: Any, default: Any) -> Any:
	if k not in c:
		return default

	v = c[k]
	# bool is an int subclass; never accept it where a number is expected
	if isinstance(v, bool) or not isinstance(v, ty):
		raise ConfigError(f"Key '{k}' in section '{section}' has the wrong type ({type(v).__name__})")

	return v
