# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import pytest

from gscutils.config import Config, config, find_config_file
from gscutils.errors import ConfigError


def test_defaults():
	c = Config.defaults()
	assert c.scores.knn_k == 2
	assert c.scores.vim_dim is None
	assert c.scores.calibration_multiplier == 5
	assert c.synthetic.variance == 0.15
	assert c.synthetic.grid == (-2.0, 2.0, 201)
	assert c.report.alphas == (0.1, 0.5, 1.0)
	assert c.asymptotics.lambdas[-1] == 100.0


def test_load_sets_the_global(tmp_path):
	path = tmp_path / "gsc.toml"
	path.write_text('[scores]\nknn-k = 7\nsirc-secondary = "rl_max"\n\n[report]\nalphas = [0.25, 1]\n')

	c = Config.load(str(path))
	assert config() is c
	assert c.scores.knn_k == 7 and c.scores.sirc_secondary == "rl_max"
	assert c.report.alphas == (0.25, 1.0)

	assert Config.load(None) == Config.defaults()


def test_wrong_types_are_rejected():
	with pytest.raises(ConfigError):
		Config.from_dict({ "scores": { "knn-k": "two" } })
	with pytest.raises(ConfigError):
		Config.from_dict({ "scores": { "knn-k": True } })
	with pytest.raises(ConfigError):
		Config.from_dict({ "synthetic": { "grid": [0, 1] } })


def test_unknown_keys_are_ignored():
	c = Config.from_dict({ "scores": { "colour": "blue" }, "extra": {} })
	assert c == Config.defaults()


def test_invalid_toml(tmp_path):
	path = tmp_path / "bad.toml"
	path.write_text("[scores\n")
	with pytest.raises(ConfigError):
		Config.load(str(path))


def test_find_config_file(tmp_path, monkeypatch):
	monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "xdg"))
	assert find_config_file(str(tmp_path / "missing.toml")) is None

	(tmp_path / "xdg" / "gscutils").mkdir(parents=True)
	(tmp_path / "xdg" / "gscutils" / "config.toml").write_text("")
	assert find_config_file(str(tmp_path / "missing.toml")) == f"{tmp_path}/xdg/gscutils/config.toml"

	local = tmp_path / "gsc.toml"
	local.write_text("")
	assert find_config_file(str(local)) == str(local)
