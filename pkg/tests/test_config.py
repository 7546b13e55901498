"""Run-config parsing, validation, and hash stability."""

import pytest

from vibemil.config import (
    FeaturizeParams,
    RunConfig,
    SplitParams,
    default_config,
    load_config,
    write_config_toml,
)
from vibemil.errors import ConfigError
from vibemil.gbt import Growth


def write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


MINIMAL = 'data_dir = "d"\nartifact_dir = "a"\n'


class TestLoad:
    def test_minimal_gets_defaults(self, tmp_path):
        cfg = load_config(write(tmp_path, MINIMAL))
        assert cfg.task == "pvh" and cfg.seed == 0
        assert cfg.featurize == FeaturizeParams(window=200, hop=100, scaler_fraction=0.3)
        assert cfg.split == SplitParams(k=5, holdout_fraction=0.15)
        assert cfg.gbt_level.growth is Growth.LEVEL_WISE
        assert cfg.gbt_leaf.growth is Growth.LEAF_WISE
        assert cfg.gbt_level.n_estimators == 500
        assert cfg.gbt_level.max_depth == 5
        assert cfg.gbt_level.learning_rate == 0.05
        assert cfg.gbt_level.row_subsample == 0.8
        assert cfg.gbt_level.l1_alpha == 0.1
        assert cfg.gbt_level.l2_lambda == 1.0
        assert cfg.gbt_level.early_stop_patience == 50
        assert cfg.mil.epochs == 100 and cfg.mil.patience == 10
        assert cfg.ensemble.step == 0.05

    def test_sections_override(self, tmp_path):
        cfg = load_config(
            write(
                tmp_path,
                MINIMAL + 'task = "npvh"\nseed = 5\n[mil]\nepochs = 7\n[gbt_leaf]\nmax_leaves = 15\n',
            )
        )
        assert cfg.task == "npvh" and cfg.seed == 5
        assert cfg.mil.epochs == 7
        assert cfg.gbt_leaf.max_leaves == 15
        assert cfg.gbt_leaf.growth is Growth.LEAF_WISE

    def test_cli_overrides_beat_file(self, tmp_path):
        path = write(tmp_path, MINIMAL + 'task = "pvh"\nseed = 1\n')
        cfg = load_config(path, task="npvh", seed=9)
        assert cfg.task == "npvh" and cfg.seed == 9

    @pytest.mark.parametrize(
        "text",
        [
            'artifact_dir = "a"\n',                        # missing data_dir
            MINIMAL + "bogus = 1\n",                       # unknown top-level key
            MINIMAL + "[mil]\nbogus = 1\n",                # unknown section key
            MINIMAL + 'task = "both"\n',                   # bad task
            MINIMAL + "[mil]\nepochs = 0\n",               # section validation
            MINIMAL + "[split]\nk = 1\n",
            MINIMAL + "[featurize]\nscaler_fraction = 0.0\n",
            MINIMAL + "[ensemble]\nstep = 0.0\n",
            MINIMAL + '[gbt_level]\ngrowth = "leaf"\n',    # growth pinned per section
            MINIMAL + '[gbt_leaf]\ngrowth = "level"\n',
            MINIMAL + '[gbt_level]\ngrowth = "sideways"\n',
            "not toml [ =",
        ],
    )
    def test_rejections(self, tmp_path, text):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")


class TestHash:
    def test_hash_ignores_formatting(self, tmp_path):
        a = load_config(write(tmp_path, MINIMAL + "\n# comment\nseed = 0\n"))
        b = default_config("d", "a")
        assert a.config_hash == b.config_hash

    def test_hash_tracks_every_field(self):
        base = default_config("d", "a")
        assert base.config_hash != default_config("d", "a", seed=1).config_hash
        assert base.config_hash != default_config("d", "a", task="npvh").config_hash
        assert base.config_hash != default_config("d2", "a").config_hash

    def test_explicit_default_same_hash(self, tmp_path):
        a = load_config(write(tmp_path, MINIMAL + "[mil]\nepochs = 100\n"))
        b = load_config(write(tmp_path, MINIMAL))
        assert a.config_hash == b.config_hash

    def test_round_trip_through_toml(self, tmp_path):
        cfg = default_config("data", "art", task="npvh", seed=11)
        path = tmp_path / "resolved.toml"
        write_config_toml(cfg, path)
        again = load_config(path)
        assert again == cfg
        assert again.config_hash == cfg.config_hash


class TestPaths:
    def test_artifact_path_is_per_task(self):
        cfg = default_config("d", "art", task="npvh")
        assert cfg.artifact_path.as_posix() == "art/npvh"

    def test_frozen(self):
        cfg = default_config("d", "a")
        with pytest.raises(AttributeError):
            cfg.seed = 3


class TestRunConfigValidation:
    def test_wrong_growth_rejected(self):
        from vibemil.gbt import GbtConfig

        with pytest.raises(ConfigError):
            RunConfig(data_dir="d", artifact_dir="a", gbt_level=GbtConfig(growth=Growth.LEAF_WISE))

    def test_bad_task_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(data_dir="d", artifact_dir="a", task="x")
