"""Strict key-value config parsing and typed builders."""

import dataclasses

import pytest

from warpadapt import config as C
from warpadapt import data as D


def test_defaults_without_file():
    cfg = C.load_config(None)
    assert cfg["run.seed"] == 17
    assert cfg["baseline.lr_decoder"] == 0.05
    assert cfg["sweep.seeds"] == (17, 42, 1337)


def test_overrides_and_comments():
    cfg = C.parse_config_text(
        "# a comment line\n"
        "\n"
        "dataset.n_train = 12  # inline comment\n"
        "baseline.epochs = 5\n"
        "augment.enabled = false\n"
        "sweep.fewshot = 1 50 full\n")
    assert cfg["dataset.n_train"] == 12
    assert cfg["baseline.epochs"] == 5
    assert cfg["augment.enabled"] is False
    assert cfg["sweep.fewshot"] == (1, 50, "full")
    assert cfg["dataset.n_val"] == 100  # untouched default


def test_unknown_key_is_a_hard_error():
    with pytest.raises(ValueError, match="unknown config key"):
        C.parse_config_text("dataset.n_trian = 5\n")
    with pytest.raises(ValueError, match="unknown config key"):
        C.Config().set("nope.key", 1)


def test_malformed_and_duplicate_lines():
    with pytest.raises(ValueError, match="line 1"):
        C.parse_config_text("dataset.n_train\n")
    with pytest.raises(ValueError, match="malformed key"):
        C.parse_config_text("Dataset.N = 5\n")
    with pytest.raises(ValueError, match="duplicate"):
        C.parse_config_text("run.seed = 1\nrun.seed = 2\n")


def test_type_enforcement():
    with pytest.raises(ValueError, match="integer"):
        C.parse_config_text("baseline.epochs = 2.5\n")
    with pytest.raises(ValueError, match="true or false"):
        C.parse_config_text("augment.enabled = yes\n")
    with pytest.raises(ValueError):
        C.parse_config_text("distortion.f = abc\n")


def test_resolved_text_round_trips():
    cfg = C.parse_config_text("dataset.n_train = 9\naugment.enabled = false\n")
    text = cfg.resolved_text()
    again = C.parse_config_text(text)
    assert again.values == cfg.values
    lines = text.strip().splitlines()
    assert lines == sorted(lines)
    assert "augment.enabled = false" in lines
    assert "sweep.seeds = 17 42 1337" in lines


def test_write_resolved(tmp_path):
    path = tmp_path / "echo.cfg"
    C.Config().write_resolved(path)
    assert C.parse_config_text(path.read_text()).values == C.Config().values


def test_dataset_and_distortion_builders():
    cfg = C.parse_config_text("dataset.height = 32\ndataset.width = 64\n"
                              "dataset.n_train = 4\ndistortion.f = 90\n"
                              "distortion.k1 = 0.05\n")
    spec = cfg.dataset_spec(seed=7)
    assert spec.height == 32 and spec.width == 64
    assert spec.seed == 7 and spec.n_train == 4
    params = cfg.distortion_params()
    assert params.k1 == 0.05
    assert cfg.distortion_params(f=150).k1 == 0.05


def test_engine_builders():
    cfg = C.parse_config_text("baseline.epochs = 3\nadapt.epochs = 2\n"
                              "augment.scale_min = 0.9\n")
    bcfg = cfg.baseline_config(seed=5)
    assert bcfg.epochs == 3 and bcfg.seed == 5
    assert bcfg.augment.scale_range == (0.9, 1.0)
    acfg = cfg.adaptation_config("BN_ONLY", "ENCODER", 10, 5)
    assert acfg.mode == "BN_ONLY" and acfg.subset_n == 10
    assert acfg.epochs == 2
    assert dataclasses.asdict(acfg)["augment"]["scale_range"] == (0.9, 1.0)


def test_augment_disabled_builds_none():
    cfg = C.parse_config_text("augment.enabled = false\n")
    assert cfg.augment_config() is None
    assert cfg.baseline_config(seed=1).augment is None


def test_fewshot_sizes_full_token():
    cfg = C.parse_config_text("sweep.fewshot = 1 50 100 full\n")
    assert cfg.fewshot_sizes() == (1, 50, 100, None)
    assert isinstance(cfg.augment_config(), D.AugmentConfig)
