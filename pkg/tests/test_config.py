import pytest

from modules.config import (
    TrainConfig,
    build_configs,
    config_hash,
    load_run_config,
    load_yaml_config,
    parse_override,
    resolve_config,
)
from modules.errors import ConfigError


def test_defaults_resolve() -> None:
    run = build_configs(resolve_config())
    assert run.train.variant == "SYNSEG"
    assert run.train.weights.as_tuple() == (1.0, 1.0, 10.0, 10.0, 1.0)
    assert run.train.lr_gen == 1e-4
    assert run.train.lr_disc == 2e-4
    assert (TrainConfig().lr_gen, TrainConfig().lr_disc) == (1e-4, 2e-4)
    assert run.phantom.n_classes == run.train.n_classes == 2
    assert run.eval.organ_class == 1


def test_overrides_use_yaml_scalars() -> None:
    assert parse_override("train.lambda3=5") == (["train", "lambda3"], 5)
    assert parse_override("eval.all_classes=true") == (["eval", "all_classes"], True)
    run = build_configs(resolve_config({}, ["train.lambda3=5", "model.n_classes=3",
                                            "train.variant=HC"]))
    assert run.train.weights.lambda3 == 5.0
    assert run.train.variant == "HC"
    assert run.phantom.n_classes == 3
    assert run.train.segmenter.out_channels == 3


def test_invalid_values_are_rejected() -> None:
    for bad in ("train.nope=1", "train.epochs=abc", "train.variant=GAN", "model.image_size=30",
                "eval.organ_class=2", "train.lambda1=-1", "seed=-4", "novalue"):
        with pytest.raises(ConfigError):
            resolve_config({}, [bad])


def test_hash_is_stable_and_sensitive() -> None:
    a = resolve_config({}, ["train.lambda3=5"])
    b = resolve_config({"train": {"lambda3": 5}})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(resolve_config())


def test_yaml_loading(tmp_path) -> None:
    assert load_yaml_config(None) == {}
    with pytest.raises(ConfigError):
        load_yaml_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [1, 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_yaml_config(bad)
    good = tmp_path / "good.yaml"
    good.write_text("seed: 4\ntrain:\n  epochs: 3\n", encoding="utf-8")
    run = load_run_config(good, ["train.batch=2"])
    assert (run.train.seed, run.train.epochs, run.train.batch) == (4, 3, 2)
