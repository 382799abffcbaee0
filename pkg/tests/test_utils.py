import pytest

from mci_mae.utils import config_hash, get_obj_path, parse_override, set_obj_path


def test_get_obj_path():
    target = {"model": {"patch": {"d": 16}}, "runs": [1, {"seed": 4}]}

    assert get_obj_path(target, ("model", "patch", "d")) == 16
    assert get_obj_path(target, ("runs", 1, "seed")) == 4
    assert get_obj_path(target, ("model", "encoder")) is None
    assert get_obj_path(target, ("runs", 5), missing=-1) == -1


def test_set_obj_path_creates_sections():
    target = {"train": 3}
    set_obj_path(target, ("train", "seed"), 7)
    set_obj_path(target, ("model", "patch", "l"), 0)

    assert target == {"train": {"seed": 7}, "model": {"patch": {"l": 0}}}


def test_parse_override_values():
    assert parse_override("train.epochs=5") == (("train", "epochs"), 5)
    assert parse_override("mask.independent_spatial=false") == (("mask", "independent_spatial"), False)
    assert parse_override("mask.dynamic_ratios=[0.25, 0.5]") == (("mask", "dynamic_ratios"), [0.25, 0.5])
    assert parse_override("model.pool_mode=cls+avg") == (("model", "pool_mode"), "cls+avg")


def test_parse_override_errors():
    with pytest.raises(ValueError):
        parse_override("train.epochs")
    with pytest.raises(ValueError):
        parse_override("=5")


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": {"c": 2}}) == config_hash({"b": {"c": 2}, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
