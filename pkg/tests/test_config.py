"""
Configuration layering: defaults, presets, config files and --set flags
"""
import pytest

from fmnet.models import NetworkConfig, TrainConfig
from fmnet.utils.config import (
    config_snapshot,
    load_config_file,
    parse_key_values,
    parse_set_flags,
    resolve_configs,
)
from fmnet.utils.errors import ConfigurationError, FormatError


def test_paper_preset_is_the_built_in_default():
    network, train = resolve_configs()
    assert network == NetworkConfig()
    assert train == TrainConfig()


def test_desk_preset_shrinks_the_network():
    network, train = resolve_configs({"preset": "desk"})
    assert (network.c, network.n, network.p, network.kernels) == (16, 2, 2, [3, 7])
    assert (train.epochs, train.patch_size, train.steps_per_epoch) == (10, 32, 25)


def test_flags_override_file_which_overrides_preset(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# local run\npreset = desk\nc = 24\nepochs = 3  # short\n", encoding="utf-8")
    network, train = resolve_configs(load_config_file(path), parse_set_flags(["epochs=5"]))
    assert network.c == 24
    assert network.n == 2
    assert train.epochs == 5


def test_list_and_bool_values_are_parsed():
    network, _ = resolve_configs(flag_values={"kernels": "3,5,9", "fusion_enabled": "false", "channel_order": "0,1,2"})
    assert network.kernels == [3, 5, 9]
    assert network.fusion_enabled is False
    assert network.channel_order == (0, 1, 2)


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigurationError) as excinfo:
        resolve_configs(flag_values={"learning_rate": "1"})
    assert "learning_rate" in str(excinfo.value)


def test_unknown_preset_is_rejected():
    with pytest.raises(ConfigurationError):
        resolve_configs({"preset": "huge"})


def test_invalid_values_become_configuration_errors():
    with pytest.raises(ConfigurationError):
        resolve_configs(flag_values={"n": "2", "kernels": "3,4"})
    with pytest.raises(ConfigurationError):
        resolve_configs(flag_values={"batch_size": "0"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config_file(tmp_path / "absent.cfg")


def test_line_without_equals_names_the_line():
    with pytest.raises(FormatError) as excinfo:
        parse_key_values(["c=4", "oops"], "run.cfg")
    assert excinfo.value.field == "run.cfg:2"


def test_snapshot_resolves_back_to_the_same_configs():
    network = NetworkConfig(p=2, n=2, c=8, bands=6, kernels=[3, 5], mix_enabled=False)
    train = TrainConfig(initial_lr=3e-4, epochs=7, steps_per_epoch=4)
    snapshot = config_snapshot(network, train)
    assert snapshot["kernels"] == "3,5"
    assert snapshot["mix_enabled"] == "false"
    assert "steps_per_epoch" in snapshot
    assert resolve_configs(snapshot) == (network, train)
