import os

import pytest
from pyharvim import ConfigException, MetaGradientMode, RemoverKind, RunConfig

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def test_defaults():
    config = RunConfig()
    assert config["glyph"] == "C"
    assert config["glyph_tone"] is None
    assert config["meta_mode"] is MetaGradientMode.EXACT_K1
    assert config["removers"] == (RemoverKind.FLOW_R, RemoverKind.HEAT_DIFFUSION, RemoverKind.BLIND_THRESHOLD)
    assert config.harvim_config().rounds == 10


def test_load_fixture_file():
    config = RunConfig.load(os.path.join(FIXTURES, "run-config.txt"))
    assert config["seed"] == 7
    assert config["glyph"] == "NJ"
    assert config["glyph_tone"] == 0.25
    assert config["removers"] == (RemoverKind.HEAT_DIFFUSION, RemoverKind.BLIND_THRESHOLD)
    assert config["binarize_mask"] is True
    harvim = config.harvim_config()
    assert (harvim.meta_mode, harvim.inner_steps, harvim.learning_rate) == (MetaGradientMode.HVP, 2, 0.1)
    assert config.gauntlet_config().workers == 2


@pytest.mark.parametrize(
    "text",
    [
        "colour = red",
        "rounds = 3\nrounds = 4",
        "rounds 3",
        "rounds = three",
        "rounds = -1",
        "beta = 0",
        "meta_mode = second-order",
        "removers = flow-r, eraser",
        "binarize_mask = maybe",
        "glyph_tone = 1.5",
        "prior_validation_fraction = 1.0",
    ],
)
def test_bad_config_text_raises(text):
    with pytest.raises(ConfigException):
        RunConfig.parse(text)


def test_exact_meta_mode_needs_a_single_inner_step():
    with pytest.raises(ConfigException):
        RunConfig.parse("inner_steps = 2")
    assert RunConfig.parse("inner_steps = 2\nmeta_mode = first-order")["inner_steps"] == 2


def test_error_names_the_line():
    with pytest.raises(ConfigException, match=r"run\.cfg:2"):
        RunConfig.parse("seed = 1\nseed = 2", "run.cfg")


def test_serialize_parses_back_to_the_same_config():
    config = RunConfig.load(os.path.join(FIXTURES, "run-config.txt"))
    assert RunConfig.parse(config.serialize()).get_data() == config.get_data()
    assert RunConfig.parse(RunConfig().serialize()).get_data() == RunConfig().get_data()


def test_overrides_replace_single_keys():
    config = RunConfig().with_overrides(["rounds=2", "glyph_tone = auto", "use_decoder=on"])
    assert config["rounds"] == 2
    assert config["glyph_tone"] is None
    assert config["use_decoder"] is True
    assert RunConfig()["rounds"] == 10
    with pytest.raises(ConfigException):
        RunConfig().with_overrides(["rounds"])


def test_unknown_key_in_mapping_raises():
    with pytest.raises(ConfigException):
        RunConfig({"colour": "red"})
