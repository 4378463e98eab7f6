"""
Run configuration: a flat key = value file with '#' comments, overridable from the command line.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Optional

from .const import (
    ADAMW_WEIGHT_DECAY,
    GRID_MLE_STEPS,
    INNER_STEP_SIZE,
    LAMBDA_TARGET,
    LEARNING_RATE,
    MASK_ALPHA,
    MASK_BETA,
    META_STEPS,
    NOISE_SIGMA,
    REG_COEFF,
    MetaGradientMode,
    RemoverKind,
)
from .evaluate import GauntletConfig
from .exceptions import ConfigException
from .flow import PriorTrainConfig
from .harvim import HarvimConfig
from .solver import ContinuationSchedule
from .utils import BaseDict
from .watermark import DecoderTrainConfig

_LOGGER = logging.getLogger(__name__)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_tone(text: str) -> Optional[float]:
    return None if text.strip().lower() == "auto" else float(text)


def _format_tone(value: Optional[float]) -> str:
    return "auto" if value is None else repr(value)


def _parse_removers(text: str) -> tuple:
    return tuple(RemoverKind(name.strip()) for name in text.split(",") if name.strip())


def _format_removers(value: tuple) -> str:
    return ",".join(kind.value for kind in value)


def _positive(value) -> bool:
    return value > 0


def _non_negative(value) -> bool:
    return value >= 0


@dataclass(frozen=True)
class ConfigField:
    default: Any
    parse: Callable[[str], Any]
    check: Optional[Callable[[Any], bool]] = None
    render: Callable[[Any], str] = repr


def _text(default: str) -> ConfigField:
    return ConfigField(default, str.strip, render=str)


def _int(default: int, check=_positive) -> ConfigField:
    return ConfigField(default, int, check)


def _float(default: float, check=_positive) -> ConfigField:
    return ConfigField(default, float, check)


FIELDS: "OrderedDict[str, ConfigField]" = OrderedDict(
    [
        ("seed", _int(0, _non_negative)),
        ("image_side", _int(32)),
        ("glyph", _text("C")),
        ("glyph_tone", ConfigField(None, _parse_tone, lambda v: v is None or 0.0 <= v <= 1.0, _format_tone)),
        ("prior_path", _text("prior.hvmf")),
        ("decoder_path", _text("decoder.hvmf")),
        ("output_dir", _text("out")),
        ("rounds", _int(10, _non_negative)),
        ("inner_steps", _int(META_STEPS)),
        ("lambda_target", _float(LAMBDA_TARGET, _non_negative)),
        ("sigma", _float(NOISE_SIGMA)),
        ("learning_rate", _float(LEARNING_RATE)),
        ("weight_decay", _float(ADAMW_WEIGHT_DECAY, _non_negative)),
        ("reg_coeff", _float(REG_COEFF, _non_negative)),
        ("alpha", _float(MASK_ALPHA, None)),
        ("beta", _float(MASK_BETA)),
        ("step_size", _float(INNER_STEP_SIZE)),
        ("mle_steps", _int(50)),
        ("grid_mle_steps", _int(GRID_MLE_STEPS)),
        ("meta_mode", ConfigField(MetaGradientMode.EXACT_K1, MetaGradientMode, render=lambda v: v.value)),
        ("init_log_scale", _float(0.0, None)),
        ("use_decoder", ConfigField(False, _parse_bool, render=lambda v: "true" if v else "false")),
        ("prior_epochs", _int(20, _non_negative)),
        ("prior_batch_size", _int(32)),
        ("prior_learning_rate", _float(1e-3)),
        ("prior_corpus", _text("")),
        ("prior_validation_fraction", _float(0.1, lambda v: 0.0 <= v < 1.0)),
        ("prior_layers", _int(6)),
        ("prior_hidden", _int(128)),
        ("prior_scale_clamp", _float(2.0)),
        ("prior_corpus_size", _int(512)),
        ("decoder_epochs", _int(300, _non_negative)),
        ("decoder_latent_dim", _int(8)),
        ("decoder_hidden", _int(64)),
        (
            "removers",
            ConfigField(
                (RemoverKind.FLOW_R, RemoverKind.HEAT_DIFFUSION, RemoverKind.BLIND_THRESHOLD),
                _parse_removers,
                render=_format_removers,
            ),
        ),
        ("flow_r_lambda", _float(LAMBDA_TARGET, _non_negative)),
        ("flow_r_rounds", _int(20)),
        ("flow_r_inner_steps", _int(25, _non_negative)),
        ("flow_r_step_size", _float(2e-3)),
        ("flow_r_mle_steps", _int(50, _non_negative)),
        ("flow_r_init_scale", _float(0.1, _non_negative)),
        ("binarize_mask", ConfigField(False, _parse_bool, render=lambda v: "true" if v else "false")),
        ("heat_iterations", _int(2000)),
        ("blind_tolerance", _float(0.05, _non_negative)),
        ("blind_min_component", _int(8, _non_negative)),
        ("corpus_size", _int(20)),
        ("workers", _int(1)),
    ]
)


def _convert(key: str, raw: str, source: str):
    if key not in FIELDS:
        raise ConfigException(f"{source}: unknown key {key!r}")
    spec = FIELDS[key]
    try:
        value = spec.parse(raw)
    except ValueError as err:
        raise ConfigException(f"{source}: bad value {raw!r} for {key}: {err}") from err
    if spec.check is not None and not spec.check(value):
        raise ConfigException(f"{source}: value {raw!r} is out of range for {key}")
    return value


def _split(line: str, source: str):
    if "=" not in line:
        raise ConfigException(f"{source}: expected 'key = value', got {line!r}")
    key, raw = line.split("=", 1)
    return key.strip(), raw.strip()


class RunConfig(BaseDict):
    """ Every tunable of a run; missing keys take their defaults """

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        entries = OrderedDict((key, spec.default) for key, spec in FIELDS.items())
        for key, value in (values or {}).items():
            if key not in FIELDS:
                raise ConfigException(f"unknown config key {key!r}")
            entries[key] = value
        super().__init__(entries)
        self.validate()

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{source}:{number}"
            key, raw = _split(line, where)
            if key in values:
                raise ConfigException(f"{where}: key {key!r} set twice")
            values[key] = _convert(key, raw, where)
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
        _LOGGER.debug("Read config %s", path)
        return cls.parse(text, str(path))

    def with_overrides(self, assignments: Iterable[str]) -> "RunConfig":
        """ Apply 'key=value' strings on top of this config """
        values = self.get_data()
        for assignment in assignments:
            key, raw = _split(assignment, "--set")
            values[key] = _convert(key, raw, "--set")
        return RunConfig(values)

    def serialize(self) -> str:
        return "".join(f"{key} = {FIELDS[key].render(self[key])}\n" for key in FIELDS)

    def validate(self):
        """ Cross-field checks live in the component configs, so building them validates the run """
        self.harvim_config()
        self.prior_train_config()
        self.gauntlet_config()
        self.decoder_train_config()

    def harvim_config(self) -> HarvimConfig:
        return HarvimConfig(
            rounds=self["rounds"],
            inner_steps=self["inner_steps"],
            lambda_target=self["lambda_target"],
            sigma=self["sigma"],
            learning_rate=self["learning_rate"],
            weight_decay=self["weight_decay"],
            reg_coeff=self["reg_coeff"],
            alpha=self["alpha"],
            beta=self["beta"],
            step_size=self["step_size"],
            mle_steps=self["mle_steps"],
            grid_mle_steps=self["grid_mle_steps"],
            meta_mode=self["meta_mode"],
            init_log_scale=self["init_log_scale"],
            glyph_tone=self["glyph_tone"],
            seed=self["seed"],
        )

    def prior_train_config(self) -> PriorTrainConfig:
        return PriorTrainConfig(
            epochs=self["prior_epochs"],
            batch_size=self["prior_batch_size"],
            learning_rate=self["prior_learning_rate"],
            corpus_path=self["prior_corpus"] or None,
            validation_fraction=self["prior_validation_fraction"],
        )

    def flow_r_schedule(self) -> ContinuationSchedule:
        return ContinuationSchedule(
            self["flow_r_lambda"],
            self["flow_r_rounds"],
            self["flow_r_inner_steps"],
            self["flow_r_step_size"],
            self["flow_r_mle_steps"],
        )

    def gauntlet_config(self) -> GauntletConfig:
        return GauntletConfig(
            glyph=self["glyph"],
            removers=self["removers"],
            flow_r=self.flow_r_schedule(),
            flow_r_init_scale=self["flow_r_init_scale"],
            binarize_mask=self["binarize_mask"],
            heat_iterations=self["heat_iterations"],
            blind_tolerance=self["blind_tolerance"],
            blind_min_component=self["blind_min_component"],
            workers=self["workers"],
        )

    def decoder_train_config(self) -> DecoderTrainConfig:
        return DecoderTrainConfig(
            epochs=self["decoder_epochs"], latent_dim=self["decoder_latent_dim"], hidden=self["decoder_hidden"]
        )
