"""Run configuration: one YAML file with one section per subsystem, every
field defaulted, unknown keys rejected. Command-line overrides use dotted
paths (--train.alpha=0.2).

Sections and their dataclasses:

    synth      SynthConfig      corpus synthesis
    features   FeatureConfig    filterbank and speed perturbation
    bpe        BpeConfig        subword vocabulary size
    encoder    EncoderConfig    shared CNN+BiLSTM encoder
    attention  AttentionConfig  attention decoder branch
    ctc_branch CtcBranchConfig  CTC decoder branch
    train      TrainConfig      joint optimization
    lm         LmConfig         LM architecture
    lm_train   LmTrainConfig    LM optimization
    decode     DecodeConfig     beam search

plus a top-level `seed` (overridden by CTCA_SEED or --seed).
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attention import AttentionConfig
from .ctc import CtcBranchConfig
from .encoder import EncoderConfig
from .features import FeatureConfig, SynthConfig
from .lm import LmConfig, LmTrainConfig
from .search import DecodeConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration file or override (a usage error, exit code 1)."""


@dataclass
class BpeConfig:
    num_merges: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    bpe: BpeConfig = field(default_factory=BpeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    ctc_branch: CtcBranchConfig = field(default_factory=CtcBranchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    lm_train: LmTrainConfig = field(default_factory=LmTrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "seed"}


def _coerce(value, typ, where: str):
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):  # e.g. float | None
        args = typing.get_args(typ)
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: null not allowed")
        for a in args:
            if a is not type(None):
                return _coerce(value, a, where)
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{where}: expected integer, got {value!r}") from None
    if typ is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected number, got {value!r}") from None
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if typ is tuple or origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v != ""]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(float(v) for v in value)
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _apply_section(obj, updates: dict, section: str):
    hints = typing.get_type_hints(type(obj))
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(obj, key, _coerce(value, hints[key], f"{section}.{key}"))
    # re-run the dataclass validation hooks
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        try:
            post()
        except ValueError as e:
            raise ConfigError(f"{section}: {e}") from None


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, a YAML file, and dotted overrides."""
    config = RunConfig()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section, values in raw.items():
            if section == "seed":
                config.seed = _coerce(values, int, "seed")
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section {section!r} "
                                  f"(known: seed, {', '.join(sorted(_SECTIONS))})")
            if not isinstance(values, dict):
                raise ConfigError(f"{section}: expected a mapping of fields")
            _apply_section(getattr(config, section), values, section)
    for ov in overrides or []:
        if not ov.startswith("--") or "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"bad override {ov!r}; expected --section.field=value")
        key, value = ov[2:].split("=", 1)
        section, fieldname = key.split(".", 1)
        if section == "seed":
            raise ConfigError("override seed with --seed")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {ov!r}")
        _apply_section(getattr(config, section), {fieldname: value}, section)
    return config


def dump_config(config: RunConfig) -> str:
    doc: dict = {"seed": config.seed}
    for section in _SECTIONS:
        values = dataclasses.asdict(getattr(config, section))
        doc[section] = {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in values.items()}
    return yaml.safe_dump(doc, sort_keys=True)


def save_config(path, config: RunConfig) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(dump_config(config), encoding="utf-8")
    tmp.replace(path)
