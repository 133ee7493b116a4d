"""
    berry_sim.config
    ~~~~~~~~~~~~~~~~

    Run configuration: one TOML file with the sections ``[env]``,
    ``[train]``, ``[faults]``, ``[platform]``, ``[campaign]`` and ``[io]``
    plus a top-level ``seed``.

    Files are validated strictly (unknown keys and wrong types are errors
    pointing at the offending line), then flattened into ``BERRY_*`` keys of
    a :class:`flask.Config` from which :meth:`berry_sim.BerrySim.init_app`
    reads them back.
"""

import dataclasses
import hashlib
import json
import logging
import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import tomli_w

from berry_sim.env import EnvConfig
from berry_sim.errors import ConfigurationError
from berry_sim.evaluation import CampaignConfig
from berry_sim.faults import FLIP_MODES, PATTERNS, FaultModel
from berry_sim.rl import TrainConfig
from berry_sim.sysmodel import PRESETS

logger = logging.getLogger(__name__)

#: Prefix of every key this package stores in ``app.config``.
CONFIG_PREFIX = "BERRY_"


@dataclass(frozen=True)
class FaultConfig:
    """``pattern = "profiled"`` evaluates the single chip in `fault_map`."""

    pattern: str = "random"
    flip_mode: str = "stuck_at"
    stuck_one_bias: float = 0.5
    zero_to_one_bias: float = 0.8
    col_concentration: float = 8.0
    include_biases: bool = True
    columns: int = 64
    activation_injection: bool = False
    fault_map: str = ""
    curve: str = ""

    def __post_init__(self):
        if self.pattern not in PATTERNS + ("profiled",):
            raise ConfigurationError(f"unknown fault pattern {self.pattern!r}")
        if self.pattern == "profiled" and not self.fault_map:
            raise ConfigurationError("the profiled pattern needs faults.fault_map")
        if self.flip_mode not in FLIP_MODES:
            raise ConfigurationError(f"unknown flip mode {self.flip_mode!r}")

    @property
    def model(self) -> FaultModel:
        return FaultModel(
            pattern="random" if self.pattern == "profiled" else self.pattern,
            flip_mode=self.flip_mode,
            stuck_one_bias=self.stuck_one_bias,
            zero_to_one_bias=self.zero_to_one_bias,
            col_concentration=self.col_concentration,
            include_biases=self.include_biases,
            columns=self.columns,
        )


@dataclass(frozen=True)
class PlatformConfig:
    preset: str = "crazyflie"
    file: str = ""

    def __post_init__(self):
        if not self.file and self.preset not in PRESETS:
            raise ConfigurationError(
                f"unknown platform preset {self.preset!r}, expected one of {list(PRESETS)}"
            )


@dataclass(frozen=True)
class IoConfig:
    output_dir: str = "runs"
    checkpoint: str = ""
    locale: str = "en_US"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)
    platform: PlatformConfig = field(default_factory=PlatformConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    io: IoConfig = field(default_factory=IoConfig)


SECTIONS = {
    "env": EnvConfig,
    "train": TrainConfig,
    "faults": FaultConfig,
    "platform": PlatformConfig,
    "campaign": CampaignConfig,
    "io": IoConfig,
}


def _line_of(source: Optional[str], section: Optional[str], key: Optional[str] = None):
    """1-based line of `key` in `section` (or of the section header)."""
    if not source:
        return None
    current = None
    for number, line in enumerate(source.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[\s*([A-Za-z0-9_-]+)\s*\]", stripped)
        if header:
            current = header.group(1)
            if key is None and current == section:
                return number
            continue
        if key is not None and current == section and re.match(
            rf"^{re.escape(key)}\s*=", stripped
        ):
            return number
    return None


def _coerce(value, annotation, name: str):
    origin = typing.get_origin(annotation)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{name} must be a list, got {value!r}")
        inner = typing.get_args(annotation)[0]
        return tuple(_coerce(v, inner, f"{name}[{i}]") for i, v in enumerate(value))
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name} must be true or false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{name} must be an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{name} must be a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{name} must be a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config annotation {annotation!r}")  # pragma: no cover


def _build_section(cls, name: str, values, source, path):
    if not isinstance(values, Mapping):
        raise ConfigurationError(
            f"[{name}] must be a table", line=_line_of(source, None, name), path=path
        )
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        line = _line_of(source, name, key)
        if key not in fields:
            raise ConfigurationError(
                f"unknown key {name}.{key}", line=line, path=path
            )
        try:
            kwargs[key] = _coerce(value, fields[key].type, f"{name}.{key}")
        except ConfigurationError as e:
            raise ConfigurationError(str(e), line=line, path=path) from e
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise ConfigurationError(
            f"[{name}] {e}", line=_line_of(source, name), path=path
        ) from e


def config_from_mapping(
    data: Mapping, source: Optional[str] = None, path=None
) -> RunConfig:
    """Validate a nested mapping (parsed TOML) into a :class:`RunConfig`.

    `source` is the original text, used to anchor errors to lines.
    """
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        key = unknown[0]
        line = _line_of(source, key) or _line_of(source, None, key)
        raise ConfigurationError(f"unknown section or key {key!r}", line=line, path=path)
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(
            f"seed must be a non-negative integer, got {seed!r}",
            line=_line_of(source, None, "seed"),
            path=path,
        )
    sections = {
        name: _build_section(cls, name, data.get(name, {}), source, path)
        for name, cls in SECTIONS.items()
    }
    return RunConfig(seed=seed, **sections)


def parse_config(text: str, path=None) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(str(e), path=path) from e
    return config_from_mapping(data, text, path)


def load_config(path) -> RunConfig:
    data, text = read_config_source(path)
    return config_from_mapping(data, text, os.fspath(path))


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_mapping(config: RunConfig) -> Dict[str, object]:
    out: Dict[str, object] = {"seed": config.seed}
    for name in SECTIONS:
        section = getattr(config, name)
        out[name] = {
            f.name: _plain(getattr(section, f.name)) for f in dataclasses.fields(section)
        }
    return out


def dump_config(config: RunConfig) -> str:
    return tomli_w.dumps(config_to_mapping(config))


def _literal(raw: str):
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are TOML literals and
    fall back to bare strings.
    """
    overrides = list(overrides)
    if not overrides:
        return config
    data = config_to_mapping(config)
    for item in overrides:
        key, sep, raw = item.partition("=")
        parts = key.strip().split(".")
        if not sep or not all(parts):
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        value = _literal(raw.strip())
        if parts == ["seed"]:
            data["seed"] = value
        elif len(parts) == 2 and parts[0] in SECTIONS:
            data[parts[0]][parts[1]] = value
        else:
            raise ConfigurationError(f"override {item!r} names no config key")
    return config_from_mapping(data, path="--set")


def config_hash(config) -> str:
    """16 hex digits of SHA-256 over the canonical JSON of a config."""
    if isinstance(config, RunConfig):
        config = config_to_mapping(config)
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# -- flask.Config bridge -----------------------------------------------------


def to_flask_mapping(config: RunConfig) -> Dict[str, object]:
    """Flatten to ``BERRY_SEED``, ``BERRY_TRAIN_MODE``, ..."""
    out: Dict[str, object] = {f"{CONFIG_PREFIX}SEED": config.seed}
    for name in SECTIONS:
        section = getattr(config, name)
        for f in dataclasses.fields(section):
            out[f"{CONFIG_PREFIX}{name.upper()}_{f.name.upper()}"] = getattr(section, f.name)
    return out


def from_flask_config(app_config) -> RunConfig:
    """Inverse of :func:`to_flask_mapping` over a :class:`flask.Config`.

    Missing keys take their defaults.
    """
    sections = {}
    for name, cls in SECTIONS.items():
        values = app_config.get_namespace(f"{CONFIG_PREFIX}{name.upper()}_")
        known = {f.name for f in dataclasses.fields(cls)}
        sections[name] = cls(**{k: v for k, v in values.items() if k in known})
    return RunConfig(seed=app_config.get(f"{CONFIG_PREFIX}SEED", 0), **sections)


def env_seed_fallback(app_config) -> Optional[int]:
    """Global seed from ``BERRY_SIM_SEED``, already loaded as ``SEED``."""
    seed = app_config.get("SEED")
    if seed is None:
        return None
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigurationError(f"BERRY_SIM_SEED must be an integer, got {seed!r}")
    return seed


def read_config_source(path) -> Tuple[Dict[str, object], str]:
    """Parsed mapping and raw text of a config file."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config: {e.strerror}", path=path) from e
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(str(e), path=path) from e
