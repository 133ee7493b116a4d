"""
    berry_sim
    ~~~~~~~~~

    Simulates error-aware reinforcement learning for low-voltage aerial
    robots: DQN navigation policies stored in faulty 8-bit SRAM, fault-map
    campaigns across supply voltages, and the quality-of-flight chain that
    turns success rates into flight energy and missions per charge.

    Runs are configured through a Flask application: :func:`create_app`
    loads a TOML file into ``app.config`` and :class:`BerrySim` exposes the
    validated :class:`~berry_sim.config.RunConfig` to commands.
"""

import logging
import os
from typing import Iterable, Optional

from flask import Flask, current_app
from werkzeug.utils import cached_property

from berry_sim.config import (
    RunConfig,
    apply_overrides,
    config_from_mapping,
    config_hash,
    dump_config,
    env_seed_fallback,
    from_flask_config,
    load_config,
    read_config_source,
    to_flask_mapping,
)
from berry_sim.env import EnvConfig, Episode, GridWorld, make_env
from berry_sim.errors import (
    BerrySimError,
    ConfigurationError,
    GenerationError,
    InfeasibilityError,
    IntegrityError,
    ShapeError,
    TrainingDivergedError,
    UsageError,
)
from berry_sim.evaluation import (
    CampaignConfig,
    QofReport,
    compare_reports,
    evaluate_policy,
    run_campaign,
)
from berry_sim.faults import (
    FaultMap,
    FaultModel,
    VoltageCurve,
    berr,
    load_curve,
    read_fault_map,
)
from berry_sim.formatting import (
    format_change,
    format_decimal,
    format_percent,
    format_scientific,
)
from berry_sim.qnet import QNetwork, load_checkpoint, save_checkpoint
from berry_sim.rl import TrainConfig, berry_train, estimate_learning_energy
from berry_sim.sysmodel import UavPlatform, load_platform, quality_of_flight

logger = logging.getLogger(__name__)


class BerrySimConfiguration:
    """Per-application state: the run configuration and the resources it
    names, loaded on first use.
    """

    def __init__(self, run: RunConfig, instance: "BerrySim"):
        self.run = run
        self.instance = instance

    @cached_property
    def curve(self) -> VoltageCurve:
        return load_curve(self.run.faults.curve or None)

    @cached_property
    def platform(self) -> UavPlatform:
        return load_platform(self.run.platform.preset, self.run.platform.file or None)

    @cached_property
    def fault_model(self) -> FaultModel:
        return self.run.faults.model

    @cached_property
    def fault_map(self) -> Optional[FaultMap]:
        """The profiled or on-device chip map, if one is configured."""
        if not self.run.faults.fault_map:
            return None
        return read_fault_map(self.run.faults.fault_map)

    @property
    def config_hash(self) -> str:
        return config_hash(self.run)


def get_sim(app=None) -> BerrySimConfiguration:
    app = app or current_app
    if not hasattr(app, "extensions") or "berry_sim" not in app.extensions:
        raise UsageError("berry_sim is not initialised on this application")
    return app.extensions["berry_sim"]


class BerrySim:
    """Flask extension holding a validated run configuration.

    Each application that runs simulations has to create, or run
    :meth:`init_app` on, an instance of this class after its configuration
    was loaded.
    """

    def __init__(self, app=None, configure_jinja=True, **kwargs):
        self._configure_jinja = configure_jinja
        if app is not None:
            self.init_app(app, **kwargs)

    def init_app(self, app, config: Optional[RunConfig] = None):
        """Validate the ``BERRY_*`` keys of ``app.config`` (or use `config`)
        and register the report filters on the Jinja environment.
        """
        if not hasattr(app, "extensions"):
            app.extensions = {}
        if config is None:
            config = from_flask_config(app.config)
        app.extensions["berry_sim"] = BerrySimConfiguration(config, self)

        if self._configure_jinja:
            app.jinja_env.filters.update(
                decimalformat=format_decimal,
                percentformat=format_percent,
                scientificformat=format_scientific,
                changeformat=format_change,
            )


def create_app(
    config_path=None, overrides: Iterable[str] = (), flags: Optional[dict] = None
) -> Flask:
    """Application factory.

    Precedence, highest first: `flags` (``{"train.mode": "classical"}``),
    `overrides` (``"section.key=value"`` strings), the config file, and
    ``BERRY_SIM_SEED`` from the environment for the seed.
    """
    app = Flask(__name__)
    app.config.from_prefixed_env("BERRY_SIM")

    data, source = {}, None
    if config_path:
        data, source = read_config_source(config_path)
    if "seed" not in data:
        fallback = env_seed_fallback(app.config)
        if fallback is not None:
            data = dict(data, seed=fallback)
    run = config_from_mapping(
        data, source, os.fspath(config_path) if config_path else None
    )
    run = apply_overrides(run, overrides)
    run = apply_overrides(run, [f"{k}={_toml_value(v)}" for k, v in (flags or {}).items()])

    app.config.from_mapping(to_flask_mapping(run))
    BerrySim(app)
    logger.debug("configured run %s", config_hash(run))
    return app


def _toml_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(value)


__all__ = [
    "BerrySim",
    "BerrySimConfiguration",
    "BerrySimError",
    "CampaignConfig",
    "ConfigurationError",
    "EnvConfig",
    "Episode",
    "FaultMap",
    "FaultModel",
    "GenerationError",
    "GridWorld",
    "InfeasibilityError",
    "IntegrityError",
    "QNetwork",
    "QofReport",
    "RunConfig",
    "ShapeError",
    "TrainConfig",
    "TrainingDivergedError",
    "UavPlatform",
    "UsageError",
    "VoltageCurve",
    "apply_overrides",
    "berr",
    "berry_train",
    "compare_reports",
    "config_from_mapping",
    "config_hash",
    "create_app",
    "dump_config",
    "estimate_learning_energy",
    "evaluate_policy",
    "get_sim",
    "load_checkpoint",
    "load_config",
    "make_env",
    "quality_of_flight",
    "run_campaign",
    "save_checkpoint",
]
