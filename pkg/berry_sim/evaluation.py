"""
    berry_sim.evaluation
    ~~~~~~~~~~~~~~~~~~~~

    Fault-map campaigns: roll out a frozen policy under many persistent
    fault maps per supply voltage, average the mission outcomes and turn
    them into quality-of-flight rows.
"""

import csv
import dataclasses
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from functools import lru_cache
from importlib import metadata
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pytz import UTC

from berry_sim.env import EnvConfig, GridWorld, make_env
from berry_sim.errors import ConfigurationError, IntegrityError, UsageError
from berry_sim.faults import (
    DEFAULT_FAULT_MODEL,
    ActivationFaultHook,
    FaultMap,
    FaultModel,
    VoltageCurve,
    berr,
    default_curve,
)
from berry_sim.qnet import QNetwork, load_checkpoint
from berry_sim.rl import greedy_rollout
from berry_sim.sysmodel import UavPlatform, load_platform, quality_of_flight

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "v_norm",
    "p",
    "energy_scale",
    "success_rate",
    "stderr",
    "flight_distance",
    "flight_time",
    "flight_energy",
    "missions",
)


@dataclass(frozen=True)
class CampaignConfig:
    """``voltages`` empty means every knot of the voltage curve;
    ``env_seeds`` empty means the environment section's seeds.
    """

    voltages: Tuple[float, ...] = ()
    maps_per_voltage: int = 50
    episodes_per_map: int = 20
    env_seeds: Tuple[int, ...] = ()
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "voltages", tuple(float(v) for v in self.voltages))
        object.__setattr__(self, "env_seeds", tuple(int(s) for s in self.env_seeds))
        if self.maps_per_voltage < 1 or self.episodes_per_map < 1:
            raise ConfigurationError("maps per voltage and episodes per map must be >= 1")
        if self.jobs < 1:
            raise ConfigurationError(f"jobs must be >= 1, got {self.jobs}")
        if any(not v > 0 for v in self.voltages):
            raise ConfigurationError("voltages must be positive")
        if len(set(self.voltages)) != len(self.voltages):
            raise ConfigurationError("voltages must be distinct")


@dataclass(frozen=True)
class MapMetrics:
    """Outcome of one policy under one fault map."""

    v_norm: float
    episodes: int
    successes: int
    success_path_length: float
    total_path_length: float
    direct_path_length: float = 0.0
    terminal_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes

    @property
    def mean_path_length(self) -> float:
        """Mean path of successful episodes in meters, NaN without any."""
        if not self.successes:
            return math.nan
        return self.success_path_length / self.successes


@lru_cache(maxsize=256)
def _world(env_config: EnvConfig, seed: int) -> GridWorld:
    return make_env(env_config, seed)


def evaluate_policy(
    net: QNetwork,
    env: Union[EnvConfig, GridWorld],
    fault_map: Optional[FaultMap],
    episodes: int,
    v_norm: float = 1.0,
    env_seeds: Sequence[int] = (),
    fault_model: FaultModel = DEFAULT_FAULT_MODEL,
    activation_hook=None,
) -> MapMetrics:
    """Greedy rollouts of `net` as deployed on a chip with `fault_map`.

    The policy is quantized and corrupted once; every episode runs the same
    corrupted weights.  With an :class:`EnvConfig`, episode ``i`` runs on the
    map generated from ``env_seeds[i % len(env_seeds)]``; a
    :class:`GridWorld` is used for every episode.  ``fault_map=None`` is the
    quantized fault-free policy.
    """
    if episodes < 1:
        raise UsageError(f"episodes must be >= 1, got {episodes}")
    if fault_map is None:
        fault_map = FaultMap.empty(fault_model.layout_for(net))
    deployed = berr(net, fault_map, fault_model)

    seeds = () if isinstance(env, GridWorld) else (tuple(env_seeds) or env.seeds)

    def worlds(i: int) -> GridWorld:
        if isinstance(env, GridWorld):
            return env
        return _world(env, seeds[i % len(seeds)])

    successes = 0
    success_path = total_path = direct_path = 0.0
    counts: Dict[str, int] = {}
    for i in range(episodes):
        world = worlds(i)
        kind, path_length, _ = greedy_rollout(deployed, world, activation_hook)
        direct_path += world.cell_size * world.goal_distance(world.start)
        counts[kind] = counts.get(kind, 0) + 1
        total_path += path_length
        if kind == "goal":
            successes += 1
            success_path += path_length
    return MapMetrics(
        v_norm=v_norm,
        episodes=episodes,
        successes=successes,
        success_path_length=success_path,
        total_path_length=total_path,
        direct_path_length=direct_path,
        terminal_counts=counts,
    )


def map_seed(campaign_seed: int, voltage_index: int, map_index: int) -> int:
    seq = np.random.SeedSequence([campaign_seed, voltage_index, map_index])
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class _MapTask:
    net: QNetwork
    env_config: EnvConfig
    env_seeds: Tuple[int, ...]
    fault_model: FaultModel
    v_norm: float
    p: float
    seed: int
    episodes: int
    activation_injection: bool
    fault_map: Optional[FaultMap] = None


def _run_map_task(task: _MapTask) -> MapMetrics:
    fault_map = task.fault_map
    if fault_map is None:
        layout = task.fault_model.layout_for(task.net)
        fault_map = task.fault_model.sample(layout, task.p, task.seed)
    hook = None
    if task.activation_injection:
        hook = ActivationFaultHook.for_network(task.net, task.p, task.seed, task.fault_model)
    return evaluate_policy(
        task.net,
        task.env_config,
        fault_map,
        task.episodes,
        task.v_norm,
        task.env_seeds,
        task.fault_model,
        hook,
    )


@dataclass(frozen=True)
class QofRow:
    v_norm: float
    p: float
    energy_scale: float
    success_rate: float
    stderr: float
    flight_distance: float
    flight_time: float
    flight_energy: float
    missions: float


@dataclass
class QofReport:
    rows: List[QofRow]
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: -r.v_norm)

    @property
    def voltages(self) -> Tuple[float, ...]:
        return tuple(r.v_norm for r in self.rows)

    def row_at(self, v_norm: float) -> QofRow:
        for row in self.rows:
            if row.v_norm == v_norm:
                return row
        raise UsageError(f"report has no row at v_norm={v_norm}")

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow([repr(float(getattr(row, c))) for c in REPORT_COLUMNS])
        return out.getvalue()

    def to_json(self) -> str:
        document = {
            "metadata": self.metadata,
            "rows": [dataclasses.asdict(r) for r in self.rows],
        }
        return json.dumps(document, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QofReport":
        try:
            document = json.loads(text)
            rows = [QofRow(**row) for row in document["rows"]]
        except (ValueError, KeyError, TypeError) as e:
            raise IntegrityError(f"malformed report: {e}") from e
        return cls(rows, document.get("metadata", {}))

    @classmethod
    def from_csv(cls, text: str) -> "QofReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise IntegrityError(f"report columns must be {','.join(REPORT_COLUMNS)}")
        try:
            rows = [QofRow(**{k: float(v) for k, v in row.items()}) for row in reader]
        except ValueError as e:
            raise IntegrityError(f"malformed report: {e}") from e
        return cls(rows)


def package_version() -> str:
    try:
        return metadata.version("berry-sim")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _bernoulli_stderr(successes: int, n: int) -> float:
    if n < 2:
        return 0.0
    rate = successes / n
    variance = rate * (1 - rate) * n / (n - 1)
    return math.sqrt(variance) / math.sqrt(n)


def _resolve_network(network: Union[QNetwork, str, os.PathLike]) -> QNetwork:
    if isinstance(network, QNetwork):
        return network
    return load_checkpoint(network).network


def run_campaign(
    config: CampaignConfig,
    network: Union[QNetwork, str, os.PathLike],
    env_config: EnvConfig = EnvConfig(),
    fault_model: FaultModel = DEFAULT_FAULT_MODEL,
    platform: Optional[UavPlatform] = None,
    curve: Optional[VoltageCurve] = None,
    profiled_map: Optional[FaultMap] = None,
    activation_injection: bool = False,
    metadata: Optional[Dict[str, object]] = None,
) -> QofReport:
    """One report row per voltage.

    Map ``m`` at voltage index ``i`` is sampled from
    :func:`map_seed(config.seed, i, m) <map_seed>`, so maps are independent
    across voltages and each one depends on its own index only.  With a
    `profiled_map` that single chip is used for every row and its density is
    reported as ``p``.
    """
    net = _resolve_network(network)
    curve = curve or default_curve()
    platform = platform or load_platform()
    env_seeds = config.env_seeds or env_config.seeds
    first_world = _world(env_config, env_seeds[0])
    if (net.arch[0], net.n_actions) != (first_world.observation_size, first_world.n_actions):
        raise IntegrityError(
            f"checkpoint architecture {net.arch} does not fit observations of "
            f"size {first_world.observation_size} with {first_world.n_actions} actions"
        )
    profiled_p = None
    if profiled_map is not None:
        profiled_p = profiled_map.density
        profiled_map = profiled_map.fitted(fault_model.layout_for(net))

    voltages = config.voltages or curve.voltages
    rows = []
    executor = ProcessPoolExecutor(max_workers=config.jobs) if config.jobs > 1 else None
    try:
        for v_index, v_norm in enumerate(voltages):
            if profiled_map is not None:
                p, fault_maps = profiled_p, [profiled_map]
            else:
                p, fault_maps = curve.ber_at(v_norm), [None] * config.maps_per_voltage
            tasks = [
                _MapTask(
                    net,
                    env_config,
                    env_seeds,
                    fault_model,
                    v_norm,
                    p,
                    map_seed(config.seed, v_index, m),
                    config.episodes_per_map,
                    activation_injection,
                    fault_map,
                )
                for m, fault_map in enumerate(fault_maps)
            ]
            if executor is None:
                results = [_run_map_task(t) for t in tasks]
            else:
                results = list(executor.map(_run_map_task, tasks))
            rows.append(_aggregate(results, v_norm, p, curve, platform))
            logger.info(
                "v_norm %.2f: p=%.3g, success %.3f over %d maps",
                v_norm,
                p,
                rows[-1].success_rate,
                len(results),
            )
    finally:
        if executor is not None:
            executor.shutdown()

    meta = {
        "seeds": {"campaign": config.seed, "env": list(env_seeds)},
        "platform": platform.name,
        "network_digest": net.parameter_digest(),
        "version": package_version(),
        "created": datetime.now(UTC).isoformat(),
    }
    meta.update(metadata or {})
    return QofReport(rows, meta)


def _aggregate(
    results: Sequence[MapMetrics],
    v_norm: float,
    p: float,
    curve: VoltageCurve,
    platform: UavPlatform,
) -> QofRow:
    success_rate = sum(r.success_rate for r in results) / len(results)
    successes = sum(r.successes for r in results)
    episodes = sum(r.episodes for r in results)
    if successes:
        distance = sum(r.success_path_length for r in results) / successes
    else:
        distance = sum(r.total_path_length for r in results) / episodes
    if not distance > 0:
        # policies that never move still get a finite flight
        distance = sum(r.direct_path_length for r in results) / episodes
    qof = quality_of_flight(platform, curve, v_norm, success_rate, distance)
    return QofRow(
        v_norm=v_norm,
        p=p,
        energy_scale=qof.processing_energy_scale,
        success_rate=success_rate,
        stderr=_bernoulli_stderr(successes, episodes),
        flight_distance=qof.flight_distance,
        flight_time=qof.flight_time,
        flight_energy=qof.flight_energy,
        missions=qof.missions,
    )


# -- comparisons -------------------------------------------------------------


def percent_change(new: float, old: float) -> float:
    if old == 0:
        return 0.0 if new == 0 else math.nan
    return (new - old) / old * 100.0


@dataclass(frozen=True)
class ComparisonRow:
    """Paired deltas of `b` against `a` at the same voltage, and of `b`
    against `a`'s reference (highest voltage) row.  Negative energy deltas
    are savings.
    """

    v_norm: float
    success_a: float
    success_b: float
    energy_a: float
    energy_b: float
    missions_a: float
    missions_b: float
    success_delta: float
    energy_delta: float
    missions_delta: float
    energy_vs_reference: float
    missions_vs_reference: float


COMPARISON_COLUMNS = tuple(f.name for f in dataclasses.fields(ComparisonRow))


def compare_reports(a: QofReport, b: QofReport) -> List[ComparisonRow]:
    if a.voltages != b.voltages:
        raise UsageError(
            f"voltage grids differ: {list(a.voltages)} vs {list(b.voltages)}"
        )
    if not a.rows:
        raise UsageError("cannot compare empty reports")
    reference = a.rows[0]
    out = []
    for ra, rb in zip(a.rows, b.rows):
        out.append(
            ComparisonRow(
                v_norm=ra.v_norm,
                success_a=ra.success_rate,
                success_b=rb.success_rate,
                energy_a=ra.flight_energy,
                energy_b=rb.flight_energy,
                missions_a=ra.missions,
                missions_b=rb.missions,
                success_delta=(rb.success_rate - ra.success_rate) * 100.0,
                energy_delta=percent_change(rb.flight_energy, ra.flight_energy),
                missions_delta=percent_change(rb.missions, ra.missions),
                energy_vs_reference=percent_change(rb.flight_energy, reference.flight_energy),
                missions_vs_reference=percent_change(rb.missions, reference.missions),
            )
        )
    return out


def reference_deltas(report: QofReport) -> List[Tuple[float, float, float]]:
    """``(v_norm, flight energy change %, missions change %)`` of every row
    against the report's own highest-voltage row.
    """
    return [
        (r.v_norm, r.energy_vs_reference, r.missions_vs_reference)
        for r in compare_reports(report, report)
    ]


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(COMPARISON_COLUMNS)
    for row in rows:
        writer.writerow([repr(float(getattr(row, c))) for c in COMPARISON_COLUMNS])
    return out.getvalue()


# -- files -------------------------------------------------------------------


def write_report(report: QofReport, output_dir, stem: str = "sweep") -> Tuple[str, str]:
    """Write ``<stem>-<config hash>.csv`` and ``.json``; returns both paths."""
    output_dir = os.fspath(output_dir)
    os.makedirs(output_dir, exist_ok=True)
    digest = report.metadata.get("config_hash", "nohash")
    base = os.path.join(output_dir, f"{stem}-{digest}")
    with open(base + ".csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    with open(base + ".json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    logger.info("wrote %s.csv and %s.json", base, base)
    return base + ".csv", base + ".json"


def read_report(path) -> QofReport:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".csv"):
        return QofReport.from_csv(text)
    return QofReport.from_json(text)
