"""
    berry_sim.rl
    ~~~~~~~~~~~~

    Deep-Q learning with a replay buffer and a periodically copied target
    network, extended with an error-aware pass: every update also computes
    the TD gradient of a bit-error corrupted copy of the networks and
    applies it to the clean parameters (straight-through).

    Three modes:

    ``classical``
        plain DQN, the corrupted pass is skipped.
    ``berry_offline``
        a fresh random fault map at rate ``p`` for every corrupted pass.
    ``berry_ondevice``
        one fixed fault map, the chip the policy will run on.
"""

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from berry_sim.env import Episode, GridWorld
from berry_sim.errors import (
    ConfigurationError,
    IntegrityError,
    TrainingDivergedError,
    UsageError,
)
from berry_sim.faults import (
    DEFAULT_FAULT_MODEL,
    ActivationFaultHook,
    FaultMap,
    FaultModel,
    VoltageCurve,
    berr,
)
from berry_sim.qnet import (
    ActivationHook,
    Gradient,
    QNetwork,
    apply_update,
    forward,
    init_network,
    td_gradient,
)
from berry_sim.sysmodel import UavPlatform, learning_energy

logger = logging.getLogger(__name__)

MODES = ("classical", "berry_offline", "berry_ondevice")

#: Terminal kinds after which the TD target does not bootstrap.  A timeout
#: only truncates the episode.
ABSORBING = frozenset({"goal", "collision"})

EnvFactory = Callable[[int], GridWorld]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "classical"
    p: float = 0.005
    episodes: int = 300
    batch_size: int = 32
    gamma: float = 0.99
    lr: float = 1e-3
    target_period: int = 500
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.5
    buffer_capacity: int = 50_000
    hidden: Tuple[int, ...] = (64, 64)
    grad_clip: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.mode not in MODES:
            raise ConfigurationError(
                f"unknown training mode {self.mode!r}, expected one of {list(MODES)}"
            )
        if not 0 <= self.p <= 1:
            raise ConfigurationError(f"training bit error rate must lie in [0, 1], got {self.p!r}")
        if not 0 < self.gamma < 1:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma!r}")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr!r}")
        if self.target_period < 1 or self.batch_size < 1 or self.episodes < 1:
            raise ConfigurationError("target period, batch size and episodes must be >= 1")
        if self.buffer_capacity < self.batch_size:
            raise ConfigurationError("replay buffer must hold at least one batch")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if not 0 < self.epsilon_decay_fraction <= 1:
            raise ConfigurationError("epsilon decay fraction must lie in (0, 1]")
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError(f"hidden widths must be positive, got {self.hidden}")
        if self.grad_clip < 0:
            raise ConfigurationError("gradient clip norm must be >= 0 (0 disables)")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class Transitions:
    """A sampled mini-batch, one row per transition."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @classmethod
    def from_list(cls, transitions) -> "Transitions":
        return cls(
            np.stack([t.s for t in transitions]),
            np.array([t.a for t in transitions], dtype=np.int64),
            np.array([t.r for t in transitions], dtype=np.float64),
            np.stack([t.s_next for t in transitions]),
            np.array([t.done for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity ring buffer; new transitions overwrite the oldest."""

    def __init__(self, capacity: int, observation_size: int):
        if capacity < 1:
            raise ConfigurationError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._states = np.zeros((capacity, observation_size), np.float32)
        self._next_states = np.zeros((capacity, observation_size), np.float32)
        self._actions = np.zeros(capacity, np.int64)
        self._rewards = np.zeros(capacity, np.float64)
        self._dones = np.zeros(capacity, bool)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, transition: Transition) -> None:
        if not math.isfinite(transition.r):
            raise UsageError(f"transition reward must be finite, got {transition.r!r}")
        i = self._cursor
        self._states[i] = transition.s
        self._actions[i] = transition.a
        self._rewards[i] = transition.r
        self._next_states[i] = transition.s_next
        self._dones[i] = transition.done
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self._size < batch_size:
            raise UsageError(
                f"cannot sample {batch_size} transitions from a buffer holding {self._size}"
            )
        return rng.integers(0, self._size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Transitions:
        idx = self.sample_indices(batch_size, rng)
        return Transitions(
            self._states[idx],
            self._actions[idx],
            self._rewards[idx],
            self._next_states[idx],
            self._dones[idx],
        )


def select_action(net: QNetwork, obs, epsilon: float, rng: np.random.Generator) -> int:
    """ε-greedy; greedy ties go to the lowest action index."""
    if not 0 <= epsilon <= 1:
        raise UsageError(f"epsilon must lie in [0, 1], got {epsilon!r}")
    if rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(forward(net, obs)))


def td_targets(
    target_net: QNetwork,
    batch: Transitions,
    gamma: float,
    activation_hook: Optional[ActivationHook] = None,
) -> np.ndarray:
    if len(batch) == 0:
        raise UsageError("td_targets needs a non-empty batch")
    q_next = forward(target_net, batch.next_states, activation_hook).astype(np.float64)
    rewards = batch.rewards.astype(np.float64)
    return np.where(batch.dones, rewards, rewards + gamma * q_next.max(axis=1))


class EpsilonSchedule:
    """Linear decay from `start` to `end` over the first `decay_episodes`."""

    def __init__(self, start: float, end: float, decay_episodes: float):
        self.start = start
        self.end = end
        self.decay_episodes = decay_episodes

    @classmethod
    def from_config(cls, config: TrainConfig) -> "EpsilonSchedule":
        return cls(
            config.epsilon_start,
            config.epsilon_end,
            config.epsilon_decay_fraction * config.episodes,
        )

    def __call__(self, episode: int) -> float:
        if self.decay_episodes <= 0:
            return self.end
        fraction = min(1.0, episode / self.decay_episodes)
        return self.start + (self.end - self.start) * fraction


# -- training log ------------------------------------------------------------

LOG_COLUMNS = ("step", "episode", "return", "outcome", "loss_clean", "loss_perturbed", "epsilon")


@dataclass(frozen=True)
class EpisodeRecord:
    step: int
    episode: int
    return_: float
    outcome: str
    loss_clean: Optional[float]
    loss_perturbed: Optional[float]
    epsilon: float


@dataclass
class TrainLog:
    records: List[EpisodeRecord] = field(default_factory=list)
    target_updates: List[int] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.records[-1].step if self.records else 0

    def success_rate(self, last: Optional[int] = None) -> float:
        rows = self.records[-last:] if last else self.records
        if not rows:
            return 0.0
        return sum(r.outcome == "goal" for r in rows) / len(rows)

    def to_csv(self) -> str:
        def cell(value):
            return "" if value is None else repr(float(value))

        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in self.records:
            writer.writerow(
                [
                    r.step,
                    r.episode,
                    repr(float(r.return_)),
                    r.outcome,
                    cell(r.loss_clean),
                    cell(r.loss_perturbed),
                    repr(float(r.epsilon)),
                ]
            )
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise IntegrityError(f"training log columns must be {','.join(LOG_COLUMNS)}")

        def opt(value):
            return float(value) if value else None

        records = [
            EpisodeRecord(
                int(row["step"]),
                int(row["episode"]),
                float(row["return"]),
                row["outcome"],
                opt(row["loss_clean"]),
                opt(row["loss_perturbed"]),
                float(row["epsilon"]),
            )
            for row in reader
        ]
        return cls(records)

    def write_csv(self, path) -> None:
        with open(os.fspath(path), "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


# -- training ----------------------------------------------------------------


def _seed_from(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _perturbed_pass(
    net: QNetwork,
    target: QNetwork,
    batch: Transitions,
    config: TrainConfig,
    fault_rng: np.random.Generator,
    fault_map: Optional[FaultMap],
    model: FaultModel,
    device_hook: Optional[ActivationHook] = None,
    activation_injection: bool = False,
) -> Optional[Tuple[float, Gradient]]:
    """Loss and gradient of the corrupted networks, or None in classical mode."""
    if config.mode == "classical":
        return None
    if config.mode == "berry_ondevice":
        noisy = berr(net, fault_map, model)
        noisy_target = berr(target, fault_map, model)
        hook = device_hook
    else:
        seeds = fault_rng.integers(0, 2**62, size=3)
        noisy = berr(net, (config.p, int(seeds[0])), model)
        noisy_target = berr(target, (config.p, int(seeds[1])), model)
        hook = (
            ActivationFaultHook.for_network(net, config.p, int(seeds[2]), model)
            if activation_injection
            else None
        )
    targets = td_targets(noisy_target, batch, config.gamma, hook)
    return td_gradient(noisy, batch.states, batch.actions, targets, hook)


def _fit_device_map(fault_map: Optional[FaultMap], net: QNetwork, model: FaultModel) -> FaultMap:
    if fault_map is None:
        raise ConfigurationError("berry_ondevice training needs a fault map (faults.fault_map)")
    return fault_map.fitted(model.layout_for(net))


def berry_train(
    env_factory: EnvFactory,
    config: TrainConfig,
    seed: int = 0,
    fault_map: Optional[FaultMap] = None,
    fault_model: FaultModel = DEFAULT_FAULT_MODEL,
    activation_injection: bool = False,
) -> Tuple[QNetwork, TrainLog]:
    """Train a Q-network on the maps returned by ``env_factory(episode)``.

    Deterministic for a given `seed`: network initialisation, exploration
    and fault sampling each draw from their own child of one
    :class:`numpy.random.SeedSequence`.
    """
    init_seq, explore_seq, fault_seq = np.random.SeedSequence(seed).spawn(3)
    first = env_factory(0)
    arch = (first.observation_size, *config.hidden, first.n_actions)
    net = init_network(arch, _seed_from(init_seq))
    target = net

    device_hook = None
    if config.mode == "berry_ondevice":
        fault_map = _fit_device_map(fault_map, net, fault_model)
        if activation_injection:
            device_hook = ActivationFaultHook.for_network(
                net, fault_map.density, _seed_from(fault_seq), fault_model
            )

    rng = np.random.default_rng(explore_seq)
    fault_rng = np.random.default_rng(fault_seq)
    buffer = ReplayBuffer(config.buffer_capacity, first.observation_size)
    schedule = EpsilonSchedule.from_config(config)
    log = TrainLog()
    step = 0
    report_every = max(1, config.episodes // 10)

    logger.info(
        "training %s network for %d episodes (mode %s, p=%g, seed %d)",
        "x".join(map(str, arch)),
        config.episodes,
        config.mode,
        config.p,
        seed,
    )
    for episode in range(config.episodes):
        world = env_factory(episode)
        if (world.observation_size, world.n_actions) != (arch[0], arch[-1]):
            raise ConfigurationError("all training maps must share observation and action sizes")
        cursor = Episode(world)
        obs = cursor.reset()
        epsilon = schedule(episode)
        total = 0.0
        clean_losses, perturbed_losses = [], []

        while True:
            action = select_action(net, obs, epsilon, rng)
            outcome = cursor.step(action)
            buffer.push(
                Transition(obs, action, outcome.reward, outcome.observation,
                           outcome.terminal_kind in ABSORBING)
            )
            obs = outcome.observation
            total += outcome.reward
            step += 1

            if len(buffer) >= config.batch_size:
                batch = buffer.sample(config.batch_size, rng)
                targets = td_targets(target, batch, config.gamma)
                loss, grad = td_gradient(net, batch.states, batch.actions, targets)
                perturbed = _perturbed_pass(
                    net,
                    target,
                    batch,
                    config,
                    fault_rng,
                    fault_map,
                    fault_model,
                    device_hook,
                    activation_injection,
                )
                grad_perturbed = None
                if perturbed is not None:
                    loss_perturbed, grad_perturbed = perturbed
                    perturbed_losses.append(loss_perturbed)
                clean_losses.append(loss)
                if config.grad_clip > 0:
                    grad = grad.clipped(config.grad_clip)
                    if grad_perturbed is not None:
                        grad_perturbed = grad_perturbed.clipped(config.grad_clip)
                net = apply_update(net, grad, grad_perturbed, config.lr)
                if not (math.isfinite(loss) and net.is_finite()) or (
                    perturbed is not None and not math.isfinite(perturbed[0])
                ):
                    raise TrainingDivergedError(
                        f"non-finite loss or parameter at step {step} (episode {episode})"
                    )

            if step % config.target_period == 0:
                target = net
                log.target_updates.append(step)

            if outcome.done:
                break

        log.records.append(
            EpisodeRecord(
                step=step,
                episode=episode,
                return_=total,
                outcome=cursor.terminal_kind,
                loss_clean=float(np.mean(clean_losses)) if clean_losses else None,
                loss_perturbed=float(np.mean(perturbed_losses)) if perturbed_losses else None,
                epsilon=epsilon,
            )
        )
        if (episode + 1) % report_every == 0:
            logger.info(
                "episode %d/%d, step %d, success %.2f over the last %d",
                episode + 1,
                config.episodes,
                step,
                log.success_rate(report_every),
                report_every,
            )
    return net, log


def greedy_rollout(net: QNetwork, world: GridWorld, activation_hook=None) -> Tuple[str, float, int]:
    """Terminal kind, path length in meters and steps of one ε=0 episode."""
    cursor = Episode(world)
    obs = cursor.reset()
    while True:
        action = int(np.argmax(forward(net, obs, activation_hook)))
        outcome = cursor.step(action)
        obs = outcome.observation
        if outcome.done:
            return outcome.terminal_kind, cursor.path_length, cursor.steps


def estimate_learning_energy(
    steps: int, v_norm: float, platform: UavPlatform, curve: Optional[VoltageCurve] = None
) -> float:
    """Energy of on-device training for `steps` updates at `v_norm`, J."""
    return learning_energy(platform, steps, v_norm, curve)
