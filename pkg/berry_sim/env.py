"""
    berry_sim.env
    ~~~~~~~~~~~~~

    Deterministic 2-D obstacle navigation: the agent flies from a start cell
    to a goal cell and an episode ends on arrival, on collision or when the
    step budget runs out.

    A :class:`GridWorld` is an immutable map; an :class:`Episode` is the
    mutable cursor of one rollout over it.
"""

import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import FrozenSet, Optional, Sequence, Tuple

import numpy as np
from werkzeug.datastructures import ImmutableDict
from werkzeug.utils import cached_property

from berry_sim.errors import (
    ConfigurationError,
    GenerationError,
    IntegrityError,
    UsageError,
)

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

#: Fraction of cells turned into obstacles per density profile.
DENSITIES = ImmutableDict(
    {
        "empty": 0.0,
        "sparse": 0.08,
        "medium": 0.15,
        "dense": 0.25,
    }
)

#: Displacements per action.  grid25 is row-major over dy then dx, so
#: index 12 is the null move.
ACTION_SETS = ImmutableDict(
    {
        "grid25": tuple((dx, dy) for dy in range(-2, 3) for dx in range(-2, 3)),
        "compass8": (
            (1, 0),
            (1, 1),
            (0, 1),
            (-1, 1),
            (-1, 0),
            (-1, -1),
            (0, -1),
            (1, -1),
        ),
    }
)

TERMINAL_KINDS = ("none", "goal", "collision", "timeout")

GENERATION_ATTEMPTS = 100


@dataclass(frozen=True)
class EnvConfig:
    width: int = 20
    height: int = 20
    cell_size: float = 1.0
    density: str = "medium"
    patch_size: int = 5
    actions: str = "grid25"
    seeds: Tuple[int, ...] = (0,)
    max_steps: int = 0
    goal_reward: float = 100.0
    collision_reward: float = -100.0
    step_reward: float = -1.0
    shaping: float = 1.0
    start: Tuple[int, ...] = ()
    goal: Tuple[int, ...] = ()
    map_file: str = ""

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "start", tuple(self.start))
        object.__setattr__(self, "goal", tuple(self.goal))
        if self.density not in DENSITIES:
            raise ConfigurationError(
                f"unknown density {self.density!r}, expected one of {sorted(DENSITIES)}"
            )
        if self.actions not in ACTION_SETS:
            raise ConfigurationError(f"unknown action set {self.actions!r}")
        if not self.map_file and (self.width < 5 or self.height < 5):
            raise ConfigurationError("generated maps must be at least 5x5 cells")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigurationError("patch size must be a positive odd number")
        if not self.cell_size > 0:
            raise ConfigurationError("cell size must be positive")
        if not self.seeds:
            raise ConfigurationError("at least one environment seed is required")
        for name in ("start", "goal"):
            if getattr(self, name) and len(getattr(self, name)) != 2:
                raise ConfigurationError(f"{name} must be an [x, y] pair")

    @property
    def observation_size(self) -> int:
        return self.patch_size**2 + 3

    @property
    def n_actions(self) -> int:
        return len(ACTION_SETS[self.actions])


def _round_half_away(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def swept_cells(position: Cell, displacement: Cell) -> Tuple[Cell, ...]:
    """Cells visited by a move, intermediate cells first, landing cell last."""
    x, y = position
    dx, dy = displacement
    n = max(abs(dx), abs(dy))
    return tuple(
        (x + _round_half_away(dx * t / n), y + _round_half_away(dy * t / n))
        for t in range(1, n + 1)
    )


def _shortest_path(
    width: int,
    height: int,
    obstacles: FrozenSet[Cell],
    start: Cell,
    goal: Cell,
    actions: Sequence[Cell],
) -> Optional[int]:
    def blocked(cell):
        x, y = cell
        return not (0 <= x < width and 0 <= y < height) or cell in obstacles

    moves = [a for a in actions if a != (0, 0)]
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        cell, depth = queue.popleft()
        if cell == goal:
            return depth
        for move in moves:
            path = swept_cells(cell, move)
            if any(blocked(c) for c in path):
                continue
            landing = path[-1]
            if landing not in seen:
                seen.add(landing)
                queue.append((landing, depth + 1))
    return None


@dataclass(frozen=True)
class GridWorld:
    width: int
    height: int
    obstacles: FrozenSet[Cell]
    start: Cell
    goal: Cell
    cell_size: float = 1.0
    max_steps: int = 0
    density: str = "medium"
    actions: Tuple[Cell, ...] = ACTION_SETS["grid25"]
    patch_size: int = 5
    goal_reward: float = 100.0
    collision_reward: float = -100.0
    step_reward: float = -1.0
    shaping: float = 1.0
    shortest_path_steps: int = field(init=False, default=0)

    def __post_init__(self):
        object.__setattr__(self, "obstacles", frozenset(map(tuple, self.obstacles)))
        object.__setattr__(self, "start", tuple(self.start))
        object.__setattr__(self, "goal", tuple(self.goal))
        object.__setattr__(self, "actions", tuple(map(tuple, self.actions)))
        if self.start == self.goal:
            raise IntegrityError("start and goal must differ")
        for name in ("start", "goal"):
            cell = getattr(self, name)
            if self.blocked(cell):
                raise IntegrityError(f"{name} {cell} is an obstacle or off the map")
        steps = _shortest_path(
            self.width, self.height, self.obstacles, self.start, self.goal, self.actions
        )
        if steps is None:
            raise GenerationError("no collision-free path from start to goal")
        object.__setattr__(self, "shortest_path_steps", steps)
        if self.max_steps <= 0:
            object.__setattr__(self, "max_steps", 4 * steps)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def observation_size(self) -> int:
        return self.patch_size**2 + 3

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @cached_property
    def occupancy(self) -> np.ndarray:
        grid = np.zeros((self.height, self.width), dtype=bool)
        for x, y in self.obstacles:
            grid[y, x] = True
        grid.setflags(write=False)
        return grid

    def blocked(self, cell: Cell) -> bool:
        x, y = cell
        if not (0 <= x < self.width and 0 <= y < self.height):
            return True
        return bool(self.occupancy[y, x])

    def move(self, position: Cell, displacement: Cell) -> Tuple[Cell, bool]:
        """Landing cell and whether the swept path hit anything."""
        path = swept_cells(position, displacement)
        if not path:
            return position, False
        for cell in path:
            if self.blocked(cell):
                return cell, True
        return path[-1], False

    def goal_distance(self, position: Cell) -> float:
        """Euclidean distance to the goal in cells."""
        return math.hypot(self.goal[0] - position[0], self.goal[1] - position[1])

    def observation(self, position: Cell) -> np.ndarray:
        r = self.patch_size // 2
        x, y = position
        patch = [
            1.0 if self.blocked((x + ox, y + oy)) else 0.0
            for oy in range(-r, r + 1)
            for ox in range(-r, r + 1)
        ]
        distance = self.goal_distance(position)
        if distance > 0:
            direction = [(self.goal[0] - x) / distance, (self.goal[1] - y) / distance]
        else:
            direction = [0.0, 0.0]
        return np.asarray(patch + direction + [distance / self.diagonal], dtype=np.float32)


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    terminal_kind: str
    path_length_delta: float


class Episode:
    """Rollout cursor over a shared, read-only :class:`GridWorld`."""

    def __init__(self, world: GridWorld):
        self.world = world
        self.position: Cell = world.start
        self.steps = 0
        self.done = True
        self.terminal_kind = "none"
        self.path_length = 0.0

    def reset(self) -> np.ndarray:
        self.position = self.world.start
        self.steps = 0
        self.done = False
        self.terminal_kind = "none"
        self.path_length = 0.0
        return self.world.observation(self.position)

    def step(self, action: int) -> StepOutcome:
        world = self.world
        if self.done:
            raise UsageError("the episode is over, call reset() first")
        if not 0 <= action < world.n_actions:
            raise UsageError(f"action {action} outside [0, {world.n_actions})")

        dx, dy = world.actions[action]
        previous = world.goal_distance(self.position)
        landing, collided = world.move(self.position, (dx, dy))
        delta = world.cell_size * math.hypot(dx, dy)
        self.steps += 1
        self.path_length += delta

        reward = world.step_reward
        kind = "none"
        if collided:
            reward += world.collision_reward
            kind = "collision"
        else:
            self.position = landing
            reward += world.shaping * (previous - world.goal_distance(landing))
            if landing == world.goal:
                reward += world.goal_reward
                kind = "goal"
            elif self.steps >= world.max_steps:
                kind = "timeout"

        self.done = kind != "none"
        self.terminal_kind = kind
        return StepOutcome(
            observation=world.observation(self.position),
            reward=float(reward),
            done=self.done,
            terminal_kind=kind,
            path_length_delta=delta,
        )


def _world_kwargs(config: EnvConfig) -> dict:
    return dict(
        cell_size=config.cell_size,
        max_steps=config.max_steps,
        density=config.density,
        actions=ACTION_SETS[config.actions],
        patch_size=config.patch_size,
        goal_reward=config.goal_reward,
        collision_reward=config.collision_reward,
        step_reward=config.step_reward,
        shaping=config.shaping,
    )


def make_env(config: EnvConfig, seed: int) -> GridWorld:
    """A solvable map, from the configured map file or generated by
    rejection sampling at the configured obstacle density.
    """
    if config.map_file:
        return read_map(config.map_file, config)

    width, height = config.width, config.height
    start = tuple(config.start) if config.start else (0, 0)
    goal = tuple(config.goal) if config.goal else (width - 1, height - 1)
    density = DENSITIES[config.density]
    rng = np.random.default_rng(seed)
    for attempt in range(GENERATION_ATTEMPTS):
        mask = rng.random((height, width)) < density
        for x, y in (start, goal):
            if 0 <= x < width and 0 <= y < height:
                mask[y, x] = False
        obstacles = frozenset((int(x), int(y)) for y, x in zip(*np.nonzero(mask)))
        try:
            return GridWorld(width, height, obstacles, start, goal, **_world_kwargs(config))
        except GenerationError:
            logger.debug("map seed %d attempt %d unsolvable, retrying", seed, attempt)
    raise GenerationError(
        f"no solvable {width}x{height} {config.density} map after "
        f"{GENERATION_ATTEMPTS} attempts (seed {seed})"
    )


def parse_map(text: str, config: EnvConfig = EnvConfig()) -> GridWorld:
    """Text grid: ``.`` free, ``#`` obstacle, ``S`` start, ``G`` goal.
    Line i is row y = i.
    """
    rows = [line.rstrip("\r") for line in text.splitlines() if line.strip()]
    if not rows:
        raise IntegrityError("map file is empty")
    width = len(rows[0])
    obstacles, start, goal = set(), None, None
    for y, row in enumerate(rows):
        if len(row) != width:
            raise IntegrityError(f"line {y + 1}: expected {width} cells, got {len(row)}")
        for x, char in enumerate(row):
            if char == "#":
                obstacles.add((x, y))
            elif char in "SG":
                if (start if char == "S" else goal) is not None:
                    raise IntegrityError(f"line {y + 1}: more than one {char!r}")
                if char == "S":
                    start = (x, y)
                else:
                    goal = (x, y)
            elif char != ".":
                raise IntegrityError(f"line {y + 1}: unexpected character {char!r}")
    if start is None or goal is None:
        raise IntegrityError("map needs exactly one 'S' and one 'G'")
    try:
        return GridWorld(
            width, len(rows), frozenset(obstacles), start, goal, **_world_kwargs(config)
        )
    except GenerationError as e:
        raise IntegrityError(str(e)) from e


def format_map(world: GridWorld) -> str:
    lines = []
    for y in range(world.height):
        row = []
        for x in range(world.width):
            if (x, y) == world.start:
                row.append("S")
            elif (x, y) == world.goal:
                row.append("G")
            else:
                row.append("#" if (x, y) in world.obstacles else ".")
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


BUNDLED_PREFIX = "bundled:"


def read_map(path, config: EnvConfig = EnvConfig()) -> GridWorld:
    """Load a map file; ``bundled:<name>`` selects a map shipped with the
    package.
    """
    path = os.fspath(path)
    if path.startswith(BUNDLED_PREFIX):
        name = path[len(BUNDLED_PREFIX) :]
        resource = resources.files("berry_sim").joinpath(f"data/maps/{name}.txt")
        if not resource.is_file():
            raise ConfigurationError(f"no bundled map named {name!r}")
        return parse_map(resource.read_text(), config)
    with open(path, encoding="utf-8") as fh:
        return parse_map(fh.read(), config)


def env_factory(config: EnvConfig):
    """Episode index → map, cycling over the configured seeds."""
    cache = {}

    def factory(episode: int) -> GridWorld:
        seed = config.seeds[episode % len(config.seeds)]
        if seed not in cache:
            cache[seed] = make_env(config, seed)
        return cache[seed]

    return factory
