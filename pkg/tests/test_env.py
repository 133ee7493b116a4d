import math

import numpy as np
import pytest

from berry_sim.env import (
    ACTION_SETS,
    EnvConfig,
    Episode,
    GridWorld,
    env_factory,
    format_map,
    make_env,
    parse_map,
    read_map,
    swept_cells,
)
from berry_sim.errors import ConfigurationError, GenerationError, IntegrityError, UsageError

GRID25 = ACTION_SETS["grid25"]


def _action(dx, dy):
    return GRID25.index((dx, dy))


def _open_world(size=5, goal=None, **kwargs):
    goal = goal or (size - 1, size - 1)
    return GridWorld(size, size, frozenset(), (0, 0), goal, **kwargs)


def test_action_sets():
    assert len(GRID25) == 25
    assert GRID25[12] == (0, 0)
    assert GRID25[0] == (-2, -2)
    assert GRID25[1] == (-1, -2)
    assert len(ACTION_SETS["compass8"]) == 8
    assert (0, 0) not in ACTION_SETS["compass8"]


@pytest.mark.parametrize(
    "displacement, cells",
    [
        ((0, 0), ()),
        ((1, 0), ((1, 0),)),
        ((2, 1), ((1, 1), (2, 1))),
        ((2, 2), ((1, 1), (2, 2))),
        ((0, -2), ((0, -1), (0, -2))),
        ((-2, 1), ((-1, 1), (-2, 1))),
    ],
)
def test_swept_cells(displacement, cells):
    assert swept_cells((0, 0), displacement) == cells


def test_env_config_validation():
    config = EnvConfig()
    assert config.observation_size == 28
    assert config.n_actions == 25
    assert EnvConfig(actions="compass8", patch_size=3).observation_size == 12

    with pytest.raises(ConfigurationError):
        EnvConfig(density="jungle")
    with pytest.raises(ConfigurationError):
        EnvConfig(patch_size=4)
    with pytest.raises(ConfigurationError):
        EnvConfig(actions="king")
    with pytest.raises(ConfigurationError):
        EnvConfig(seeds=())
    with pytest.raises(ConfigurationError):
        EnvConfig(start=(1, 2, 3))


def test_world_validation():
    with pytest.raises(IntegrityError):
        GridWorld(5, 5, frozenset(), (0, 0), (0, 0))
    with pytest.raises(IntegrityError):
        GridWorld(5, 5, frozenset({(4, 4)}), (0, 0), (4, 4))
    with pytest.raises(IntegrityError):
        GridWorld(5, 5, frozenset(), (0, 0), (5, 5))
    wall = frozenset((2, y) for y in range(5)) | frozenset((3, y) for y in range(5))
    with pytest.raises(GenerationError):
        GridWorld(5, 5, wall, (0, 0), (4, 4))


def test_shortest_path_sets_step_budget():
    world = _open_world()
    assert world.shortest_path_steps == 2
    assert world.max_steps == 8
    assert _open_world(max_steps=3).max_steps == 3


def test_observation_layout():
    world = _open_world()
    obs = world.observation((0, 0))

    assert obs.dtype == np.float32
    assert obs.shape == (world.observation_size,)
    patch = obs[:25].reshape(5, 5)
    # rows and columns left of and above the corner are off the map
    assert patch[:2, :].all()
    assert patch[:, :2].all()
    assert not patch[2:, 2:].any()
    assert obs[25] == pytest.approx(math.sqrt(0.5))
    assert obs[26] == pytest.approx(math.sqrt(0.5))
    assert obs[27] == pytest.approx(math.hypot(4, 4) / math.hypot(5, 5))

    at_goal = world.observation((4, 4))
    assert at_goal[25] == 0.0 and at_goal[27] == 0.0


def test_step_reward_and_shaping():
    episode = Episode(_open_world())
    episode.reset()
    outcome = episode.step(_action(1, 1))

    expected = -1.0 + (math.hypot(4, 4) - math.hypot(3, 3))
    assert outcome.reward == pytest.approx(expected)
    assert not outcome.done
    assert outcome.terminal_kind == "none"
    assert outcome.path_length_delta == pytest.approx(math.sqrt(2))
    assert episode.position == (1, 1)


def test_null_action_costs_a_step():
    episode = Episode(_open_world())
    episode.reset()
    outcome = episode.step(12)

    assert outcome.reward == -1.0
    assert outcome.path_length_delta == 0.0
    assert episode.position == (0, 0)


def test_collision_ends_episode_without_moving():
    episode = Episode(_open_world())
    episode.reset()
    outcome = episode.step(_action(-1, 0))

    assert outcome.done
    assert outcome.terminal_kind == "collision"
    assert outcome.reward == pytest.approx(-101.0)
    assert episode.position == (0, 0)


def test_long_moves_cannot_tunnel():
    world = GridWorld(5, 5, frozenset({(1, 1)}), (0, 0), (4, 4))
    episode = Episode(world)
    episode.reset()

    assert episode.step(_action(2, 2)).terminal_kind == "collision"


def test_reaching_goal():
    episode = Episode(_open_world(goal=(2, 2)))
    episode.reset()
    outcome = episode.step(_action(2, 2))

    assert outcome.done
    assert outcome.terminal_kind == "goal"
    assert outcome.reward == pytest.approx(-1.0 + math.hypot(2, 2) + 100.0)


def test_shaping_telescopes_over_an_episode():
    world = _open_world(size=8)
    episode = Episode(world)
    episode.reset()
    total, steps = 0.0, 0
    for move in [(2, 2), (2, 1), (1, 2), (0, 0), (2, 2)]:
        outcome = episode.step(_action(*move))
        total += outcome.reward
        steps += 1
    assert outcome.terminal_kind == "goal"
    assert total == pytest.approx(-steps + math.hypot(7, 7) + 100.0)
    assert episode.path_length == pytest.approx(
        2 * math.hypot(2, 2) + 2 * math.hypot(2, 1)
    )


def test_timeout():
    episode = Episode(_open_world(max_steps=1))
    episode.reset()
    outcome = episode.step(_action(1, 0))

    assert outcome.done
    assert outcome.terminal_kind == "timeout"


def test_step_misuse():
    episode = Episode(_open_world())
    with pytest.raises(UsageError):
        episode.step(0)
    episode.reset()
    with pytest.raises(UsageError):
        episode.step(25)
    episode.step(_action(-1, 0))
    with pytest.raises(UsageError):
        episode.step(12)


def test_reset_restarts_from_start():
    episode = Episode(_open_world())
    first = episode.reset()
    episode.step(_action(1, 1))
    again = episode.reset()

    np.testing.assert_array_equal(first, again)
    assert episode.steps == 0
    assert episode.path_length == 0.0


def test_make_env_is_deterministic_and_solvable():
    config = EnvConfig(density="dense")
    a = make_env(config, 3)
    b = make_env(config, 3)

    assert a.obstacles == b.obstacles
    assert a.start == (0, 0) and a.goal == (19, 19)
    assert not a.blocked(a.start) and not a.blocked(a.goal)
    assert a.shortest_path_steps > 0
    density = len(a.obstacles) / (20 * 20)
    assert 0.15 < density < 0.35


def test_make_env_gives_up(mocker):
    mocker.patch("berry_sim.env._shortest_path", return_value=None)
    with pytest.raises(GenerationError, match="100 attempts"):
        make_env(EnvConfig(), 0)


def test_parse_and_format_map():
    text = "S.#\n.#.\n..G\n"
    world = parse_map(text)

    assert (world.width, world.height) == (3, 3)
    assert world.start == (0, 0) and world.goal == (2, 2)
    assert world.obstacles == frozenset({(2, 0), (1, 1)})
    assert format_map(world) == text


@pytest.mark.parametrize(
    "text, message",
    [
        ("", "empty"),
        ("S..\n..\n..G\n", "expected 3"),
        ("S.x\n..G\n", "unexpected character"),
        ("S.S\n..G\n", "more than one"),
        ("S..\n...\n", "exactly one"),
        ("S#.\n##.\n..G\n", "path"),
    ],
)
def test_parse_map_errors(text, message):
    with pytest.raises(IntegrityError, match=message):
        parse_map(text)


def test_bundled_map():
    world = read_map("bundled:medium-20x20")

    assert (world.width, world.height) == (20, 20)
    assert world.start == (0, 0) and world.goal == (19, 19)
    assert len(world.obstacles) == 60
    with pytest.raises(ConfigurationError):
        read_map("bundled:nowhere")


def test_map_file_overrides_generation(tmp_path):
    path = tmp_path / "map.txt"
    path.write_text("S....\n.....\n..#..\n.....\n....G\n")
    world = make_env(EnvConfig(map_file=str(path), max_steps=7), seed=99)

    assert world.obstacles == frozenset({(2, 2)})
    assert world.max_steps == 7


def test_env_factory_cycles_seeds():
    factory = env_factory(EnvConfig(seeds=(1, 2), density="sparse"))

    assert factory(0) is factory(2)
    assert factory(1) is factory(3)
    assert factory(0) is not factory(1)
