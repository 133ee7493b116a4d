import flask
import pytest

import berry_sim
from berry_sim import BerrySim, create_app, get_sim
from berry_sim.config import (
    RunConfig,
    apply_overrides,
    config_from_mapping,
    config_hash,
    dump_config,
    from_flask_config,
    load_config,
    parse_config,
    to_flask_mapping,
)
from berry_sim.errors import ConfigurationError, UsageError

EXAMPLE = """\
seed = 3

[env]
density = "sparse"
seeds = [1, 2]

[train]
mode = "berry_offline"
p = 0.01
hidden = [32, 32]

[campaign]
voltages = [1.0, 0.77]
"""


def test_defaults():
    config = RunConfig()

    assert config.seed == 0
    assert config.train.mode == "classical"
    assert config.env.density == "medium"
    assert config.faults.model.pattern == "random"
    assert config.platform.preset == "crazyflie"
    assert config.io.output_dir == "runs"


def test_parse_config():
    config = parse_config(EXAMPLE)

    assert config.seed == 3
    assert config.env.seeds == (1, 2)
    assert config.train.hidden == (32, 32)
    assert config.train.p == 0.01
    assert config.campaign.voltages == (1.0, 0.77)
    assert config.faults == RunConfig().faults


def test_unknown_key_reports_its_line():
    with pytest.raises(ConfigurationError, match="unknown key train.gama") as exc:
        parse_config("seed = 1\n\n[train]\nmode = \"classical\"\ngama = 0.9\n", path="run.toml")

    assert exc.value.line == 5
    assert str(exc.value).startswith("run.toml:5: ")


def test_wrong_types_are_rejected():
    with pytest.raises(ConfigurationError, match="must be an integer") as exc:
        parse_config("[train]\nepisodes = 1.5\n")
    assert exc.value.line == 2
    with pytest.raises(ConfigurationError, match="true or false"):
        parse_config("[faults]\ninclude_biases = 1\n")
    with pytest.raises(ConfigurationError, match="must be a list"):
        parse_config("[env]\nseeds = 4\n")
    with pytest.raises(ConfigurationError, match="unknown section"):
        parse_config("[trian]\nmode = \"classical\"\n")
    with pytest.raises(ConfigurationError, match="seed"):
        parse_config("seed = -1\n")


def test_section_validation_points_at_the_section():
    with pytest.raises(ConfigurationError, match="unknown training mode") as exc:
        parse_config("seed = 1\n[train]\nmode = \"online\"\n")
    assert exc.value.line == 2


def test_profiled_pattern_needs_a_map():
    with pytest.raises(ConfigurationError, match="fault_map"):
        parse_config("[faults]\npattern = \"profiled\"\n")
    config = parse_config("[faults]\npattern = \"profiled\"\nfault_map = \"chip.txt\"\n")
    assert config.faults.model.pattern == "random"


def test_invalid_toml():
    with pytest.raises(ConfigurationError):
        parse_config("[train\n")


def test_dump_and_load(tmp_path):
    config = parse_config(EXAMPLE)
    path = tmp_path / "run.toml"
    path.write_text(dump_config(config))

    assert load_config(path) == config
    assert config_hash(load_config(path)) == config_hash(config)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read config"):
        load_config(tmp_path / "nope.toml")


def test_config_hash():
    a = parse_config(EXAMPLE)
    b = parse_config(EXAMPLE.replace("p = 0.01", "p = 0.02"))

    assert len(config_hash(a)) == 16
    assert config_hash(a) == config_hash(parse_config(EXAMPLE))
    assert config_hash(a) != config_hash(b)


def test_overrides():
    config = apply_overrides(
        parse_config(EXAMPLE),
        ["train.mode=classical", "seed=9", "env.seeds=[4]", "io.locale=de_DE"],
    )

    assert config.train.mode == "classical"
    assert config.seed == 9
    assert config.env.seeds == (4,)
    assert config.io.locale == "de_DE"
    assert config.train.hidden == (32, 32)

    with pytest.raises(ConfigurationError, match="form"):
        apply_overrides(config, ["train.mode"])
    with pytest.raises(ConfigurationError, match="names no config key"):
        apply_overrides(config, ["nothing.here.deep=1"])
    with pytest.raises(ConfigurationError, match="unknown key"):
        apply_overrides(config, ["train.speed=3"])


def test_flask_config_round_trip():
    config = parse_config(EXAMPLE)
    app = flask.Flask(__name__)
    app.config.from_mapping(to_flask_mapping(config))

    assert app.config["BERRY_SEED"] == 3
    assert app.config["BERRY_TRAIN_MODE"] == "berry_offline"
    assert from_flask_config(app.config) == config


def test_app_factory(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(EXAMPLE)

    app = create_app(path, ["train.p=0.02"], {"train.episodes": 12, "env.seeds": [7]})
    with app.app_context():
        run = get_sim().run
        assert run.train.p == 0.02
        assert run.train.episodes == 12
        assert run.env.seeds == (7,)
        assert run.seed == 3


def test_flags_beat_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(EXAMPLE)

    app = create_app(path, ["train.mode=classical"], {"train.mode": "berry_ondevice"})
    assert get_sim(app).run.train.mode == "berry_ondevice"


def test_seed_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("BERRY_SIM_SEED", "42")
    assert get_sim(create_app()).run.seed == 42

    path = tmp_path / "run.toml"
    path.write_text(EXAMPLE)
    assert get_sim(create_app(path)).run.seed == 3

    monkeypatch.setenv("BERRY_SIM_SEED", '"abc"')
    with pytest.raises(ConfigurationError, match="BERRY_SIM_SEED"):
        create_app()


def test_multiple_apps():
    b = BerrySim()

    app1 = flask.Flask(__name__)
    b.init_app(app1, config=config_from_mapping({"train": {"mode": "berry_offline"}}))

    app2 = flask.Flask(__name__)
    b.init_app(app2)

    with app1.app_context():
        assert get_sim().run.train.mode == "berry_offline"

    with app2.app_context():
        assert get_sim().run.train.mode == "classical"


def test_get_sim_needs_the_extension():
    app = flask.Flask(__name__)
    with app.app_context():
        with pytest.raises(UsageError):
            get_sim()


def test_resources_are_loaded_lazily():
    app = create_app(flags={"platform.preset": "tello"})
    sim = get_sim(app)

    assert sim.platform.name == "tello"
    assert sim.platform is sim.platform
    assert sim.curve.ber_at(1.0) == 0.0
    assert sim.fault_model.pattern == "random"
    assert sim.fault_map is None
    assert sim.config_hash == config_hash(sim.run)


def test_jinja_filters_are_registered():
    app = flask.Flask(__name__)
    BerrySim(app)
    assert "changeformat" in app.jinja_env.filters

    bare = flask.Flask(__name__)
    BerrySim(bare, configure_jinja=False)
    assert "changeformat" not in bare.jinja_env.filters


def test_public_names():
    for name in berry_sim.__all__:
        assert hasattr(berry_sim, name)
