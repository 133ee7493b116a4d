import dataclasses

import pytest

from berry_sim.errors import ConfigurationError, InfeasibilityError, UsageError
from berry_sim.faults import default_curve
from berry_sim.sysmodel import (
    acceleration,
    battery_energy_from_mah,
    calibrate_platform,
    compute_power,
    format_platform,
    heatsink_mass,
    learning_energy,
    load_platform,
    missions,
    parse_platform,
    quality_of_flight,
    rotor_power,
    safe_velocity,
)


@pytest.fixture
def crazyflie():
    return load_platform("crazyflie")


def test_missions_per_charge():
    assert missions(0.884, 3330.0, 53.19) == pytest.approx(55.35, abs=0.01)
    assert missions(0.884, 3330.0, 44.88) == pytest.approx(65.59, abs=0.01)
    assert missions(0.0, 3330.0, 53.19) == 0.0


def test_battery_energy_from_mah():
    assert battery_energy_from_mah(250) == pytest.approx(3330.0)


def test_heatsink_anchors(crazyflie):
    curve = default_curve()
    at_ref = heatsink_mass(crazyflie, compute_power(crazyflie, 1.0, curve))
    at_079 = heatsink_mass(crazyflie, compute_power(crazyflie, 0.79, curve))

    assert at_ref == pytest.approx(3.26, abs=1e-3)
    assert at_079 == pytest.approx(1.22, abs=1e-3)
    with pytest.raises(UsageError):
        heatsink_mass(crazyflie, -1.0)


def test_acceleration_and_velocity_anchors(crazyflie):
    a = acceleration(crazyflie, 3.26)
    assert a == pytest.approx(6.37, abs=1e-3)
    # stopping distance rounded to 1.92 m in the preset
    assert safe_velocity(crazyflie, 6.37) == pytest.approx(4.91, abs=0.05)
    assert safe_velocity(crazyflie, 7.56) == pytest.approx(5.43, abs=0.05)


def test_payload_limits(crazyflie):
    with pytest.raises(InfeasibilityError, match="exceeds"):
        acceleration(crazyflie, 15.5)
    weak = dataclasses.replace(crazyflie, max_thrust=0.2)
    with pytest.raises(InfeasibilityError, match="cannot lift"):
        acceleration(weak, 1.0)
    with pytest.raises(UsageError):
        safe_velocity(crazyflie, 0.0)


def test_reference_row(crazyflie):
    qof = quality_of_flight(crazyflie, default_curve(), 1.0, 0.884, 14.89)

    assert qof.flight_time == pytest.approx(6.81, abs=0.01)
    assert qof.flight_energy == pytest.approx(53.19, abs=0.05)
    assert qof.missions == pytest.approx(55.35, abs=0.1)
    assert qof.processing_energy_scale == 1.0


def test_missions_identity(crazyflie):
    for v_norm in (1.0, 0.86, 0.77, 0.71, 0.64):
        qof = quality_of_flight(crazyflie, None, v_norm, 0.7, 12.0)
        assert qof.missions * qof.flight_energy == pytest.approx(0.7 * crazyflie.battery_energy)
        total_power = qof.rotor_power + qof.compute_power
        assert qof.flight_energy == pytest.approx(qof.flight_time * total_power)


def test_lower_voltage_lightens_and_speeds_up(crazyflie):
    rows = [quality_of_flight(crazyflie, None, v, 1.0, 14.89) for v in (1.0, 0.86, 0.77, 0.71)]

    for high, low in zip(rows, rows[1:]):
        assert low.compute_power < high.compute_power
        assert low.heatsink_mass < high.heatsink_mass
        assert low.acceleration > high.acceleration
        assert low.safe_velocity > high.safe_velocity
        assert low.flight_time < high.flight_time
        assert low.flight_energy < high.flight_energy


def test_rotors_dominate_flight_power(crazyflie):
    qof = quality_of_flight(crazyflie, None, 1.0, 1.0, 14.89)
    assert qof.rotor_power / (qof.rotor_power + qof.compute_power) >= 0.9
    assert rotor_power(crazyflie, crazyflie.takeoff_mass) == crazyflie.rotor_power_base


def test_quality_of_flight_rejects_bad_inputs(crazyflie):
    with pytest.raises(UsageError):
        quality_of_flight(crazyflie, None, 1.0, 1.2, 10.0)
    with pytest.raises(UsageError):
        quality_of_flight(crazyflie, None, 1.0, 0.5, 0.0)
    with pytest.raises(UsageError):
        compute_power(crazyflie, 0.0)


def test_learning_energy(crazyflie):
    at_ref = learning_energy(crazyflie, 1000, 1.0)
    at_low = learning_energy(crazyflie, 1000, 0.77)

    assert learning_energy(crazyflie, 0, 1.0) == 0.0
    assert at_ref == pytest.approx(1000 * 0.025 * (7.30287 + 0.507687), rel=1e-3)
    assert at_low < at_ref
    assert learning_energy(crazyflie, 2000, 1.0) == pytest.approx(2 * at_ref)
    with pytest.raises(UsageError):
        learning_energy(crazyflie, -1, 1.0)


@pytest.mark.parametrize(
    "preset, kwargs",
    [
        ("crazyflie", dict(takeoff_mass=27.0, max_payload=15.0, battery_energy=3330.0,
                           compute_power_fraction=0.065)),
        ("tello", dict(takeoff_mass=80.0, max_payload=20.0, battery_energy=14652.0,
                       compute_power_fraction=0.028, compute_power_ref=0.507687,
                       speed_utilization=0.442092)),
    ],
)
def test_calibration_reproduces_presets(preset, kwargs):
    bundled = load_platform(preset)
    fitted = calibrate_platform(preset, **kwargs)

    for field in dataclasses.fields(bundled):
        expected = getattr(bundled, field.name)
        if isinstance(expected, str):
            assert getattr(fitted, field.name) == expected
        else:
            assert getattr(fitted, field.name) == pytest.approx(expected, rel=1e-3), field.name


def test_platform_files(tmp_path):
    tello = load_platform("tello")
    path = tmp_path / "tello.toml"
    path.write_text(format_platform(tello))

    assert load_platform(path=path) == tello
    assert load_platform("crazyflie", path) == tello

    with pytest.raises(ConfigurationError, match="unknown platform preset"):
        load_platform("blimp")
    with pytest.raises(ConfigurationError, match="unknown platform keys"):
        parse_platform(format_platform(tello) + "wings = 2\n")
    with pytest.raises(ConfigurationError, match="must be positive"):
        parse_platform(format_platform(tello).replace("max_thrust = ", "max_thrust = -"))
    with pytest.raises(ConfigurationError):
        parse_platform("name = ")
