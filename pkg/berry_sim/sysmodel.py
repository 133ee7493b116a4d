"""
    berry_sim.sysmodel
    ~~~~~~~~~~~~~~~~~~

    The cyber-physical chain from processor supply voltage to mission count:
    voltage, compute power, heatsink mass, acceleration, safe velocity,
    flight time, flight energy and missions per battery charge.

    Platform constants live in TOML files.  Two presets ship with the
    package (``crazyflie`` and ``tello``); :func:`calibrate_platform`
    reproduces their coefficients from the published anchor values.
"""

import dataclasses
import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence, Tuple

import tomli_w

from berry_sim.errors import ConfigurationError, InfeasibilityError, UsageError
from berry_sim.faults import VoltageCurve, default_curve, energy_scale_at_voltage

logger = logging.getLogger(__name__)

#: Standard gravity, m/s².
G0 = 9.81

#: Nominal lithium-polymer cell voltage used to turn mAh into joules.
CELL_VOLTAGE = 3.7


@dataclass(frozen=True)
class UavPlatform:
    """Physical constants of one aerial robot.  Masses are in grams."""

    name: str
    takeoff_mass: float
    max_payload: float
    battery_energy: float
    max_thrust: float
    rotor_power_base: float
    compute_power_ref: float
    compute_power_fraction: float
    sensing_distance: float
    speed_utilization: float
    heatsink_specific_mass: float
    heatsink_base_mass: float
    tdp_factor: float = 1.0
    fixed_payload: float = 0.0
    learning_step_time: float = 0.025

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name in ("name", "fixed_payload"):
                continue
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigurationError(
                    f"platform {self.name!r}: {f.name} must be positive, got {value!r}"
                )
        if not 0 <= self.fixed_payload <= self.max_payload:
            raise ConfigurationError(
                f"platform {self.name!r}: fixed payload outside [0, max_payload]"
            )
        if self.speed_utilization > 1:
            raise ConfigurationError(
                f"platform {self.name!r}: speed utilization must be <= 1"
            )


@dataclass(frozen=True)
class QofMetrics:
    success_rate: float
    flight_distance: float
    flight_time: float
    flight_energy: float
    missions: float
    processing_energy_scale: float
    compute_power: float = 0.0
    heatsink_mass: float = 0.0
    acceleration: float = 0.0
    safe_velocity: float = 0.0
    rotor_power: float = 0.0


def compute_power(
    platform: UavPlatform, v_norm: float, curve: Optional[VoltageCurve] = None
) -> float:
    if not v_norm > 0:
        raise UsageError(f"normalized voltage must be positive, got {v_norm!r}")
    curve = curve or default_curve()
    return platform.compute_power_ref / energy_scale_at_voltage(curve, v_norm)


def heatsink_mass(platform: UavPlatform, tdp: float) -> float:
    if tdp < 0:
        raise UsageError(f"TDP must be non-negative, got {tdp!r}")
    return platform.heatsink_base_mass + platform.heatsink_specific_mass * tdp


def acceleration(platform: UavPlatform, payload_mass: float) -> float:
    """Net upward acceleration at full thrust, m/s²."""
    if payload_mass > platform.max_payload:
        raise InfeasibilityError(
            f"{platform.name}: payload {payload_mass:.3f} g exceeds the "
            f"{platform.max_payload} g limit"
        )
    mass = (platform.takeoff_mass + payload_mass) / 1000.0
    a = (platform.max_thrust - mass * G0) / mass
    if a <= 0:
        raise InfeasibilityError(
            f"{platform.name}: thrust {platform.max_thrust} N cannot lift {mass * 1000:.2f} g"
        )
    return a


def safe_velocity(platform: UavPlatform, a: float) -> float:
    """Highest speed that still allows stopping within the sensing range."""
    if not a > 0:
        raise UsageError(f"acceleration must be positive, got {a!r}")
    return math.sqrt(2.0 * a * platform.sensing_distance)


def rotor_power(platform: UavPlatform, total_mass: float) -> float:
    """Hover power at `total_mass` grams (momentum theory, mass^1.5)."""
    return platform.rotor_power_base * (total_mass / platform.takeoff_mass) ** 1.5


def battery_energy_from_mah(capacity_mah: float, cell_voltage: float = CELL_VOLTAGE) -> float:
    """Approximate stored energy in joules (capacity times nominal voltage)."""
    return capacity_mah * 3.6 * cell_voltage


def missions(success_rate: float, battery_energy: float, flight_energy: float) -> float:
    return success_rate * battery_energy / flight_energy


def quality_of_flight(
    platform: UavPlatform,
    curve: Optional[VoltageCurve],
    v_norm: float,
    success_rate: float,
    flight_distance: float,
) -> QofMetrics:
    if not 0 <= success_rate <= 1:
        raise UsageError(f"success rate must lie in [0, 1], got {success_rate!r}")
    if not flight_distance > 0:
        raise UsageError(f"flight distance must be positive, got {flight_distance!r}")
    curve = curve or default_curve()

    p_compute = compute_power(platform, v_norm, curve)
    sink = heatsink_mass(platform, p_compute * platform.tdp_factor)
    payload = sink + platform.fixed_payload
    a = acceleration(platform, payload)
    v_safe = safe_velocity(platform, a)
    flight_time = flight_distance / (platform.speed_utilization * v_safe)
    p_rotor = rotor_power(platform, platform.takeoff_mass + payload)
    flight_energy = flight_time * (p_rotor + p_compute)
    return QofMetrics(
        success_rate=success_rate,
        flight_distance=flight_distance,
        flight_time=flight_time,
        flight_energy=flight_energy,
        missions=missions(success_rate, platform.battery_energy, flight_energy),
        processing_energy_scale=energy_scale_at_voltage(curve, v_norm),
        compute_power=p_compute,
        heatsink_mass=sink,
        acceleration=a,
        safe_velocity=v_safe,
        rotor_power=p_rotor,
    )


def learning_energy(
    platform: UavPlatform,
    steps: int,
    v_norm: float,
    curve: Optional[VoltageCurve] = None,
) -> float:
    """Energy of `steps` on-device learning steps while hovering, J."""
    if steps < 0:
        raise UsageError(f"step count must be non-negative, got {steps!r}")
    p_compute = compute_power(platform, v_norm, curve)
    payload = heatsink_mass(platform, p_compute * platform.tdp_factor) + platform.fixed_payload
    hover = rotor_power(platform, platform.takeoff_mass + payload)
    return steps * platform.learning_step_time * (hover + p_compute)


# -- calibration -------------------------------------------------------------


def calibrate_platform(
    name: str,
    takeoff_mass: float,
    max_payload: float,
    battery_energy: float,
    compute_power_fraction: float,
    curve: Optional[VoltageCurve] = None,
    heatsink_anchors: Sequence[Tuple[float, float]] = ((1.28, 3.26), (0.79, 1.22)),
    acceleration_anchor: float = 6.37,
    velocity_anchors: Sequence[Tuple[float, float]] = ((6.37, 4.91), (7.56, 5.43)),
    reference_row: Tuple[float, float, float] = (14.89, 6.81, 53.19),
    compute_power_ref: Optional[float] = None,
    speed_utilization: Optional[float] = None,
    learning_step_time: float = 0.025,
) -> UavPlatform:
    """Fit the platform coefficients to anchor values.

    `heatsink_anchors` are ``(v_norm, grams)`` pairs; the first one is also
    the heatsink mass at which `acceleration_anchor` must hold.
    `velocity_anchors` are ``(m/s², m/s)`` pairs whose stopping distances
    are averaged.  `reference_row` is ``(distance m, time s, energy J)`` at
    the reference voltage; without an explicit `compute_power_ref` the
    compute power is its `compute_power_fraction` share of that row's mean
    power.
    """
    curve = curve or default_curve()
    distance, time, energy = reference_row
    if compute_power_ref is None:
        compute_power_ref = compute_power_fraction * energy / time

    (v_hi, m_hi), (v_lo, m_lo) = heatsink_anchors
    p_hi = compute_power_ref / curve.energy_scale_at(v_hi)
    p_lo = compute_power_ref / curve.energy_scale_at(v_lo)
    specific = (m_hi - m_lo) / (p_hi - p_lo)
    base = m_hi - specific * p_hi

    loaded = (takeoff_mass + m_hi) / 1000.0
    max_thrust = loaded * (acceleration_anchor + G0)
    sensing = sum(v * v / (2 * a) for a, v in velocity_anchors) / len(velocity_anchors)

    sink_ref = base + specific * compute_power_ref
    total_power = compute_power_ref / compute_power_fraction
    rotor_base = (total_power - compute_power_ref) / (
        (takeoff_mass + sink_ref) / takeoff_mass
    ) ** 1.5

    if speed_utilization is None:
        a_ref = max_thrust / ((takeoff_mass + sink_ref) / 1000.0) - G0
        speed_utilization = distance / (time * math.sqrt(2 * a_ref * sensing))

    logger.debug(
        "calibrated %s: thrust %.6f N, heatsink %.6f g/W + %.6f g", name, max_thrust, specific, base
    )
    return UavPlatform(
        name=name,
        takeoff_mass=takeoff_mass,
        max_payload=max_payload,
        battery_energy=battery_energy,
        max_thrust=max_thrust,
        rotor_power_base=rotor_base,
        compute_power_ref=compute_power_ref,
        compute_power_fraction=compute_power_fraction,
        sensing_distance=sensing,
        speed_utilization=speed_utilization,
        heatsink_specific_mass=specific,
        heatsink_base_mass=base,
        learning_step_time=learning_step_time,
    )


# -- platform files ----------------------------------------------------------

PRESETS = ("crazyflie", "tello")


def platform_from_mapping(data: dict, source: str = "<mapping>") -> UavPlatform:
    names = {f.name for f in dataclasses.fields(UavPlatform)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown platform keys {unknown}", path=source)
    try:
        return UavPlatform(**data)
    except TypeError as e:
        raise ConfigurationError(str(e), path=source) from e


def parse_platform(text: str, source: str = "<string>") -> UavPlatform:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(str(e), path=source) from e
    return platform_from_mapping(data, source)


def load_platform(preset: str = "crazyflie", path=None) -> UavPlatform:
    """A platform from an explicit file, or one of the bundled presets."""
    if path:
        path = os.fspath(path)
        with open(path, encoding="utf-8") as fh:
            return parse_platform(fh.read(), path)
    if preset not in PRESETS:
        raise ConfigurationError(
            f"unknown platform preset {preset!r}, expected one of {list(PRESETS)}"
        )
    resource = resources.files("berry_sim").joinpath(f"data/platforms/{preset}.toml")
    return parse_platform(resource.read_text(), f"bundled:{preset}")


def format_platform(platform: UavPlatform) -> str:
    return tomli_w.dumps(dataclasses.asdict(platform))
