"""
    berry_sim.faults
    ~~~~~~~~~~~~~~~~

    Low-voltage SRAM fault model: the voltage → bit-error-rate → energy
    curve, persistent fault maps over a linear bit layout of the quantized
    network, and the operator that corrupts a network with such a map.

    Faults are stuck-at cells by default.  On random data a stuck-at cell
    disagrees with the stored bit about half the time, so the observed flip
    rate is roughly ``p / 2``; the ``xor`` flip mode flips every listed bit
    instead.
"""

import csv
import io
import logging
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence, Tuple, Union

import numpy as np

from berry_sim.errors import ConfigurationError, IntegrityError
from berry_sim.qnet import (
    QMAX,
    QNetwork,
    QuantizedLayer,
    dequantize_network,
    quantize_network,
    round_half_away,
)

logger = logging.getLogger(__name__)

BITS_PER_CODE = 8
PATTERNS = ("random", "column_aligned")
FLIP_MODES = ("stuck_at", "xor")


def _check_probability(value: float, name: str) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


@dataclass(frozen=True)
class VoltagePoint:
    v_norm: float
    ber: float
    energy_scale: float


@dataclass(frozen=True)
class VoltageCurve:
    """Knots of (voltage / V_min, bit error probability, energy scale),
    sorted by descending voltage.
    """

    points: Tuple[VoltagePoint, ...]

    def __post_init__(self):
        points = tuple(sorted(self.points, key=lambda p: -p.v_norm))
        if not points:
            raise ConfigurationError("a voltage curve needs at least one point")
        for point in points:
            if not point.v_norm > 0:
                raise ConfigurationError(f"voltage must be positive: {point}")
            if not 0.0 <= point.ber <= 1.0:
                raise ConfigurationError(f"bit error rate outside [0, 1]: {point}")
            if point.energy_scale < 1.0:
                raise ConfigurationError(f"energy scale below 1: {point}")
            if point.v_norm >= 1.0 and point.ber != 0.0:
                raise ConfigurationError(f"no bit errors allowed at or above V_min: {point}")
        for high, low in zip(points, points[1:]):
            if high.v_norm == low.v_norm:
                raise ConfigurationError(f"duplicate voltage {low.v_norm}")
            if low.ber < high.ber or low.energy_scale < high.energy_scale:
                raise ConfigurationError(
                    f"curve must not improve as voltage drops: {high} -> {low}"
                )
        object.__setattr__(self, "points", points)

    @property
    def voltages(self) -> Tuple[float, ...]:
        return tuple(p.v_norm for p in self.points)

    def _bracket(self, v_norm: float):
        if not v_norm > 0:
            raise ConfigurationError(f"voltage must be positive, got {v_norm!r}")
        points = self.points
        if v_norm >= points[0].v_norm:
            return points[0], points[0], 0.0
        if v_norm <= points[-1].v_norm:
            return points[-1], points[-1], 0.0
        for high, low in zip(points, points[1:]):
            if v_norm == high.v_norm:
                return high, high, 0.0
            if v_norm == low.v_norm:
                return low, low, 0.0
            if low.v_norm < v_norm < high.v_norm:
                return high, low, (high.v_norm - v_norm) / (high.v_norm - low.v_norm)
        raise AssertionError("unreachable")  # pragma: no cover

    def ber_at(self, v_norm: float) -> float:
        if v_norm >= 1.0:
            return 0.0
        high, low, t = self._bracket(v_norm)
        if t == 0.0:
            return high.ber
        if high.ber > 0.0 and low.ber > 0.0:
            log_ber = math.log10(high.ber) + t * (math.log10(low.ber) - math.log10(high.ber))
            return 10.0**log_ber
        # a zero-error knot has no logarithm, fall back to linear
        return high.ber + t * (low.ber - high.ber)

    def energy_scale_at(self, v_norm: float) -> float:
        high, low, t = self._bracket(v_norm)
        if t == 0.0:
            return high.energy_scale
        return high.energy_scale + t * (low.energy_scale - high.energy_scale)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["v_norm", "ber", "energy_scale"])
        for p in self.points:
            writer.writerow([repr(p.v_norm), repr(p.ber), repr(p.energy_scale)])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "VoltageCurve":
        reader = csv.DictReader(line for line in text.splitlines() if line.strip())
        if reader.fieldnames != ["v_norm", "ber", "energy_scale"]:
            raise ConfigurationError(
                f"voltage curve columns must be v_norm,ber,energy_scale, "
                f"got {reader.fieldnames}"
            )
        points = []
        for row in reader:
            try:
                points.append(
                    VoltagePoint(
                        float(row["v_norm"]), float(row["ber"]), float(row["energy_scale"])
                    )
                )
            except (TypeError, ValueError) as e:
                raise ConfigurationError(
                    f"line {reader.line_num}: malformed voltage curve row: {e}"
                ) from e
        return cls(tuple(points))


def ber_at_voltage(curve: VoltageCurve, v_norm: float) -> float:
    """Bit error probability at a voltage normalised to V_min."""
    return curve.ber_at(v_norm)


def energy_scale_at_voltage(curve: VoltageCurve, v_norm: float) -> float:
    """Processing energy savings factor relative to the 1 V reference."""
    return curve.energy_scale_at(v_norm)


@lru_cache(maxsize=None)
def default_curve() -> VoltageCurve:
    text = resources.files("berry_sim").joinpath("data/voltage_curve.csv").read_text()
    return VoltageCurve.from_csv(text)


def load_curve(path=None) -> VoltageCurve:
    """The curve in `path`, or the bundled one when `path` is empty."""
    if not path:
        return default_curve()
    with open(os.fspath(path), encoding="utf-8") as fh:
        return VoltageCurve.from_csv(fh.read())


@dataclass(frozen=True)
class MemoryLayout:
    """Linear bit layout of the fault-exposed codes.

    Bit address ``8 * i + b`` is bit `b` (0 = LSB) of the i-th exposed code,
    codes being concatenated layer by layer, weights row-major then biases.
    Memory row and column of an address are ``divmod(address, cols)``.
    """

    rows: int
    cols: int
    layer_codes: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(
                f"memory needs at least one row and column, got {self.rows}x{self.cols}"
            )
        object.__setattr__(self, "layer_codes", tuple(int(n) for n in self.layer_codes))
        if self.total_bits < BITS_PER_CODE * self.n_codes:
            raise ConfigurationError(
                f"{self.rows}x{self.cols} bits cannot hold {self.n_codes} codes"
            )

    @property
    def total_bits(self) -> int:
        return self.rows * self.cols

    @property
    def n_codes(self) -> int:
        return sum(self.layer_codes)

    @classmethod
    def for_codes(cls, layer_codes: Sequence[int], cols: int = 64) -> "MemoryLayout":
        n_bits = BITS_PER_CODE * sum(layer_codes)
        rows = max(1, -(-n_bits // cols))
        return cls(rows, cols, tuple(layer_codes))

    @classmethod
    def for_network(
        cls, net: QNetwork, cols: int = 64, include_biases: bool = True
    ) -> "MemoryLayout":
        counts = [
            layer.parameter_count if include_biases else layer.weights.size
            for layer in net.layers
        ]
        return cls.for_codes(counts, cols)

    def locate(self, address: int) -> Tuple[int, int, int]:
        """(layer index, code index within the layer, bit) of an address."""
        if not 0 <= address < BITS_PER_CODE * self.n_codes:
            raise IntegrityError(f"address {address} does not hold a code")
        code, bit = divmod(int(address), BITS_PER_CODE)
        for layer, count in enumerate(self.layer_codes):
            if code < count:
                return layer, code, bit
            code -= count
        raise AssertionError("unreachable")  # pragma: no cover


@dataclass(frozen=True, eq=False)
class FaultMap:
    """Persistent faulty cells of one chip at one voltage."""

    addresses: np.ndarray
    stuck: np.ndarray
    rows: int
    cols: int
    source: str = "sampled"

    def __post_init__(self):
        addresses = np.asarray(self.addresses, dtype=np.int64).reshape(-1)
        stuck = np.asarray(self.stuck, dtype=np.uint8).reshape(-1)
        if addresses.shape != stuck.shape:
            raise IntegrityError("every faulty address needs exactly one stuck value")
        if addresses.size:
            if np.any(np.diff(addresses) <= 0):
                raise IntegrityError("fault addresses must be unique and sorted")
            if addresses[0] < 0 or addresses[-1] >= self.rows * self.cols:
                raise IntegrityError(
                    f"fault address outside the {self.rows}x{self.cols} memory"
                )
            if np.any(stuck > 1):
                raise IntegrityError("stuck values must be 0 or 1")
        addresses.setflags(write=False)
        stuck.setflags(write=False)
        object.__setattr__(self, "addresses", addresses)
        object.__setattr__(self, "stuck", stuck)

    def __len__(self) -> int:
        return int(self.addresses.size)

    @property
    def total_bits(self) -> int:
        return self.rows * self.cols

    @property
    def density(self) -> float:
        return len(self) / self.total_bits

    @classmethod
    def empty(cls, layout: MemoryLayout) -> "FaultMap":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.uint8), layout.rows, layout.cols, "empty")

    def cropped(self, layout: MemoryLayout) -> "FaultMap":
        """Keep only the faults that fall inside `layout`."""
        keep = self.addresses < layout.total_bits
        return FaultMap(
            self.addresses[keep], self.stuck[keep], layout.rows, layout.cols, self.source
        )

    def fitted(self, layout: MemoryLayout) -> "FaultMap":
        """Crop a chip map to `layout`, which it must fully cover."""
        needed = BITS_PER_CODE * layout.n_codes
        if self.total_bits < needed:
            raise IntegrityError(
                f"fault map covers {self.total_bits} bits but the network stores {needed}"
            )
        return self.cropped(layout)


def sample_fault_map(
    layout: MemoryLayout, p: float, seed: int, stuck_one_bias: float = 0.5
) -> FaultMap:
    """Every cell independently faulty with probability `p`."""
    _check_probability(p, "bit error rate")
    _check_probability(stuck_one_bias, "stuck-at-1 bias")
    rng = np.random.default_rng(seed)
    addresses = np.flatnonzero(rng.random(layout.total_bits) < p)
    stuck = (rng.random(addresses.size) < stuck_one_bias).astype(np.uint8)
    return FaultMap(addresses, stuck, layout.rows, layout.cols, f"sampled(p={p!r}, seed={seed})")


def column_aligned_map(
    layout: MemoryLayout,
    p: float,
    zero_to_one_bias: float,
    col_concentration: float,
    seed: int,
) -> FaultMap:
    """Faults confined to a random subset of memory columns.

    ``cols / col_concentration`` columns are chosen and their cells fail with
    the rate that keeps the expected global density at `p`.
    """
    _check_probability(p, "bit error rate")
    _check_probability(zero_to_one_bias, "zero-to-one bias")
    if not col_concentration >= 1.0:
        raise ConfigurationError(
            f"column concentration must be >= 1, got {col_concentration!r}"
        )
    rng = np.random.default_rng(seed)
    n_chosen = min(layout.cols, max(1, int(round(layout.cols / col_concentration))))
    columns = np.sort(rng.choice(layout.cols, size=n_chosen, replace=False))
    cell_p = min(1.0, p * layout.cols / n_chosen)
    rows, picked = np.nonzero(rng.random((layout.rows, n_chosen)) < cell_p)
    addresses = rows.astype(np.int64) * layout.cols + columns[picked]
    stuck = (rng.random(addresses.size) < zero_to_one_bias).astype(np.uint8)
    return FaultMap(
        addresses,
        stuck,
        layout.rows,
        layout.cols,
        f"column_aligned(p={p!r}, bias={zero_to_one_bias!r}, seed={seed})",
    )


def apply_fault_map(
    layers: Sequence[QuantizedLayer],
    layout: MemoryLayout,
    fault_map: FaultMap,
    flip_mode: str = "stuck_at",
) -> Tuple[QuantizedLayer, ...]:
    """Corrupted copies of `layers`; the inputs are left untouched."""
    if flip_mode not in FLIP_MODES:
        raise ConfigurationError(f"unknown flip mode {flip_mode!r}")
    if len(layers) != len(layout.layer_codes) or any(
        count not in (q.codes.size, q.n_weights)
        for q, count in zip(layers, layout.layer_codes)
    ):
        raise IntegrityError("memory layout does not match the quantized network")
    if len(fault_map) and fault_map.addresses[-1] >= layout.total_bits:
        raise IntegrityError(
            f"fault map addresses up to {int(fault_map.addresses[-1])} do not fit "
            f"a layout of {layout.total_bits} bits"
        )
    if not len(fault_map):
        return tuple(layers)

    exposed = np.concatenate(
        [q.codes[:count] for q, count in zip(layers, layout.layer_codes)]
    ).view(np.uint8)

    # addresses past the last code are padding
    in_use = fault_map.addresses < BITS_PER_CODE * exposed.size
    addresses = fault_map.addresses[in_use]
    stuck = fault_map.stuck[in_use]
    code_index = addresses // BITS_PER_CODE
    bits = (addresses % BITS_PER_CODE).astype(np.uint8)
    masks = np.left_shift(np.ones_like(bits), bits)

    if flip_mode == "stuck_at":
        set_mask = np.zeros(exposed.size, np.uint8)
        clear_mask = np.zeros(exposed.size, np.uint8)
        np.bitwise_or.at(set_mask, code_index[stuck == 1], masks[stuck == 1])
        np.bitwise_or.at(clear_mask, code_index[stuck == 0], masks[stuck == 0])
        corrupted = (exposed | set_mask) & ~clear_mask
    else:
        flip_mask = np.zeros(exposed.size, np.uint8)
        np.bitwise_xor.at(flip_mask, code_index, masks)
        corrupted = exposed ^ flip_mask
    corrupted = corrupted.view(np.int8)

    out, offset = [], 0
    for q, count in zip(layers, layout.layer_codes):
        codes = np.concatenate([corrupted[offset : offset + count], q.codes[count:]])
        out.append(q.with_codes(codes))
        offset += count
    return tuple(out)


@dataclass(frozen=True)
class FaultModel:
    """How faults are generated and applied for one run."""

    pattern: str = "random"
    flip_mode: str = "stuck_at"
    stuck_one_bias: float = 0.5
    zero_to_one_bias: float = 0.8
    col_concentration: float = 8.0
    include_biases: bool = True
    columns: int = 64

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigurationError(f"unknown fault pattern {self.pattern!r}")
        if self.flip_mode not in FLIP_MODES:
            raise ConfigurationError(f"unknown flip mode {self.flip_mode!r}")
        _check_probability(self.stuck_one_bias, "stuck-at-1 bias")
        _check_probability(self.zero_to_one_bias, "zero-to-one bias")
        if self.columns < 1:
            raise ConfigurationError(f"memory columns must be >= 1, got {self.columns}")

    def layout_for(self, net: QNetwork) -> MemoryLayout:
        return MemoryLayout.for_network(net, self.columns, self.include_biases)

    def sample(self, layout: MemoryLayout, p: float, seed: int) -> FaultMap:
        if self.pattern == "column_aligned":
            return column_aligned_map(
                layout, p, self.zero_to_one_bias, self.col_concentration, seed
            )
        return sample_fault_map(layout, p, seed, self.stuck_one_bias)


DEFAULT_FAULT_MODEL = FaultModel()

FaultSource = Union[FaultMap, Tuple[float, int]]


def berr(
    net: QNetwork,
    source: FaultSource,
    model: FaultModel = DEFAULT_FAULT_MODEL,
) -> QNetwork:
    """Quantize `net`, inject bit errors and dequantize.

    `source` is either a fixed :class:`FaultMap` (one chip) or a ``(p, seed)``
    pair from which a fresh map is sampled.  `net` itself is never changed.
    """
    layout = model.layout_for(net)
    if isinstance(source, FaultMap):
        fault_map = source
    else:
        p, seed = source
        fault_map = model.sample(layout, p, seed)
    corrupted = apply_fault_map(quantize_network(net), layout, fault_map, model.flip_mode)
    return dequantize_network(corrupted, dtype=net.dtype)


class ActivationFaultHook:
    """Persistent faults in the hidden-layer activation buffers.

    Each hidden layer output is quantized per sample (max-abs scale),
    corrupted with that layer's fixed map and dequantized.  Used as the
    `activation_hook` of :func:`berry_sim.qnet.forward`.
    """

    def __init__(
        self,
        widths: Sequence[int],
        p: float,
        seed: int,
        model: FaultModel = DEFAULT_FAULT_MODEL,
    ):
        self.flip_mode = model.flip_mode
        self.maps = []
        self._masks = []
        children = np.random.SeedSequence(seed).spawn(len(widths))
        for width, child in zip(widths, children):
            layout = MemoryLayout.for_codes([width], model.columns)
            fault_map = model.sample(layout, p, int(child.generate_state(1)[0]))
            self.maps.append(fault_map)
            self._masks.append(self._masks_for(width, fault_map))

    @classmethod
    def for_network(
        cls, net: QNetwork, p: float, seed: int, model: FaultModel = DEFAULT_FAULT_MODEL
    ) -> "ActivationFaultHook":
        return cls(net.arch[1:-1], p, seed, model)

    @staticmethod
    def _masks_for(width: int, fault_map: FaultMap):
        in_use = fault_map.addresses < BITS_PER_CODE * width
        addresses = fault_map.addresses[in_use]
        stuck = fault_map.stuck[in_use]
        code_index = addresses // BITS_PER_CODE
        bits = (addresses % BITS_PER_CODE).astype(np.uint8)
        masks = np.left_shift(np.ones_like(bits), bits)
        set_mask = np.zeros(width, np.uint8)
        clear_mask = np.zeros(width, np.uint8)
        flip_mask = np.zeros(width, np.uint8)
        np.bitwise_or.at(set_mask, code_index[stuck == 1], masks[stuck == 1])
        np.bitwise_or.at(clear_mask, code_index[stuck == 0], masks[stuck == 0])
        np.bitwise_xor.at(flip_mask, code_index, masks)
        return set_mask, clear_mask, flip_mask

    def __call__(self, index: int, activations: np.ndarray) -> np.ndarray:
        set_mask, clear_mask, flip_mask = self._masks[index]
        max_abs = np.max(np.abs(activations), axis=-1, keepdims=True)
        scale = np.where(max_abs > 0, max_abs / QMAX, 1.0)
        codes = np.clip(round_half_away(activations / scale), -QMAX, QMAX)
        codes = codes.astype(np.int8).view(np.uint8)
        if self.flip_mode == "stuck_at":
            codes = (codes | set_mask) & ~clear_mask
        else:
            codes = codes ^ flip_mask
        return (codes.view(np.int8) * scale).astype(activations.dtype)


def format_fault_map(fault_map: FaultMap) -> str:
    lines = [
        f"# {fault_map.source}",
        f"rows={fault_map.rows}",
        f"cols={fault_map.cols}",
    ]
    lines.extend(
        f"{int(a)},{int(s)}" for a, s in zip(fault_map.addresses, fault_map.stuck)
    )
    return "\n".join(lines) + "\n"


def parse_fault_map(text: str, source: str = "profiled") -> FaultMap:
    """Read the profiled fault-map text format.

    ``#`` starts a comment; ``rows=<n>`` and ``cols=<n>`` come first, then
    one ``bit_address,stuck_value`` pair per line in ascending order.
    """
    header = {}
    addresses, stuck = [], []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in ("rows", "cols") or addresses:
                raise IntegrityError(f"line {number}: unexpected header {line!r}")
            try:
                header[key] = int(value)
            except ValueError:
                raise IntegrityError(f"line {number}: {key} must be an integer") from None
            continue
        if len(header) != 2:
            raise IntegrityError(f"line {number}: rows= and cols= must precede faults")
        try:
            address, value = (int(part) for part in line.split(","))
        except ValueError:
            raise IntegrityError(
                f"line {number}: expected 'bit_address,stuck_value', got {line!r}"
            ) from None
        if value not in (0, 1):
            raise IntegrityError(f"line {number}: stuck value must be 0 or 1")
        if addresses and address <= addresses[-1]:
            raise IntegrityError(f"line {number}: addresses must be strictly ascending")
        if not 0 <= address < header["rows"] * header["cols"]:
            raise IntegrityError(f"line {number}: address {address} outside the memory")
        addresses.append(address)
        stuck.append(value)
    if len(header) != 2:
        raise IntegrityError("fault map has no rows=/cols= header")
    if header["rows"] < 1 or header["cols"] < 1:
        raise IntegrityError("fault map memory must have at least one row and column")
    return FaultMap(
        np.asarray(addresses, np.int64),
        np.asarray(stuck, np.uint8),
        header["rows"],
        header["cols"],
        source,
    )


def read_fault_map(path) -> FaultMap:
    with open(os.fspath(path), encoding="utf-8") as fh:
        return parse_fault_map(fh.read(), source=f"profiled({os.fspath(path)})")


def write_fault_map(path, fault_map: FaultMap) -> None:
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        fh.write(format_fault_map(fault_map))


@dataclass(frozen=True)
class FaultStatistics:
    count: int
    total_bits: int
    rate: float
    stuck_one_fraction: float
    column_counts: Tuple[int, ...]

    @property
    def columns_hit(self) -> int:
        return sum(1 for count in self.column_counts if count)


def fault_statistics(fault_map: FaultMap) -> FaultStatistics:
    columns = np.bincount(fault_map.addresses % fault_map.cols, minlength=fault_map.cols)
    count = len(fault_map)
    return FaultStatistics(
        count=count,
        total_bits=fault_map.total_bits,
        rate=fault_map.density,
        stuck_one_fraction=float(fault_map.stuck.mean()) if count else 0.0,
        column_counts=tuple(int(c) for c in columns),
    )
