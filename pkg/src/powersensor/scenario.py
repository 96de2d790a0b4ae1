"""Synthetic electrical loads and the key-value setup file for the simulator.

A load scenario describes what the virtual device under test draws over
time: the total current through the monitored rails and the bus voltage.
Scenarios are evaluated at arbitrary (vectorized) time points, so the
device can synthesize its 6 sub-samples per 50 us tick from the exact
waveform.

Setup file format (one ``key = value`` per line, ``#`` comments)::

    mode = accelerated          # or realtime
    seed = 42                   # noise RNG seed
    current_rms = 0.115         # amps of Gaussian noise per sub-sample
    voltage_rms = 0.0           # volts of noise at the bus

    scenario = constant         # constant | square | trace
    amps = 1.0                  # constant load
    volts = 12.0

    # square wave fields (scenario = square)
    low_amps = 3.3
    high_amps = 8.0
    freq_hz = 100
    duty = 0.5

    # trace playback: time:amps:volts breakpoints, held until the next one
    trace = 0:0.5:12, 0.25:2.0:12, 0.5:1.0:12

    # sensors: name kind vref slope offset enabled
    sensor0 = rail12v-I current 3.3 0.165 0.0 1
    sensor1 = rail12v-U voltage 3.3 0.25 0.0 1

    # physical ground truth differing from the EEPROM (calibration drills)
    truth0.offset = 0.02

    eeprom_file = /path/to/eeprom.bin   # optional 224-byte backing image
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .protocol import KIND_CURRENT, KIND_VOLTAGE, SensorConfig


class ScenarioError(ValueError):
    """Invalid load scenario or setup file."""


@dataclass(frozen=True)
class Constant:
    """Steady draw: ``amps`` total through the rails at ``volts``."""

    amps: float
    volts: float

    def current_at(self, t: np.ndarray) -> np.ndarray:
        return np.full_like(t, self.amps)

    def voltage_at(self, t: np.ndarray) -> np.ndarray:
        return np.full_like(t, self.volts)

    def current_at_us(self, t_us: np.ndarray) -> np.ndarray:
        return np.full_like(t_us, self.amps)

    def voltage_at_us(self, t_us: np.ndarray) -> np.ndarray:
        return np.full_like(t_us, self.volts)


@dataclass(frozen=True)
class SquareWave:
    """Load stepping between two currents at a fixed rate.

    Each period starts at ``high_amps`` for ``duty`` of the period, then
    drops to ``low_amps``.
    """

    low_amps: float
    high_amps: float
    freq_hz: float
    duty: float = 0.5
    volts: float = 12.0

    def __post_init__(self) -> None:
        if not self.freq_hz > 0:
            raise ScenarioError(f"freq_hz must be > 0, got {self.freq_hz}")
        if not 0 < self.duty < 1:
            raise ScenarioError(f"duty must be in (0, 1), got {self.duty}")

    def current_at(self, t: np.ndarray) -> np.ndarray:
        return self.current_at_us(np.asarray(t) * 1e6)

    def voltage_at(self, t: np.ndarray) -> np.ndarray:
        return np.full_like(t, self.volts)

    def current_at_us(self, t_us: np.ndarray) -> np.ndarray:
        # phase in microsecond units: exact when an edge lands on a sample
        # instant (t_us * freq is an integer product of exact doubles), so
        # switching ticks decode identically on every channel
        phase_us = (t_us * self.freq_hz) % 1e6
        return np.where(phase_us < self.duty * 1e6, self.high_amps, self.low_amps)

    def voltage_at_us(self, t_us: np.ndarray) -> np.ndarray:
        return np.full_like(t_us, self.volts)


@dataclass(frozen=True)
class Trace:
    """Breakpoint playback: (time_s, amps, volts) held until the next point."""

    points: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if not self.points:
            raise ScenarioError("trace needs at least one breakpoint")
        times = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ScenarioError("trace times must be strictly increasing")

    def _index(self, t: np.ndarray) -> np.ndarray:
        times = np.array([p[0] for p in self.points])
        idx = np.searchsorted(times, t, side="right") - 1
        return np.clip(idx, 0, len(self.points) - 1)

    def current_at(self, t: np.ndarray) -> np.ndarray:
        amps = np.array([p[1] for p in self.points])
        return amps[self._index(t)]

    def voltage_at(self, t: np.ndarray) -> np.ndarray:
        volts = np.array([p[2] for p in self.points])
        return volts[self._index(t)]

    def current_at_us(self, t_us: np.ndarray) -> np.ndarray:
        return self.current_at(t_us * 1e-6)

    def voltage_at_us(self, t_us: np.ndarray) -> np.ndarray:
        return self.voltage_at(t_us * 1e-6)


LoadScenario = Constant | SquareWave | Trace


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian sensor noise, applied independently per sub-sample.

    ``current_rms`` is referred through each current sensor's sensitivity,
    ``voltage_rms`` through each voltage sensor's gain.  The same seed
    always reproduces the same sample stream.
    """

    current_rms: float = 0.115
    voltage_rms: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.current_rms < 0 or self.voltage_rms < 0:
            raise ScenarioError("noise rms values must be >= 0")


ZERO_NOISE = NoiseModel(current_rms=0.0, voltage_rms=0.0, seed=0)


def default_configs() -> tuple[SensorConfig, ...]:
    """Four 12 V / 10 A sensor pairs, the stock virtual EEPROM."""
    names = ("pcie12v", "eps12v0", "eps12v1", "ext12v")
    records = []
    for name in names:
        records.append(SensorConfig(f"{name}-I", 3.3, 0.165, 0.0, KIND_CURRENT, True))
        records.append(SensorConfig(f"{name}-U", 3.3, 0.25, 0.0, KIND_VOLTAGE, True))
    return tuple(records)


@dataclass
class SimSetup:
    """Everything needed to boot a virtual device."""

    configs: tuple[SensorConfig, ...]
    scenario: LoadScenario
    noise: NoiseModel
    mode: str = "accelerated"
    truth: tuple[SensorConfig, ...] | None = None
    eeprom_path: str | None = None


def _parse_sensor_line(value: str) -> SensorConfig:
    parts = value.split()
    if len(parts) != 6:
        raise ScenarioError(
            f"sensor line needs 'name kind vref slope offset enabled', got {value!r}"
        )
    name, kind, vref, slope, offset, enabled = parts
    if kind not in (KIND_CURRENT, KIND_VOLTAGE):
        raise ScenarioError(f"sensor kind must be current or voltage, got {kind!r}")
    return SensorConfig(
        name, float(vref), float(slope), float(offset), kind, enabled not in ("0", "false")
    )


def _parse_trace(value: str) -> Trace:
    points = []
    for chunk in value.split(","):
        fields = chunk.strip().split(":")
        if len(fields) != 3:
            raise ScenarioError(f"trace breakpoint must be time:amps:volts, got {chunk!r}")
        points.append(tuple(float(f) for f in fields))
    return Trace(tuple(points))


def parse_sim_config(text: str) -> SimSetup:
    """Parse the key-value setup format into a SimSetup."""
    kv: dict[str, str] = {}
    sensors: dict[int, SensorConfig] = {}
    truth_over: dict[int, dict[str, float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key.startswith("sensor") and key[6:].isdigit():
                idx = int(key[6:])
                if not 0 <= idx <= 7:
                    raise ScenarioError(f"sensor index {idx} out of range 0-7")
                sensors[idx] = _parse_sensor_line(value)
            elif key.startswith("truth") and "." in key:
                head, field = key.split(".", 1)
                idx = int(head[5:])
                if field not in ("vref", "slope", "offset"):
                    raise ScenarioError(f"unknown truth field {field!r}")
                truth_over.setdefault(idx, {})[field] = float(value)
            else:
                kv[key] = value
        except ScenarioError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None

    configs = list(default_configs())
    for idx, cfg in sensors.items():
        configs[idx] = cfg

    kind = kv.get("scenario", "constant")
    volts = float(kv.get("volts", 12.0))
    if kind == "constant":
        scenario: LoadScenario = Constant(float(kv.get("amps", 1.0)), volts)
    elif kind == "square":
        scenario = SquareWave(
            float(kv.get("low_amps", 0.0)),
            float(kv.get("high_amps", 1.0)),
            float(kv.get("freq_hz", 100.0)),
            float(kv.get("duty", 0.5)),
            volts,
        )
    elif kind == "trace":
        if "trace" not in kv:
            raise ScenarioError("scenario = trace requires a trace = ... line")
        scenario = _parse_trace(kv["trace"])
    else:
        raise ScenarioError(f"unknown scenario {kind!r}")

    noise = NoiseModel(
        current_rms=float(kv.get("current_rms", 0.0)),
        voltage_rms=float(kv.get("voltage_rms", 0.0)),
        seed=int(kv.get("seed", 0)),
    )
    mode = kv.get("mode", "accelerated")
    if mode not in ("accelerated", "realtime"):
        raise ScenarioError(f"mode must be accelerated or realtime, got {mode!r}")

    truth = None
    if truth_over:
        records = list(configs)
        for idx, fields in truth_over.items():
            if not 0 <= idx <= 7:
                raise ScenarioError(f"truth index {idx} out of range 0-7")
            records[idx] = dataclasses.replace(records[idx], **fields)
        truth = tuple(records)

    return SimSetup(
        configs=tuple(configs),
        scenario=scenario,
        noise=noise,
        mode=mode,
        truth=truth,
        eeprom_path=kv.get("eeprom_file"),
    )


def load_sim_config(path: str | Path) -> SimSetup:
    """Read a setup file from disk."""
    return parse_sim_config(Path(path).read_text())
