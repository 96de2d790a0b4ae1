"""Offline analysis: worst-case error model, dump statistics, step timing.

Dump records carry 6-decimal times and 4-decimal watts, so both are held
internally as exact integers (microseconds and 1e-4 W units).  Energy
integrals are rectangle-rule sums of ``watts[k] * (t[k] - t[k-1])`` over
half-open spans, computed in integer units: splitting a span at any
record and summing the parts reproduces the full integral exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

TIME_UNITS_PER_S = 10**6
WATT_UNITS_PER_W = 10**4
ENERGY_UNITS_PER_J = TIME_UNITS_PER_S * WATT_UNITS_PER_W

PAIR_COUNT = 4


class AnalysisError(Exception):
    """Analysis cannot produce a result for this input."""


@dataclass(frozen=True)
class ErrorBudget:
    """Inputs to the worst-case power error model for one sensor module.

    volts/amps are the nominal bus voltage and maximum current;
    volts_error/amps_error are the reading errors of the two sensors.
    """

    volts: float
    amps: float
    volts_error: float
    amps_error: float

    def __post_init__(self) -> None:
        for name in ("volts", "amps", "volts_error", "amps_error"):
            if getattr(self, name) < 0:
                raise AnalysisError(f"{name} must be >= 0")


def power_error(budget: ErrorBudget) -> float:
    """Worst-case error of P = V*I given independent reading errors.

    Propagates through the product: the V-error scaled by the current,
    the I-error scaled by the voltage, and the (small) cross term.
    """
    u, i = budget.volts, budget.amps
    eu, ei = budget.volts_error, budget.amps_error
    return math.sqrt((u * ei) ** 2 + (i * eu) ** 2 + (ei * eu) ** 2)


@dataclass(frozen=True)
class DecimationStats:
    """Spread of a block-averaged power series."""

    factor: int
    out_rate_hz: float
    minimum: float
    maximum: float
    peak_to_peak: float
    std: float


def decimate_stats(series, factor: int, in_rate_hz: float = 20000.0) -> DecimationStats:
    """Average non-overlapping blocks of ``factor`` samples and report spread.

    A trailing partial block is dropped.  Trading time resolution for
    noise: white input noise shrinks by sqrt(factor).
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise AnalysisError("empty series")
    if factor < 1:
        raise AnalysisError(f"factor must be >= 1, got {factor}")
    blocks = arr.size // factor
    if blocks < 2:
        raise AnalysisError(
            f"need at least 2 blocks of {factor} samples, series has {arr.size}"
        )
    averaged = arr[: blocks * factor].reshape(blocks, factor).mean(axis=1)
    lo, hi = float(averaged.min()), float(averaged.max())
    return DecimationStats(
        factor=factor,
        out_rate_hz=in_rate_hz / factor,
        minimum=lo,
        maximum=hi,
        peak_to_peak=hi - lo,
        std=float(averaged.std()),
    )


@dataclass(frozen=True)
class StepResult:
    """First rising edge of a step series."""

    rise_seconds: float
    low_level: float
    high_level: float
    edges: tuple[tuple[float, str], ...]  # (fractional sample position, 'rise'|'fall')


def _interp_crossing(arr: np.ndarray, i: int, level: float) -> float:
    return i + (level - arr[i]) / (arr[i + 1] - arr[i])


def rise_time(
    series, rate_hz: float, low_frac: float = 0.1, high_frac: float = 0.9
) -> StepResult:
    """10-90% rise time of the first rising edge, with detected edges.

    Plateaus come from medians of the samples on each side of the edge;
    the edge itself is the crossing of the midpoint between them.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.size < 3:
        raise AnalysisError("series too short for step detection")
    lo_est = float(np.percentile(arr, 10))
    hi_est = float(np.percentile(arr, 90))
    span = hi_est - lo_est
    if span <= 0 or span <= 1e-12 * max(abs(lo_est), abs(hi_est), 1.0):
        raise AnalysisError("no step found: series is flat")
    mid = (lo_est + hi_est) / 2

    above = arr >= mid
    flips = np.nonzero(above[1:] != above[:-1])[0]  # edge between i and i+1
    if flips.size == 0:
        raise AnalysisError("no step found: series never crosses the midpoint")
    edges = tuple(
        (_interp_crossing(arr, int(i), mid), "rise" if above[i + 1] else "fall")
        for i in flips
    )
    rising = [int(i) for i in flips if above[i + 1]]
    if not rising:
        raise AnalysisError("no rising edge found")
    e = rising[0]

    pos = list(flips)
    k = pos.index(e)
    seg_start = int(pos[k - 1]) + 1 if k > 0 else 0
    seg_end = int(pos[k + 1]) + 1 if k + 1 < len(pos) else arr.size
    low_level = float(np.median(arr[seg_start : e + 1]))
    high_level = float(np.median(arr[e + 1 : seg_end]))

    low_thr = low_level + low_frac * (high_level - low_level)
    high_thr = low_level + high_frac * (high_level - low_level)

    j = e
    while j >= 0 and arr[j] >= low_thr:
        j -= 1
    t10 = _interp_crossing(arr, j, low_thr) if j >= 0 else float(e)
    k2 = e + 1
    while k2 < arr.size and arr[k2] < high_thr:
        k2 += 1
    if k2 >= arr.size:
        raise AnalysisError("step never reaches the high plateau")
    t90 = _interp_crossing(arr, k2 - 1, high_thr)

    return StepResult(
        rise_seconds=(t90 - t10) / rate_hz,
        low_level=low_level,
        high_level=high_level,
        edges=edges,
    )


@dataclass
class DumpData:
    """Parsed dump: exact integer units plus float views for statistics."""

    times_us: np.ndarray  # (n,) int64
    total_units: np.ndarray  # (n,) int64, 1e-4 W
    pair_units: np.ndarray  # (n, 4) int64
    pair_valid: np.ndarray  # (4,) bool, pair present in the dump
    pair_volts: np.ndarray  # (n, 4) float64 (nan when absent)
    pair_amps: np.ndarray  # (n, 4) float64
    markers: dict[str, int]  # char -> row index
    warnings: list[str]

    @property
    def total_watts(self) -> np.ndarray:
        return self.total_units / WATT_UNITS_PER_W

    @property
    def pair_watts(self) -> np.ndarray:
        watts = self.pair_units / WATT_UNITS_PER_W
        watts[:, ~self.pair_valid] = np.nan
        return watts

    @property
    def sample_rate_hz(self) -> float:
        if len(self.times_us) < 2:
            return 0.0
        dt = np.diff(self.times_us)
        return 1e6 / float(np.median(dt))


def _to_units(text: str, scale: int) -> int:
    return round(float(text) * scale)


def read_dump(source) -> DumpData:
    """Parse a dump file (path or open text file), tolerating bad lines.

    Malformed lines are skipped and reported in ``warnings`` with their
    line numbers; parsing continues.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            lines = fh.readlines()
    else:
        lines = source.readlines()

    times: list[int] = []
    totals: list[int] = []
    pairs: list[list[int]] = []
    volts_rows: list[list[float]] = []
    amps_rows: list[list[float]] = []
    valid = [False] * PAIR_COUNT
    markers: dict[str, int] = {}
    warnings: list[str] = []

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if fields[0] != "S":
            warnings.append(f"line {lineno}: not a data line")
            continue
        marker = None
        if len(fields) == 16 and len(fields[-1]) == 2 and fields[-1][0] == "M":
            marker = fields[-1][1]
            fields = fields[:-1]
        if len(fields) != 15:
            warnings.append(f"line {lineno}: expected 15 fields, got {len(fields)}")
            continue
        try:
            t_us = _to_units(fields[1], TIME_UNITS_PER_S)
            row = [0] * PAIR_COUNT
            row_volts = [math.nan] * PAIR_COUNT
            row_amps = [math.nan] * PAIR_COUNT
            row_valid = [False] * PAIR_COUNT
            for p in range(PAIR_COUNT):
                v, i, w = fields[2 + 3 * p : 5 + 3 * p]
                if v == "-":
                    continue
                row_volts[p] = float(v)
                row_amps[p] = float(i)
                row[p] = _to_units(w, WATT_UNITS_PER_W)
                row_valid[p] = True
            total = _to_units(fields[14], WATT_UNITS_PER_W)
        except ValueError as exc:
            warnings.append(f"line {lineno}: {exc}")
            continue
        index = len(times)
        times.append(t_us)
        totals.append(total)
        pairs.append(row)
        volts_rows.append(row_volts)
        amps_rows.append(row_amps)
        for p in range(PAIR_COUNT):
            valid[p] = valid[p] or row_valid[p]
        if marker is not None:
            if marker in markers:
                warnings.append(f"line {lineno}: duplicate marker {marker!r}")
            else:
                markers[marker] = index

    if not times:
        raise AnalysisError("dump contains no data records")

    return DumpData(
        times_us=np.array(times, dtype=np.int64),
        total_units=np.array(totals, dtype=np.int64),
        pair_units=np.array(pairs, dtype=np.int64),
        pair_valid=np.array(valid, dtype=bool),
        pair_volts=np.array(volts_rows, dtype=np.float64),
        pair_amps=np.array(amps_rows, dtype=np.float64),
        markers=markers,
        warnings=warnings,
    )


def _as_dump(source) -> DumpData:
    return source if isinstance(source, DumpData) else read_dump(source)


def _integral_units(times_us: np.ndarray, units: np.ndarray, i1: int, i2: int) -> int:
    """Rectangle-rule sum of units[k] * dt[k] over rows (i1, i2]."""
    if i2 <= i1:
        return 0
    dt = times_us[i1 + 1 : i2 + 1] - times_us[i1:i2]
    return int(np.sum(units[i1 + 1 : i2 + 1] * dt, dtype=np.int64))


@dataclass(frozen=True)
class EnergyResult:
    """Energy over a marker-delimited span; exact values are Fractions."""

    joules: float
    seconds: float
    watts: float
    joules_exact: Fraction
    seconds_exact: Fraction


def energy_between_markers(source, m1: str, m2: str) -> EnergyResult:
    """Integrate total power between two marker characters.

    m1 must appear before m2.  The integral covers the half-open span
    from m1's tick up to and including m2's; adjacent spans add exactly.
    """
    dump = _as_dump(source)
    for m in (m1, m2):
        if m not in dump.markers:
            raise AnalysisError(f"marker {m!r} not found in dump")
    i1, i2 = dump.markers[m1], dump.markers[m2]
    if i2 < i1:
        raise AnalysisError(f"marker {m2!r} appears before {m1!r}")
    units = _integral_units(dump.times_us, dump.total_units, i1, i2)
    dt_us = int(dump.times_us[i2] - dump.times_us[i1])
    joules_exact = Fraction(units, ENERGY_UNITS_PER_J)
    seconds_exact = Fraction(dt_us, TIME_UNITS_PER_S)
    avg = float(joules_exact / seconds_exact) if dt_us else 0.0
    return EnergyResult(
        joules=float(joules_exact),
        seconds=float(seconds_exact),
        watts=avg,
        joules_exact=joules_exact,
        seconds_exact=seconds_exact,
    )


@dataclass(frozen=True)
class SeriesStats:
    """Five-number spread plus energy for one power series."""

    mean: float
    minimum: float
    maximum: float
    peak_to_peak: float
    std: float
    joules: float


@dataclass(frozen=True)
class DumpSummary:
    pairs: tuple[SeriesStats | None, ...]
    total: SeriesStats
    records: int
    duration_s: float
    warnings: tuple[str, ...]


def _series_stats(values: np.ndarray, times_us: np.ndarray, units: np.ndarray) -> SeriesStats:
    lo, hi = float(values.min()), float(values.max())
    return SeriesStats(
        mean=float(values.mean()),
        minimum=lo,
        maximum=hi,
        peak_to_peak=hi - lo,
        std=float(values.std()),
        joules=_integral_units(times_us, units, 0, len(times_us) - 1) / ENERGY_UNITS_PER_J,
    )


def summarize(source) -> DumpSummary:
    """Full-dump statistics per pair and for the total power."""
    dump = _as_dump(source)
    pair_watts = dump.pair_watts
    pairs = []
    for p in range(PAIR_COUNT):
        if not dump.pair_valid[p]:
            pairs.append(None)
            continue
        pairs.append(
            _series_stats(pair_watts[:, p], dump.times_us, dump.pair_units[:, p])
        )
    total = _series_stats(dump.total_watts, dump.times_us, dump.total_units)
    duration = (dump.times_us[-1] - dump.times_us[0]) / TIME_UNITS_PER_S
    return DumpSummary(
        pairs=tuple(pairs),
        total=total,
        records=len(dump.times_us),
        duration_s=float(duration),
        warnings=tuple(dump.warnings),
    )
