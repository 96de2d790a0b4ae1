"""One-time sensor calibration over a live session.

With the load removed, the average of 128 k samples gives each Hall
current sensor's zero-current ADC voltage; its distance from vref/2 is
the offset correction.  Against a known supply voltage, the same average
on each voltage sensor gives the actual gain.  Both corrections are
written back into the device configuration through the normal config
write path and verified with a fresh batch of samples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .host import HostError, Session
from .protocol import KIND_CURRENT, KIND_VOLTAGE

DEFAULT_SAMPLES = 131072  # "128 k"

OFFSET_ABORT_FRACTION = 0.10  # offset beyond 10% of vref suggests a live load


class CalibrationError(HostError):
    """Calibration aborted; nothing was written."""


@dataclass(frozen=True)
class OffsetResult:
    """Per current sensor: stored offset and post-calibration residual."""

    offsets: dict[int, float]  # sensor index -> offset volts at the ADC
    residual_amps: dict[int, float]  # fresh-batch mean current after writing
    n_samples: int


@dataclass(frozen=True)
class GainResult:
    """Per voltage sensor: stored gain and post-calibration residual."""

    gains: dict[int, float]
    residual_volts: dict[int, float]  # measured-minus-known after writing
    n_samples: int


def _collect_mean_adc(session: Session, n_samples: int, timeout: float | None):
    """Mean ADC volts per enabled sensor: {index: (adc_volts, level, cfg)}."""
    if timeout is None:
        timeout = n_samples / 20000 * 4 + 10
    levels = session.collect_levels(n_samples, timeout=timeout)
    out = {}
    for i, cfg in enumerate(session.get_config()):
        if not cfg.enabled:
            continue
        mean_level = float(levels[:, i].astype(np.float64).mean())
        out[i] = (mean_level / 1023 * cfg.vref, mean_level, cfg)
    return out


def _confirmed(confirm: Callable[[str], bool] | None, prompt: str) -> bool:
    return True if confirm is None else confirm(prompt)


def calibrate_offsets(
    session: Session,
    n_samples: int = DEFAULT_SAMPLES,
    *,
    timeout: float | None = None,
    verify: bool = True,
    confirm: Callable[[str], bool] | None = None,
) -> OffsetResult:
    """Determine and store zero-load Hall offsets for all enabled current sensors.

    The rail must carry no current while this runs.  Aborts without
    writing if any measured offset exceeds 10% of vref (a load is
    probably still attached).
    """
    if session.dump_active:
        raise CalibrationError("refusing to calibrate while a dump is active")
    if not _confirmed(confirm, "Remove all load from the sensed rails, then continue"):
        raise CalibrationError("operator aborted offset calibration")

    adc_means = _collect_mean_adc(session, n_samples, timeout)
    offsets = {}
    for i, (mean_adc, _, cfg) in adc_means.items():
        if cfg.kind != KIND_CURRENT:
            continue
        offset = mean_adc - cfg.vref / 2
        if abs(offset) > OFFSET_ABORT_FRACTION * cfg.vref:
            raise CalibrationError(
                f"sensor {i} ({cfg.name}): measured offset {offset:.4f} V exceeds "
                f"{OFFSET_ABORT_FRACTION:.0%} of vref; is the load really off?"
            )
        offsets[i] = offset

    block = list(session.get_config())
    for i, offset in offsets.items():
        block[i] = replace(block[i], offset=offset)
    session.set_config(block)

    residuals: dict[int, float] = {}
    if verify:
        fresh = _collect_mean_adc(session, n_samples, timeout)
        for i, (mean_adc, _, cfg) in fresh.items():
            if i not in offsets:
                continue
            cfg = session.get_config()[i]
            amps = (mean_adc - cfg.vref / 2 - cfg.offset) / cfg.slope
            residuals[i] = amps
            lsb_amps = cfg.vref / 1023 / abs(cfg.slope)
            if abs(amps) >= lsb_amps:
                raise CalibrationError(
                    f"sensor {i}: post-calibration mean current {amps:.5f} A "
                    f"is not within 1 LSB ({lsb_amps:.5f} A) of zero"
                )
    return OffsetResult(offsets=offsets, residual_amps=residuals, n_samples=n_samples)


def calibrate_voltage_gain(
    session: Session,
    known_volts: float,
    n_samples: int = DEFAULT_SAMPLES,
    *,
    timeout: float | None = None,
    verify: bool = True,
    confirm: Callable[[str], bool] | None = None,
) -> GainResult:
    """Determine and store gains for all enabled voltage sensors.

    ``known_volts`` is the externally measured supply voltage present on
    the sensed buses.  A mean ADC reading pinned at either rail signals
    mis-wiring and aborts.
    """
    if known_volts <= 0:
        raise ValueError(f"known_volts must be > 0, got {known_volts}")
    if session.dump_active:
        raise CalibrationError("refusing to calibrate while a dump is active")
    if not _confirmed(
        confirm, f"Apply the known {known_volts} V supply to the sensed buses, then continue"
    ):
        raise CalibrationError("operator aborted gain calibration")

    adc_means = _collect_mean_adc(session, n_samples, timeout)
    gains = {}
    for i, (mean_adc, mean_level, cfg) in adc_means.items():
        if cfg.kind != KIND_VOLTAGE:
            continue
        if mean_level <= 1.0 or mean_level >= 1022.0:
            raise CalibrationError(
                f"sensor {i} ({cfg.name}): mean ADC reading is pinned at a rail "
                f"(level {mean_level:.1f}); check the wiring"
            )
        gains[i] = (mean_adc - cfg.offset) / known_volts

    block = list(session.get_config())
    for i, gain in gains.items():
        block[i] = replace(block[i], slope=gain)
    session.set_config(block)

    residuals: dict[int, float] = {}
    if verify:
        fresh = _collect_mean_adc(session, n_samples, timeout)
        for i, (mean_adc, _, _) in fresh.items():
            if i not in gains:
                continue
            cfg = session.get_config()[i]
            volts = (mean_adc - cfg.offset) / cfg.slope
            residuals[i] = volts - known_volts
            half_lsb_bus = cfg.vref / 1023 / 2 / abs(cfg.slope)
            if abs(volts - known_volts) > half_lsb_bus:
                raise CalibrationError(
                    f"sensor {i}: re-measured bus voltage {volts:.4f} V is not within "
                    f"half an LSB of the known {known_volts} V"
                )
    return GainResult(gains=gains, residual_volts=residuals, n_samples=n_samples)
