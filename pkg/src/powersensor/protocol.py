"""Wire protocol between the sensor device and the host.

The device streams two kinds of 2-byte frames:

  sample     A = [1 | index:3 | marker:1 | level 9..7]   B = [0 | level 6..0]
  timestamp  sample layout with index=7 and marker=1; the 10-bit value is
             the device clock in microseconds modulo 1024

The MSB of each byte is the frame-sync bit (set on the first byte, clear on
the second), which lets a receiver resynchronize after dropped or corrupted
bytes.  A marker bit is only meaningful on sensor 0; index 7 with the marker
bit set is reserved for timestamps, and the combination of the marker bit
with indices 1-6 is invalid on the wire.

The host talks back in single command bytes:

  'S' start stream        'T' stop stream
  'R' read config         'W' write config (followed by the 224-byte block)
  'M' mark next sample    'V' version string reply, '\\n'-terminated
  'X' reboot              'Y' reboot to DFU (halts the stream)

Sensor configuration travels as a fixed 224-byte block: 8 records of 28
bytes each (name 12s, vref/slope/offset float32-LE, type u8, enabled u8,
2 pad bytes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

SYNC_BIT = 0x80
LEVEL_MAX = 1023
MICROS_MAX = 1023
INDEX_MAX = 7
TIMESTAMP_INDEX = 7

CMD_START_STREAM = b"S"
CMD_STOP_STREAM = b"T"
CMD_READ_CONFIG = b"R"
CMD_WRITE_CONFIG = b"W"
CMD_MARK = b"M"
CMD_GET_VERSION = b"V"
CMD_REBOOT = b"X"
CMD_REBOOT_DFU = b"Y"

SENSOR_COUNT = 8
NAME_SIZE = 12
_RECORD_STRUCT = struct.Struct("<12sfffBB2x")
RECORD_SIZE = _RECORD_STRUCT.size  # 28
CONFIG_BLOCK_SIZE = RECORD_SIZE * SENSOR_COUNT  # 224

KIND_CURRENT = "current"
KIND_VOLTAGE = "voltage"
_KIND_TO_BYTE = {KIND_CURRENT: 0, KIND_VOLTAGE: 1}
_BYTE_TO_KIND = {0: KIND_CURRENT, 1: KIND_VOLTAGE}


class ProtocolError(ValueError):
    """Raised for values that cannot be represented on the wire."""


def _f32(value: float) -> float:
    """Round a float to the nearest float32, as stored on the wire."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


@dataclass(frozen=True)
class SampleFrame:
    """One averaged 10-bit reading from a sensor channel."""

    sensor_index: int
    marker: bool
    level: int


@dataclass(frozen=True)
class TimestampFrame:
    """Device clock capture, microseconds modulo 1024."""

    micros: int


StreamEvent = SampleFrame | TimestampFrame


@dataclass(frozen=True)
class SensorConfig:
    """Per-sensor calibration and identity record (virtual EEPROM content).

    ``slope`` is the V/A sensitivity for current sensors and the
    dimensionless ADC-volts-per-bus-volt gain for voltage sensors.
    ``offset`` is in volts at the ADC.  Float fields are quantized to
    float32 on construction so a config always round-trips the wire
    bit-exactly.
    """

    name: str
    vref: float
    slope: float
    offset: float = 0.0
    kind: str = KIND_CURRENT
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.kind not in _KIND_TO_BYTE:
            raise ProtocolError(f"unknown sensor kind {self.kind!r}")
        try:
            raw = self.name.encode("ascii")
        except UnicodeEncodeError as exc:
            raise ProtocolError(f"sensor name {self.name!r} is not ASCII") from exc
        if len(raw) > NAME_SIZE - 1:
            raise ProtocolError(
                f"sensor name {self.name!r} longer than {NAME_SIZE - 1} chars"
            )
        if not self.vref > 0:
            raise ProtocolError(f"vref must be > 0, got {self.vref}")
        if self.slope == 0:
            raise ProtocolError("slope must be nonzero")
        object.__setattr__(self, "vref", _f32(self.vref))
        object.__setattr__(self, "slope", _f32(self.slope))
        object.__setattr__(self, "offset", _f32(self.offset))
        object.__setattr__(self, "enabled", bool(self.enabled))

    @property
    def is_current(self) -> bool:
        return self.kind == KIND_CURRENT


ConfigBlock = tuple  # 8 SensorConfig records, indices 0-7


def encode_sample(frame: SampleFrame) -> bytes:
    """Encode a sample frame into its 2-byte wire form."""
    index, marker, level = frame.sensor_index, frame.marker, frame.level
    if not 0 <= index <= INDEX_MAX:
        raise ProtocolError(f"sensor index {index} out of range 0-7")
    if not 0 <= level <= LEVEL_MAX:
        raise ProtocolError(f"level {level} does not fit in 10 bits")
    if marker and index == TIMESTAMP_INDEX:
        raise ProtocolError("index 7 with marker set is reserved for timestamps")
    if marker and index != 0:
        raise ProtocolError("marker bit is only valid on sensor 0")
    first = SYNC_BIT | (index << 4) | (int(marker) << 3) | (level >> 7)
    return bytes((first, level & 0x7F))


def encode_timestamp(micros: int) -> bytes:
    """Encode a device timestamp (microseconds mod 1024) into 2 bytes."""
    if not 0 <= micros <= MICROS_MAX:
        raise ProtocolError(f"timestamp {micros} does not fit in 10 bits")
    first = SYNC_BIT | (TIMESTAMP_INDEX << 4) | (1 << 3) | (micros >> 7)
    return bytes((first, micros & 0x7F))


@dataclass
class DecoderState:
    """Carry-over state between decode_stream calls.

    ``pending`` holds an unconsumed first byte, ``discarded`` counts bytes
    dropped during resynchronization (including both bytes of a pair whose
    marker/index combination is invalid).
    """

    pending: int | None = None
    discarded: int = 0


def decode_pair(first: int, second: int) -> StreamEvent | None:
    """Decode one aligned byte pair; None if the pair is invalid on the wire."""
    index = (first >> 4) & 0x07
    marker = bool(first & 0x08)
    value = ((first & 0x07) << 7) | (second & 0x7F)
    if marker and index == TIMESTAMP_INDEX:
        return TimestampFrame(value)
    if marker and index != 0:
        return None
    return SampleFrame(index, marker, value)


def decode_stream(
    data: bytes | bytearray, state: DecoderState | None = None
) -> tuple[list[StreamEvent], DecoderState]:
    """Decode a chunk of raw bytes into stream events.

    Never raises on malformed input: a repeated first byte supersedes the
    pending one, orphan second bytes are dropped, and invalid pairs are
    discarded whole; every dropped byte increments ``state.discarded``.
    Returns the events plus the state to pass into the next call.
    """
    if state is None:
        state = DecoderState()
    events: list[StreamEvent] = []
    pending = state.pending
    discarded = state.discarded
    for byte in data:
        if byte & SYNC_BIT:
            if pending is not None:
                discarded += 1
            pending = byte
        elif pending is None:
            discarded += 1
        else:
            event = decode_pair(pending, byte)
            pending = None
            if event is None:
                discarded += 2
            else:
                events.append(event)
    return events, DecoderState(pending, discarded)


def serialize_config(block: Sequence[SensorConfig]) -> bytes:
    """Serialize 8 sensor records into the fixed 224-byte EEPROM image."""
    if len(block) != SENSOR_COUNT:
        raise ProtocolError(f"config block needs {SENSOR_COUNT} records, got {len(block)}")
    out = bytearray()
    for cfg in block:
        out += _RECORD_STRUCT.pack(
            cfg.name.encode("ascii"),
            cfg.vref,
            cfg.slope,
            cfg.offset,
            _KIND_TO_BYTE[cfg.kind],
            1 if cfg.enabled else 0,
        )
    return bytes(out)


def parse_config(data: bytes) -> tuple[SensorConfig, ...]:
    """Parse a 224-byte EEPROM image back into 8 sensor records."""
    if len(data) != CONFIG_BLOCK_SIZE:
        raise ProtocolError(
            f"config block must be {CONFIG_BLOCK_SIZE} bytes, got {len(data)}"
        )
    records = []
    for i in range(SENSOR_COUNT):
        raw_name, vref, slope, offset, kind_byte, enabled = _RECORD_STRUCT.unpack_from(
            data, i * RECORD_SIZE
        )
        if kind_byte not in _BYTE_TO_KIND:
            raise ProtocolError(f"record {i}: invalid type byte {kind_byte}")
        records.append(
            SensorConfig(
                name=raw_name.split(b"\x00", 1)[0].decode("ascii"),
                vref=vref,
                slope=slope,
                offset=offset,
                kind=_BYTE_TO_KIND[kind_byte],
                enabled=enabled != 0,
            )
        )
    return tuple(records)
