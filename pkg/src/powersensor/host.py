"""Host client: stream receiver, physical conversion, energy accounting.

A Session connects over any byte transport, reads the device's sensor
configuration, starts the stream, and runs a background receiver that
turns raw frames into per-pair volts/amps/watts, a reconstructed device
clock (the 10-bit microsecond timestamps are unwrapped by adding 1024
whenever the raw value decreases; successive ticks are 50 us apart), and
cumulative energy per pair via rectangle-rule integration.

Interval measurements take two snapshots and difference them with
joules()/seconds()/watts().  Continuous mode writes one text record per
tick to a dump file (see DUMP_COLUMNS); markers sent with mark() are
attached to the tick whose sensor-0 frame carries the device's marker
bit, pairing the wire bit with the host-side character queue in FIFO
order.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .device import InProcessChannel, VirtualDevice, validate_configs
from .protocol import (
    CMD_GET_VERSION,
    CMD_MARK,
    CMD_READ_CONFIG,
    CMD_REBOOT,
    CMD_START_STREAM,
    CMD_STOP_STREAM,
    CMD_WRITE_CONFIG,
    CONFIG_BLOCK_SIZE,
    KIND_CURRENT,
    SENSOR_COUNT,
    SensorConfig,
    parse_config,
    serialize_config,
)
from .transport import open_transport

PAIR_COUNT = SENSOR_COUNT // 2

DUMP_COLUMNS = "S time_s V0 I0 P0 V1 I1 P1 V2 I2 P2 V3 I3 P3 Ptotal [Mc]"


class HostError(Exception):
    """Base class for host-side failures."""


class TransportError(HostError):
    """Could not open or keep the transport."""


class HostTimeout(HostError):
    """The device did not answer within the deadline."""


class SessionDeadError(HostError):
    """The receiver has stopped; distinct from transient staleness."""


class ConfigVerifyError(HostError):
    """Read-back after a config write did not match what was written."""


class OrderingError(HostError):
    """Snapshot arguments were passed newest-first."""


class ZeroIntervalError(HostError):
    """Average power is undefined over a zero-length interval."""


class DumpError(HostError):
    """Continuous-mode capture failed."""


def raw_to_physical(level: int, cfg: SensorConfig) -> float:
    """Convert a 10-bit level to amps (current sensor) or bus volts.

    Expression order is part of the cross-implementation contract: ports
    of this library must evaluate it identically for bit-equal results.
    """
    if cfg.kind == KIND_CURRENT:
        return (level / 1023 * cfg.vref - cfg.vref / 2 - cfg.offset) / cfg.slope
    return (level / 1023 * cfg.vref - cfg.offset) / cfg.slope


def conversion_table(cfg: SensorConfig) -> list[float]:
    """Precomputed raw_to_physical for all 1024 levels."""
    return [raw_to_physical(level, cfg) for level in range(1024)]


@dataclass(frozen=True)
class PairReading:
    """Physical values for one current+voltage pair at one tick."""

    volts: float
    amps: float
    watts: float
    device_time: float


@dataclass(frozen=True)
class MeasurementState:
    """Consistent snapshot of the receiver; all fields are from one tick."""

    device_time: float
    device_time_us: int
    pairs: tuple[PairReading | None, ...]
    pair_joules: tuple[float, ...]
    total_joules: float
    total_watts: float
    levels: tuple[int | None, ...]
    host_time: float
    sample_count: int
    tick_count: int
    dropped_bytes: int


def joules(a: MeasurementState, b: MeasurementState) -> float:
    """Energy accumulated between two snapshots."""
    if b.sample_count < a.sample_count:
        raise OrderingError("first snapshot must precede the second")
    return b.total_joules - a.total_joules


def seconds(a: MeasurementState, b: MeasurementState) -> float:
    """Device time elapsed between two snapshots."""
    if b.sample_count < a.sample_count:
        raise OrderingError("first snapshot must precede the second")
    return (b.device_time_us - a.device_time_us) * 1e-6


def watts(a: MeasurementState, b: MeasurementState) -> float:
    """Average power between two snapshots."""
    s = seconds(a, b)
    if s == 0:
        raise ZeroIntervalError("zero-length interval has no average power")
    return joules(a, b) / s


class _Collector:
    """Gathers raw levels for a fixed number of ticks."""

    def __init__(self, n: int):
        self.rows: list[list[int]] = []
        self.n = n
        self.done = threading.Event()

    def add(self, levels: list[int]) -> None:
        if len(self.rows) < self.n:
            self.rows.append(levels.copy())
            if len(self.rows) == self.n:
                self.done.set()


class _DumpWriter:
    """Dedicated writer so the receiver never blocks on file I/O."""

    def __init__(self, sink, configs, window_us: int | None = None):
        if isinstance(sink, (str, os.PathLike)):
            self._fh = open(sink, "w")
            self._own = True
        else:
            self._fh = sink
            self._own = False
        self.queue: queue.Queue = queue.Queue()
        self.error: Exception | None = None
        self.records = 0
        self.window_us = window_us  # capture exactly [first tick, first + window)
        self.first_t_us: int | None = None
        self.complete = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._write_header(configs)
        self._thread.start()

    def _write_header(self, configs) -> None:
        fh = self._fh
        fh.write("# powersensor dump v1\n")
        for i, cfg in enumerate(configs):
            fh.write(
                f"# sensor {i}: name={cfg.name} kind={cfg.kind} vref={cfg.vref!r} "
                f"slope={cfg.slope!r} offset={cfg.offset!r} enabled={int(cfg.enabled)}\n"
            )
        fh.write("# pair p = (sensor 2p, sensor 2p+1); P = V*I; disabled pairs print '- - -'\n")
        fh.write(f"# columns: {DUMP_COLUMNS}\n")

    def _run(self) -> None:
        while True:
            item = self.queue.get()
            if item is None:
                break
            if self.error is not None:
                continue  # drain without writing once the sink failed
            t_us, pairs, total_w, marker = item
            fields = [f"S {t_us / 1e6:.6f}"]
            for reading in pairs:
                if reading is None:
                    fields.append("- - -")
                else:
                    volts, amps, w = reading
                    fields.append(f"{volts:.4f} {amps:.4f} {w:.4f}")
            fields.append(f"{total_w:.4f}")
            line = " ".join(fields)
            if marker:
                line += f" M{marker}"
            try:
                self._fh.write(line + "\n")
                self.records += 1
            except Exception as exc:  # surface on stop_dump
                self.error = exc

    def stop(self) -> int:
        self.queue.put(None)
        self._thread.join(timeout=10)
        try:
            self._fh.flush()
        except Exception as exc:
            if self.error is None:
                self.error = exc
        if self._own:
            self._fh.close()
        if self.error is not None:
            raise DumpError(f"dump sink failed: {self.error}") from self.error
        return self.records


class Session:
    """Live connection to a (virtual) sensor device.

    Shareable across threads for snapshots, interval math, and markers;
    set_config serializes against the receiver internally.
    """

    def __init__(
        self,
        transport,
        *,
        connect_timeout: float = 1.0,
        drain_silence: float | None = None,
        wait_first_tick: bool = True,
    ):
        self._transport = transport
        self._timeout = connect_timeout
        if drain_silence is None:
            drain_silence = 0.02 if isinstance(transport, InProcessChannel) else 0.15
        self._drain_silence = drain_silence

        self._cond = threading.Condition()
        self._alive = True
        self._death_reason = ""
        self._config: tuple[SensorConfig, ...] = ()
        self._lut_i: list[list[float] | None] = [None] * PAIR_COUNT
        self._lut_v: list[list[float] | None] = [None] * PAIR_COUNT
        self._latest: list[tuple[float, float, float] | None] = [None] * PAIR_COUNT
        self._latest_levels: list[int] = [-1] * SENSOR_COUNT
        self._pair_joules = [0.0] * PAIR_COUNT
        self._total_watts = 0.0
        self._device_us = 0
        self._last_ts: int | None = None
        self._sample_count = 0
        self._timestamp_count = 0
        self._tick_count = 0
        self._dropped = 0
        self._host_time = time.time()
        self._incomplete_ticks = 0
        self._unmatched_markers = 0
        self._marker_chars: deque[str] = deque()
        self._marker_events: list[tuple[float, str]] = []
        self._collectors: list[_Collector] = []
        self._dump: _DumpWriter | None = None

        # receiver parser state (owned by the rx thread)
        self._pend = -1
        self._levels = [-1] * SENSOR_COUNT
        self._marker_flag = False
        self._have_ts = False
        self._ts_raw = 0

        self._pause_cond = threading.Condition()
        self._pause_req = False
        self._rx_parked = False
        self._stop = False
        self._config_lock = threading.Lock()

        self._handshake()
        self._rx = threading.Thread(target=self._rx_loop, daemon=True)
        self._rx.start()
        if wait_first_tick:
            with self._cond:
                ok = self._cond.wait_for(
                    lambda: self._tick_count >= 1 or not self._alive, connect_timeout
                )
                self._check_alive()
                if not ok:
                    raise HostTimeout(f"no samples within {connect_timeout} s of connect")

    # -- connection -----------------------------------------------------

    @classmethod
    def connect(cls, target, **kwargs) -> "Session":
        """Open a session to an address string, transport, or VirtualDevice."""
        if isinstance(target, VirtualDevice):
            transport = target.host_channel()
        elif isinstance(target, str):
            try:
                transport = open_transport(target)
            except (ConnectionError, ValueError, OSError) as exc:
                raise TransportError(str(exc)) from exc
        else:
            transport = target
        return cls(transport, **kwargs)

    def _drain(self) -> None:
        while True:
            try:
                if not self._transport.read(1 << 16, timeout=self._drain_silence):
                    return
            except ConnectionError as exc:
                raise TransportError(f"transport lost during drain: {exc}") from exc

    def _read_exact(self, n: int, what: str) -> bytes:
        buf = bytearray()
        deadline = time.monotonic() + self._timeout
        while len(buf) < n:
            left = deadline - time.monotonic()
            if left <= 0:
                raise HostTimeout(
                    f"timed out reading {what}: got {len(buf)}/{n} bytes within {self._timeout} s"
                )
            try:
                buf += self._transport.read(n - len(buf), timeout=left)
            except ConnectionError as exc:
                raise TransportError(f"transport lost reading {what}: {exc}") from exc
        return bytes(buf)

    def _handshake(self) -> None:
        try:
            self._transport.write(CMD_STOP_STREAM)
        except ConnectionError as exc:
            raise TransportError(f"cannot reach device: {exc}") from exc
        self._drain()
        self._transport.write(CMD_READ_CONFIG)
        block = self._read_exact(CONFIG_BLOCK_SIZE, "sensor configuration")
        self._install_config(parse_config(block))
        self._transport.write(CMD_START_STREAM)

    def _install_config(self, config) -> None:
        with self._cond:
            self._config = tuple(config)
            for p in range(PAIR_COUNT):
                cur, vol = self._config[2 * p], self._config[2 * p + 1]
                if cur.enabled and vol.enabled:
                    self._lut_i[p] = conversion_table(cur)
                    self._lut_v[p] = conversion_table(vol)
                else:
                    self._lut_i[p] = None
                    self._lut_v[p] = None
                self._latest[p] = None

    # -- receiver ----------------------------------------------------------

    def _rx_loop(self) -> None:
        try:
            while not self._stop:
                if self._pause_req:
                    self._park()
                    continue
                data = self._transport.read(1 << 16, timeout=0.2)
                if data:
                    self._process_chunk(data)
        except ConnectionError as exc:
            self._die(f"transport lost: {exc}")
        except Exception as exc:  # pragma: no cover - defensive
            self._die(f"receiver crashed: {exc!r}")
        else:
            self._die("closed")

    def _park(self) -> None:
        self._reset_parser()
        with self._pause_cond:
            self._rx_parked = True
            self._pause_cond.notify_all()
            self._pause_cond.wait_for(lambda: not self._pause_req or self._stop)
            self._rx_parked = False
            self._pause_cond.notify_all()

    def _reset_parser(self) -> None:
        self._pend = -1
        self._levels = [-1] * SENSOR_COUNT
        self._marker_flag = False
        self._have_ts = False

    def _process_chunk(self, data: bytes) -> None:
        pend = self._pend
        levels = self._levels
        marker_flag = self._marker_flag
        have_ts = self._have_ts
        ts_raw = self._ts_raw
        dropped = 0
        samples = 0
        stamps = 0
        finalize = self._finalize_tick
        for b in data:
            if b & 0x80:
                if pend >= 0:
                    dropped += 1
                pend = b
                continue
            if pend < 0:
                dropped += 1
                continue
            a = pend
            pend = -1
            idx = (a >> 4) & 7
            if a & 0x08:
                if idx == 7:
                    stamps += 1
                    if have_ts:
                        finalize(ts_raw, levels, marker_flag)
                    else:
                        have_ts = True
                    # drop any samples that preceded this timestamp
                    levels = [-1] * SENSOR_COUNT
                    ts_raw = ((a & 7) << 7) | b
                    marker_flag = False
                    continue
                if idx == 0:
                    levels[0] = ((a & 7) << 7) | b
                    marker_flag = True
                    samples += 1
                    continue
                dropped += 2
                continue
            levels[idx] = ((a & 7) << 7) | b
            samples += 1
        self._pend = pend
        self._levels = levels
        self._marker_flag = marker_flag
        self._have_ts = have_ts
        self._ts_raw = ts_raw
        if samples or dropped or stamps:
            with self._cond:
                self._sample_count += samples
                self._timestamp_count += stamps
                self._dropped += dropped

    def _finalize_tick(self, ts_raw: int, levels: list[int], marker_flag: bool) -> None:
        with self._cond:
            if self._last_ts is None:
                dt_us = 0
            else:
                dt_us = (ts_raw - self._last_ts) % 1024
                self._device_us += dt_us
            self._last_ts = ts_raw
            t_us = self._device_us
            dt_s = dt_us * 1e-6
            total_w = 0.0
            latest = self._latest
            incomplete = False
            for p in range(PAIR_COUNT):
                lut_i = self._lut_i[p]
                if lut_i is None:
                    continue
                li = levels[2 * p]
                lu = levels[2 * p + 1]
                if li < 0 or lu < 0:
                    incomplete = True
                    continue
                amps = lut_i[li]
                volts = self._lut_v[p][lu]
                w = volts * amps
                if dt_us:
                    self._pair_joules[p] += w * dt_s
                latest[p] = (volts, amps, w)
                total_w += w
            if incomplete:
                self._incomplete_ticks += 1
            self._total_watts = total_w
            self._latest_levels = levels
            self._tick_count += 1
            self._host_time = time.time()
            marker_char = None
            if marker_flag:
                if self._marker_chars:
                    marker_char = self._marker_chars.popleft()
                else:
                    marker_char = "?"
                    self._unmatched_markers += 1
                self._marker_events.append((t_us * 1e-6, marker_char))
            dump = self._dump
            if dump is not None and not dump.complete:
                if dump.first_t_us is None:
                    dump.first_t_us = t_us
                if (
                    dump.window_us is not None
                    and t_us - dump.first_t_us >= dump.window_us
                ):
                    dump.complete = True
                else:
                    dump.queue.put((t_us, tuple(latest), total_w, marker_char))
            for collector in self._collectors:
                collector.add(levels)
            self._cond.notify_all()

    def _die(self, reason: str) -> None:
        with self._cond:
            if self._alive:
                self._alive = False
                self._death_reason = reason
            self._cond.notify_all()
        with self._pause_cond:
            self._pause_cond.notify_all()

    # -- public API ----------------------------------------------------------

    @property
    def alive(self) -> bool:
        return self._alive

    @property
    def config(self) -> tuple[SensorConfig, ...]:
        return self._config

    @property
    def dump_active(self) -> bool:
        return self._dump is not None

    @property
    def timestamp_frames(self) -> int:
        """Timestamp frames received so far, including the pending tick's."""
        with self._cond:
            return self._timestamp_count

    @property
    def marker_events(self) -> list[tuple[float, str]]:
        with self._cond:
            return list(self._marker_events)

    def _check_alive(self) -> None:
        if not self._alive:
            raise SessionDeadError(f"session is dead: {self._death_reason}")

    def read_state(self) -> MeasurementState:
        """Return a consistent snapshot (all fields from the same tick)."""
        with self._cond:
            self._check_alive()
            t_s = self._device_us * 1e-6
            pairs = tuple(
                None
                if vals is None
                else PairReading(vals[0], vals[1], vals[2], t_s)
                for vals in self._latest
            )
            pair_joules = tuple(self._pair_joules)
            return MeasurementState(
                device_time=t_s,
                device_time_us=self._device_us,
                pairs=pairs,
                pair_joules=pair_joules,
                total_joules=sum(pair_joules),
                total_watts=self._total_watts,
                levels=tuple(lv if lv >= 0 else None for lv in self._latest_levels),
                host_time=self._host_time,
                sample_count=self._sample_count,
                tick_count=self._tick_count,
                dropped_bytes=self._dropped,
            )

    def wait_ticks(self, n: int, timeout: float | None = None) -> None:
        """Block until the receiver has finalized n more ticks."""
        with self._cond:
            goal = self._tick_count + n
            ok = self._cond.wait_for(
                lambda: self._tick_count >= goal or not self._alive, timeout
            )
            self._check_alive()
            if not ok:
                raise HostTimeout(f"no {n} ticks within {timeout} s")

    def wait_device_time(self, t_s: float, timeout: float | None = None) -> None:
        """Block until reconstructed device time reaches t_s seconds."""
        target_us = round(t_s * 1e6)
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._device_us >= target_us or not self._alive, timeout
            )
            self._check_alive()
            if not ok:
                raise HostTimeout(f"device time {t_s} s not reached within {timeout} s")

    def collect_levels(self, n_ticks: int, timeout: float | None = None) -> np.ndarray:
        """Record raw levels for the next n ticks; returns an (n, 8) array.

        Missing (disabled) sensors are -1.
        """
        collector = _Collector(n_ticks)
        with self._cond:
            self._check_alive()
            self._collectors.append(collector)
        try:
            if not collector.done.wait(timeout):
                raise HostTimeout(f"collected {len(collector.rows)}/{n_ticks} ticks")
        finally:
            with self._cond:
                self._collectors.remove(collector)
        return np.array(collector.rows, dtype=np.int16)

    def mark(self, char: str) -> None:
        """Queue a marker character and ask the device to flag the next tick."""
        if len(char) != 1 or not (33 <= ord(char) <= 126):
            raise ValueError(f"marker must be one printable character, got {char!r}")
        with self._cond:
            self._check_alive()
            self._marker_chars.append(char)
        try:
            self._transport.write(CMD_MARK)
        except ConnectionError as exc:
            raise SessionDeadError(f"mark failed: {exc}") from exc

    def get_config(self) -> tuple[SensorConfig, ...]:
        self._check_alive()
        return self._config

    def set_config(self, block) -> None:
        """Validate, write, and verify a new sensor configuration.

        The stream pauses during the exchange; conversions use the new
        block immediately afterwards.
        """
        block = validate_configs(block)
        payload = serialize_config(block)
        with self._config_lock:
            self._check_alive()
            self._pause_rx()
            try:
                self._transport.write(CMD_STOP_STREAM)
                self._drain()
                self._transport.write(CMD_WRITE_CONFIG + payload)
                self._transport.write(CMD_READ_CONFIG)
                readback = self._read_exact(CONFIG_BLOCK_SIZE, "config verification")
                if readback != payload:
                    raise ConfigVerifyError("device did not store the written config")
                self._install_config(block)
                self._transport.write(CMD_START_STREAM)
            except ConnectionError as exc:
                self._die(f"transport lost: {exc}")
                raise SessionDeadError(str(exc)) from exc
            finally:
                self._resume_rx()

    def device_version(self) -> str:
        """Query the firmware version string."""
        with self._config_lock:
            self._check_alive()
            self._pause_rx()
            try:
                self._transport.write(CMD_STOP_STREAM)
                self._drain()
                self._transport.write(CMD_GET_VERSION)
                buf = bytearray()
                deadline = time.monotonic() + self._timeout
                while not buf.endswith(b"\n"):
                    left = deadline - time.monotonic()
                    if left <= 0:
                        raise HostTimeout("no version reply")
                    chunk = self._transport.read(256, timeout=left)
                    buf += chunk
                self._transport.write(CMD_START_STREAM)
                return buf.decode(errors="replace").strip()
            finally:
                self._resume_rx()

    def reboot(self, to_dfu: bool = False) -> None:
        """Send a reboot ('X') or DFU reboot ('Y'); the session stays open."""
        self._check_alive()
        self._transport.write(b"Y" if to_dfu else CMD_REBOOT)

    def start_dump(self, sink, seconds: float | None = None) -> None:
        """Start continuous capture: one record per tick into sink (path or file).

        With ``seconds``, the capture window is exactly that much device
        time anchored at the first captured tick; the writer then stops
        accepting records and wait_dump_complete()/stop_dump() finish it.
        """
        window_us = None if seconds is None else round(seconds * 1e6)
        with self._cond:
            self._check_alive()
            if self._dump is not None:
                raise DumpError("dump already active")
            self._dump = _DumpWriter(sink, self._config, window_us)

    def wait_dump_complete(self, timeout: float | None = None) -> None:
        """Block until a windowed dump has captured its full span."""
        with self._cond:
            if self._dump is None:
                raise DumpError("no dump active")
            if self._dump.window_us is None:
                raise DumpError("dump has no time window to wait for")
            ok = self._cond.wait_for(
                lambda: self._dump is None or self._dump.complete or not self._alive,
                timeout,
            )
            self._check_alive()
            if not ok:
                raise HostTimeout("dump window not filled in time")

    @property
    def dump_start_time(self) -> float | None:
        """Device time of the first captured record, if any yet."""
        with self._cond:
            if self._dump is None or self._dump.first_t_us is None:
                return None
            return self._dump.first_t_us * 1e-6

    def stop_dump(self) -> int:
        """Stop the capture; returns the number of records written."""
        with self._cond:
            writer = self._dump
            self._dump = None
        if writer is None:
            raise DumpError("no dump active")
        return writer.stop()

    def _pause_rx(self) -> None:
        with self._pause_cond:
            self._pause_req = True
            ok = self._pause_cond.wait_for(
                lambda: self._rx_parked or not self._alive, timeout=2.0
            )
            if not self._alive:
                self._pause_req = False
                raise SessionDeadError(f"session is dead: {self._death_reason}")
            if not ok:
                self._pause_req = False
                raise HostTimeout("receiver did not pause")

    def _resume_rx(self) -> None:
        with self._pause_cond:
            self._pause_req = False
            self._pause_cond.notify_all()

    def close(self) -> None:
        """Stop the stream and shut the session down."""
        if self._stop:
            return
        self._stop = True
        if self._dump is not None:
            try:
                self.stop_dump()
            except DumpError:
                pass
        try:
            self._transport.write(CMD_STOP_STREAM)
        except Exception:
            pass
        with self._pause_cond:
            self._pause_cond.notify_all()
        if self._rx.is_alive():
            self._rx.join(timeout=2.0)
        self._die("closed")
        try:
            self._transport.close()
        except Exception:
            pass

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(target, **kwargs) -> Session:
    """Convenience alias for Session.connect."""
    return Session.connect(target, **kwargs)
