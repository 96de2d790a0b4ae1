"""Virtual sensor device: firmware-faithful sampling, commands, transports.

The device models the firmware main loop: every 50 us tick it reads each
enabled sensor 6 times (sub-samples spaced by one 8-channel ADC round of
8 x 1.04 us), quantizes each sub-sample to 10 bits, averages the six
integers rounding half up, and streams one timestamp frame followed by the
per-sensor sample frames.  The timestamp is captured mid-tick, after the
third sub-sample round.

Physical behavior is driven by a LoadScenario plus a NoiseModel; the
sensor transfer functions use the *truth* configs, which normally equal
the virtual EEPROM but can diverge to exercise calibration.

Clock modes:

  accelerated  simulated time only; drive with run_ticks()/run_seconds()
               or let start() free-run as fast as the link accepts
  realtime     start() paces ticks to the wall clock at 20 kHz

Transports: an in-process byte channel (host_channel), a pseudo-terminal
(serve_pty), or a single-client TCP listener (serve_tcp).
"""

from __future__ import annotations

import os
import pty
import select
import socket
import threading
import time
import tty

import numpy as np

from . import __version__
from .protocol import (
    CONFIG_BLOCK_SIZE,
    KIND_CURRENT,
    KIND_VOLTAGE,
    SENSOR_COUNT,
    ProtocolError,
    SensorConfig,
    parse_config,
    serialize_config,
)
from .scenario import Constant, LoadScenario, NoiseModel, SimSetup, default_configs

TICK_US = 50
TICK_RATE_HZ = 1_000_000 // TICK_US  # 20 kHz
SUBSAMPLES = 6
ADC_SAMPLE_US = 1.04  # 25 cycles at 24 MHz
SUBSAMPLE_SPACING_US = 8 * ADC_SAMPLE_US  # one full channel round
TIMESTAMP_PHASE_US = 25  # captured after 3 of 6 sub-sample rounds

VERSION_STRING = f"powersensor-sim {__version__}"

PAIR_COUNT = SENSOR_COUNT // 2


class DeviceConfigError(ValueError):
    """Sensor configuration that the device refuses to boot with."""


def validate_configs(configs) -> tuple[SensorConfig, ...]:
    """Check the 8-record pairing invariant: pair p = (current, voltage)."""
    configs = tuple(configs)
    if len(configs) != SENSOR_COUNT:
        raise DeviceConfigError(f"need {SENSOR_COUNT} sensor records, got {len(configs)}")
    for p in range(PAIR_COUNT):
        cur, vol = configs[2 * p], configs[2 * p + 1]
        if cur.kind != KIND_CURRENT or vol.kind != KIND_VOLTAGE:
            raise DeviceConfigError(
                f"pair {p} must be (current, voltage), got ({cur.kind}, {vol.kind})"
            )
    return configs


def sensor_adc_volts(cfg: SensorConfig, physical):
    """Sensor transfer function: physical amps or bus volts to ADC volts.

    Current sensors sit at vref/2 at zero current; voltage sensors scale
    the bus by their gain.  Works on scalars and numpy arrays.
    """
    if cfg.kind == KIND_CURRENT:
        return cfg.vref / 2.0 + physical * cfg.slope + cfg.offset
    return physical * cfg.slope + cfg.offset


class InProcessChannel:
    """Host endpoint of an in-process byte link to a VirtualDevice.

    Bounded so a free-running accelerated device gets backpressure instead
    of unbounded memory growth.
    """

    def __init__(self, device: "VirtualDevice", maxsize: int = 32 << 20):
        self._device = device
        self._max = maxsize
        self._buf = bytearray()
        self._cond = threading.Condition()
        self._closed = False

    # device side
    def _append(self, data: bytes) -> None:
        with self._cond:
            while len(self._buf) + len(data) > self._max and not self._closed:
                self._cond.wait(0.05)
            if self._closed:
                return
            self._buf += data
            self._cond.notify_all()

    # host side
    def read(self, max_bytes: int, timeout: float | None = None) -> bytes:
        with self._cond:
            if not self._buf and not self._closed:
                self._cond.wait(timeout)
            if self._buf:
                data = bytes(self._buf[:max_bytes])
                del self._buf[:max_bytes]
                self._cond.notify_all()
                return data
            if self._closed:
                raise ConnectionError("channel closed")
            return b""

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionError("channel closed")
        self._device.feed(data)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class VirtualDevice:
    """Software stand-in for the sensor hardware.

    Boots idle (not streaming) with the clock at zero.  Thread-safe: the
    tick driver, transport readers, and inspection all synchronize on one
    internal lock.
    """

    def __init__(
        self,
        configs=None,
        scenario: LoadScenario | None = None,
        noise: NoiseModel | None = None,
        mode: str = "accelerated",
        *,
        truth=None,
        eeprom_path: str | None = None,
    ):
        if mode not in ("accelerated", "realtime"):
            raise DeviceConfigError(f"mode must be accelerated or realtime, got {mode!r}")
        if scenario is None:
            scenario = Constant(1.0, 12.0)
        configs = validate_configs(configs if configs is not None else default_configs())
        self._truth = validate_configs(truth) if truth is not None else configs
        self._eeprom = configs
        self._eeprom_path = eeprom_path
        if eeprom_path and os.path.exists(eeprom_path):
            self._eeprom = parse_config(open(eeprom_path, "rb").read())
        self.scenario = scenario
        self.noise = noise if noise is not None else NoiseModel()
        self.mode = mode

        self._lock = threading.Lock()
        self._inbox = bytearray()
        self._inbox_lock = threading.Lock()
        self._rng = np.random.default_rng(self.noise.seed)
        self._ticks_done = 0
        self._streaming = False
        self._dfu = False
        self._marker_pending = 0
        self._generation = 0
        self._bytes_emitted = 0
        self._frame_bytes_emitted = 0
        self._unknown_commands = 0
        self._write_payload: bytearray | None = None

        self._sink = None  # callable(bytes), called with the lock held
        self._channel: InProcessChannel | None = None
        self._stop_event = threading.Event()
        self._driver: threading.Thread | None = None
        self._threads: list[threading.Thread] = []
        self._pty_master: int | None = None
        self._pty_slave: int | None = None
        self._tcp_server: socket.socket | None = None
        self._tcp_conn: socket.socket | None = None

    @classmethod
    def from_setup(cls, setup: SimSetup) -> "VirtualDevice":
        return cls(
            configs=setup.configs,
            scenario=setup.scenario,
            noise=setup.noise,
            mode=setup.mode,
            truth=setup.truth,
            eeprom_path=setup.eeprom_path,
        )

    # -- inspection (read-only) ----------------------------------------

    @property
    def ticks_done(self) -> int:
        return self._ticks_done

    @property
    def clock_micros(self) -> int:
        return self._ticks_done * TICK_US

    @property
    def streaming(self) -> bool:
        return self._streaming

    @property
    def dfu_mode(self) -> bool:
        return self._dfu

    @property
    def bytes_emitted(self) -> int:
        return self._bytes_emitted

    @property
    def frame_bytes_emitted(self) -> int:
        """Streaming payload only, excluding command replies."""
        return self._frame_bytes_emitted

    @property
    def unknown_commands(self) -> int:
        return self._unknown_commands

    @property
    def eeprom(self) -> tuple[SensorConfig, ...]:
        return self._eeprom

    # -- transports ------------------------------------------------------

    def host_channel(self) -> InProcessChannel:
        """Create (once) and return the in-process host endpoint."""
        with self._lock:
            if self._channel is None:
                self._channel = InProcessChannel(self)
                self._sink = self._channel._append
            return self._channel

    def serve_pty(self) -> str:
        """Expose the device on a new pseudo-terminal; returns the tty path."""
        master, slave = pty.openpty()
        tty.setraw(master)
        tty.setraw(slave)
        self._pty_master = master
        self._pty_slave = slave  # kept open so the pty outlives host reconnects
        path = os.ttyname(slave)

        def send(data: bytes) -> None:
            view = memoryview(data)
            while view:
                try:
                    n = os.write(master, view)
                except OSError:
                    self._streaming = False
                    return
                view = view[n:]

        self._sink = send
        reader = threading.Thread(target=self._pty_reader, args=(master,), daemon=True)
        reader.start()
        self._threads.append(reader)
        return path

    def _pty_reader(self, master: int) -> None:
        while not self._stop_event.is_set():
            ready, _, _ = select.select([master], [], [], 0.1)
            if not ready:
                continue
            try:
                data = os.read(master, 4096)
            except OSError:
                time.sleep(0.05)
                continue
            if data:
                self.feed(data)

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Listen for one raw-byte TCP client at a time; returns (host, port)."""
        server = socket.create_server((host, port))
        self._tcp_server = server

        def send(data: bytes) -> None:
            conn = self._tcp_conn
            if conn is None:
                return
            try:
                conn.sendall(data)
            except OSError:
                self._streaming = False

        self._sink = send
        acceptor = threading.Thread(target=self._tcp_accept_loop, args=(server,), daemon=True)
        acceptor.start()
        self._threads.append(acceptor)
        return server.getsockname()[:2]

    def _tcp_accept_loop(self, server: socket.socket) -> None:
        server.settimeout(0.2)
        while not self._stop_event.is_set():
            try:
                conn, _ = server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._tcp_conn = conn
            try:
                while not self._stop_event.is_set():
                    data = conn.recv(4096)
                    if not data:
                        break
                    self.feed(data)
            except OSError:
                pass
            finally:
                self._tcp_conn = None
                with self._lock:
                    self._streaming = False  # sole client left
                conn.close()

    # -- command handling --------------------------------------------------

    def feed(self, data: bytes) -> None:
        """Accept host-to-device bytes (commands and config payloads).

        Never blocks on the tick loop: bytes are queued and serviced either
        immediately or at the next batch boundary.
        """
        with self._inbox_lock:
            self._inbox += data
        if self._lock.acquire(blocking=False):
            try:
                self._service_inbox_locked()
            finally:
                self._lock.release()

    def _service_inbox_locked(self) -> None:
        with self._inbox_lock:
            data = bytes(self._inbox)
            self._inbox.clear()
        if not data:
            return
        if self._dfu:
            return  # simulated DFU bootloader: dead to the world
        pos = 0
        while pos < len(data):
            if self._write_payload is not None:
                need = CONFIG_BLOCK_SIZE - len(self._write_payload)
                self._write_payload += data[pos : pos + need]
                pos += need
                if len(self._write_payload) == CONFIG_BLOCK_SIZE:
                    self._apply_config_write(bytes(self._write_payload))
                    self._write_payload = None
                continue
            cmd = data[pos : pos + 1]
            pos += 1
            if cmd == b"S":
                self._streaming = True
            elif cmd == b"T":
                self._streaming = False
            elif cmd == b"R":
                self._send_locked(serialize_config(self._eeprom))
            elif cmd == b"W":
                self._write_payload = bytearray()
            elif cmd == b"M":
                self._marker_pending += 1
            elif cmd == b"V":
                self._send_locked(VERSION_STRING.encode() + b"\n")
            elif cmd == b"X":
                self._ticks_done = 0
                self._streaming = False
                self._marker_pending = 0
                self._rng = np.random.default_rng(self.noise.seed)
                self._generation += 1
            elif cmd == b"Y":
                self._streaming = False
                self._dfu = True
                with self._inbox_lock:
                    self._inbox.clear()
                return
            else:
                self._unknown_commands += 1

    def _apply_config_write(self, payload: bytes) -> None:
        try:
            block = parse_config(payload)
        except ProtocolError:
            self._unknown_commands += 1
            return
        self._eeprom = block
        if self._eeprom_path:
            with open(self._eeprom_path, "wb") as fh:
                fh.write(payload)

    def _send_locked(self, data: bytes) -> None:
        self._bytes_emitted += len(data)
        if self._sink is not None:
            self._sink(data)

    # -- sampling ------------------------------------------------------------

    def _emit_frames_locked(self, n: int) -> None:
        """Advance the clock n ticks, synthesizing and sending frames."""
        i0 = self._ticks_done
        tick_idx = np.arange(i0, i0 + n, dtype=np.int64)
        enabled = [i for i in range(SENSOR_COUNT) if self._eeprom[i].enabled]
        live_pairs = sum(1 for p in range(PAIR_COUNT) if self._eeprom[2 * p].enabled)
        share = 1.0 / live_pairs if live_pairs else 0.0

        noisy = self.noise.current_rms > 0 or self.noise.voltage_rms > 0
        # one tick-major draw for all 8 channels keeps the stream identical
        # no matter how the run is batched
        gauss = self._rng.standard_normal((n, SENSOR_COUNT, SUBSAMPLES)) if noisy else None

        ts = ((tick_idx * TICK_US + TIMESTAMP_PHASE_US) % 1024).astype(np.uint16)
        out = np.empty((n, 2 + 2 * len(enabled)), dtype=np.uint8)
        out[:, 0] = 0xF8 | (ts >> 7).astype(np.uint8)
        out[:, 1] = (ts & 0x7F).astype(np.uint8)

        marks = 0
        if self._marker_pending and 0 in enabled and self._streaming:
            marks = min(self._marker_pending, n)
            self._marker_pending -= marks

        base_us = tick_idx.astype(np.float64) * TICK_US
        sub_us = np.arange(SUBSAMPLES) * SUBSAMPLE_SPACING_US
        col = 2
        for c in enabled:
            truth = self._truth[c]
            t_us = base_us[:, None] + sub_us[None, :] + c * ADC_SAMPLE_US
            if truth.kind == KIND_CURRENT:
                physical = self.scenario.current_at_us(t_us) * share
                sigma = self.noise.current_rms * abs(truth.slope)
            else:
                physical = self.scenario.voltage_at_us(t_us)
                sigma = self.noise.voltage_rms * abs(truth.slope)
            adc = sensor_adc_volts(truth, physical)
            if gauss is not None and sigma > 0:
                adc = adc + gauss[:, c, :] * sigma
            levels = np.floor((adc / truth.vref) * 1023.0 + 0.5)  # round half up
            np.clip(levels, 0.0, 1023.0, out=levels)
            avg = (levels.astype(np.int64).sum(axis=1) + 3) // 6  # half-up integer mean
            first = (0x80 | (c << 4) | (avg >> 7)).astype(np.uint8)
            if c == 0 and marks:
                first[:marks] |= 0x08
            out[:, col] = first
            out[:, col + 1] = (avg & 0x7F).astype(np.uint8)
            col += 2

        self._ticks_done += n
        data = out.tobytes()
        self._frame_bytes_emitted += len(data)
        self._send_locked(data)

    def run_ticks(self, n: int, batch: int = 32768) -> None:
        """Advance the device n ticks (accelerated driving).

        Queued commands are serviced at every batch boundary, so e.g. a
        marker queued between run_ticks calls lands on the next tick.
        """
        left = n
        while left > 0:
            k = min(left, batch)
            with self._lock:
                self._service_inbox_locked()
                if self._dfu:
                    return
                if self._streaming:
                    self._emit_frames_locked(k)
                else:
                    self._ticks_done += k
            left -= k
        with self._lock:
            self._service_inbox_locked()

    def run_seconds(self, seconds: float) -> None:
        self.run_ticks(round(seconds * TICK_RATE_HZ))

    # -- drivers ----------------------------------------------------------

    def start(self) -> None:
        """Run the tick loop on a background thread (paced by self.mode)."""
        if self._driver is not None:
            return
        self._stop_event.clear()
        target = self._drive_realtime if self.mode == "realtime" else self._drive_accelerated
        self._driver = threading.Thread(target=target, daemon=True)
        self._driver.start()

    def _drive_accelerated(self) -> None:
        while not self._stop_event.is_set():
            with self._lock:
                self._service_inbox_locked()
                streaming = self._streaming and not self._dfu
                if streaming:
                    self._emit_frames_locked(256)
            if not streaming:
                time.sleep(0.002)

    def _drive_realtime(self) -> None:
        anchor = time.monotonic()
        anchor_ticks = self._ticks_done
        generation = self._generation
        while not self._stop_event.is_set():
            due = 0
            with self._lock:
                self._service_inbox_locked()
                if self._generation != generation:
                    generation = self._generation
                    anchor = time.monotonic()
                    anchor_ticks = self._ticks_done
                target = anchor_ticks + int((time.monotonic() - anchor) * TICK_RATE_HZ)
                due = min(target - self._ticks_done, 2048)
                if due > 0 and not self._dfu:
                    if self._streaming:
                        self._emit_frames_locked(due)
                    else:
                        self._ticks_done += due  # clock runs while idle
            if due <= 0:
                time.sleep(0.002)

    def stop(self) -> None:
        self._stop_event.set()
        if self._driver is not None:
            self._driver.join(timeout=2.0)
            self._driver = None

    def close(self) -> None:
        self.stop()
        if self._channel is not None:
            self._channel.close()
        for sock in (self._tcp_conn, self._tcp_server):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        for fd in (self._pty_master, self._pty_slave):
            if fd is not None:
                try:
                    os.close(fd)
                except OSError:
                    pass
        self._pty_master = self._pty_slave = None
        self._tcp_conn = self._tcp_server = None
