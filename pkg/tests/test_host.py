"""Host library: session lifecycle, conversion, energy, dumps, markers."""

import math
import socket
import threading

import pytest

from powersensor.device import TICK_US, VirtualDevice
from powersensor.host import (
    DumpError,
    HostTimeout,
    OrderingError,
    Session,
    SessionDeadError,
    TransportError,
    ZeroIntervalError,
    conversion_table,
    joules,
    raw_to_physical,
    seconds,
    watts,
)
from powersensor.protocol import SensorConfig
from powersensor.scenario import Constant, SquareWave, ZERO_NOISE, default_configs
from tests.test_device import one_pair_configs


def make_session(device, **kwargs):
    kwargs.setdefault("wait_first_tick", False)
    return Session.connect(device, **kwargs)


def run_and_wait(device, session, n_ticks, timeout=30.0):
    """Drive the device and wait until the receiver caught up."""
    before = session.read_state().tick_count
    device.run_ticks(n_ticks)
    # the last emitted tick stays unfinalized until the next timestamp
    with session._cond:
        session._cond.wait_for(
            lambda: session._tick_count >= before + n_ticks - 1, timeout
        )


class TestRawToPhysical:
    def test_midscale_current(self):
        cfg = SensorConfig("i", 3.3, 0.165, 0.0, "current")
        # (512/1023 * 3.3 - 1.65) / 0.165, with wire-quantized float32 params
        assert raw_to_physical(512, cfg) == pytest.approx(0.0097752, abs=1e-6)

    def test_zero_level_voltage(self):
        cfg = SensorConfig("u", 3.3, 0.25, 0.0, "voltage")
        assert raw_to_physical(0, cfg) == 0.0

    def test_full_scale_voltage(self):
        cfg = SensorConfig("u", 3.3, 0.25, 0.0, "voltage")
        assert raw_to_physical(1023, cfg) == pytest.approx(13.2, abs=1e-4)

    def test_inverts_device_transfer_within_half_lsb(self):
        from powersensor.device import sensor_adc_volts

        cfg = SensorConfig("i", 3.3, 0.165, 0.0, "current")
        half_lsb_amps = 3.3 / 1023 / 2 / 0.165
        for amps in (-8.0, -1.0, 0.0, 0.5, 3.3, 8.0):
            adc = sensor_adc_volts(cfg, amps)
            level = math.floor(adc / 3.3 * 1023 + 0.5)
            back = raw_to_physical(level, cfg)
            assert abs(back - amps) <= half_lsb_amps * (1 + 1e-9)

    def test_conversion_table_matches_pointwise(self):
        cfg = SensorConfig("u", 3.3, 0.8, 0.01, "voltage")
        table = conversion_table(cfg)
        assert table[700] == raw_to_physical(700, cfg)
        assert len(table) == 1024


class TestConnect:
    def test_connect_reads_eight_sensor_configs(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            assert len(sess.config) == 8
            assert sess.config == default_configs()
            assert dev.streaming

    def test_connect_waits_for_first_tick_with_driver(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        dev.start()
        try:
            with Session.connect(dev, wait_first_tick=True) as sess:
                assert sess.read_state().tick_count >= 1
        finally:
            dev.close()

    def test_dead_tcp_port_is_a_transport_error(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        with pytest.raises(TransportError):
            Session.connect(f"tcp:127.0.0.1:{port}")

    def test_silent_endpoint_times_out(self):
        server = socket.create_server(("127.0.0.1", 0))
        port = server.getsockname()[1]
        accepted = []

        def accept():
            conn, _ = server.accept()
            accepted.append(conn)  # keep open, never reply

        thread = threading.Thread(target=accept, daemon=True)
        thread.start()
        try:
            with pytest.raises(HostTimeout):
                Session.connect(f"tcp:127.0.0.1:{port}", connect_timeout=1.0)
        finally:
            server.close()
            for conn in accepted:
                conn.close()

    def test_device_version_query(self):
        from powersensor.device import VERSION_STRING

        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            assert sess.device_version() == VERSION_STRING


class TestReadState:
    def test_identical_snapshots_without_new_samples(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 5)
            a = sess.read_state()
            b = sess.read_state()
            assert a == b

    def test_dead_session_raises_distinctly(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        sess = make_session(dev)
        sess.close()
        with pytest.raises(SessionDeadError):
            sess.read_state()

    def test_snapshot_never_mixes_ticks(self):
        # with the load split across pairs, all four pair currents are equal
        # within any single tick; a torn snapshot would mix wave phases
        dev = VirtualDevice(
            default_configs(), SquareWave(0.2, 2.0, 1000.0, 0.5, 12.0), ZERO_NOISE
        )
        sess = make_session(dev)
        stop = threading.Event()

        def driver():
            while not stop.is_set():
                dev.run_ticks(50)

        thread = threading.Thread(target=driver)
        thread.start()
        try:
            seen = 0
            while seen < 200:
                state = sess.read_state()
                if state.tick_count == 0:
                    continue
                amps = [p.amps for p in state.pairs if p is not None]
                assert len(amps) == 4
                assert max(amps) - min(amps) < 1e-12
                seen += 1
        finally:
            stop.set()
            thread.join()
            sess.close()
            dev.close()


class TestIntervalMath:
    def test_same_snapshot_is_zero(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 3)
            a = sess.read_state()
            assert joules(a, a) == 0.0
            assert seconds(a, a) == 0.0
            with pytest.raises(ZeroIntervalError):
                watts(a, a)

    def test_constant_load_two_seconds(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 2)
            a = sess.read_state()
            run_and_wait(dev, sess, 40000)
            b = sess.read_state()
            assert seconds(a, b) == 2.0
            assert joules(a, b) == pytest.approx(24.0, rel=0.01)
            assert watts(a, b) == pytest.approx(12.0, rel=0.01)
            assert watts(a, b) * seconds(a, b) == joules(a, b)

    def test_square_wave_whole_periods(self):
        dev = VirtualDevice(
            one_pair_configs(), SquareWave(0.0, 2.0, 100.0, 0.5, 12.0), ZERO_NOISE
        )
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 2)
            a = sess.read_state()
            run_and_wait(dev, sess, 40000)  # exactly 200 periods
            b = sess.read_state()
            assert joules(a, b) == pytest.approx(24.0, rel=0.02)

    def test_ordering_error(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 3)
            a = sess.read_state()
            run_and_wait(dev, sess, 3)
            b = sess.read_state()
            with pytest.raises(OrderingError):
                joules(b, a)

    def test_energy_additivity_telescopes_exactly(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 2)
            snaps = [sess.read_state()]
            for _ in range(5):
                run_and_wait(dev, sess, 4000)
                snaps.append(sess.read_state())
            chained = sum(joules(a, b) for a, b in zip(snaps, snaps[1:]))
            assert chained == joules(snaps[0], snaps[-1])

    def test_time_reconstruction_is_tick_exact(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 2)
            a = sess.read_state()
            run_and_wait(dev, sess, 100_000)  # spans many 1024 us wraps
            b = sess.read_state()
            assert b.device_time_us - a.device_time_us == 100_000 * TICK_US


def test_timestamp_unwrapping_is_exact_over_2_to_20_ticks():
    # pure unwrap arithmetic at full scale: raw values wrap every 1024 us
    last = 25
    total_us = 0
    for i in range(1, 2**20):
        raw = (i * TICK_US + 25) % 1024
        total_us += (raw - last) % 1024
        last = raw
    assert total_us == (2**20 - 1) * TICK_US


class TestDump:
    def test_one_line_per_tick(self, tmp_path):
        path = tmp_path / "out.dump"
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            sess.start_dump(path)
            run_and_wait(dev, sess, 20_001)
            count = sess.stop_dump()
        lines = path.read_text().splitlines()
        data = [l for l in lines if l.startswith("S ")]
        assert count == len(data) == 20_000

    def test_marker_ordering_and_disabled_columns(self, tmp_path):
        path = tmp_path / "out.dump"
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            sess.start_dump(path)
            run_and_wait(dev, sess, 10)
            sess.mark("A")
            run_and_wait(dev, sess, 10)
            sess.mark("B")
            run_and_wait(dev, sess, 10)
            sess.stop_dump()
        data = [l for l in path.read_text().splitlines() if l.startswith("S ")]
        a_line = next(i for i, l in enumerate(data) if l.endswith(" MA"))
        b_line = next(i for i, l in enumerate(data) if l.endswith(" MB"))
        assert a_line < b_line
        # disabled pairs 1-3 print '- - -'
        assert " - - - - - - - - - " in data[0]

    def test_every_line_near_twelve_watts(self, tmp_path):
        path = tmp_path / "out.dump"
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            sess.start_dump(path)
            run_and_wait(dev, sess, 1000)
            sess.stop_dump()
        half_lsb_watts = 12.0 * (3.3 / 1023 / 2 / 0.165)
        for line in path.read_text().splitlines():
            if not line.startswith("S "):
                continue
            total = float(line.split()[-1])
            assert abs(total - 12.0) <= half_lsb_watts + 1e-3

    def test_sink_failure_surfaces_on_stop(self):
        class BadSink:
            def write(self, data):
                if data.startswith("S "):
                    raise OSError("disk full")

            def flush(self):
                pass

        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            sess.start_dump(BadSink())
            run_and_wait(dev, sess, 10)
            with pytest.raises(DumpError, match="disk full"):
                sess.stop_dump()

    def test_double_start_rejected(self, tmp_path):
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            sess.start_dump(tmp_path / "a.dump")
            with pytest.raises(DumpError):
                sess.start_dump(tmp_path / "b.dump")
            sess.stop_dump()


class TestMarkers:
    def test_unmatched_device_marker_shows_placeholder(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            dev.feed(b"M")  # marker without a host-side character
            run_and_wait(dev, sess, 5)
            assert [c for _, c in sess.marker_events] == ["?"]

    def test_mark_on_dead_session_errors(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        sess = make_session(dev)
        sess.close()
        with pytest.raises(SessionDeadError):
            sess.mark("A")

    def test_marker_character_validated(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            with pytest.raises(ValueError):
                sess.mark("ab")
            with pytest.raises(ValueError):
                sess.mark(" ")


class TestConfig:
    def test_get_after_connect_is_boot_block(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            assert sess.get_config() == default_configs()

    def test_set_then_get_round_trips(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            block = list(sess.get_config())
            block[0] = SensorConfig("pcie12v-I", 3.0, 0.165, 0.0, "current", True)
            sess.set_config(block)
            assert sess.get_config()[0].vref == pytest.approx(3.0)
            assert dev.eeprom[0].vref == pytest.approx(3.0)

    def test_invalid_block_rejected_before_transmission(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        with make_session(dev) as sess:
            block = list(sess.get_config())
            block[0] = SensorConfig("x", 3.3, 0.25, 0.0, "voltage", True)  # breaks pairing
            writes_before = dev.bytes_emitted
            with pytest.raises(Exception, match="pair 0"):
                sess.set_config(block)
            assert dev.bytes_emitted == writes_before

    def test_conversions_use_new_block_immediately(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            run_and_wait(dev, sess, 2)
            before = sess.read_state().pairs[0].amps
            block = list(sess.get_config())
            block[0] = SensorConfig("rail-I", 3.3, 0.33, 0.0, "current", True)
            sess.set_config(block)
            run_and_wait(dev, sess, 3)
            after = sess.read_state().pairs[0].amps
            # device truth still produces the 1 A level; host now halves it
            assert after == pytest.approx(before / 2, rel=1e-6)

    def test_set_config_while_streaming_under_driver(self):
        dev = VirtualDevice(default_configs(), Constant(1.0, 12.0), ZERO_NOISE)
        dev.start()
        try:
            with Session.connect(dev, wait_first_tick=True) as sess:
                block = list(sess.get_config())
                block[2] = SensorConfig("eps12v0-I", 3.3, 0.2, 0.0, "current", True)
                sess.set_config(block)
                sess.wait_ticks(5, timeout=5)
                assert sess.get_config()[2].slope == pytest.approx(0.2)
        finally:
            dev.close()


class TestTransports:
    def test_tcp_round_trip(self):
        dev = VirtualDevice(default_configs(), Constant(4.0, 12.0), ZERO_NOISE)
        host, port = dev.serve_tcp()
        dev.start()
        try:
            with Session.connect(f"tcp:{host}:{port}", wait_first_tick=True) as sess:
                sess.wait_ticks(100, timeout=5)
                state = sess.read_state()
                assert state.dropped_bytes == 0
                assert state.total_watts == pytest.approx(48.0, rel=0.01)
        finally:
            dev.close()

    def test_pty_round_trip(self):
        dev = VirtualDevice(default_configs(), Constant(4.0, 12.0), ZERO_NOISE)
        path = dev.serve_pty()
        dev.start()
        try:
            with Session.connect(path, wait_first_tick=True) as sess:
                sess.wait_ticks(100, timeout=5)
                state = sess.read_state()
                assert state.dropped_bytes == 0
                assert state.total_watts == pytest.approx(48.0, rel=0.01)
        finally:
            dev.close()


class TestCollect:
    def test_collect_levels_shape_and_values(self):
        dev = VirtualDevice(one_pair_configs(), Constant(0.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            result = {}

            def collect():
                result["levels"] = sess.collect_levels(100, timeout=10)

            thread = threading.Thread(target=collect)
            thread.start()
            dev.run_ticks(105)
            thread.join(timeout=10)
            levels = result["levels"]
            assert levels.shape == (100, 8)
            assert (levels[:, 0] == 512).all()
            assert (levels[:, 2] == -1).all()  # disabled sensor


class TestStreamRobustness:
    def test_samples_before_first_timestamp_are_not_ghosted(self):
        """A foreign mid-tick join must not leak stale samples into tick 1."""
        from powersensor.protocol import SampleFrame, encode_sample

        dev = VirtualDevice(one_pair_configs(), Constant(0.0, 12.0), ZERO_NOISE)
        with make_session(dev) as sess:
            # inject a stray pre-timestamp frame for a sensor the device
            # never streams (disabled pair 1), then run real ticks
            stray = encode_sample(SampleFrame(2, False, 700))
            dev._send_locked(stray)
            run_and_wait(dev, sess, 5)
            state = sess.read_state()
            assert state.levels[2] is None  # stray sample was dropped
            assert state.levels[0] == 512
