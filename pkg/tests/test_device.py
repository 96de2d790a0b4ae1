"""Virtual device: sampling math, command set, determinism, noise model."""

import math
import os

import numpy as np
import pytest

from powersensor.device import (
    CONFIG_BLOCK_SIZE,
    TICK_US,
    VERSION_STRING,
    DeviceConfigError,
    VirtualDevice,
    sensor_adc_volts,
)
from powersensor.protocol import (
    SampleFrame,
    SensorConfig,
    TimestampFrame,
    decode_stream,
    parse_config,
    serialize_config,
)
from powersensor.scenario import Constant, NoiseModel, SquareWave, Trace, ZERO_NOISE, default_configs


def one_pair_configs(slope=0.165, gain=0.25, vref=3.3, offset_i=0.0):
    """Single enabled 12 V pair on sensors 0/1; the rest disabled."""
    records = [
        SensorConfig("rail-I", vref, slope, offset_i, "current", True),
        SensorConfig("rail-U", vref, gain, 0.0, "voltage", True),
    ]
    for i in range(2, 8):
        kind = "current" if i % 2 == 0 else "voltage"
        s = slope if kind == "current" else gain
        records.append(SensorConfig(f"off{i}", vref, s, 0.0, kind, False))
    return tuple(records)


def drain(channel, limit=1 << 30):
    chunks = []
    total = 0
    while total < limit:
        data = channel.read(1 << 20, timeout=0.0)
        if not data:
            break
        chunks.append(data)
        total += len(data)
    return b"".join(chunks)


def stream_ticks(device, n):
    """Start streaming, run n ticks, return the decoded events."""
    channel = device.host_channel()
    channel.write(b"S")
    events = []
    remaining = n
    while remaining > 0:
        step = min(remaining, 20000)
        device.run_ticks(step)
        ev, state = decode_stream(drain(channel))
        assert state.pending is None and state.discarded == 0
        events.extend(ev)
        remaining -= step
    return events


class TestBoot:
    def test_boots_idle_with_clock_at_zero(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        assert not dev.streaming
        assert dev.clock_micros == 0

    def test_rejects_two_voltage_sensors_in_a_pair(self):
        records = list(default_configs())
        records[0] = SensorConfig("bad", 3.3, 0.25, 0.0, "voltage", True)
        with pytest.raises(DeviceConfigError, match="pair 0"):
            VirtualDevice(tuple(records), Constant(1, 12), ZERO_NOISE)

    def test_million_ticks_advance_clock_to_50_seconds(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        dev.run_ticks(1_000_000)
        assert dev.clock_micros == 50_000_000


class TestSensorTransfer:
    def test_zero_current_sits_at_midscale(self):
        cfg = SensorConfig("i", 3.3, 0.165, 0.0, "current")
        assert sensor_adc_volts(cfg, 0.0) == pytest.approx(1.65, abs=1e-6)

    def test_eight_amps(self):
        cfg = SensorConfig("i", 3.3, 0.165, 0.0, "current")
        assert sensor_adc_volts(cfg, 8.0) == pytest.approx(2.97, abs=1e-6)

    def test_voltage_gain(self):
        cfg = SensorConfig("u", 3.3, 0.25, 0.0, "voltage")
        assert sensor_adc_volts(cfg, 12.0) == pytest.approx(3.0, abs=1e-6)


class TestTick:
    def test_zero_current_quantizes_to_512(self):
        # midscale is level 511.5; ties round half up
        dev = VirtualDevice(one_pair_configs(), Constant(0.0, 12.0), ZERO_NOISE)
        events = stream_ticks(dev, 5)
        levels = [e.level for e in events if isinstance(e, SampleFrame) and e.sensor_index == 0]
        assert levels == [512] * 5

    def test_zero_volts_quantizes_to_zero(self):
        dev = VirtualDevice(one_pair_configs(), Constant(0.0, 0.0), ZERO_NOISE)
        events = stream_ticks(dev, 3)
        levels = [e.level for e in events if isinstance(e, SampleFrame) and e.sensor_index == 1]
        assert levels == [0] * 3

    def test_tick_emits_timestamp_plus_one_frame_per_enabled_sensor(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        channel = dev.host_channel()
        channel.write(b"S")
        dev.run_ticks(1)
        data = drain(channel)
        assert len(data) == 2 + 2 * 8

    def test_disabled_sensors_are_skipped(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1, 12), ZERO_NOISE)
        events = stream_ticks(dev, 4)
        indices = {e.sensor_index for e in events if isinstance(e, SampleFrame)}
        assert indices == {0, 1}
        assert sum(isinstance(e, TimestampFrame) for e in events) == 4

    def test_timestamps_follow_mid_tick_clock_mod_1024(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1, 12), ZERO_NOISE)
        events = stream_ticks(dev, 50)
        stamps = [e.micros for e in events if isinstance(e, TimestampFrame)]
        assert stamps == [(i * TICK_US + 25) % 1024 for i in range(50)]

    def test_full_scale_clamps(self):
        dev = VirtualDevice(one_pair_configs(), Constant(100.0, 12.0), ZERO_NOISE)
        events = stream_ticks(dev, 2)
        levels = [e.level for e in events if isinstance(e, SampleFrame) and e.sensor_index == 0]
        assert levels == [1023, 1023]

    def test_negative_rail_clamps_to_zero(self):
        dev = VirtualDevice(one_pair_configs(), Constant(-100.0, 12.0), ZERO_NOISE)
        events = stream_ticks(dev, 2)
        levels = [e.level for e in events if isinstance(e, SampleFrame) and e.sensor_index == 0]
        assert levels == [0, 0]


class TestCommands:
    def make(self, **kwargs):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE, **kwargs)
        return dev, dev.host_channel()

    def test_version_reply(self):
        dev, ch = self.make()
        ch.write(b"V")
        assert ch.read(256, 0.1) == VERSION_STRING.encode() + b"\n"

    def test_read_config_replies_224_bytes(self):
        dev, ch = self.make()
        ch.write(b"R")
        data = ch.read(1024, 0.1)
        assert len(data) == CONFIG_BLOCK_SIZE == 224
        assert parse_config(data) == default_configs()

    def test_eeprom_write_read_round_trip(self):
        dev, ch = self.make()
        block = list(default_configs())
        block[0] = SensorConfig("custom-I", 3.0, 0.2, 0.01, "current", True)
        payload = serialize_config(block)
        ch.write(b"W" + payload)
        ch.write(b"R")
        assert ch.read(1024, 0.1) == payload

    def test_write_payload_survives_fragmentation(self):
        dev, ch = self.make()
        payload = serialize_config(default_configs())
        ch.write(b"W" + payload[:100])
        ch.write(payload[100:150])
        ch.write(payload[150:] + b"R")
        assert ch.read(1024, 0.1) == payload

    def test_start_stop_toggle_streaming(self):
        dev, ch = self.make()
        ch.write(b"S")
        assert dev.streaming
        ch.write(b"T")
        assert not dev.streaming

    def test_reboot_resets_clock_and_streaming(self):
        dev, ch = self.make()
        ch.write(b"S")
        dev.run_ticks(100)
        ch.write(b"X")
        assert dev.clock_micros == 0
        assert not dev.streaming
        drain(ch)

    def test_dfu_halts_the_stream_permanently(self):
        dev, ch = self.make()
        ch.write(b"S")
        dev.run_ticks(2)
        drain(ch)
        ch.write(b"Y")
        assert dev.dfu_mode
        ch.write(b"S")  # bootloader ignores everything
        dev.run_ticks(5)
        assert drain(ch) == b""

    def test_unknown_commands_ignored_and_counted(self):
        dev, ch = self.make()
        ch.write(b"??!")
        assert dev.unknown_commands == 3
        ch.write(b"V")
        assert ch.read(256, 0.1).endswith(b"\n")

    def test_eeprom_backing_file(self, tmp_path):
        path = str(tmp_path / "eeprom.bin")
        dev, ch = self.make(eeprom_path=path)
        block = list(default_configs())
        block[3] = SensorConfig("persist-U", 3.3, 0.5, 0.0, "voltage", True)
        ch.write(b"W" + serialize_config(block))
        assert os.path.getsize(path) == 224
        dev2 = VirtualDevice(
            default_configs(), Constant(1, 12), ZERO_NOISE, eeprom_path=path
        )
        assert dev2.eeprom[3].name == "persist-U"


class TestMarkers:
    def test_markers_land_on_sensor_zero_one_per_tick(self):
        dev = VirtualDevice(one_pair_configs(), Constant(1, 12), ZERO_NOISE)
        ch = dev.host_channel()
        ch.write(b"S")
        dev.run_ticks(3)
        ch.write(b"MMM")
        dev.run_ticks(5)
        events, _ = decode_stream(drain(ch))
        samples = [e for e in events if isinstance(e, SampleFrame)]
        marked = [e for e in samples if e.marker]
        assert all(e.sensor_index == 0 for e in marked)
        zero_frames = [e for e in samples if e.sensor_index == 0]
        # queued markers drain one per tick starting at the next tick
        assert [e.marker for e in zero_frames] == [False] * 3 + [True] * 3 + [False] * 2


class TestDeterminism:
    def test_identical_seed_and_batching_independent(self):
        kwargs = dict(
            configs=default_configs(),
            scenario=SquareWave(0.5, 2.0, 100.0, 0.5, 12.0),
            noise=NoiseModel(current_rms=0.115, voltage_rms=0.01, seed=7),
        )
        out = []
        for splits in ((1000,), (37, 400, 563)):
            dev = VirtualDevice(**kwargs)
            ch = dev.host_channel()
            ch.write(b"S")
            chunks = []
            for n in splits:
                dev.run_ticks(n)
                chunks.append(drain(ch))
            out.append(b"".join(chunks))
        assert out[0] == out[1]

    def test_different_seed_differs(self):
        def run(seed):
            dev = VirtualDevice(
                default_configs(), Constant(1, 12), NoiseModel(0.115, 0.0, seed)
            )
            ch = dev.host_channel()
            ch.write(b"S")
            dev.run_ticks(50)
            return drain(ch)

        assert run(1) != run(2)


class TestRateAndBandwidth:
    def test_frame_counts_match_ticks(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        events = stream_ticks(dev, 2000)
        stamps = sum(isinstance(e, TimestampFrame) for e in events)
        samples = sum(isinstance(e, SampleFrame) for e in events)
        assert stamps == 2000
        assert samples == 2000 * 8

    def test_wire_rate_fits_usb_full_speed(self):
        dev = VirtualDevice(default_configs(), Constant(1, 12), ZERO_NOISE)
        ch = dev.host_channel()
        ch.write(b"S")
        dev.run_ticks(20000)  # one device-second
        payload = len(drain(ch))
        bits_per_second = payload * 8
        assert bits_per_second == 2_880_000
        assert bits_per_second < 12_000_000


class TestNoiseStatistics:
    def test_power_noise_scales_with_sqrt6_and_peak_to_peak_is_sane(self):
        n = 131072
        dev = VirtualDevice(
            one_pair_configs(),
            Constant(0.0, 12.0),
            NoiseModel(current_rms=0.115, voltage_rms=0.0, seed=2024),
        )
        events = stream_ticks(dev, n)
        lv = np.array(
            [e.level for e in events if isinstance(e, SampleFrame) and e.sensor_index == 0]
        )
        amps = (lv / 1023.0 * 3.3 - 1.65) / 0.165
        watts = 12.0 * amps
        sigma_expected = 12.0 * 0.115 / math.sqrt(6)
        sigma = watts.std()
        assert sigma == pytest.approx(sigma_expected, rel=0.10)
        # extremes of 128 k near-Gaussian samples land within [2.5, 4.5] sigma
        mean = watts.mean()
        assert 2.5 * sigma <= watts.max() - mean <= 4.5 * sigma
        assert 2.5 * sigma <= mean - watts.min() <= 4.5 * sigma


class TestScenarios:
    def test_square_wave_levels_follow_duty(self):
        dev = VirtualDevice(
            one_pair_configs(), SquareWave(0.0, 2.0, 100.0, 0.5, 12.0), ZERO_NOISE
        )
        events = stream_ticks(dev, 400)  # two periods
        lv = [e.level for e in events if isinstance(e, SampleFrame) and e.sensor_index == 0]
        high = [l for l in lv if l > 600]
        assert len(high) == 200  # half of the ticks at 2 A

    def test_trace_playback_holds_breakpoints(self):
        trace = Trace(((0.0, 0.0, 12.0), (0.005, 2.0, 12.0)))
        dev = VirtualDevice(one_pair_configs(), trace, ZERO_NOISE)
        events = stream_ticks(dev, 200)
        lv = [e.level for e in events if isinstance(e, SampleFrame) and e.sensor_index == 0]
        assert lv[:100] == [512] * 100
        assert all(l > 600 for l in lv[100:])

    def test_shared_load_splits_across_enabled_pairs(self):
        dev = VirtualDevice(default_configs(), Constant(4.0, 12.0), ZERO_NOISE)
        events = stream_ticks(dev, 1)
        lv = {e.sensor_index: e.level for e in events if isinstance(e, SampleFrame)}
        # 1 A per pair on all four current sensors
        expected = math.floor((1.65 + 1.0 * 0.165) / 3.3 * 1023 + 0.5)
        for idx in (0, 2, 4, 6):
            assert lv[idx] == expected
