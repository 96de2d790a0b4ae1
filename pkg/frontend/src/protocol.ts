/**
 * Wire protocol: 2-byte frames, command bytes, 224-byte config block.
 *
 * Frame layout: byte A = [1 | index:3 | marker:1 | value 9..7],
 * byte B = [0 | value 6..0]. Index 7 with the marker bit set is a device
 * timestamp (microseconds mod 1024); the marker bit is otherwise only
 * valid on sensor 0. The decoder resynchronizes on the MSB sync bit and
 * counts every discarded byte.
 */

export const SENSOR_COUNT = 8;
export const RECORD_SIZE = 28;
export const CONFIG_BLOCK_SIZE = RECORD_SIZE * SENSOR_COUNT;
export const NAME_SIZE = 12;
export const LEVEL_MAX = 1023;

export const CMD = {
  startStream: "S",
  stopStream: "T",
  readConfig: "R",
  writeConfig: "W",
  mark: "M",
  getVersion: "V",
  reboot: "X",
  rebootToDfu: "Y",
} as const;

export type SensorKind = "current" | "voltage";

export interface SensorConfig {
  name: string;
  vref: number;
  slope: number; // V/A sensitivity, or ADC-volts-per-bus-volt gain
  offset: number; // volts at the ADC
  kind: SensorKind;
  enabled: boolean;
}

export interface SampleEvent {
  type: "sample";
  sensorIndex: number;
  marker: boolean;
  level: number;
}

export interface TimestampEvent {
  type: "timestamp";
  micros: number;
}

export type StreamEvent = SampleEvent | TimestampEvent;

export interface DecoderState {
  pending: number; // -1 when no first byte is held
  discarded: number;
}

export function newDecoderState(): DecoderState {
  return { pending: -1, discarded: 0 };
}

export function encodeSample(sensorIndex: number, marker: boolean, level: number): Buffer {
  if (sensorIndex < 0 || sensorIndex > 7) throw new RangeError(`sensor index ${sensorIndex}`);
  if (level < 0 || level > LEVEL_MAX) throw new RangeError(`level ${level}`);
  if (marker && sensorIndex === 7) throw new RangeError("index 7 + marker is the timestamp");
  if (marker && sensorIndex !== 0) throw new RangeError("marker only valid on sensor 0");
  const first = 0x80 | (sensorIndex << 4) | (marker ? 0x08 : 0) | (level >> 7);
  return Buffer.from([first, level & 0x7f]);
}

export function encodeTimestamp(micros: number): Buffer {
  if (micros < 0 || micros > LEVEL_MAX) throw new RangeError(`timestamp ${micros}`);
  return Buffer.from([0xf8 | (micros >> 7), micros & 0x7f]);
}

/** Decode a chunk; mutates state and returns the complete events. */
export function decodeStream(data: Buffer, state: DecoderState): StreamEvent[] {
  const events: StreamEvent[] = [];
  for (const byte of data) {
    if (byte & 0x80) {
      if (state.pending >= 0) state.discarded += 1;
      state.pending = byte;
      continue;
    }
    if (state.pending < 0) {
      state.discarded += 1;
      continue;
    }
    const a = state.pending;
    state.pending = -1;
    const index = (a >> 4) & 0x07;
    const value = ((a & 0x07) << 7) | (byte & 0x7f);
    if (a & 0x08) {
      if (index === 7) {
        events.push({ type: "timestamp", micros: value });
      } else if (index === 0) {
        events.push({ type: "sample", sensorIndex: 0, marker: true, level: value });
      } else {
        state.discarded += 2; // marker with index 1-6 is invalid on the wire
      }
    } else {
      events.push({ type: "sample", sensorIndex: index, marker: false, level: value });
    }
  }
  return events;
}

export function parseConfig(data: Buffer): SensorConfig[] {
  if (data.length !== CONFIG_BLOCK_SIZE) {
    throw new RangeError(`config block must be ${CONFIG_BLOCK_SIZE} bytes, got ${data.length}`);
  }
  const records: SensorConfig[] = [];
  for (let i = 0; i < SENSOR_COUNT; i++) {
    const base = i * RECORD_SIZE;
    const nameRaw = data.subarray(base, base + NAME_SIZE);
    const nul = nameRaw.indexOf(0);
    const typeByte = data[base + NAME_SIZE + 12];
    if (typeByte !== 0 && typeByte !== 1) {
      throw new RangeError(`record ${i}: invalid type byte ${typeByte}`);
    }
    records.push({
      name: nameRaw.subarray(0, nul < 0 ? NAME_SIZE : nul).toString("ascii"),
      vref: data.readFloatLE(base + NAME_SIZE),
      slope: data.readFloatLE(base + NAME_SIZE + 4),
      offset: data.readFloatLE(base + NAME_SIZE + 8),
      kind: typeByte === 0 ? "current" : "voltage",
      enabled: data[base + NAME_SIZE + 13] !== 0,
    });
  }
  return records;
}

export function serializeConfig(block: SensorConfig[]): Buffer {
  if (block.length !== SENSOR_COUNT) {
    throw new RangeError(`config block needs ${SENSOR_COUNT} records`);
  }
  const out = Buffer.alloc(CONFIG_BLOCK_SIZE);
  block.forEach((cfg, i) => {
    const base = i * RECORD_SIZE;
    const name = Buffer.from(cfg.name, "ascii");
    if (name.length > NAME_SIZE - 1) throw new RangeError(`name too long: ${cfg.name}`);
    name.copy(out, base);
    out.writeFloatLE(Math.fround(cfg.vref), base + NAME_SIZE);
    out.writeFloatLE(Math.fround(cfg.slope), base + NAME_SIZE + 4);
    out.writeFloatLE(Math.fround(cfg.offset), base + NAME_SIZE + 8);
    out[base + NAME_SIZE + 12] = cfg.kind === "current" ? 0 : 1;
    out[base + NAME_SIZE + 13] = cfg.enabled ? 1 : 0;
  });
  return out;
}

/**
 * Raw 10-bit level to physical amps or bus volts.
 *
 * The expression order matches the reference implementation exactly so
 * converted values agree bit for bit.
 */
export function rawToPhysical(level: number, cfg: SensorConfig): number {
  if (cfg.kind === "current") {
    return (level / 1023 * cfg.vref - cfg.vref / 2 - cfg.offset) / cfg.slope;
  }
  return (level / 1023 * cfg.vref - cfg.offset) / cfg.slope;
}
