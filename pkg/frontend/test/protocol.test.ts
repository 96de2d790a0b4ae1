import { describe, expect, it } from "vitest";

import {
  CONFIG_BLOCK_SIZE,
  SensorConfig,
  decodeStream,
  encodeSample,
  encodeTimestamp,
  newDecoderState,
  parseConfig,
  rawToPhysical,
  serializeConfig,
} from "../src/protocol.js";

function defaultBlock(): SensorConfig[] {
  return Array.from({ length: 8 }, (_, i) => ({
    name: `s${i}`,
    vref: 3.3,
    slope: i % 2 === 0 ? 0.165 : 0.25,
    offset: 0,
    kind: i % 2 === 0 ? ("current" as const) : ("voltage" as const),
    enabled: true,
  }));
}

describe("frame encoding", () => {
  it("encodes the documented byte examples", () => {
    expect([...encodeSample(0, false, 0)]).toEqual([0x80, 0x00]);
    expect([...encodeSample(2, false, 512)]).toEqual([0xa4, 0x00]);
    expect([...encodeSample(7, false, 1023)]).toEqual([0xf7, 0x7f]);
    expect([...encodeTimestamp(0)]).toEqual([0xf8, 0x00]);
    expect([...encodeTimestamp(1023)]).toEqual([0xff, 0x7f]);
    expect([...encodeTimestamp(640)]).toEqual([0xfd, 0x00]);
  });

  it("rejects invalid frames", () => {
    expect(() => encodeSample(0, false, 1024)).toThrow();
    expect(() => encodeSample(7, true, 0)).toThrow();
    expect(() => encodeSample(3, true, 0)).toThrow();
    expect(() => encodeTimestamp(1024)).toThrow();
  });
});

describe("stream decoding", () => {
  it("round-trips every sample and timestamp value", () => {
    for (let level = 0; level < 1024; level += 41) {
      for (let index = 0; index < 7; index++) {
        const state = newDecoderState();
        const events = decodeStream(encodeSample(index, false, level), state);
        expect(events).toEqual([
          { type: "sample", sensorIndex: index, marker: false, level },
        ]);
      }
      const state = newDecoderState();
      expect(decodeStream(encodeTimestamp(level), state)).toEqual([
        { type: "timestamp", micros: level },
      ]);
    }
  });

  it("resynchronizes and accounts for discarded bytes", () => {
    const state = newDecoderState();
    const events = decodeStream(Buffer.from([0xa4, 0xa4, 0x00]), state);
    expect(events).toEqual([{ type: "sample", sensorIndex: 2, marker: false, level: 512 }]);
    expect(state.discarded).toBe(1);

    const orphan = newDecoderState();
    expect(decodeStream(Buffer.from([0x7f, 0xf8, 0x00]), orphan)).toEqual([
      { type: "timestamp", micros: 0 },
    ]);
    expect(orphan.discarded).toBe(1);
  });

  it("never throws on fuzz and preserves the byte identity", () => {
    let seed = 123456789;
    const next = () => {
      seed = (1103515245 * seed + 12345) % 2147483648;
      return seed & 0xff;
    };
    const data = Buffer.from(Array.from({ length: 100_000 }, next));
    const state = newDecoderState();
    const events = decodeStream(data, state);
    const pending = state.pending >= 0 ? 1 : 0;
    expect(events.length * 2 + state.discarded + pending).toBe(data.length);
  });
});

describe("config block", () => {
  it("round-trips 224 bytes", () => {
    const block = defaultBlock();
    block[2] = { name: "pcie12V", vref: 3.3, slope: 0.165, offset: 0, kind: "current", enabled: true };
    const wire = serializeConfig(block);
    expect(wire.length).toBe(CONFIG_BLOCK_SIZE);
    const parsed = parseConfig(wire);
    expect(parsed[2].name).toBe("pcie12V");
    expect(serializeConfig(parsed).equals(wire)).toBe(true);
  });

  it("rejects wrong length and bad type byte", () => {
    const wire = serializeConfig(defaultBlock());
    expect(() => parseConfig(wire.subarray(0, 7 * 28))).toThrow(/224/);
    const corrupt = Buffer.from(wire);
    corrupt[24] = 9;
    expect(() => parseConfig(corrupt)).toThrow(/type byte/);
  });
});

describe("conversion", () => {
  it("matches the documented midscale example", () => {
    const cfg: SensorConfig = {
      name: "i",
      vref: Math.fround(3.3),
      slope: Math.fround(0.165),
      offset: 0,
      kind: "current",
      enabled: true,
    };
    expect(rawToPhysical(512, cfg)).toBeCloseTo(0.0097752, 6);
    const gain: SensorConfig = { ...cfg, name: "u", slope: Math.fround(0.25), kind: "voltage" };
    expect(rawToPhysical(0, gain)).toBe(0);
    expect(rawToPhysical(1023, gain)).toBeCloseTo(13.2, 4);
  });
});
