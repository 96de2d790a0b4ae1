/**
 * TCP client mirroring the native host library.
 *
 * Connects to a served device (e.g. `pssim --tcp`), reads the sensor
 * configuration, starts the stream, and folds frames into per-pair
 * physical readings and cumulative energy. The 10-bit microsecond
 * timestamps are unwrapped by adding 1024 whenever the raw value
 * decreases (ticks are 50 us apart). All numeric paths match the
 * reference implementation operation for operation.
 */

import { createWriteStream, WriteStream } from "node:fs";
import { Socket, connect as netConnect } from "node:net";

import {
  CMD,
  CONFIG_BLOCK_SIZE,
  DecoderState,
  SensorConfig,
  decodeStream,
  newDecoderState,
  parseConfig,
  rawToPhysical,
  serializeConfig,
} from "./protocol.js";

export const VERSION = "0.1.0"; // mirrors the native library

const PAIR_COUNT = 4;

export interface PairReading {
  volts: number;
  amps: number;
  watts: number;
  deviceTime: number;
}

export interface MeasurementState {
  deviceTime: number;
  deviceTimeUs: number;
  pairs: (PairReading | null)[];
  pairJoules: number[];
  totalJoules: number;
  totalWatts: number;
  levels: (number | null)[];
  hostTime: number;
  sampleCount: number;
  tickCount: number;
  droppedBytes: number;
}

export function joules(a: MeasurementState, b: MeasurementState): number {
  if (b.sampleCount < a.sampleCount) throw new Error("snapshots passed newest-first");
  return b.totalJoules - a.totalJoules;
}

export function seconds(a: MeasurementState, b: MeasurementState): number {
  if (b.sampleCount < a.sampleCount) throw new Error("snapshots passed newest-first");
  return (b.deviceTimeUs - a.deviceTimeUs) * 1e-6;
}

export function watts(a: MeasurementState, b: MeasurementState): number {
  const s = seconds(a, b);
  if (s === 0) throw new Error("zero-length interval has no average power");
  return joules(a, b) / s;
}

export interface ConnectOptions {
  connectTimeoutMs?: number; // deadline for the config exchange
  drainSilenceMs?: number; // quiet window that ends a drain
}

interface Waiter {
  predicate: () => boolean;
  resolve: () => void;
}

export class PowerSensorClient {
  private socket: Socket;
  private mode: "exchange" | "stream" = "exchange";
  private exchangeBuf: Buffer[] = [];
  private exchangeWake: (() => void) | null = null;

  private decoder: DecoderState = newDecoderState();
  private levels: number[] = new Array(8).fill(-1);
  private markerFlag = false;
  private haveTs = false;
  private tsRaw = 0;

  private config: SensorConfig[] = [];
  private lutI: (number[] | null)[] = new Array(PAIR_COUNT).fill(null);
  private lutV: (number[] | null)[] = new Array(PAIR_COUNT).fill(null);

  private latest: ({ volts: number; amps: number; watts: number } | null)[] = new Array(
    PAIR_COUNT,
  ).fill(null);
  private latestLevels: number[] = new Array(8).fill(-1);
  private pairJoules: number[] = new Array(PAIR_COUNT).fill(0);
  private totalWatts = 0;
  private deviceUs = 0;
  private lastTs: number | null = null;
  private sampleCount = 0;
  private tickCount = 0;
  private timestampCount = 0;

  private markerChars: string[] = [];
  private markerLog: { time: number; char: string }[] = [];

  private dump: WriteStream | null = null;
  private dumpRecords = 0;
  private dumpError: Error | null = null;

  private waiters: Waiter[] = [];
  private dead: string | null = null;
  private closed = false;

  private constructor(socket: Socket) {
    this.socket = socket;
  }

  /** Open a session to a TCP-served device and start streaming. */
  static async connect(
    host: string,
    port: number,
    options: ConnectOptions = {},
  ): Promise<PowerSensorClient> {
    const timeoutMs = options.connectTimeoutMs ?? 1000;
    const socket = await new Promise<Socket>((resolve, reject) => {
      const s = netConnect({ host, port, noDelay: true });
      s.once("connect", () => resolve(s));
      s.once("error", reject);
    });
    const client = new PowerSensorClient(socket);
    socket.on("data", (data) => client.onData(data));
    socket.on("error", (err) => client.die(String(err)));
    socket.on("close", () => client.die("connection closed"));
    await client.handshake(timeoutMs, options.drainSilenceMs ?? 150);
    return client;
  }

  private onData(data: Buffer): void {
    if (this.mode === "exchange") {
      this.exchangeBuf.push(data);
      this.exchangeWake?.();
      return;
    }
    for (const event of decodeStream(data, this.decoder)) {
      if (event.type === "timestamp") {
        this.timestampCount += 1;
        if (this.haveTs) this.finalizeTick();
        else this.haveTs = true;
        this.tsRaw = event.micros;
        this.markerFlag = false;
      } else {
        this.levels[event.sensorIndex] = event.level;
        if (event.marker) this.markerFlag = true;
        this.sampleCount += 1;
      }
    }
    if (this.waiters.length) {
      this.waiters = this.waiters.filter((w) => {
        if (w.predicate()) {
          w.resolve();
          return false;
        }
        return true;
      });
    }
  }

  private finalizeTick(): void {
    const tsRaw = this.tsRaw;
    let dtUs = 0;
    if (this.lastTs !== null) {
      dtUs = (tsRaw - this.lastTs + 1024) % 1024;
      this.deviceUs += dtUs;
    }
    this.lastTs = tsRaw;
    const dtS = dtUs * 1e-6;
    let totalW = 0;
    for (let p = 0; p < PAIR_COUNT; p++) {
      const lutI = this.lutI[p];
      if (lutI === null) continue;
      const li = this.levels[2 * p];
      const lu = this.levels[2 * p + 1];
      if (li < 0 || lu < 0) continue;
      const amps = lutI[li];
      const volts = this.lutV[p]![lu];
      const w = volts * amps;
      if (dtUs) this.pairJoules[p] += w * dtS;
      this.latest[p] = { volts, amps, watts: w };
      totalW += w;
    }
    this.totalWatts = totalW;
    this.latestLevels = this.levels;
    this.tickCount += 1;
    let markerChar: string | null = null;
    if (this.markerFlag) {
      markerChar = this.markerChars.shift() ?? "?";
      this.markerLog.push({ time: this.deviceUs * 1e-6, char: markerChar });
    }
    if (this.dump !== null) this.writeDumpRecord(markerChar);
    this.levels = new Array(8).fill(-1);
  }

  private writeDumpRecord(markerChar: string | null): void {
    const fields = [`S ${(this.deviceUs / 1e6).toFixed(6)}`];
    for (let p = 0; p < PAIR_COUNT; p++) {
      const r = this.latest[p];
      if (r === null || this.lutI[p] === null) fields.push("- - -");
      else fields.push(`${r.volts.toFixed(4)} ${r.amps.toFixed(4)} ${r.watts.toFixed(4)}`);
    }
    fields.push(this.totalWatts.toFixed(4));
    let line = fields.join(" ");
    if (markerChar) line += ` M${markerChar}`;
    try {
      this.dump!.write(line + "\n");
      this.dumpRecords += 1;
    } catch (err) {
      this.dumpError = err as Error;
    }
  }

  private die(reason: string): void {
    if (this.dead === null) this.dead = reason;
    for (const w of this.waiters) w.resolve();
    this.waiters = [];
    this.exchangeWake?.();
  }

  private checkAlive(): void {
    if (this.dead !== null && !this.closed) throw new Error(`session is dead: ${this.dead}`);
    if (this.closed) throw new Error("session is dead: closed");
  }

  // -- handshake and config exchange ------------------------------------

  private async drain(silenceMs: number): Promise<void> {
    for (;;) {
      const before = this.exchangeBuf.length;
      await new Promise<void>((resolve) => {
        const timer = setTimeout(resolve, silenceMs);
        this.exchangeWake = () => {
          clearTimeout(timer);
          resolve();
        };
      });
      this.exchangeWake = null;
      if (this.exchangeBuf.length === before) {
        this.exchangeBuf = [];
        return;
      }
      this.exchangeBuf = [];
    }
  }

  private async readExact(n: number, deadlineMs: number): Promise<Buffer> {
    const deadline = Date.now() + deadlineMs;
    for (;;) {
      const have = this.exchangeBuf.reduce((sum, b) => sum + b.length, 0);
      if (have >= n) {
        const all = Buffer.concat(this.exchangeBuf);
        this.exchangeBuf = all.length > n ? [all.subarray(n)] : [];
        return all.subarray(0, n);
      }
      if (this.dead !== null) throw new Error(`session is dead: ${this.dead}`);
      const left = deadline - Date.now();
      if (left <= 0) throw new Error(`timed out: got ${have}/${n} bytes`);
      await new Promise<void>((resolve) => {
        const timer = setTimeout(resolve, Math.min(left, 50));
        this.exchangeWake = () => {
          clearTimeout(timer);
          resolve();
        };
      });
      this.exchangeWake = null;
    }
  }

  private installConfig(config: SensorConfig[]): void {
    this.config = config;
    for (let p = 0; p < PAIR_COUNT; p++) {
      const cur = config[2 * p];
      const vol = config[2 * p + 1];
      if (cur.enabled && vol.enabled) {
        this.lutI[p] = Array.from({ length: 1024 }, (_, level) => rawToPhysical(level, cur));
        this.lutV[p] = Array.from({ length: 1024 }, (_, level) => rawToPhysical(level, vol));
      } else {
        this.lutI[p] = null;
        this.lutV[p] = null;
      }
      this.latest[p] = null;
    }
  }

  private async handshake(timeoutMs: number, silenceMs: number): Promise<void> {
    this.mode = "exchange";
    this.send(CMD.stopStream);
    await this.drain(silenceMs);
    this.send(CMD.readConfig);
    const block = await this.readExact(CONFIG_BLOCK_SIZE, timeoutMs);
    this.installConfig(parseConfig(block));
    this.resetParser();
    this.mode = "stream";
    this.send(CMD.startStream);
  }

  private resetParser(): void {
    const discarded = this.decoder.discarded; // counter survives stream pauses
    this.decoder = newDecoderState();
    this.decoder.discarded = discarded;
    this.levels = new Array(8).fill(-1);
    this.markerFlag = false;
    this.haveTs = false;
  }

  private send(data: string | Buffer): void {
    this.socket.write(data);
  }

  // -- public API ---------------------------------------------------------

  get alive(): boolean {
    return this.dead === null && !this.closed;
  }

  readState(): MeasurementState {
    this.checkAlive();
    const t = this.deviceUs * 1e-6;
    const pairJoules = [...this.pairJoules];
    return {
      deviceTime: t,
      deviceTimeUs: this.deviceUs,
      pairs: this.latest.map((r) => (r === null ? null : { ...r, deviceTime: t })),
      pairJoules,
      totalJoules: pairJoules.reduce((sum, j) => sum + j, 0),
      totalWatts: this.totalWatts,
      levels: this.latestLevels.map((lv) => (lv >= 0 ? lv : null)),
      hostTime: Date.now() / 1000,
      sampleCount: this.sampleCount,
      tickCount: this.tickCount,
      droppedBytes: this.decoder.discarded,
    };
  }

  /** Resolve once the receiver state satisfies the predicate. */
  private waitFor(predicate: () => boolean, timeoutMs: number, what: string): Promise<void> {
    if (predicate()) return Promise.resolve();
    this.checkAlive();
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        this.waiters = this.waiters.filter((w) => w.resolve !== done);
        reject(new Error(`timed out waiting for ${what}`));
      }, timeoutMs);
      const done = () => {
        clearTimeout(timer);
        if (this.dead !== null) reject(new Error(`session is dead: ${this.dead}`));
        else resolve();
      };
      this.waiters.push({ predicate, resolve: done });
    });
  }

  waitTicks(n: number, timeoutMs = 10_000): Promise<void> {
    const goal = this.tickCount + n;
    return this.waitFor(() => this.tickCount >= goal, timeoutMs, `${n} ticks`);
  }

  waitDeviceTime(tSeconds: number, timeoutMs = 30_000): Promise<void> {
    const targetUs = Math.round(tSeconds * 1e6);
    return this.waitFor(() => this.deviceUs >= targetUs, timeoutMs, `device time ${tSeconds} s`);
  }

  /** Resolve once a marker character has come back on the stream. */
  waitMarker(char: string, timeoutMs = 10_000): Promise<void> {
    return this.waitFor(
      () => this.markerLog.some((m) => m.char === char),
      timeoutMs,
      `marker ${char}`,
    );
  }

  mark(char: string): void {
    if (char.length !== 1 || char.charCodeAt(0) < 33 || char.charCodeAt(0) > 126) {
      throw new RangeError(`marker must be one printable character, got ${JSON.stringify(char)}`);
    }
    this.checkAlive();
    this.markerChars.push(char);
    this.send(CMD.mark);
  }

  get markerEvents(): { time: number; char: string }[] {
    return [...this.markerLog];
  }

  getConfig(): SensorConfig[] {
    this.checkAlive();
    return this.config.map((cfg) => ({ ...cfg }));
  }

  /** Write a new config block, verify the read-back, and use it at once. */
  async setConfig(block: SensorConfig[], timeoutMs = 2000): Promise<void> {
    this.checkAlive();
    const payload = serializeConfig(block);
    this.mode = "exchange";
    try {
      this.send(CMD.stopStream);
      await this.drain(150);
      this.send(Buffer.concat([Buffer.from(CMD.writeConfig), payload]));
      this.send(CMD.readConfig);
      const readback = await this.readExact(CONFIG_BLOCK_SIZE, timeoutMs);
      if (!readback.equals(payload)) throw new Error("device did not store the written config");
      this.installConfig(parseConfig(payload));
    } finally {
      this.resetParser();
      this.mode = "stream";
      this.send(CMD.startStream);
    }
  }

  async deviceVersion(timeoutMs = 2000): Promise<string> {
    this.checkAlive();
    this.mode = "exchange";
    try {
      this.send(CMD.stopStream);
      await this.drain(150);
      this.send(CMD.getVersion);
      let text = "";
      const deadline = Date.now() + timeoutMs;
      while (!text.includes("\n")) {
        const chunk = await this.readExact(1, Math.max(1, deadline - Date.now()));
        text += chunk.toString("ascii");
      }
      return text.trim();
    } finally {
      this.resetParser();
      this.mode = "stream";
      this.send(CMD.startStream);
    }
  }

  startDump(path: string): void {
    this.checkAlive();
    if (this.dump !== null) throw new Error("dump already active");
    const stream = createWriteStream(path);
    stream.write("# powersensor dump v1\n");
    this.config.forEach((cfg, i) => {
      stream.write(
        `# sensor ${i}: name=${cfg.name} kind=${cfg.kind} vref=${cfg.vref} ` +
          `slope=${cfg.slope} offset=${cfg.offset} enabled=${cfg.enabled ? 1 : 0}\n`,
      );
    });
    stream.write("# columns: S time_s V0 I0 P0 V1 I1 P1 V2 I2 P2 V3 I3 P3 Ptotal [Mc]\n");
    this.dumpRecords = 0;
    this.dumpError = null;
    this.dump = stream;
  }

  async stopDump(): Promise<number> {
    const stream = this.dump;
    if (stream === null) throw new Error("no dump active");
    this.dump = null;
    await new Promise<void>((resolve, reject) =>
      stream.end((err?: Error | null) => (err ? reject(err) : resolve())),
    );
    if (this.dumpError !== null) throw this.dumpError;
    return this.dumpRecords;
  }

  close(): void {
    if (this.closed) return;
    this.closed = true;
    try {
      this.socket.write(CMD.stopStream);
    } catch {
      // already gone
    }
    this.socket.destroy();
    if (this.dump !== null) {
      this.dump.end();
      this.dump = null;
    }
  }
}
