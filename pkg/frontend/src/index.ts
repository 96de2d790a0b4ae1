export {
  CMD,
  CONFIG_BLOCK_SIZE,
  RECORD_SIZE,
  SENSOR_COUNT,
  decodeStream,
  encodeSample,
  encodeTimestamp,
  newDecoderState,
  parseConfig,
  rawToPhysical,
  serializeConfig,
} from "./protocol.js";
export type {
  DecoderState,
  SampleEvent,
  SensorConfig,
  SensorKind,
  StreamEvent,
  TimestampEvent,
} from "./protocol.js";

export { PowerSensorClient, VERSION, joules, seconds, watts } from "./client.js";
export type { ConnectOptions, MeasurementState, PairReading } from "./client.js";
