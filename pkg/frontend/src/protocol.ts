// Wire types for the gateway's /session channel.  JSON text messages carry
// control flow; binary frames are 4 bytes of little-endian tick id followed
// by the encoded image.

export interface StartMessage {
  type: "start";
  model_id: string;
  background_id: string;
  seed_pose_id: string;
  encoding?: "png" | "jpeg";
}

export interface ControlMessage {
  type: "control";
  dx: number;
  dy: number;
  tick: number;
}

export interface StopMessage {
  type: "stop";
}

export interface StartedMessage {
  type: "started";
  session_id: string;
  width: number;
  height: number;
  fps: number;
}

export interface StoppedMessage {
  type: "stopped";
}

export interface ErrorMessage {
  type: "error";
  code: string;
  text: string;
}

export type ClientMessage = StartMessage | ControlMessage | StopMessage;
export type ServerMessage = StartedMessage | StoppedMessage | ErrorMessage;

export interface DecodedFrame {
  tick: number;
  image: Uint8Array;
}

export function decodeFrame(buffer: ArrayBuffer): DecodedFrame {
  if (buffer.byteLength < 4) {
    throw new Error(`frame payload too short: ${buffer.byteLength} bytes`);
  }
  const tick = new DataView(buffer).getUint32(0, true);
  return { tick, image: new Uint8Array(buffer, 4) };
}

export function parseServerMessage(text: string): ServerMessage {
  const msg = JSON.parse(text) as { type?: string };
  if (msg.type === "started" || msg.type === "stopped" || msg.type === "error") {
    return msg as ServerMessage;
  }
  throw new Error(`unknown server message type: ${msg.type}`);
}
