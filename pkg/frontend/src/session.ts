// Frame-synchronous session loop.
//
// Exactly one control message is ever in flight: the next control goes out
// only after the frame answering the previous one has been drawn.  Client
// pacing therefore automatically matches whatever tick rate the server can
// sustain, and the gateway's latest-wins queue never sees a backlog from us.

import { Direction } from "./input.js";
import {
  DecodedFrame,
  StartMessage,
  decodeFrame,
  parseServerMessage,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onmessage: ((data: string | ArrayBuffer) => void) | null;
  onclose: ((reason: string) => void) | null;
}

export interface HudStats {
  fps: number;
  latencyMs: number;
  tick: number;
}

export interface SessionHooks {
  onFrame(frame: DecodedFrame): void;
  onStats?(stats: HudStats): void;
  onStarted?(width: number, height: number, fps: number): void;
  onStopped?(): void;
  onError?(code: string, text: string): void;
  onDisconnect?(reason: string): void;
}

export class SessionLoop {
  private tick = 0;
  private inFlight = false;
  private running = false;
  private sentAt = new Map<number, number>();
  private frameTimes: number[] = [];

  constructor(
    private readonly socket: SocketLike,
    private readonly nextDirection: () => Direction,
    private readonly hooks: SessionHooks,
    private readonly now: () => number = () => performance.now(),
  ) {
    socket.onmessage = (data) => this.handleMessage(data);
    socket.onclose = (reason) => {
      this.running = false;
      this.inFlight = false;
      this.hooks.onDisconnect?.(reason);
    };
  }

  start(options: Omit<StartMessage, "type">): void {
    this.socket.send(JSON.stringify({ type: "start", ...options }));
  }

  stop(): void {
    this.running = false;
    this.socket.send(JSON.stringify({ type: "stop" }));
  }

  get controlsInFlight(): number {
    return this.inFlight ? 1 : 0;
  }

  private sendControl(): void {
    if (!this.running || this.inFlight) {
      return;
    }
    const { dx, dy } = this.nextDirection();
    this.tick += 1;
    this.sentAt.set(this.tick, this.now());
    this.inFlight = true;
    this.socket.send(JSON.stringify({ type: "control", dx, dy, tick: this.tick }));
  }

  private handleMessage(data: string | ArrayBuffer): void {
    if (typeof data === "string") {
      const msg = parseServerMessage(data);
      if (msg.type === "started") {
        this.running = true;
        this.tick = 0;
        this.inFlight = false;
        this.sentAt.clear();
        this.frameTimes = [];
        this.hooks.onStarted?.(msg.width, msg.height, msg.fps);
        this.sendControl();
      } else if (msg.type === "stopped") {
        this.running = false;
        this.inFlight = false;
        this.hooks.onStopped?.();
      } else {
        this.inFlight = false;
        this.hooks.onError?.(msg.code, msg.text);
      }
      return;
    }
    const frame = decodeFrame(data);
    this.inFlight = false;
    const received = this.now();
    const sent = this.sentAt.get(frame.tick);
    this.sentAt.delete(frame.tick);
    this.frameTimes.push(received);
    while (this.frameTimes.length > 0 && this.frameTimes[0] < received - 1000) {
      this.frameTimes.shift();
    }
    this.hooks.onFrame(frame);
    if (this.hooks.onStats) {
      this.hooks.onStats({
        fps: this.frameTimes.length,
        latencyMs: sent === undefined ? NaN : received - sent,
        tick: frame.tick,
      });
    }
    this.sendControl();
  }
}

/** Adapt a browser WebSocket to the SocketLike surface the loop drives. */
export function wrapWebSocket(ws: WebSocket): SocketLike {
  ws.binaryType = "arraybuffer";
  const wrapper: SocketLike = {
    send: (data) => ws.send(data),
    close: () => ws.close(),
    onmessage: null,
    onclose: null,
  };
  ws.onmessage = (event) => wrapper.onmessage?.(event.data);
  ws.onclose = (event) => wrapper.onclose?.(event.reason || `code ${event.code}`);
  return wrapper;
}
