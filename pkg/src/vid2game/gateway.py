"""Streaming session gateway.

HTTP surface: GET /healthz, GET /assets, plus a bidirectional channel at
/session.  Clients speak JSON text messages:

    {"type": "start", "model_id", "background_id", "seed_pose_id"[, "encoding"]}
        -> {"type": "started", "session_id", "width", "height", "fps"}
    {"type": "control", "dx", "dy", "tick"}
        -> one binary frame: 4-byte little-endian tick id + PNG/JPEG bytes
    {"type": "stop"} -> {"type": "stopped"}

Errors come back as {"type": "error", "code", "text"} with codes E_PARSE,
E_NOMODEL, E_NOASSET, E_NOSESSION.  Per session at most one tick is ever in
flight; a control arriving mid-tick replaces any queued one (latest wins),
so a flooding client cannot grow a queue.

Asset directory layout:

    assets/models/<id>/{p2p.ckpt, p2f.ckpt}
    assets/backgrounds/<id>.png           static background
    assets/backgrounds/<id>/*.png         cycling background sequence
    assets/poses/<id>.png (+ <id>_obj.png)  seed poses
"""

from __future__ import annotations

import asyncio
import io
import json
import logging
import math
import struct
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse
from PIL import Image
from starlette.concurrency import run_in_threadpool

from vid2game.dataio import load_image
from vid2game.domain import Displacement2
from vid2game.engine import BackgroundProvider, SessionState, create_session, tick

logger = logging.getLogger(__name__)


class AssetError(KeyError):
    def __init__(self, code: str, text: str):
        super().__init__(text)
        self.code = code
        self.text = text


class AssetRegistry:
    """Read-mostly view of the asset directory; model sessions are built on
    demand so checkpoints load lazily."""

    def __init__(self, root):
        self.root = Path(root)

    def list_assets(self) -> dict:
        models = []
        models_dir = self.root / "models"
        if models_dir.is_dir():
            for sub in sorted(models_dir.iterdir()):
                if (sub / "p2p.ckpt").exists() and (sub / "p2f.ckpt").exists():
                    models.append({"id": sub.name,
                                   "thumbnail": self._thumb("models", sub)})
        backgrounds = []
        bg_dir = self.root / "backgrounds"
        if bg_dir.is_dir():
            for entry in sorted(bg_dir.iterdir()):
                if entry.is_dir() and list(entry.glob("*.png")):
                    backgrounds.append({"id": entry.name, "mode": "sequence",
                                        "thumbnail": self._thumb("backgrounds", entry)})
                elif entry.suffix == ".png":
                    backgrounds.append({"id": entry.stem, "mode": "static",
                                        "thumbnail": f"/assets/backgrounds/{entry.stem}/preview"})
        poses = []
        pose_dir = self.root / "poses"
        if pose_dir.is_dir():
            for entry in sorted(pose_dir.glob("*.png")):
                if entry.stem.endswith("_obj"):
                    continue
                poses.append({"id": entry.stem,
                              "thumbnail": f"/assets/poses/{entry.stem}/preview"})
        return {"models": models, "backgrounds": backgrounds, "poses": poses}

    @staticmethod
    def _thumb(kind: str, directory: Path) -> str | None:
        if (directory / "thumb.png").exists():
            return f"/assets/{kind}/{directory.name}/preview"
        return None

    def preview_path(self, kind: str, asset_id: str) -> Path:
        if kind == "backgrounds":
            static = self.root / "backgrounds" / f"{asset_id}.png"
            if static.exists():
                return static
            seq = sorted((self.root / "backgrounds" / asset_id).glob("*.png"))
            if seq:
                return seq[0]
        elif kind == "poses":
            path = self.root / "poses" / f"{asset_id}.png"
            if path.exists():
                return path
        elif kind == "models":
            path = self.root / "models" / asset_id / "thumb.png"
            if path.exists():
                return path
        raise AssetError("E_NOASSET", f"no preview for {kind}/{asset_id}")

    def model_paths(self, model_id: str) -> tuple[Path, Path]:
        base = self.root / "models" / str(model_id)
        p2p, p2f = base / "p2p.ckpt", base / "p2f.ckpt"
        if not (p2p.exists() and p2f.exists()):
            raise AssetError("E_NOMODEL", f"unknown model id {model_id!r}")
        return p2p, p2f

    def background_provider(self, background_id: str) -> BackgroundProvider:
        static = self.root / "backgrounds" / f"{background_id}.png"
        if static.exists():
            return BackgroundProvider.from_path(static)
        seq_dir = self.root / "backgrounds" / str(background_id)
        if seq_dir.is_dir():
            return BackgroundProvider.from_path(seq_dir)
        raise AssetError("E_NOASSET", f"unknown background id {background_id!r}")

    def seed_stack(self, pose_id: str) -> np.ndarray:
        pose_path = self.root / "poses" / f"{pose_id}.png"
        if not pose_path.exists():
            raise AssetError("E_NOASSET", f"unknown seed pose id {pose_id!r}")
        pose = load_image(pose_path, 3)
        obj_path = self.root / "poses" / f"{pose_id}_obj.png"
        if obj_path.exists():
            obj = load_image(obj_path, 1)
        else:
            obj = np.zeros(pose.shape[:2] + (1,), dtype=np.float32)
        return np.concatenate([pose, obj], axis=2)

    def build_session(self, model_id: str, background_id: str, pose_id: str) -> SessionState:
        p2p_path, p2f_path = self.model_paths(model_id)
        provider = self.background_provider(background_id)
        stack = self.seed_stack(pose_id)
        return create_session(p2p_path, p2f_path, stack, provider)


def encode_frame(frame: np.ndarray, encoding: str = "png") -> bytes:
    data = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(data)
    buf = io.BytesIO()
    if encoding == "jpeg":
        img.save(buf, format="JPEG", quality=85)
    else:
        img.save(buf, format="PNG")
    return buf.getvalue()


def pack_frame(tick_id: int, payload: bytes) -> bytes:
    return struct.pack("<I", tick_id & 0xFFFFFFFF) + payload


class _LatestSlot:
    """Single-item mailbox: putting replaces any queued item (latest wins)."""

    def __init__(self):
        self._event = asyncio.Event()
        self._item = None

    def put(self, item):
        self._item = item
        self._event.set()

    async def get(self):
        await self._event.wait()
        item, self._item = self._item, None
        self._event.clear()
        return item


_STOP = object()


def create_app(assets_dir) -> FastAPI:
    registry = AssetRegistry(assets_dir)
    app = FastAPI(title="vid2game gateway")
    app.state.registry = registry

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/assets")
    def assets():
        try:
            return registry.list_assets()
        except OSError as err:
            return JSONResponse(status_code=500,
                                content={"error": f"asset directory unreadable: {err}"})

    @app.get("/assets/{kind}/{asset_id}/preview")
    def preview(kind: str, asset_id: str):
        try:
            return FileResponse(registry.preview_path(kind, asset_id))
        except AssetError as err:
            return JSONResponse(status_code=404, content={"error": err.text})

    @app.websocket("/session")
    async def session_channel(ws: WebSocket):
        await ws.accept()
        session: SessionState | None = None
        encoding = "png"
        slot = _LatestSlot()
        worker: asyncio.Task | None = None
        send_lock = asyncio.Lock()

        async def send_error(code: str, text: str):
            async with send_lock:
                await ws.send_text(json.dumps({"type": "error", "code": code, "text": text}))

        async def tick_worker():
            while True:
                item = await slot.get()
                if item is _STOP:
                    return
                direction, tick_id = item
                try:
                    result = await run_in_threadpool(tick, session, direction)
                except Exception as err:  # keep the session alive
                    await send_error("E_TICK", str(err))
                    continue
                payload = pack_frame(tick_id, encode_frame(result.frame, encoding))
                async with send_lock:
                    await ws.send_bytes(payload)

        async def stop_worker():
            nonlocal worker
            if worker is not None:
                slot.put(_STOP)
                await worker
                worker = None

        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict):
                        raise ValueError("message must be an object")
                    msg_type = msg["type"]
                except (ValueError, KeyError) as err:
                    await send_error("E_PARSE", f"malformed message: {err}")
                    continue

                if msg_type == "start":
                    await stop_worker()
                    try:
                        session = await run_in_threadpool(
                            registry.build_session,
                            msg.get("model_id", ""),
                            msg.get("background_id", ""),
                            msg.get("seed_pose_id", ""),
                        )
                    except AssetError as err:
                        session = None
                        await send_error(err.code, err.text)
                        continue
                    except Exception as err:
                        session = None
                        await send_error("E_START", str(err))
                        continue
                    encoding = msg.get("encoding", "png")
                    worker = asyncio.create_task(tick_worker())
                    h, w = session.frame_size
                    async with send_lock:
                        await ws.send_text(json.dumps({
                            "type": "started",
                            "session_id": uuid.uuid4().hex,
                            "width": w,
                            "height": h,
                            "fps": session.fps,
                        }))
                elif msg_type == "control":
                    if session is None:
                        await send_error("E_NOSESSION", "control before start")
                        continue
                    try:
                        dx, dy = float(msg["dx"]), float(msg["dy"])
                        tick_id = int(msg.get("tick", 0))
                        if not (math.isfinite(dx) and math.isfinite(dy)):
                            raise ValueError("direction must be finite")
                    except (KeyError, TypeError, ValueError) as err:
                        await send_error("E_PARSE", f"bad control: {err}")
                        continue
                    norm = math.hypot(dx, dy)
                    if norm > 1.0:  # clamp to the unit disc server-side
                        dx, dy = dx / norm, dy / norm
                    slot.put((Displacement2(dx, dy), tick_id))
                elif msg_type == "stop":
                    await stop_worker()
                    session = None
                    async with send_lock:
                        await ws.send_text(json.dumps({"type": "stopped"}))
                else:
                    await send_error("E_PARSE", f"unknown message type {msg_type!r}")
        except WebSocketDisconnect:
            pass
        finally:
            if worker is not None:
                slot.put(_STOP)
                try:
                    await worker
                except Exception:  # worker failures must not mask disconnects
                    pass

    return app
