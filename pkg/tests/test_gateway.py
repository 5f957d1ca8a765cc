import io
import json
import struct
import threading
import time

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from vid2game.dataio import save_image
from vid2game.gateway import create_app, encode_frame, pack_frame
from vid2game.p2f import P2FModel
from vid2game.p2p import P2PModel
from vid2game.puppet import PuppetWorld, WorldConfig

SIZE = 32


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    root = tmp_path_factory.mktemp("assets")
    torch.manual_seed(0)
    model_dir = root / "models" / "puppet"
    model_dir.mkdir(parents=True)
    p2p = P2PModel.build(SIZE, SIZE, width_mult=1 / 16, n_res=3)
    p2p.save(model_dir / "p2p.ckpt", {
        "mean_motion_magnitude": 2.0, "fps": 30, "delta": 2,
        "resolution": [SIZE, SIZE]})
    p2f = P2FModel.build(SIZE, SIZE, width_mult=1 / 16, n_res=2)
    p2f.save(model_dir / "p2f.ckpt", {"fps": 30, "resolution": [SIZE, SIZE]})

    world = PuppetWorld(WorldConfig(seed=1, size=SIZE))
    render = world.render(world.initial_state())
    (root / "poses").mkdir()
    save_image(root / "poses" / "start.png", render.pose.pixels)
    save_image(root / "poses" / "start_obj.png", render.obj.pixels)

    (root / "backgrounds").mkdir()
    save_image(root / "backgrounds" / "plain.png", world.background.pixels)
    seq_dir = root / "backgrounds" / "loop"
    seq_dir.mkdir()
    for i in range(3):
        save_image(seq_dir / f"{i}.png", np.full((SIZE, SIZE, 3), 0.2 * (i + 1)))
    return root


@pytest.fixture(scope="module")
def client(assets):
    return TestClient(create_app(assets))


def read_frame(payload: bytes):
    tick_id = struct.unpack("<I", payload[:4])[0]
    img = Image.open(io.BytesIO(payload[4:]))
    return tick_id, img


class TestHttp:
    def test_healthz(self, client):
        response = client.get("/healthz")
        assert response.status_code == 200
        assert response.json() == {"status": "ok"}

    def test_assets_listing(self, client):
        listing = client.get("/assets").json()
        assert [m["id"] for m in listing["models"]] == ["puppet"]
        modes = {b["id"]: b["mode"] for b in listing["backgrounds"]}
        assert modes == {"plain": "static", "loop": "sequence"}
        assert [p["id"] for p in listing["poses"]] == ["start"]

    def test_empty_asset_dir_gives_empty_lists(self, tmp_path):
        empty_client = TestClient(create_app(tmp_path))
        listing = empty_client.get("/assets").json()
        assert listing == {"models": [], "backgrounds": [], "poses": []}

    def test_preview_routes(self, client):
        assert client.get("/assets/poses/start/preview").status_code == 200
        assert client.get("/assets/backgrounds/plain/preview").status_code == 200
        assert client.get("/assets/poses/nope/preview").status_code == 404


START = {"type": "start", "model_id": "puppet",
         "background_id": "plain", "seed_pose_id": "start"}


class TestSessionChannel:
    def test_start_control_stop_cycle(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps(START))
            started = json.loads(ws.receive_text())
            assert started["type"] == "started"
            assert started["width"] == SIZE and started["height"] == SIZE
            assert started["fps"] == 30
            assert started["session_id"]

            ws.send_text(json.dumps({"type": "control", "dx": 0.0, "dy": 0.0, "tick": 17}))
            tick_id, img = read_frame(ws.receive_bytes())
            assert tick_id == 17
            assert img.size == (SIZE, SIZE)

            ws.send_text(json.dumps({"type": "stop"}))
            assert json.loads(ws.receive_text())["type"] == "stopped"

    def test_control_before_start(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps({"type": "control", "dx": 1, "dy": 0, "tick": 1}))
            msg = json.loads(ws.receive_text())
            assert msg["type"] == "error" and msg["code"] == "E_NOSESSION"

    def test_control_after_stop(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps(START))
            json.loads(ws.receive_text())
            ws.send_text(json.dumps({"type": "stop"}))
            json.loads(ws.receive_text())
            ws.send_text(json.dumps({"type": "control", "dx": 1, "dy": 0, "tick": 2}))
            msg = json.loads(ws.receive_text())
            assert msg["code"] == "E_NOSESSION"

    def test_malformed_json(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text("{not json")
            msg = json.loads(ws.receive_text())
            assert msg["type"] == "error" and msg["code"] == "E_PARSE"

    def test_unknown_model(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps({**START, "model_id": "ghost"}))
            msg = json.loads(ws.receive_text())
            assert msg["code"] == "E_NOMODEL"

    def test_unknown_background(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps({**START, "background_id": "ghost"}))
            msg = json.loads(ws.receive_text())
            assert msg["code"] == "E_NOASSET"

    def test_every_conforming_control_answered_once(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps(START))
            json.loads(ws.receive_text())
            for tick_id in range(5):
                ws.send_text(json.dumps(
                    {"type": "control", "dx": 1.0, "dy": 0.0, "tick": tick_id}))
                got, _ = read_frame(ws.receive_bytes())
                assert got == tick_id

    def test_oversized_direction_clamped_not_rejected(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps(START))
            json.loads(ws.receive_text())
            ws.send_text(json.dumps({"type": "control", "dx": 5.0, "dy": 0.0, "tick": 1}))
            got, _ = read_frame(ws.receive_bytes())
            assert got == 1

    def test_nan_direction_is_parse_error(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps(START))
            json.loads(ws.receive_text())
            ws.send_text('{"type": "control", "dx": NaN, "dy": 0, "tick": 1}')
            msg = json.loads(ws.receive_text())
            assert msg["code"] == "E_PARSE"

    def test_jpeg_encoding_option(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps({**START, "encoding": "jpeg"}))
            json.loads(ws.receive_text())
            ws.send_text(json.dumps({"type": "control", "dx": 0, "dy": 0, "tick": 3}))
            _, img = read_frame(ws.receive_bytes())
            assert img.format == "JPEG"


class TestBackPressure:
    def test_flooding_client_gets_coalesced_monotone_frames(self, client):
        flood = 40
        with client.websocket_connect("/session") as ws:
            ws.send_text(json.dumps(START))
            json.loads(ws.receive_text())
            for tick_id in range(flood):
                ws.send_text(json.dumps(
                    {"type": "control", "dx": 0.5, "dy": 0.5, "tick": tick_id}))
            # the newest control always survives coalescing, so its echo marks
            # the end of the burst
            ticks = []
            while not ticks or ticks[-1] != flood - 1:
                payload = ws.receive_bytes()
                ticks.append(struct.unpack("<I", payload[:4])[0])
            ws.send_text(json.dumps({"type": "stop"}))
            assert json.loads(ws.receive_text())["type"] == "stopped"
            assert len(ticks) < flood, "latest-wins coalescing must drop backlog"
            assert ticks == sorted(ticks), "tick echoes must be monotone"
            assert ticks[-1] == flood - 1, "the newest control wins"

    def test_single_tick_in_flight(self, assets):
        from vid2game import gateway as gw

        live = {"now": 0, "max": 0}
        lock = threading.Lock()
        real_tick = gw.tick

        def guarded(session, direction):
            with lock:
                live["now"] += 1
                live["max"] = max(live["max"], live["now"])
            try:
                time.sleep(0.005)
                return real_tick(session, direction)
            finally:
                with lock:
                    live["now"] -= 1

        app = create_app(assets)
        client = TestClient(app)
        original = gw.tick
        gw.tick = guarded
        try:
            with client.websocket_connect("/session") as ws:
                ws.send_text(json.dumps(START))
                json.loads(ws.receive_text())
                for tick_id in range(20):
                    ws.send_text(json.dumps(
                        {"type": "control", "dx": 1, "dy": 0, "tick": tick_id}))
                ws.send_text(json.dumps({"type": "stop"}))
                while True:
                    msg = ws.receive()
                    if "text" in msg and msg["text"] is not None:
                        if json.loads(msg["text"])["type"] == "stopped":
                            break
        finally:
            gw.tick = original
        assert live["max"] == 1


def test_frame_packing_round_trip():
    frame = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    payload = pack_frame(9, encode_frame(frame))
    tick_id, img = read_frame(payload)
    assert tick_id == 9
    decoded = np.asarray(img, dtype=np.float64) / 255.0
    np.testing.assert_allclose(decoded, np.round(frame * 255) / 255, atol=1e-9)
