"""Live autoregressive session: pose step, frame render, background blend.

A session owns frozen checkpoints and the current pose/object stack.  Each
tick takes a unit direction, scales it by half the mean training motion
magnitude (read from the pose checkpoint), advances the pose, renders the
raw image and mask, and composites against the background provider's next
plate.  Sessions are O(1) in tick count and never mutate their checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from vid2game.dataio import load_image, save_image
from vid2game.domain import Displacement2, EmptyMaskError
from vid2game.netblocks import to_array, to_tensor
from vid2game.p2f import P2FModel, blend
from vid2game.p2p import P2PModel, stack_com

logger = logging.getLogger(__name__)


class BackgroundProvider:
    """Static plate or cycling frame sequence, matched to output resolution."""

    def __init__(self, frames: list[np.ndarray], mode: str = "static"):
        if not frames:
            raise ValueError("background provider needs at least one frame")
        if mode not in ("static", "sequence"):
            raise ValueError(f"unknown background mode {mode!r}")
        if mode == "static" and len(frames) != 1:
            raise ValueError("static mode takes exactly one frame")
        self.mode = mode
        self.frames = [np.asarray(f, dtype=np.float32) for f in frames]
        self.cursor = 0

    @classmethod
    def static(cls, frame: np.ndarray) -> "BackgroundProvider":
        return cls([frame], mode="static")

    @classmethod
    def sequence(cls, frames: list[np.ndarray]) -> "BackgroundProvider":
        return cls(list(frames), mode="sequence")

    @classmethod
    def from_path(cls, path) -> "BackgroundProvider":
        """A PNG file becomes a static provider; a directory of PNGs cycles."""
        path = Path(path)
        if path.is_dir():
            files = sorted(path.glob("*.png"))
            if not files:
                raise ValueError(f"no PNG frames in {path}")
            return cls.sequence([load_image(f, 3) for f in files])
        return cls.static(load_image(path, 3))

    def next(self) -> np.ndarray:
        frame = self.frames[self.cursor % len(self.frames)]
        if self.mode == "sequence":
            self.cursor += 1
        return frame

    def resize(self, height: int, width: int) -> "BackgroundProvider":
        resized = []
        for frame in self.frames:
            t = to_tensor(frame)
            t = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
            resized.append(np.clip(to_array(t), 0, 1))
        return BackgroundProvider(resized, mode=self.mode)


@dataclasses.dataclass
class SessionState:
    p2p: P2PModel
    p2f: P2FModel
    current: torch.Tensor          # (1, 4, H, W) pose+object stack at pose resolution
    background: BackgroundProvider
    motion_scale: float
    fps: int
    frame_size: tuple[int, int]    # renderer output (H, W)
    pose_to_frame_scale: int
    ticks: int = 0


@dataclasses.dataclass
class TickResult:
    frame: np.ndarray        # (H, W, 3) composited output
    pose: np.ndarray         # (h, w, 4) generated pose+object stack
    raw: np.ndarray          # (H, W, 3) renderer raw image
    mask: np.ndarray         # (H, W, 1) blend mask
    background: np.ndarray   # (H, W, 3) plate used this tick
    control: Displacement2   # scaled displacement actually applied
    index: int


def create_session(p2p_path, p2f_path, p0_stack: np.ndarray,
                   background: BackgroundProvider) -> SessionState:
    """Load both checkpoints and package live state.

    `p0_stack` is an (H, W, 4) pose+object array at pose resolution; it must
    binarize non-empty.  The renderer resolution must equal the pose
    resolution times a positive integer (poses are upsampled bilinearly).
    """
    p2p, p2p_extra = P2PModel.load(p2p_path)
    p2f, _p2f_extra = P2FModel.load(p2f_path)
    if "mean_motion_magnitude" not in p2p_extra:
        raise ValueError(f"{p2p_path} lacks motion statistics; retrain to embed them")
    pose_h, pose_w = p2p.resolution
    frame_h, frame_w = p2f.resolution
    if frame_h % pose_h or frame_w % pose_w or frame_h // pose_h != frame_w // pose_w:
        raise ValueError(
            f"renderer resolution {p2f.resolution} is not an integer multiple "
            f"of pose resolution {p2p.resolution}"
        )
    stack = to_tensor(p0_stack)
    if stack.shape[1] != 4:
        raise ValueError(f"seed stack must have 4 channels, got {stack.shape[1]}")
    if stack.shape[-2:] != (pose_h, pose_w):
        raise ValueError(
            f"seed stack is {tuple(stack.shape[-2:])}, model expects {(pose_h, pose_w)}"
        )
    if stack_com(stack) is None:
        raise EmptyMaskError("seed pose binarizes empty")
    motion_scale = 0.5 * float(p2p_extra["mean_motion_magnitude"])
    if motion_scale <= 0:
        raise ValueError("stored motion magnitude must be positive")
    background = background.resize(frame_h, frame_w)
    return SessionState(
        p2p=p2p,
        p2f=p2f,
        current=stack,
        background=background,
        motion_scale=motion_scale,
        fps=int(p2p_extra.get("fps", 30)),
        frame_size=(frame_h, frame_w),
        pose_to_frame_scale=frame_h // pose_h,
    )


def _combined(stack: torch.Tensor) -> torch.Tensor:
    return torch.clamp(stack[:, :3] + stack[:, 3:4], 0.0, 1.0)


def tick(session: SessionState, direction: Displacement2) -> TickResult:
    """Advance one frame: scale the unit direction, step the pose, render,
    blend.  Directions longer than unit are rejected; (0, 0) idles."""
    if not (np.isfinite(direction.dx) and np.isfinite(direction.dy)):
        raise ValueError("direction must be finite")
    if direction.norm() > 1.0 + 1e-6:
        raise ValueError(f"direction norm {direction.norm():.3f} exceeds 1")
    s = Displacement2(direction.dx * session.motion_scale,
                      direction.dy * session.motion_scale)
    control = torch.tensor([[s.dx, s.dy]], dtype=torch.float32)
    prev = session.current
    with torch.no_grad():
        nxt = session.p2p.generator(prev, control)
        prev_c, cur_c = _combined(prev), _combined(nxt)
        if session.pose_to_frame_scale != 1:
            size = session.frame_size
            prev_c = F.interpolate(prev_c, size=size, mode="bilinear", align_corners=False)
            cur_c = F.interpolate(cur_c, size=size, mode="bilinear", align_corners=False)
        z, m = session.p2f.generator(torch.cat([prev_c, cur_c], dim=1))
    background = session.background.next()
    raw = to_array(z)
    mask = to_array(m)
    frame = blend(raw, mask, background)
    session.current = nxt
    session.ticks += 1
    return TickResult(
        frame=frame,
        pose=to_array(nxt),
        raw=raw,
        mask=mask,
        background=background,
        control=s,
        index=session.ticks,
    )


def rollout_offline(session: SessionState, controls, out_dir) -> dict:
    """Drive the session over a control stream and write the PNG sequence
    plus a manifest; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, direction in enumerate(controls):
        result = tick(session, direction)
        path = out_dir / f"frame_{i:06d}.png"
        try:
            save_image(path, result.frame)
        except OSError as err:
            raise OSError(f"failed writing frame {i} to {path}: {err}") from err
        count += 1
    h, w = session.frame_size
    manifest = {"fps": session.fps, "width": w, "height": h, "count": count}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
