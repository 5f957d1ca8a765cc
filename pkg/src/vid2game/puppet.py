"""Synthetic puppet world: a deterministic walking stick figure at desk scale.

Substitutes for pose-annotated real footage.  Each state renders to the same
four aligned images a real extraction pipeline would produce: a flat-colored
part map (the pose), an object channel for the hand-held disc, a textured
photo-like frame, and the ground-truth support of the character plus its
soft shadow.  Rendering is a pure function of (state, world config), so all
randomness lives in trajectory sampling.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from vid2game.domain import (
    BinaryMask,
    Displacement2,
    Frame,
    ObjectMap,
    Point2,
    PoseMap,
    binarize_pose,
    center_of_mass,
)

TWO_PI = 2.0 * math.pi


@dataclasses.dataclass(frozen=True)
class WorldConfig:
    """Fixed parameters of one puppet world; `seed` picks palette and backdrop."""

    seed: int = 0
    size: int = 128
    fps: int = 30
    gait_gain: float = 0.5          # radians of gait phase per pixel travelled
    margin_frac: float = 0.26       # root clamp inset, fraction of frame size
    shadow_offset_frac: float = 0.06  # shadow center shift right of the feet
    shadow_strength: float = 0.55   # peak darkening under the character
    shadow_threshold: float = 0.12  # alpha above which a pixel counts as shadow

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        return cls(**data)


@dataclasses.dataclass(frozen=True)
class PuppetState:
    """Root position (pixels) and gait phase in [0, 2*pi)."""

    root: Point2
    phase: float

    def __post_init__(self):
        object.__setattr__(self, "phase", float(self.phase) % TWO_PI)


@dataclasses.dataclass(frozen=True)
class PuppetRender:
    frame: Frame
    pose: PoseMap
    obj: ObjectMap
    gt_mask: BinaryMask       # character + object + shadow support
    shadow_mask: BinaryMask   # shadow support alone


def _capsule(xs, ys, p1, p2, radius):
    """Boolean mask of pixels within `radius` of segment p1-p2."""
    px, py = p1
    qx, qy = p2
    dx, dy = qx - px, qy - py
    seg_len2 = dx * dx + dy * dy
    if seg_len2 < 1e-12:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - px) * dx + (ys - py) * dy) / seg_len2, 0.0, 1.0)
    cx = px + t * dx
    cy = py + t * dy
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


class PuppetWorld:
    """Deterministic renderer + dynamics for the synthetic character."""

    def __init__(self, config: WorldConfig = WorldConfig()):
        self.config = config
        size = config.size
        self.unit = size / 128.0
        ys, xs = np.mgrid[0:size, 0:size]
        self._xs = xs.astype(np.float64)
        self._ys = ys.astype(np.float64)
        rng = np.random.default_rng(config.seed)
        self._pose_palette = self._draw_palette(rng, low=0.35, high=1.0)
        self._cloth_palette = self._draw_palette(rng, low=0.25, high=0.9)
        self._object_color = np.array([0.75, 0.2, 0.15], dtype=np.float64)
        self._background = self._make_background(rng)
        # Root-vs-center-of-mass calibration, tabulated over the gait cycle:
        # limb swings shift the raster's center of mass, so the skeleton is
        # counter-shifted per phase to keep the tracked point on the root.
        self._calib_phases = np.linspace(0.0, TWO_PI, 33)
        self._calib_table = np.zeros((33, 2))
        center = Point2(size / 2.0, size / 2.0)
        offsets = []
        for phase in self._calib_phases[:-1]:
            render = self.render(PuppetState(center, phase))
            com = center_of_mass(binarize_pose(render.pose))
            offsets.append([com.x - center.x, com.y - center.y])
        offsets.append(offsets[0])  # wrap
        self._calib_table = np.asarray(offsets)

    # -- palette / backdrop -------------------------------------------------

    @staticmethod
    def _draw_palette(rng, low, high):
        names = ["torso", "head", "arm_l", "arm_r", "leg_l", "leg_r"]
        palette = {}
        for name in names:
            color = rng.uniform(low, high, size=3)
            # Keep parts distinguishable from near-black background.
            color[rng.integers(0, 3)] = high
            palette[name] = color
        return palette

    def _make_background(self, rng):
        size = self.config.size
        xs, ys = self._xs / size, self._ys / size
        base = 0.45 + 0.25 * ys
        f1, f2 = rng.uniform(2.0, 5.0, size=2)
        p1, p2 = rng.uniform(0, TWO_PI, size=2)
        tex = 0.08 * np.sin(TWO_PI * f1 * xs + p1) + 0.08 * np.cos(TWO_PI * f2 * ys + p2)
        tint = rng.uniform(0.75, 1.0, size=3)
        bg = np.clip((base + tex)[:, :, None] * tint[None, None, :], 0.05, 0.95)
        return bg

    @property
    def background(self) -> Frame:
        """The clean plate: the world's backdrop without character or shadow."""
        return Frame(self._background)

    # -- dynamics -----------------------------------------------------------

    def clamp_root(self, x: float, y: float) -> tuple[float, float]:
        margin = self.config.margin_frac * self.config.size
        hi = self.config.size - 1 - margin
        return float(np.clip(x, margin, hi)), float(np.clip(y, margin, hi))

    def initial_state(self, root: Point2 | None = None, phase: float = 0.0) -> PuppetState:
        if root is None:
            half = self.config.size / 2.0
            root = Point2(half, half)
        x, y = self.clamp_root(root.x, root.y)
        return PuppetState(Point2(x, y), phase)

    def step(self, state: PuppetState, s: Displacement2) -> PuppetState:
        """Advance the root by `s` (clamped in-frame) and the gait phase by
        gait_gain * ||s||, wrapped modulo 2*pi."""
        x, y = self.clamp_root(state.root.x + s.dx, state.root.y + s.dy)
        phase = (state.phase + self.config.gait_gain * s.norm()) % TWO_PI
        return PuppetState(Point2(x, y), phase)

    # -- rendering ----------------------------------------------------------

    def _calib(self, phase: float) -> np.ndarray:
        phase = float(phase) % TWO_PI
        return np.array([
            np.interp(phase, self._calib_phases, self._calib_table[:, 0]),
            np.interp(phase, self._calib_phases, self._calib_table[:, 1]),
        ])

    def _skeleton(self, state: PuppetState):
        """Part list as (name, p1, p2, radius) capsules, root-anchored."""
        u = self.unit
        calib = self._calib(state.phase)
        ax = state.root.x - calib[0]
        ay = state.root.y - calib[1]
        phase = state.phase
        hip = (ax, ay + 10 * u)
        neck = (ax, ay - 14 * u)
        head_c = (ax, ay - 22 * u)
        arm_len, leg_len = 15 * u, 19 * u
        arm_amp, leg_amp = 0.55, 0.45
        swing_r = math.sin(phase)
        swing_l = math.sin(phase + math.pi)
        parts = []
        for side, swing in (("l", swing_l), ("r", swing_r)):
            ang = leg_amp * swing
            foot = (hip[0] + leg_len * math.sin(ang), hip[1] + leg_len * math.cos(ang))
            parts.append((f"leg_{side}", hip, foot, 3.0 * u))
        parts.append(("torso", hip, neck, 5.0 * u))
        for side, swing in (("l", swing_r), ("r", swing_l)):  # arms oppose legs
            ang = arm_amp * swing
            hand = (neck[0] + arm_len * math.sin(ang), neck[1] + arm_len * math.cos(ang))
            parts.append((f"arm_{side}", neck, hand, 2.5 * u))
        parts.append(("head", head_c, head_c, 6.0 * u))
        return parts

    def _right_hand(self, state: PuppetState):
        for name, _p1, p2, _r in self._skeleton(state):
            if name == "arm_r":
                return p2
        raise RuntimeError("skeleton missing right arm")

    def _shadow_alpha(self, state: PuppetState):
        u = self.unit
        cfg = self.config
        calib = self._calib(state.phase)
        ax = state.root.x - calib[0]
        ay = state.root.y - calib[1]
        cx = ax + cfg.shadow_offset_frac * cfg.size
        cy = ay + 31 * u  # just below the feet
        d2 = ((self._xs - cx) / (20.0 * u)) ** 2 + ((self._ys - cy) / (6.0 * u)) ** 2
        return cfg.shadow_strength * np.exp(-1.5 * d2) * (d2 <= 4.0)

    def render(self, state: PuppetState) -> PuppetRender:
        size = self.config.size
        pose_px = np.zeros((size, size, 3))
        char = np.zeros((size, size), dtype=bool)
        part_masks = []
        for name, p1, p2, radius in self._skeleton(state):
            mask = _capsule(self._xs, self._ys, p1, p2, radius)
            part_masks.append((name, mask))
            pose_px[mask] = self._pose_palette[name]
            char |= mask

        hand = self._right_hand(state)
        obj_center = (hand[0] + 4.0 * self.unit, hand[1] + 2.0 * self.unit)
        obj_mask = _capsule(self._xs, self._ys, obj_center, obj_center, 4.5 * self.unit)
        obj_px = obj_mask.astype(np.float64)[:, :, None]

        shadow_alpha = self._shadow_alpha(state)
        frame_px = self._background * (1.0 - shadow_alpha[:, :, None])
        shade = np.clip(1.0 - 0.25 * (self._ys - (state.root.y - 22 * self.unit)) / (53 * self.unit), 0.7, 1.0)
        for name, mask in part_masks:
            frame_px[mask] = self._cloth_palette[name] * shade[mask, None]
        frame_px[obj_mask] = self._object_color
        frame_px = np.clip(frame_px, 0.0, 1.0)

        shadow = shadow_alpha > self.config.shadow_threshold
        gt = char | obj_mask | shadow
        return PuppetRender(
            frame=Frame(frame_px),
            pose=PoseMap(pose_px),
            obj=ObjectMap(obj_px),
            gt_mask=BinaryMask(gt.astype(np.float32)),
            shadow_mask=BinaryMask(shadow.astype(np.float32)),
        )

    # -- trajectory sampling --------------------------------------------------

    def sample_trajectory(self, frames: int, rng: np.random.Generator,
                          start: Point2 | None = None) -> list[PuppetState]:
        """Random walk in velocity segments, including occasional pauses, so
        training pairs cover directions and magnitudes down to zero motion."""
        state = self.initial_state(
            root=start
            or Point2(
                rng.uniform(0.3, 0.7) * self.config.size,
                rng.uniform(0.3, 0.7) * self.config.size,
            ),
            phase=rng.uniform(0, TWO_PI),
        )
        states = [state]
        velocity = (0.0, 0.0)
        remaining = 0
        while len(states) < frames:
            if remaining == 0:
                remaining = int(rng.integers(8, 22))
                if rng.uniform() < 0.15:
                    velocity = (0.0, 0.0)
                else:
                    angle = rng.uniform(0, TWO_PI)
                    speed = rng.uniform(0.5, 2.2)
                    velocity = (speed * math.cos(angle), speed * math.sin(angle))
            state = self.step(state, Displacement2(*velocity))
            states.append(state)
            remaining -= 1
        return states[:frames]


def synth_clip(out_dir, frames: int, seed: int, config: WorldConfig | None = None) -> Path:
    """Render a puppet clip to the on-disk dataset layout and return its path.

    Writes frames/, poses/, objects/ PNG sequences, manifest.json, the clean
    background plate, the world config and the ground-truth trajectory.
    """
    from vid2game.dataio import save_image, write_manifest

    config = config or WorldConfig()
    if config.seed != seed:
        config = dataclasses.replace(config, seed=seed)
    world = PuppetWorld(config)
    rng = np.random.default_rng(seed + 1)
    states = world.sample_trajectory(frames, rng)

    out_dir = Path(out_dir)
    for sub in ("frames", "poses", "objects"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    trajectory = []
    for i, state in enumerate(states):
        render = world.render(state)
        save_image(out_dir / "frames" / f"{i:06d}.png", render.frame.pixels)
        save_image(out_dir / "poses" / f"{i:06d}.png", render.pose.pixels)
        save_image(out_dir / "objects" / f"{i:06d}.png", render.obj.pixels)
        trajectory.append({"root": [state.root.x, state.root.y], "phase": state.phase})
    save_image(out_dir / "background.png", world.background.pixels)
    write_manifest(out_dir, fps=config.fps, width=config.size, height=config.size, count=frames)
    (out_dir / "world.json").write_text(json.dumps(config.to_dict(), indent=2))
    (out_dir / "trajectory.json").write_text(json.dumps(trajectory))
    return out_dir


def load_world(clip_dir) -> PuppetWorld:
    """Rebuild the world that synthesized a clip (for ground-truth masks)."""
    config = WorldConfig.from_dict(json.loads((Path(clip_dir) / "world.json").read_text()))
    return PuppetWorld(config)


def load_trajectory(clip_dir) -> list[PuppetState]:
    raw = json.loads((Path(clip_dir) / "trajectory.json").read_text())
    return [PuppetState(Point2(*item["root"]), item["phase"]) for item in raw]
