"""Core image-valued domain types and the pose operations shared everywhere.

All images are numpy float32 arrays shaped (H, W, C) with values in [0, 1].
Network-native [-1, 1] activations are converted at module boundaries, so
this canonical range holds for compositing, metrics and file I/O alike.
Instances are immutable: the wrapped arrays are marked read-only.

Coordinate convention: x is the column index (rightward), y the row index
(downward), origin at the top-left pixel.
"""

from __future__ import annotations

import dataclasses

import numpy as np

# Binarization default: 8/255, i.e. "anything brighter than near-black".
DEFAULT_POSE_THRESHOLD = 8.0 / 255.0


class EmptyMaskError(ValueError):
    """Raised when an operation needs on-pixels but the mask has none."""


def _validate_image(pixels: np.ndarray, channels: int, name: str) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2 and channels == 1:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise ValueError(f"{name} must be (H, W, {channels}), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive spatial size, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclasses.dataclass(frozen=True)
class PoseMap:
    """Dense body-surface pose rendered as an opaque 3-channel color image."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _validate_image(self.pixels, 3, "PoseMap"))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclasses.dataclass(frozen=True)
class ObjectMap:
    """Single-channel map marking a hand-held object (racket, sword, ...)."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _validate_image(self.pixels, 1, "ObjectMap"))


@dataclasses.dataclass(frozen=True)
class CombinedPose:
    """Pose with the object channel summed into each RGB channel (clamped)."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _validate_image(self.pixels, 3, "CombinedPose"))


@dataclasses.dataclass(frozen=True)
class BinaryMask:
    """Strictly binary (0/1) single-channel mask."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = _validate_image(self.pixels, 1, "BinaryMask")
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("BinaryMask values must be exactly 0 or 1")
        object.__setattr__(self, "pixels", arr)

    def count(self) -> int:
        return int(self.pixels.sum())


@dataclasses.dataclass(frozen=True)
class BlendMask:
    """Continuous per-pixel blend weight in [0, 1]; deliberately non-binary
    so soft effects such as shadows can mix synthesis with background."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _validate_image(self.pixels, 1, "BlendMask"))


@dataclasses.dataclass(frozen=True)
class Frame:
    """An RGB image in [0, 1]; also used for raw generator output and backgrounds."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _validate_image(self.pixels, 3, "Frame"))


# Raw generator output and background plates are structurally plain RGB frames.
RawImage = Frame
Background = Frame


@dataclasses.dataclass(frozen=True)
class Displacement2:
    """2D control displacement in pixels at pose resolution."""

    dx: float
    dy: float

    def __post_init__(self):
        if not (np.isfinite(self.dx) and np.isfinite(self.dy)):
            raise ValueError("Displacement2 components must be finite")
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))

    def norm(self) -> float:
        return float(np.hypot(self.dx, self.dy))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy], dtype=np.float64)


@dataclasses.dataclass(frozen=True)
class Point2:
    """Pixel coordinate: x is the column, y the row, origin top-left."""

    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("Point2 components must be finite")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    def __sub__(self, other: "Point2") -> Displacement2:
        return Displacement2(self.x - other.x, self.y - other.y)


def combine_pose_object(pose: PoseMap, obj: ObjectMap) -> CombinedPose:
    """Sum the object channel into each pose channel, clamped to [0, 1]."""
    if pose.pixels.shape[:2] != obj.pixels.shape[:2]:
        raise ValueError(
            f"pose {pose.pixels.shape[:2]} and object {obj.pixels.shape[:2]} sizes differ"
        )
    combined = np.clip(pose.pixels + obj.pixels, 0.0, 1.0)
    return CombinedPose(combined)


def binarize_pose(pose: PoseMap, threshold: float = DEFAULT_POSE_THRESHOLD) -> BinaryMask:
    """Threshold the pose image: a pixel is on iff its channel max exceeds `threshold`."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    on = pose.pixels.max(axis=2) > threshold
    return BinaryMask(on.astype(np.float32))


def center_of_mass(mask: BinaryMask) -> Point2:
    """Arithmetic mean of on-pixel coordinates; raises EmptyMaskError when blank."""
    ys, xs = np.nonzero(mask.pixels[:, :, 0])
    if len(xs) == 0:
        raise EmptyMaskError("no character detected: mask has no on pixels")
    return Point2(float(xs.mean()), float(ys.mean()))


def bounding_box(mask: BinaryMask) -> tuple[int, int, int, int]:
    """Tight (x0, y0, x1, y1) box around on pixels, inclusive bounds."""
    ys, xs = np.nonzero(mask.pixels[:, :, 0])
    if len(xs) == 0:
        raise EmptyMaskError("no character detected: mask has no on pixels")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())
