"""Dataset layout, training-pair construction and occlusion augmentation.

On-disk clip layout:

    clip/
      frames/%06d.png    8-bit RGB target frames
      poses/%06d.png     8-bit RGB pose maps
      objects/%06d.png   8-bit grayscale object channel
      manifest.json      {"fps": int, "width": int, "height": int, "count": int}
      background.png     optional clean plate (no character, no shadow)

A dataset directory is either a single clip or a directory of clip subdirs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from vid2game.domain import (
    BinaryMask,
    Displacement2,
    EmptyMaskError,
    Frame,
    ObjectMap,
    PoseMap,
    bounding_box,
    binarize_pose,
    center_of_mass,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
BACKGROUND_NAME = "background.png"


class EmptyDatasetError(ValueError):
    """Raised when a clip cannot yield a single training pair."""


# -- image + manifest I/O ----------------------------------------------------

def save_image(path, pixels: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit PNG (RGB or grayscale)."""
    arr = np.asarray(pixels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(Path(path))


def load_image(path, channels: int = 3) -> np.ndarray:
    """Read a PNG back to a [0, 1] float32 array shaped (H, W, channels)."""
    with Image.open(Path(path)) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if channels == 1:
        arr = arr[:, :, None]
    return arr


def write_manifest(clip_dir, fps: int, width: int, height: int, count: int) -> None:
    manifest = {"fps": int(fps), "width": int(width), "height": int(height), "count": int(count)}
    (Path(clip_dir) / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


@dataclasses.dataclass(frozen=True)
class ClipManifest:
    """Index of one clip: aligned frame/pose/object sequences plus metadata."""

    root: Path
    fps: int
    width: int
    height: int
    count: int
    frame_paths: tuple[Path, ...]
    pose_paths: tuple[Path, ...]
    object_paths: tuple[Path, ...]
    background_path: Path | None = None

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        lengths = {len(self.frame_paths), len(self.pose_paths), len(self.object_paths)}
        if lengths != {self.count}:
            raise ValueError(
                f"sequence lengths {sorted(lengths)} do not all match count {self.count}"
            )

    def load_frame(self, i: int) -> Frame:
        return Frame(load_image(self.frame_paths[i], 3))

    def load_pose(self, i: int) -> PoseMap:
        return PoseMap(load_image(self.pose_paths[i], 3))

    def load_object(self, i: int) -> ObjectMap:
        return ObjectMap(load_image(self.object_paths[i], 1))

    def load_background(self) -> Frame | None:
        if self.background_path is None:
            return None
        return Frame(load_image(self.background_path, 3))


def load_clip(clip_dir) -> ClipManifest:
    clip_dir = Path(clip_dir)
    manifest_path = clip_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {clip_dir}")
    meta = json.loads(manifest_path.read_text())
    count = int(meta["count"])
    paths = {}
    for sub in ("frames", "poses", "objects"):
        found = sorted((clip_dir / sub).glob("*.png"))
        if len(found) != count:
            raise ValueError(f"{clip_dir/sub}: expected {count} PNGs, found {len(found)}")
        paths[sub] = tuple(found)
    background = clip_dir / BACKGROUND_NAME
    return ClipManifest(
        root=clip_dir,
        fps=int(meta["fps"]),
        width=int(meta["width"]),
        height=int(meta["height"]),
        count=count,
        frame_paths=paths["frames"],
        pose_paths=paths["poses"],
        object_paths=paths["objects"],
        background_path=background if background.exists() else None,
    )


def load_dataset(data_dir) -> list[ClipManifest]:
    """Load one clip or every clip subdirectory under `data_dir`."""
    data_dir = Path(data_dir)
    if (data_dir / MANIFEST_NAME).exists():
        return [load_clip(data_dir)]
    clips = [load_clip(sub) for sub in sorted(data_dir.iterdir())
             if sub.is_dir() and (sub / MANIFEST_NAME).exists()]
    if not clips:
        raise EmptyDatasetError(f"no clips with {MANIFEST_NAME} under {data_dir}")
    return clips


def median_background(clip: ClipManifest, samples: int = 25) -> Frame:
    """Per-pixel temporal median over sampled frames; a cheap clean plate
    for real clips that ship without one."""
    idx = np.linspace(0, clip.count - 1, min(samples, clip.count)).astype(int)
    stack = np.stack([clip.load_frame(int(i)).pixels for i in idx])
    return Frame(np.median(stack, axis=0).astype(np.float32))


def training_background(clip: ClipManifest) -> Frame:
    """The compositing background used while training the frame renderer."""
    plate = clip.load_background()
    if plate is not None:
        return plate
    return median_background(clip)


# -- training pairs -----------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TrainingPair:
    """One supervised example: pose/object at i-delta and i, the displacement
    of the character's center of mass between them, the target frame at i,
    and the thresholded character mask at i."""

    prev_pose: PoseMap
    prev_obj: ObjectMap
    cur_pose: PoseMap
    cur_obj: ObjectMap
    control: Displacement2
    target_frame: Frame
    cur_mask: BinaryMask
    prev_index: int
    cur_index: int


@dataclasses.dataclass(frozen=True)
class PairBuildResult:
    pairs: tuple[TrainingPair, ...]
    dropped: int

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def build_pairs(clip: ClipManifest, delta: int, threshold: float | None = None) -> PairBuildResult:
    """One pair per index i in [delta, count); pairs whose pose binarizes
    empty on either side are dropped (control undefined) and counted."""
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    if clip.count <= delta:
        raise EmptyDatasetError(
            f"clip of {clip.count} frames cannot form pairs at interval {delta}"
        )
    kwargs = {} if threshold is None else {"threshold": threshold}
    poses = [clip.load_pose(i) for i in range(clip.count)]
    objects = [clip.load_object(i) for i in range(clip.count)]
    coms = []
    for pose in poses:
        try:
            coms.append(center_of_mass(binarize_pose(pose, **kwargs)))
        except EmptyMaskError:
            coms.append(None)

    pairs = []
    dropped = 0
    for i in range(delta, clip.count):
        prev, cur = i - delta, i
        if coms[prev] is None or coms[cur] is None:
            dropped += 1
            continue
        pairs.append(TrainingPair(
            prev_pose=poses[prev],
            prev_obj=objects[prev],
            cur_pose=poses[cur],
            cur_obj=objects[cur],
            control=coms[cur] - coms[prev],
            target_frame=clip.load_frame(cur),
            cur_mask=binarize_pose(poses[cur], **kwargs),
            prev_index=prev,
            cur_index=cur,
        ))
    if dropped:
        logger.info("dropped %d/%d pairs with empty masks in %s", dropped, clip.count - delta, clip.root)
    return PairBuildResult(pairs=tuple(pairs), dropped=dropped)


def build_dataset_pairs(clips: list[ClipManifest], delta: int,
                        threshold: float | None = None) -> PairBuildResult:
    all_pairs: list[TrainingPair] = []
    dropped = 0
    for clip in clips:
        result = build_pairs(clip, delta, threshold)
        all_pairs.extend(result.pairs)
        dropped += result.dropped
    if not all_pairs:
        raise EmptyDatasetError("no usable training pairs in dataset")
    return PairBuildResult(pairs=tuple(all_pairs), dropped=dropped)


def mean_motion_magnitude(pairs) -> float:
    """Mean ||control|| over pairs; calibrates inference-time step size."""
    controls = [pair.control.norm() for pair in pairs]
    if not controls:
        raise EmptyDatasetError("mean motion magnitude of an empty pair set")
    return float(np.mean(controls))


# -- occlusion augmentation ----------------------------------------------------

@dataclasses.dataclass(frozen=True)
class OcclusionSpec:
    """A black ellipse dropped inside the character's bounding box.

    Center and semi-axes are stored as fractions of the box, so one spec can
    be replayed against any pose; `seed` records where the draw came from.
    """

    center_frac: tuple[float, float]
    axes_frac: tuple[float, float]
    seed: int = 0

    def __post_init__(self):
        fx, fy = self.center_frac
        if not (0.0 <= fx <= 1.0 and 0.0 <= fy <= 1.0):
            raise ValueError(f"ellipse center {self.center_frac} outside the box")
        if min(self.axes_frac) < 0.0:
            raise ValueError(f"semi-axes {self.axes_frac} must be nonnegative")

    @classmethod
    def sample(cls, seed: int, axes_range: tuple[float, float] = (0.05, 0.30)) -> "OcclusionSpec":
        rng = np.random.default_rng(seed)
        return cls(
            center_frac=(float(rng.uniform()), float(rng.uniform())),
            axes_frac=(
                float(rng.uniform(*axes_range)),
                float(rng.uniform(*axes_range)),
            ),
            seed=seed,
        )


def occlude(pose: PoseMap, spec: OcclusionSpec, threshold: float | None = None) -> PoseMap:
    """Zero all channels inside the spec's ellipse, placed within the pose's
    detection bounding box.  Empty poses pass through with a warning."""
    kwargs = {} if threshold is None else {"threshold": threshold}
    try:
        x0, y0, x1, y1 = bounding_box(binarize_pose(pose, **kwargs))
    except EmptyMaskError:
        logger.warning("occlude: empty pose, passing through untouched")
        return pose
    bw, bh = x1 - x0, y1 - y0
    cx = x0 + spec.center_frac[0] * bw
    cy = y0 + spec.center_frac[1] * bh
    ax = spec.axes_frac[0] * bw
    ay = spec.axes_frac[1] * bh
    if ax <= 0.0 or ay <= 0.0:
        return pose
    h, w = pose.pixels.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    inside = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    out = pose.pixels.copy()
    out[inside] = 0.0
    return PoseMap(out)


def pair_rng(base_seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample RNG stream: stable under loader parallelism and ordering."""
    return np.random.default_rng(np.random.SeedSequence([base_seed, epoch, index]))
