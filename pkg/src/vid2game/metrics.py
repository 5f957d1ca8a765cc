"""Evaluation metrics and the one-step-ahead (teacher-forced) harness.

SSIM uses the common 11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03)
over valid window positions, averaged across channels.  The perceptual
distance is backbone-feature MSE after per-location unit normalization of
channel vectors; with the hermetic random backbone it is deterministic
given the seed.  Reported "distances" follow lower-is-better conventions:
SSIM enters reports as 1 - SSIM.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from vid2game.domain import (
    EmptyMaskError,
    PoseMap,
    binarize_pose,
    center_of_mass,
)
from vid2game.netblocks import to_tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", windows, kernel)


def _unwrap(value) -> np.ndarray:
    return value.pixels if hasattr(value, "pixels") else np.asarray(value)


def ssim(a, b) -> float:
    """Mean windowed structural similarity over valid positions and channels."""
    a = _unwrap(a).astype(np.float64)
    b = _unwrap(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}px per side")
    kernel = _gaussian_kernel()
    c1 = SSIM_K1 ** 2  # data range is 1
    c2 = SSIM_K2 ** 2
    per_channel = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        sig_xx = _filter_valid(x * x, kernel) - mu_x * mu_x
        sig_yy = _filter_valid(y * y, kernel) - mu_y * mu_y
        sig_xy = _filter_valid(x * y, kernel) - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (sig_xx + sig_yy + c2))
        per_channel.append(score.mean())
    return float(np.mean(per_channel))


def ssim_distance(a, b) -> float:
    """Lower-is-better form used in reports: 1 - SSIM."""
    return 1.0 - ssim(a, b)


def _unit_normalize(feat: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt((feat ** 2).sum(dim=1, keepdim=True))
    return feat / (norm + eps)


def perceptual_distance(a, b, backbone) -> float:
    """Sum over backbone layers of MSE between unit-normalized activations."""
    ta = to_tensor(_unwrap(a).astype(np.float32))
    tb = to_tensor(_unwrap(b).astype(np.float32))
    if ta.shape != tb.shape:
        raise ValueError(f"image shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    with torch.no_grad():
        feats_a = backbone(ta)
        feats_b = backbone(tb)
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        total += float(((_unit_normalize(fa) - _unit_normalize(fb)) ** 2).mean())
    return total


def l1_distance(a, b) -> float:
    a, b = _unwrap(a), _unwrap(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).mean())


# -- control fidelity ------------------------------------------------------------

def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2 or np.std(x) < 1e-12 or np.std(y) < 1e-12:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


@dataclasses.dataclass
class FidelityResult:
    """Commanded-vs-realized agreement for one rollout.

    `step_r` correlates per-step displacements (undefined for constant
    commands), `traj_r` correlates cumulative trajectories, which stays
    well-defined whenever the command stream actually moves.  `drift` is the
    distance between the final realized center of mass and the commanded
    endpoint.
    """

    step_r: tuple[float, float]
    traj_r: tuple[float, float]
    drift: float
    excluded: int


def displacement_fidelity(controls, poses, threshold: float | None = None) -> FidelityResult:
    """Compare commanded displacements with the realized motion of pose
    centers of mass.  `poses` has one more entry than `controls`; poses that
    binarize empty are excluded from the correlations and counted."""
    controls = list(controls)
    poses = list(poses)
    if len(poses) != len(controls) + 1:
        raise ValueError(f"need len(controls)+1 poses, got {len(poses)} vs {len(controls)}")
    kwargs = {} if threshold is None else {"threshold": threshold}
    coms = []
    excluded = 0
    for pose in poses:
        pose = pose if isinstance(pose, PoseMap) else PoseMap(_unwrap(pose)[:, :, :3])
        try:
            coms.append(center_of_mass(binarize_pose(pose, **kwargs)))
        except EmptyMaskError:
            coms.append(None)
            excluded += 1
    if coms[0] is None:
        raise EmptyMaskError("initial pose binarizes empty")

    s = np.array([[c.dx, c.dy] for c in controls], dtype=np.float64)
    start = np.array([coms[0].x, coms[0].y])
    commanded = np.vstack([start, start + np.cumsum(s, axis=0)]) if len(s) else start[None]
    realized = np.array([[c.x, c.y] if c is not None else [np.nan, np.nan] for c in coms])
    valid = ~np.isnan(realized[:, 0])

    traj_r = tuple(_pearson(commanded[valid, axis], realized[valid, axis]) for axis in (0, 1))
    step_valid = valid[1:] & valid[:-1]
    realized_steps = realized[1:] - realized[:-1]
    step_r = tuple(
        _pearson(s[step_valid, axis], realized_steps[step_valid, axis]) for axis in (0, 1))

    last_valid = np.nonzero(valid)[0][-1]
    drift = float(np.linalg.norm(realized[last_valid] - commanded[-1]))
    return FidelityResult(step_r=step_r, traj_r=traj_r, drift=drift, excluded=excluded)


# -- aggregate reports --------------------------------------------------------------

@dataclasses.dataclass
class MetricSeries:
    per_frame: list[float]
    mean: float
    std: float

    @classmethod
    def from_values(cls, values) -> "MetricSeries":
        values = [float(v) for v in values]
        return cls(per_frame=values, mean=float(np.mean(values)), std=float(np.std(values)))


@dataclasses.dataclass
class MetricReport:
    metrics: dict[str, MetricSeries]
    metadata: dict

    @classmethod
    def from_per_frame(cls, values: dict[str, list], metadata: dict | None = None) -> "MetricReport":
        return cls(metrics={name: MetricSeries.from_values(v) for name, v in values.items()},
                   metadata=dict(metadata or {}))

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "metrics": {name: dataclasses.asdict(series)
                        for name, series in self.metrics.items()},
        }


def teacher_forced_eval(model, pairs, backbone, metrics=("ssim_distance", "perceptual"),
                        scale: float = 1.0, metadata: dict | None = None) -> MetricReport:
    """One-step-ahead evaluation from ground-truth inputs.

    For each held-out pair the model predicts the next pose from the true
    previous pose and control; distances are computed between the combined
    (pose+object) images.  `model` is either a pose model or a callable
    f(prev_pose, prev_obj, control) -> (pose, obj); `scale` multiplies every
    value (1000 gives the conventional readable form).
    """
    from vid2game.domain import combine_pose_object
    from vid2game.p2p import p2p_forward

    if callable(model) and not hasattr(model, "generator"):
        predict = model
    else:
        def predict(prev_pose, prev_obj, control):
            return p2p_forward(model, prev_pose, prev_obj, control)

    registry = {
        "ssim_distance": lambda a, b: ssim_distance(a, b),
        "perceptual": lambda a, b: perceptual_distance(a, b, backbone),
        "l1": l1_distance,
    }
    unknown = set(metrics) - set(registry)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")

    values: dict[str, list] = {name: [] for name in metrics}
    for pair in pairs:
        pred_pose, pred_obj = predict(pair.prev_pose, pair.prev_obj, pair.control)
        pred = combine_pose_object(pred_pose, pred_obj)
        truth = combine_pose_object(pair.cur_pose, pair.cur_obj)
        for name in metrics:
            values[name].append(scale * registry[name](pred, truth))
    meta = {"count": len(values[list(metrics)[0]]), "scale": scale}
    meta.update(metadata or {})
    return MetricReport.from_per_frame(values, meta)
