"""The next-pose network: a control-conditioned autoregressive generator.

Inputs and outputs are 4-channel stacks (pose RGB plus the object channel).
The generator's residual core is conditioned on the 2D displacement command;
two patch discriminators judge (previous, next) stacks at two scales.  The
generator objective combines least-squares adversarial terms with
discriminator and perceptual feature matching.

Training applies random elliptic occlusions to input poses (never targets)
and keeps the checkpoint from the epoch with the lowest mean discriminator
feature-matching loss rather than the last one.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from vid2game.checkpoint import (
    load_checkpoint,
    params_to_state_dict,
    save_checkpoint,
)
from vid2game.dataio import OcclusionSpec, occlude, pair_rng
from vid2game.domain import (
    Displacement2,
    EmptyMaskError,
    ObjectMap,
    PoseMap,
    binarize_pose,
    center_of_mass,
)
from vid2game.losses import (
    check_finite,
    feature_matching_l1,
    frozen,
    lsgan_discriminator_term,
    lsgan_generator_term,
)
from vid2game.netblocks import (
    ConditionedBlock,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    MultiScaleDiscriminator,
    RandomFeatureBackbone,
    ResidualBlock,
    to_array,
    to_tensor,
)

logger = logging.getLogger(__name__)

STACK_CHANNELS = 4  # pose RGB + object


@dataclasses.dataclass(frozen=True)
class P2PLossWeights:
    lambda_d: float = 10.0
    lambda_vgg: float = 10.0

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_vgg < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings shared by both trainers."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    delta: int = 2
    epochs: int = 200
    max_steps: int | None = None
    batch_size: int = 4
    seed: int = 0
    width_mult: float = 1.0
    n_res: int = 9
    norm: str = "instance"
    occlusion_prob: float = 0.5
    occlusion_axes: tuple[float, float] = (0.05, 0.30)
    log_every: int = 10
    dump_every: int = 0  # steps between image dumps; 0 disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")


class P2PModel(nn.Module):
    """Conditioned generator plus the two-scale discriminator."""

    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec):
        super().__init__()
        self.generator = Generator(gen_spec)
        self.discriminator = MultiScaleDiscriminator(disc_spec)

    @classmethod
    def build(cls, height: int, width: int, width_mult: float = 1.0,
              n_res: int = 9, norm: str = "instance") -> "P2PModel":
        gen_spec = GeneratorSpec(
            in_channels=STACK_CHANNELS,
            out_channels=STACK_CHANNELS,
            conditioned=True,
            n_res=n_res,
            width_mult=width_mult,
            input_size=(height, width),
            norm=norm,
        )
        disc_spec = DiscriminatorSpec(in_channels=2 * STACK_CHANNELS,
                                      width_mult=width_mult, norm=norm)
        return cls(gen_spec, disc_spec)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.generator.spec.input_size

    def block_kinds(self) -> list[str]:
        kinds = []
        for block in self.generator.blocks:
            if isinstance(block, ConditionedBlock):
                kinds.append("w")
            elif isinstance(block, ResidualBlock):
                kinds.append("v")
            else:
                kinds.append("?")
        return kinds

    def save(self, path, extra: dict) -> Path:
        spec = {
            "generator": self.generator.spec.to_dict(),
            "discriminator": self.discriminator.spec.to_dict(),
        }
        return save_checkpoint(path, "p2p", spec, dict(self.state_dict()), extra)

    @classmethod
    def load(cls, path) -> tuple["P2PModel", dict]:
        ckpt = load_checkpoint(path)
        if ckpt.kind != "p2p":
            raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, expected p2p")
        model = cls(GeneratorSpec.from_dict(ckpt.spec["generator"]),
                    DiscriminatorSpec.from_dict(ckpt.spec["discriminator"]))
        model.load_state_dict(params_to_state_dict(ckpt.params))
        model.eval()
        return model, ckpt.extra


# -- stack helpers -------------------------------------------------------------

def stack_pose_object(pose: PoseMap, obj: ObjectMap) -> torch.Tensor:
    """(1, 4, H, W) tensor from a pose/object pair."""
    return torch.cat([to_tensor(pose.pixels), to_tensor(obj.pixels)], dim=1)


def unstack_pose_object(stack: torch.Tensor) -> tuple[PoseMap, ObjectMap]:
    arr = to_array(stack)
    return PoseMap(arr[:, :, :3]), ObjectMap(arr[:, :, 3:4])


def combined_rgb(stack: torch.Tensor) -> torch.Tensor:
    """Pose with the object channel summed and clamped: (B, 3, H, W)."""
    return torch.clamp(stack[:, :3] + stack[:, 3:4], 0.0, 1.0)


def stack_com(stack: torch.Tensor, threshold: float | None = None):
    """Center of mass of the binarized pose channels, or None when empty."""
    pose = PoseMap(to_array(stack)[:, :, :3])
    kwargs = {} if threshold is None else {"threshold": threshold}
    try:
        return center_of_mass(binarize_pose(pose, **kwargs))
    except EmptyMaskError:
        return None


def p2p_forward(model: P2PModel, prev_pose: PoseMap, prev_obj: ObjectMap,
                s: Displacement2) -> tuple[PoseMap, ObjectMap]:
    """One autoregressive step at domain level."""
    stack = stack_pose_object(prev_pose, prev_obj)
    control = torch.tensor([[s.dx, s.dy]], dtype=torch.float32)
    with torch.no_grad():
        out = model.generator(stack, control)
    return unstack_pose_object(out)


# -- losses ---------------------------------------------------------------------

def p2p_generator_loss(model: P2PModel, backbone: nn.Module, prev: torch.Tensor,
                       real: torch.Tensor, controls: torch.Tensor,
                       weights: P2PLossWeights = P2PLossWeights()):
    """Adversarial + feature-matching generator objective.

    Returns (total, parts, fake) where parts holds ls_1, ls_2, fm_d_1,
    fm_d_2 and fm_vgg; total = ls_1 + ls_2 + lambda_d*(fm_d_1 + fm_d_2)
    + lambda_vgg*fm_vgg.  Discriminator and backbone weights receive no
    gradient from this evaluation.
    """
    fake = model.generator(prev, controls)
    with frozen(model.discriminator):
        fake_pyramids = model.discriminator(torch.cat([prev, fake], dim=1))
        with torch.no_grad():
            real_pyramids = model.discriminator(torch.cat([prev, real], dim=1))
    parts = {}
    total = fake.new_zeros(())
    for k, (fake_pyr, real_pyr) in enumerate(zip(fake_pyramids, real_pyramids), start=1):
        ls = lsgan_generator_term(fake_pyr.score)
        fm = feature_matching_l1(real_pyr.features, fake_pyr.features)
        parts[f"ls_{k}"] = float(ls.detach())
        parts[f"fm_d_{k}"] = float(fm.detach())
        total = total + ls + weights.lambda_d * fm
    with torch.no_grad():
        real_feats = backbone(combined_rgb(real))
    fake_feats = backbone(combined_rgb(fake))
    fm_vgg = feature_matching_l1(real_feats, fake_feats)
    parts["fm_vgg"] = float(fm_vgg.detach())
    total = total + weights.lambda_vgg * fm_vgg
    return total, parts, fake


def p2p_discriminator_loss(model: P2PModel, prev: torch.Tensor, real: torch.Tensor,
                           fake: torch.Tensor):
    """Least-squares discriminator objective over both scales."""
    fake = fake.detach()
    fake_pyramids = model.discriminator(torch.cat([prev, fake], dim=1))
    real_pyramids = model.discriminator(torch.cat([prev, real], dim=1))
    total = real.new_zeros(())
    parts = {}
    for k, (fake_pyr, real_pyr) in enumerate(zip(fake_pyramids, real_pyramids), start=1):
        term = lsgan_discriminator_term(fake_pyr.score, real_pyr.score)
        parts[f"d_{k}"] = float(term.detach())
        total = total + term
    return total, parts


def select_best_epoch(fm_means) -> int:
    """1-based index of the epoch with the lowest mean discriminator FM."""
    fm_means = list(fm_means)
    if not fm_means:
        raise ValueError("no epochs recorded")
    return int(np.argmin(fm_means)) + 1


# -- training data bank -----------------------------------------------------------

class PairBank:
    """Training pairs packed as uint8 tensors with on-demand occlusion.

    Occlusion randomness is a per-(epoch, index) seeded stream, so batch
    composition and loader order cannot change the augmentation.  The bank
    records the last batch's occlusion specs for pipeline audits.
    """

    def __init__(self, pairs, seed: int = 0, occlusion_prob: float = 0.5,
                 occlusion_axes: tuple[float, float] = (0.05, 0.30)):
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty pair list")
        self.seed = seed
        self.occlusion_prob = occlusion_prob
        self.occlusion_axes = occlusion_axes
        h, w = pairs[0].cur_pose.pixels.shape[:2]
        self.height, self.width = h, w

        def u8(x):
            return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)

        self.prev = np.stack([
            u8(np.concatenate([p.prev_pose.pixels, p.prev_obj.pixels], axis=2))
            for p in pairs])
        self.cur = np.stack([
            u8(np.concatenate([p.cur_pose.pixels, p.cur_obj.pixels], axis=2))
            for p in pairs])
        self.controls = np.stack([p.control.as_array() for p in pairs]).astype(np.float32)
        self.frames = np.stack([u8(p.target_frame.pixels) for p in pairs])
        self.masks = np.stack([p.cur_mask.pixels.astype(np.uint8) for p in pairs])
        self.last_audit: list[tuple[int, OcclusionSpec | None]] = []

    def __len__(self):
        return self.prev.shape[0]

    @staticmethod
    def _to_chw(batch_u8: np.ndarray) -> torch.Tensor:
        arr = batch_u8.astype(np.float32) / 255.0
        return torch.from_numpy(arr.transpose(0, 3, 1, 2)).contiguous()

    def _occluded_prev(self, indices, epoch: int) -> np.ndarray:
        out = self.prev[indices].astype(np.float32) / 255.0
        self.last_audit = []
        for row, idx in enumerate(indices):
            rng = pair_rng(self.seed, epoch, int(idx))
            spec = None
            if rng.uniform() < self.occlusion_prob:
                spec = OcclusionSpec(
                    center_frac=(float(rng.uniform()), float(rng.uniform())),
                    axes_frac=(float(rng.uniform(*self.occlusion_axes)),
                               float(rng.uniform(*self.occlusion_axes))),
                    seed=int(idx),
                )
                pose = occlude(PoseMap(out[row, :, :, :3]), spec)
                out[row, :, :, :3] = pose.pixels
            self.last_audit.append((int(idx), spec))
        return out

    def batch(self, indices, epoch: int, occlude_inputs: bool = True) -> dict:
        indices = np.asarray(indices)
        if occlude_inputs:
            prev = torch.from_numpy(
                self._occluded_prev(indices, epoch).transpose(0, 3, 1, 2)).contiguous()
        else:
            prev = self._to_chw(self.prev[indices])
        return {
            "prev": prev,
            "prev_clean": self._to_chw(self.prev[indices]),
            "cur": self._to_chw(self.cur[indices]),
            "control": torch.from_numpy(self.controls[indices]),
            "frame": self._to_chw(self.frames[indices]),
            "mask": torch.from_numpy(
                self.masks[indices].astype(np.float32).transpose(0, 3, 1, 2)).contiguous(),
            "indices": indices,
        }


# -- training loop -----------------------------------------------------------------

@dataclasses.dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    best_epoch: int
    epoch_fm: list[float]
    steps: int
    step_losses: list[dict]


def train_p2p(pairs, config: TrainConfig, out_dir,
              backbone: nn.Module | None = None,
              weights: P2PLossWeights = P2PLossWeights(),
              mean_motion: float | None = None,
              fps: int = 30) -> TrainResult:
    """Alternating Adam updates; returns the min-FM-epoch checkpoint."""
    from vid2game.dataio import mean_motion_magnitude
    from vid2game.report import render_loss_curves

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    bank = PairBank(pairs, seed=config.seed, occlusion_prob=config.occlusion_prob,
                    occlusion_axes=config.occlusion_axes)
    model = P2PModel.build(bank.height, bank.width, width_mult=config.width_mult,
                           n_res=config.n_res, norm=config.norm)
    backbone = backbone or RandomFeatureBackbone(seed=config.seed)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))
    order = np.random.default_rng(config.seed)
    if mean_motion is None:
        mean_motion = mean_motion_magnitude(pairs)

    log_path = out_dir / "train_log.jsonl"
    step = 0
    best = {"fm": float("inf"), "epoch": 0, "state": None}
    epoch_fm: list[float] = []
    step_losses: list[dict] = []
    started = time.time()
    with log_path.open("w") as log:
        for epoch in range(1, config.epochs + 1):
            perm = order.permutation(len(bank))
            fm_sum, fm_count = 0.0, 0
            for lo in range(0, len(bank) - config.batch_size + 1, config.batch_size):
                batch = bank.batch(perm[lo:lo + config.batch_size], epoch)
                g_total, g_parts, fake = p2p_generator_loss(
                    model, backbone, batch["prev"], batch["cur"], batch["control"], weights)
                check_finite("p2p generator loss", g_total)
                opt_g.zero_grad()
                g_total.backward()
                opt_g.step()

                d_total, d_parts = p2p_discriminator_loss(
                    model, batch["prev"], batch["cur"], fake)
                check_finite("p2p discriminator loss", d_total)
                opt_d.zero_grad()
                d_total.backward()
                opt_d.step()

                step += 1
                fm_step = g_parts["fm_d_1"] + g_parts["fm_d_2"]
                fm_sum += fm_step
                fm_count += 1
                entry = {"step": step, "epoch": epoch, "loss_g": float(g_total.detach()),
                         "loss_d": float(d_total.detach()), **g_parts, **d_parts}
                step_losses.append(entry)
                log.write(json.dumps(entry) + "\n")
                if config.log_every and step % config.log_every == 0:
                    logger.info("p2p step %d epoch %d loss_g %.4f loss_d %.4f",
                                step, epoch, float(g_total.detach()), float(d_total.detach()))
                if config.max_steps and step >= config.max_steps:
                    break
            if fm_count:
                mean_fm = fm_sum / fm_count
                epoch_fm.append(mean_fm)
                log.write(json.dumps({"epoch": epoch, "mean_fm_d": mean_fm}) + "\n")
                if mean_fm < best["fm"]:
                    best = {"fm": mean_fm, "epoch": epoch,
                            "state": copy.deepcopy(model.state_dict())}
            if config.max_steps and step >= config.max_steps:
                break

    if best["state"] is not None:
        model.load_state_dict(best["state"])
    best_epoch = best["epoch"] or select_best_epoch(epoch_fm or [0.0])
    extra = {
        "mean_motion_magnitude": float(mean_motion),
        "delta": config.delta,
        "fps": fps,
        "resolution": [bank.height, bank.width],
        "best_epoch": best_epoch,
        "epoch_fm": epoch_fm,
        "steps": step,
        "seed": config.seed,
    }
    ckpt_path = model.save(out_dir / "p2p.ckpt", extra)
    render_loss_curves(step_losses, out_dir / "p2p_losses.png",
                       keys=("loss_g", "loss_d", "fm_vgg"))
    logger.info("p2p training done: %d steps in %.1fs, best epoch %d",
                step, time.time() - started, best_epoch)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       best_epoch=best_epoch, epoch_fm=epoch_fm, steps=step,
                       step_losses=step_losses)


# -- rollout --------------------------------------------------------------------

@dataclasses.dataclass
class RolloutResult:
    stacks: list[torch.Tensor]          # generated (1, 4, H, W) stacks
    coms: list                          # Point2 or None per generated pose
    drift: float | None                 # ||rho_N - (rho_0 + sum s)||
    empty_masks: int


def rollout(model: P2PModel, p0: torch.Tensor, controls) -> RolloutResult:
    """Iterate the generator over a control stream and measure drift."""
    controls = list(controls)
    stacks: list[torch.Tensor] = []
    coms = []
    cur = p0
    model.eval()
    with torch.no_grad():
        for s in controls:
            control = torch.tensor([[s.dx, s.dy]], dtype=torch.float32)
            cur = model.generator(cur, control)
            stacks.append(cur)
            coms.append(stack_com(cur))
    empty = sum(1 for c in coms if c is None)
    drift = None
    start = stack_com(p0)
    valid = [c for c in coms if c is not None]
    if start is not None and valid and controls:
        target = np.array([start.x, start.y]) + np.sum(
            [[s.dx, s.dy] for s in controls], axis=0)
        final = np.array([valid[-1].x, valid[-1].y])
        drift = float(np.linalg.norm(final - target))
    return RolloutResult(stacks=stacks, coms=coms, drift=drift, empty_masks=empty)
