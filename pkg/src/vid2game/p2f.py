"""The frame renderer: pose pair in, raw image plus blending mask out.

The generator consumes the previous and current combined pose (6 channels)
and emits an RGB image and a continuous mask; the displayed frame is the
per-pixel convex combination with the chosen background.  Discriminators see
only the thresholded character region (pose and frame multiplied by the
binary mask), while the perceptual term covers the full frame so structures
outside the detected character (shadows, held objects) still earn gradient.
A four-part regularizer keeps the mask quiet outside the character, smooth
there, and saturated on it.
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

from vid2game.checkpoint import load_checkpoint, params_to_state_dict, save_checkpoint
from vid2game.dataio import build_pairs, save_image, training_background
from vid2game.domain import BlendMask, CombinedPose, Frame
from vid2game.losses import (
    check_finite,
    feature_matching_l1,
    frozen,
    lsgan_discriminator_term,
    lsgan_generator_term,
)
from vid2game.netblocks import (
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    MultiScaleDiscriminator,
    RandomFeatureBackbone,
    to_array,
    to_tensor,
)
from vid2game.p2p import TrainConfig, TrainResult

logger = logging.getLogger(__name__)

PAIR_CHANNELS = 6  # combined pose at i-1 and at i


@dataclasses.dataclass(frozen=True)
class P2FLossWeights:
    lambda_d: float = 10.0         # discriminator feature matching
    lambda_backbone: float = 10.0  # perceptual feature matching on full frames
    lambda_mask: float = 1.0       # mask regularizer

    def __post_init__(self):
        if min(self.lambda_d, self.lambda_backbone, self.lambda_mask) < 0:
            raise ValueError("loss weights must be nonnegative")


class P2FModel(nn.Module):
    """Unconditioned dual-head generator plus the two-scale discriminator."""

    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec):
        super().__init__()
        if gen_spec.conditioned or not gen_spec.mask_head:
            raise ValueError("frame renderer must be unconditioned with a mask head")
        self.generator = Generator(gen_spec)
        self.discriminator = MultiScaleDiscriminator(disc_spec)

    @classmethod
    def build(cls, height: int, width: int, width_mult: float = 1.0,
              n_res: int = 9, norm: str = "instance") -> "P2FModel":
        gen_spec = GeneratorSpec(
            in_channels=PAIR_CHANNELS,
            out_channels=3,
            n_res=n_res,
            width_mult=width_mult,
            input_size=(height, width),
            norm=norm,
            mask_head=True,
        )
        disc_spec = DiscriminatorSpec(in_channels=PAIR_CHANNELS + 3,
                                      width_mult=width_mult, norm=norm)
        return cls(gen_spec, disc_spec)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.generator.spec.input_size

    def save(self, path, extra: dict) -> Path:
        spec = {
            "generator": self.generator.spec.to_dict(),
            "discriminator": self.discriminator.spec.to_dict(),
        }
        return save_checkpoint(path, "p2f", spec, dict(self.state_dict()), extra)

    @classmethod
    def load(cls, path) -> tuple["P2FModel", dict]:
        ckpt = load_checkpoint(path)
        if ckpt.kind != "p2f":
            raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, expected p2f")
        model = cls(GeneratorSpec.from_dict(ckpt.spec["generator"]),
                    DiscriminatorSpec.from_dict(ckpt.spec["discriminator"]))
        model.load_state_dict(params_to_state_dict(ckpt.params))
        model.eval()
        return model, ckpt.extra


# -- compositing -----------------------------------------------------------------

def _unwrap(value):
    return value.pixels if hasattr(value, "pixels") else value


def blend(raw, mask, background):
    """Per-pixel convex combination: raw*mask + background*(1-mask).

    Accepts numpy (H, W, C) arrays, torch (B, C, H, W) tensors, or the
    domain wrappers; the mask broadcasts over color channels.
    """
    wrapped = hasattr(raw, "pixels") or hasattr(background, "pixels")
    z, m, b = _unwrap(raw), _unwrap(mask), _unwrap(background)
    spatial = (lambda a: a.shape[:2]) if isinstance(z, np.ndarray) else (lambda a: a.shape[-2:])
    if not (spatial(z) == spatial(m) == spatial(b)):
        raise ValueError(
            f"size mismatch: raw {spatial(z)}, mask {spatial(m)}, background {spatial(b)}"
        )
    out = z * m + b * (1.0 - m)
    return Frame(out) if wrapped else out


def p2f_forward(model: P2FModel, prev: CombinedPose, cur: CombinedPose):
    """Domain-level forward: returns the raw image and the blend mask."""
    if prev.pixels.shape != cur.pixels.shape:
        raise ValueError("combined poses differ in size")
    pair = torch.cat([to_tensor(prev.pixels), to_tensor(cur.pixels)], dim=1)
    with torch.no_grad():
        z, m = model.generator(pair)
    return Frame(np.clip(to_array(z), 0, 1)), BlendMask(to_array(m))


# -- losses -----------------------------------------------------------------------

def _forward_differences(m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along x (columns) and y (rows), zero at the
    trailing border."""
    mx = torch.zeros_like(m)
    mx[..., :, :-1] = m[..., :, 1:] - m[..., :, :-1]
    my = torch.zeros_like(m)
    my[..., :-1, :] = m[..., 1:, :] - m[..., :-1, :]
    return mx, my


def mask_loss(m, t):
    """Four mean-reduced penalties on the blend mask given the character mask:

      outside: mask activity where the character is not detected
      grad_x/grad_y: mask variation outside the character (forward diffs)
      inside: mask deficit on the character

    Returns (total, parts).  Accepts (B, 1, H, W) tensors (total stays a
    tensor, differentiable) or single-image arrays / domain wrappers.
    """
    tensor_in = torch.is_tensor(m)
    m_t, t_t = _unwrap(m), _unwrap(t)
    if not tensor_in:
        m_t = to_tensor(np.asarray(m_t, dtype=np.float32))
        t_t = to_tensor(np.asarray(t_t, dtype=np.float32))
    if m_t.shape != t_t.shape:
        raise ValueError(f"mask shapes differ: {tuple(m_t.shape)} vs {tuple(t_t.shape)}")
    inv = 1.0 - t_t
    mx, my = _forward_differences(m_t)
    outside = (m_t * inv).mean()
    grad_x = (mx.abs() * inv).mean()
    grad_y = (my.abs() * inv).mean()
    inside = ((1.0 - m_t) * t_t).mean()
    total = outside + grad_x + grad_y + inside
    parts = {"outside": float(outside.detach()), "grad_x": float(grad_x.detach()),
             "grad_y": float(grad_y.detach()), "inside": float(inside.detach())}
    if tensor_in:
        return total, parts
    return float(total), parts


def p2f_generator_loss(model: P2FModel, backbone: nn.Module, pose_pair: torch.Tensor,
                       target: torch.Tensor, char_mask: torch.Tensor,
                       background: torch.Tensor,
                       weights: P2FLossWeights = P2FLossWeights()):
    """Masked adversarial terms + full-frame perceptual term + mask penalty.

    Returns (total, parts, (z, m, f)).  The composited frame f blends the
    generated raw image with `background`; discriminators see pose and frame
    multiplied by the binary character mask.
    """
    z, m = model.generator(pose_pair)
    f = blend(z, m, background)
    pt = pose_pair * char_mask
    ft = f * char_mask
    ot = target * char_mask
    with frozen(model.discriminator):
        fake_pyramids = model.discriminator(torch.cat([pt, ft], dim=1))
        with torch.no_grad():
            real_pyramids = model.discriminator(torch.cat([pt, ot], dim=1))
    parts = {}
    total = f.new_zeros(())
    for k, (fake_pyr, real_pyr) in enumerate(zip(fake_pyramids, real_pyramids), start=1):
        ls = lsgan_generator_term(fake_pyr.score)
        fm = feature_matching_l1(real_pyr.features, fake_pyr.features)
        parts[f"ls_{k}"] = float(ls.detach())
        parts[f"fm_d_{k}"] = float(fm.detach())
        total = total + ls + weights.lambda_d * fm
    with torch.no_grad():
        real_feats = backbone(target)
    fm_vgg = feature_matching_l1(real_feats, backbone(f))
    parts["fm_vgg"] = float(fm_vgg.detach())
    mask_total, mask_parts = mask_loss(m, char_mask)
    parts["mask"] = float(mask_total.detach())
    parts.update({f"mask_{k}": v for k, v in mask_parts.items()})
    total = total + weights.lambda_backbone * fm_vgg + weights.lambda_mask * mask_total
    return total, parts, (z, m, f)


def p2f_discriminator_loss(model: P2FModel, pose_pair: torch.Tensor,
                           target: torch.Tensor, char_mask: torch.Tensor,
                           frame: torch.Tensor):
    """Least-squares discriminator objective on character-masked frames."""
    frame = frame.detach()
    pt = pose_pair * char_mask
    fake_pyramids = model.discriminator(torch.cat([pt, frame * char_mask], dim=1))
    real_pyramids = model.discriminator(torch.cat([pt, target * char_mask], dim=1))
    total = target.new_zeros(())
    parts = {}
    for k, (fake_pyr, real_pyr) in enumerate(zip(fake_pyramids, real_pyramids), start=1):
        term = lsgan_discriminator_term(fake_pyr.score, real_pyr.score)
        parts[f"d_{k}"] = float(term.detach())
        total = total + term
    return total, parts


# -- training data ------------------------------------------------------------------

class FrameBank:
    """Pose pairs, target frames, character masks and per-clip background
    plates packed as uint8 tensors."""

    def __init__(self, clips, delta: int, threshold: float | None = None):
        pose_pairs, frames, masks, bg_index, plates = [], [], [], [], []

        def u8(x):
            return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)

        for clip in clips:
            result = build_pairs(clip, delta, threshold)
            plate = training_background(clip)
            plates.append(u8(plate.pixels))
            for pair in result.pairs:
                prev_c = np.clip(pair.prev_pose.pixels + pair.prev_obj.pixels, 0, 1)
                cur_c = np.clip(pair.cur_pose.pixels + pair.cur_obj.pixels, 0, 1)
                pose_pairs.append(u8(np.concatenate([prev_c, cur_c], axis=2)))
                frames.append(u8(pair.target_frame.pixels))
                masks.append(pair.cur_mask.pixels.astype(np.uint8))
                bg_index.append(len(plates) - 1)
        if not pose_pairs:
            raise ValueError("no usable frame-training pairs")
        self.pose_pairs = np.stack(pose_pairs)
        self.frames = np.stack(frames)
        self.masks = np.stack(masks)
        self.bg_index = np.asarray(bg_index)
        self.plates = np.stack(plates)
        self.height, self.width = self.frames.shape[1:3]

    def __len__(self):
        return self.pose_pairs.shape[0]

    @staticmethod
    def _to_chw(batch_u8: np.ndarray) -> torch.Tensor:
        arr = batch_u8.astype(np.float32) / 255.0
        return torch.from_numpy(arr.transpose(0, 3, 1, 2)).contiguous()

    def batch(self, indices) -> dict:
        indices = np.asarray(indices)
        return {
            "pose_pair": self._to_chw(self.pose_pairs[indices]),
            "frame": self._to_chw(self.frames[indices]),
            "mask": torch.from_numpy(
                self.masks[indices].astype(np.float32).transpose(0, 3, 1, 2)).contiguous(),
            "background": self._to_chw(self.plates[self.bg_index[indices]]),
            "indices": indices,
        }


# -- training loop --------------------------------------------------------------------

def train_p2f(clips, config: TrainConfig, out_dir,
              backbone: nn.Module | None = None,
              weights: P2FLossWeights = P2FLossWeights(),
              fps: int = 30) -> TrainResult:
    """Alternating Adam updates; keeps the final-epoch weights and dumps
    raw/mask/frame triptychs periodically for progression inspection."""
    from vid2game.report import render_loss_curves

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_dir = out_dir / "progression"
    torch.manual_seed(config.seed)
    bank = FrameBank(clips, delta=config.delta)
    model = P2FModel.build(bank.height, bank.width, width_mult=config.width_mult,
                           n_res=config.n_res, norm=config.norm)
    backbone = backbone or RandomFeatureBackbone(seed=config.seed)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))
    order = np.random.default_rng(config.seed)

    log_path = out_dir / "train_log.jsonl"
    step = 0
    epoch = 0
    step_losses: list[dict] = []
    started = time.time()
    with log_path.open("w") as log:
        for epoch in range(1, config.epochs + 1):
            perm = order.permutation(len(bank))
            for lo in range(0, len(bank) - config.batch_size + 1, config.batch_size):
                batch = bank.batch(perm[lo:lo + config.batch_size])
                g_total, g_parts, (z, m, f) = p2f_generator_loss(
                    model, backbone, batch["pose_pair"], batch["frame"],
                    batch["mask"], batch["background"], weights)
                check_finite("p2f generator loss", g_total)
                opt_g.zero_grad()
                g_total.backward()
                opt_g.step()

                d_total, d_parts = p2f_discriminator_loss(
                    model, batch["pose_pair"], batch["frame"], batch["mask"], f)
                check_finite("p2f discriminator loss", d_total)
                opt_d.zero_grad()
                d_total.backward()
                opt_d.step()

                step += 1
                entry = {"step": step, "epoch": epoch, "loss_g": float(g_total.detach()),
                         "loss_d": float(d_total.detach()), **g_parts, **d_parts}
                step_losses.append(entry)
                log.write(json.dumps(entry) + "\n")
                if config.log_every and step % config.log_every == 0:
                    logger.info("p2f step %d epoch %d loss_g %.4f loss_d %.4f",
                                step, epoch, float(g_total.detach()), float(d_total.detach()))
                if config.dump_every and step % config.dump_every == 0:
                    dump_dir.mkdir(exist_ok=True)
                    stem = f"epoch{epoch:04d}_step{step:06d}"
                    save_image(dump_dir / f"{stem}_z.png", to_array(z[:1]))
                    save_image(dump_dir / f"{stem}_m.png", to_array(m[:1]))
                    save_image(dump_dir / f"{stem}_f.png", to_array(f[:1].clamp(0, 1)))
                if config.max_steps and step >= config.max_steps:
                    break
            if config.max_steps and step >= config.max_steps:
                break

    extra = {
        "delta": config.delta,
        "fps": fps,
        "resolution": [bank.height, bank.width],
        "steps": step,
        "seed": config.seed,
    }
    ckpt_path = model.save(out_dir / "p2f.ckpt", extra)
    render_loss_curves(step_losses, out_dir / "p2f_losses.png",
                       keys=("loss_g", "loss_d", "mask"))
    logger.info("p2f training done: %d steps in %.1fs", step, time.time() - started)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       best_epoch=epoch, epoch_fm=[], steps=step,
                       step_losses=step_losses)
