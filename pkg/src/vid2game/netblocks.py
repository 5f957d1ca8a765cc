"""Reusable network building blocks.

Generators follow a Conv7-downsample-residual-upsample-Conv7 layout with
instance normalization; residual cores mix vanilla blocks with blocks whose
activations receive an additive linear projection of the 2D control vector.
Discriminators are 4-layer patch classifiers applied at full and half
resolution; they return every intermediate activation so feature-matching
losses can compare real and generated stacks layer by layer.

All torch-facing image tensors are (B, C, H, W) float32 in [0, 1]; the
[-1, 1] mapping around tanh happens inside Generator.forward.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """(H, W, C) [0,1] array -> (1, C, H, W) float32 tensor."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    chw = np.ascontiguousarray(arr.transpose(2, 0, 1))
    if not chw.flags.writeable:  # domain types pin their arrays read-only
        chw = chw.copy()
    return torch.from_numpy(chw)[None]


def to_array(tensor: torch.Tensor) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) tensor -> (H, W, C) float32 array."""
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {tensor.shape[0]}")
        tensor = tensor[0]
    return tensor.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=False)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm kind {kind!r}")


def downsample_half(x: torch.Tensor) -> torch.Tensor:
    """Halve spatial dims with 3x3 average pooling (stride 2, padding 1).

    Border windows average only in-bounds pixels, so constants stay constant.
    """
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ValueError(f"input too small to downsample: {tuple(x.shape)}")
    return F.avg_pool2d(x, kernel_size=3, stride=2, padding=1, count_include_pad=False)


class ResidualBlock(nn.Module):
    """f2(f1(x)) + x with two 3x3 convolutions and a full identity bypass."""

    def __init__(self, channels: int, norm: str = "instance"):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.norm1 = make_norm(norm, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3)
        self.norm2 = make_norm(norm, channels)

    def _f1(self, x):
        return F.relu(self.norm1(self.conv1(F.pad(x, (1, 1, 1, 1), mode="reflect"))))

    def _f2(self, h):
        return self.norm2(self.conv2(F.pad(h, (1, 1, 1, 1), mode="reflect")))

    def forward(self, x):
        return self._f2(self._f1(x)) + x


class ConditionedBlock(nn.Module):
    """Residual block whose activations are shifted by a linear projection of
    the control vector: f2(f1(x) + g(s)) + f1(x) + g(s).

    There is no full identity bypass of the convolutions, so the control
    signal cannot be ignored by feeding x straight through.  The projection
    is zero-initialized: a fresh block behaves as if unconditioned.
    """

    def __init__(self, channels: int, feature_size: tuple[int, int],
                 control_dim: int = 2, norm: str = "instance"):
        super().__init__()
        self.channels = channels
        self.feature_size = tuple(feature_size)
        h, w = self.feature_size
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.norm1 = make_norm(norm, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3)
        self.norm2 = make_norm(norm, channels)
        self.project = nn.Linear(control_dim, channels * h * w)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def _f1(self, x):
        return F.relu(self.norm1(self.conv1(F.pad(x, (1, 1, 1, 1), mode="reflect"))))

    def _f2(self, t):
        return self.norm2(self.conv2(F.pad(t, (1, 1, 1, 1), mode="reflect")))

    def control_tensor(self, s: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        h, w = self.feature_size
        if like.shape[-2:] != (h, w) or like.shape[1] != self.channels:
            raise ValueError(
                f"conditioned block built for {self.channels}x{h}x{w} features, "
                f"got {tuple(like.shape[1:])}"
            )
        return self.project(s).view(-1, self.channels, h, w)

    def forward(self, x, s):
        t = self._f1(x) + self.control_tensor(s, x)
        return self._f2(t) + t


# -- generator ----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    """Architecture knobs for one generator.

    `width_mult` scales every channel count, preserving the 64/128/256/...
    ladder ratios for desk-scale runs.  `input_size` fixes the latent spatial
    dims and is required when `conditioned` (the control projection is sized
    to the latent tensor).
    """

    in_channels: int
    out_channels: int
    base_width: int = 64
    depth: int = 4
    n_res: int = 9
    conditioned: bool = False
    control_dim: int = 2
    width_mult: float = 1.0
    input_size: tuple[int, int] | None = None
    norm: str = "instance"
    mask_head: bool = False

    def __post_init__(self):
        if self.n_res < 2:
            raise ValueError(f"need at least 2 residual blocks, got {self.n_res}")
        if self.conditioned and self.input_size is None:
            raise ValueError("conditioned generators need a fixed input_size")
        if self.input_size is not None:
            h, w = self.input_size
            div = 2 ** self.depth
            if h % div or w % div:
                raise ValueError(f"input size {self.input_size} not divisible by {div}")
            object.__setattr__(self, "input_size", (int(h), int(w)))

    @property
    def conditioned_count(self) -> int:
        return self.n_res - 2 if self.conditioned else 0

    def widths(self) -> list[int]:
        w0 = max(1, round(self.base_width * self.width_mult))
        return [w0 * (2 ** i) for i in range(self.depth + 1)]

    def latent_size(self) -> tuple[int, int]:
        if self.input_size is None:
            raise ValueError("spec has no input_size")
        h, w = self.input_size
        return h // (2 ** self.depth), w // (2 ** self.depth)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        if data["input_size"] is not None:
            data["input_size"] = list(data["input_size"])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        data = dict(data)
        if data.get("input_size") is not None:
            data["input_size"] = tuple(data["input_size"])
        return cls(**data)


class Generator(nn.Module):
    """Encoder, residual core (optionally control-conditioned), decoder.

    Image head ends in tanh and is remapped so inputs and outputs share the
    [0, 1] convention; the optional mask head ends in sigmoid.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths()
        norm = spec.norm

        enc = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.in_channels, widths[0], 7),
            make_norm(norm, widths[0]),
            nn.ReLU(inplace=True),
        ]
        for i in range(spec.depth):
            enc += [
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                make_norm(norm, widths[i + 1]),
                nn.ReLU(inplace=True),
            ]
        self.encoder = nn.Sequential(*enc)

        latent = widths[-1]
        blocks: list[nn.Module] = [ResidualBlock(latent, norm)]
        for _ in range(spec.conditioned_count):
            blocks.append(ConditionedBlock(latent, spec.latent_size(), spec.control_dim, norm))
        for _ in range(spec.n_res - 1 - spec.conditioned_count):
            blocks.append(ResidualBlock(latent, norm))
        self.blocks = nn.ModuleList(blocks)

        dec = []
        for i in range(spec.depth, 0, -1):
            dec += [
                nn.ConvTranspose2d(widths[i], widths[i - 1], 3, stride=2,
                                   padding=1, output_padding=1),
                make_norm(norm, widths[i - 1]),
                nn.ReLU(inplace=True),
            ]
        self.decoder = nn.Sequential(*dec)
        self.image_head = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(widths[0], spec.out_channels, 7)
        )
        self.mask_head = None
        if spec.mask_head:
            self.mask_head = nn.Sequential(
                nn.ReflectionPad2d(3), nn.Conv2d(widths[0], 1, 7)
            )

    def forward(self, x: torch.Tensor, s: torch.Tensor | None = None):
        if self.spec.conditioned:
            if s is None:
                raise ValueError("conditioned generator needs a control tensor")
            if x.shape[-2:] != self.spec.input_size:
                raise ValueError(
                    f"model built for {self.spec.input_size} inputs, got {tuple(x.shape[-2:])}"
                )
        h = self.encoder(x * 2.0 - 1.0)
        for block in self.blocks:
            h = block(h, s) if isinstance(block, ConditionedBlock) else block(h)
        h = self.decoder(h)
        image = (torch.tanh(self.image_head(h)) + 1.0) / 2.0
        if self.mask_head is None:
            return image
        mask = torch.sigmoid(self.mask_head(h))
        return image, mask


# -- discriminators -------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ActivationPyramid:
    """Ordered intermediate feature maps plus (for discriminators) the raw
    patch score map.  Scores carry no sigmoid: the losses are least-squares."""

    features: list[torch.Tensor]
    score: torch.Tensor | None = None


@dataclasses.dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int
    base_width: int = 64
    width_mult: float = 1.0
    scales: int = 2
    norm: str = "instance"

    def __post_init__(self):
        if self.scales != 2:
            raise ValueError("exactly two discriminator scales are supported")

    def widths(self) -> list[int]:
        w0 = max(1, round(self.base_width * self.width_mult))
        return [w0, w0 * 2, w0 * 4, w0 * 8]

    @staticmethod
    def layer_geometry() -> list[tuple[int, int, int]]:
        """(kernel, stride, padding) per conv, score layer included; lets
        tests derive the patch-map size from plain stride arithmetic."""
        return [(4, 2, 2), (4, 2, 2), (4, 2, 2), (4, 1, 2), (4, 1, 2)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DiscriminatorSpec":
        return cls(**data)


class PatchDiscriminator(nn.Module):
    """4-layer patch classifier; returns all activations and the score map."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        w = spec.widths()
        geo = spec.layer_geometry()
        self.layers = nn.ModuleList()
        chans = [spec.in_channels] + w
        for i in range(4):
            k, s, p = geo[i]
            ops: list[nn.Module] = [nn.Conv2d(chans[i], chans[i + 1], k, stride=s, padding=p)]
            if i > 0:
                ops.append(make_norm(spec.norm, chans[i + 1]))
            ops.append(nn.LeakyReLU(0.2, inplace=True))
            self.layers.append(nn.Sequential(*ops))
        k, s, p = geo[4]
        self.score_layer = nn.Conv2d(w[-1], 1, k, stride=s, padding=p)

    def forward(self, x: torch.Tensor) -> ActivationPyramid:
        features = []
        h = x
        for layer in self.layers:
            h = layer(h)
            features.append(h)
        return ActivationPyramid(features=features, score=self.score_layer(h))


class MultiScaleDiscriminator(nn.Module):
    """Two patch discriminators: one at input resolution, one on the
    average-pooled half-resolution copy."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.fine = PatchDiscriminator(spec)
        self.coarse = PatchDiscriminator(spec)

    def forward(self, x: torch.Tensor) -> list[ActivationPyramid]:
        return [self.fine(x), self.coarse(downsample_half(x))]


# -- perceptual feature backbone ------------------------------------------------

class RandomFeatureBackbone(nn.Module):
    """Frozen, seeded random convolutional pyramid.

    A hermetic substitute for a pretrained classifier: deterministic given
    the seed, multi-scale, and sensitive enough to drive feature-matching
    losses in tests and desk-scale training.
    """

    def __init__(self, seed: int = 0, in_channels: int = 3, widths=(16, 32, 64, 128)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        chans = [in_channels] + list(widths)
        for i in range(len(widths)):
            conv = nn.Conv2d(chans[i], chans[i + 1], 3, padding=1)
            fan_in = chans[i] * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            self.stages.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] != 3:
            raise ValueError(f"backbone expects 3-channel images, got {x.shape[1]}")
        features = []
        h = x
        for i, conv in enumerate(self.stages):
            h = F.relu(conv(h))
            features.append(h)
            if i < len(self.stages) - 1:
                h = F.avg_pool2d(h, 2)
        return features


class PretrainedBackbone(nn.Module):
    """VGG19 feature slices loaded from a local weight file (no downloads)."""

    SLICES = (4, 9, 18, 27)  # relu1_2, relu2_2, relu3_4, relu4_4

    def __init__(self, weights_file: str):
        super().__init__()
        import os
        if not weights_file or not os.path.exists(weights_file):
            raise FileNotFoundError(
                f"backbone weight file not found: {weights_file!r}; "
                "set backbone.mode to 'random' for a hermetic run"
            )
        from torchvision.models import vgg19
        net = vgg19(weights=None)
        state = torch.load(weights_file, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        self.features = net.features[: self.SLICES[-1] + 1]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        h = x
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.SLICES:
                out.append(h)
        return out


def make_backbone(mode: str = "random", seed: int = 0,
                  weights_file: str | None = None) -> nn.Module:
    """Backbone factory; `weights_file` may also come from $VID2GAME_CACHE."""
    if mode == "random":
        return RandomFeatureBackbone(seed=seed)
    if mode == "file":
        import os
        path = weights_file or os.path.join(os.environ.get("VID2GAME_CACHE", ""), "vgg19.pth")
        return PretrainedBackbone(path)
    raise ValueError(f"unknown backbone mode {mode!r}")
