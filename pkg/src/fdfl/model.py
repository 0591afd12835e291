"""Network blocks: frequency mining branch, fusion, backbone, heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .freq import NUM_CHANNELS


class ModelConfigError(ValueError):
    pass


@dataclass
class AfimbConfig:
    grouped_conv_out: int = 192
    mid_channels: int = 256
    pool: int = 2
    attention_reduction: int = 64
    out_channels: int = 256
    attention: bool = True

    def __post_init__(self):
        if self.grouped_conv_out % 3:
            raise ModelConfigError("grouped_conv_out must be divisible by 3")
        for name in ("grouped_conv_out", "mid_channels", "pool", "attention_reduction", "out_channels"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1")


@dataclass
class FusionConfig:
    kind: str = "conv"
    kernel: int = 1
    groups: int = 1
    align: str = "pool"  # how to match frequency features to the tap size: pool | interpolate

    def __post_init__(self):
        if self.kind not in ("concat", "sum", "conv"):
            raise ModelConfigError(f"unknown fusion kind {self.kind!r}")
        if self.kind == "conv" and (self.kernel not in (1, 3) or self.groups not in (1, 2)):
            raise ModelConfigError("conv fusion supports kernel 1|3 and groups 1|2")
        if self.align not in ("pool", "interpolate"):
            raise ModelConfigError(f"unknown alignment {self.align!r}")


@dataclass
class ModelConfig:
    backbone: str = "reference"
    widths: list[int] = field(default_factory=lambda: [32, 128, 256, 384, 512])
    use_affgm: bool = True
    afimb: AfimbConfig = field(default_factory=AfimbConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    embedding_dim: int = 1000
    num_classes: int = 2

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ModelConfigError("embedding_dim must be >= 2")
        if self.num_classes != 2:
            raise ModelConfigError("only binary classification is supported")


class ConvBlock(nn.Sequential):
    """Convolution, batch normalization, ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, groups: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, groups=groups, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
        )

    @property
    def conv(self) -> nn.Conv2d:
        return self[0]


class ChannelAttention(nn.Module):
    """Per-channel gate in (0, 1) from a global max descriptor."""

    def __init__(self, channels: int, hidden: int, init_bias: float = 2.0):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.constant_(self.fc2.bias, init_bias)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        desc = torch.amax(x, dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(desc))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)[:, :, None, None]


class AFIMB(nn.Module):
    """Frequency information mining block.

    grouped 3x3 conv block (one group per Y/Cb/Cr) -> 3x3 conv block ->
    max-pool -> channel attention -> 1x1 conv.
    """

    def __init__(self, cfg: AfimbConfig | None = None, in_channels: int = NUM_CHANNELS):
        super().__init__()
        cfg = cfg or AfimbConfig()
        self.cfg = cfg
        self.in_channels = in_channels
        self.grouped = ConvBlock(in_channels, cfg.grouped_conv_out, 3, groups=3)
        self.mixing = ConvBlock(cfg.grouped_conv_out, cfg.mid_channels, 3)
        self.pool = nn.MaxPool2d(cfg.pool, cfg.pool)
        self.attention = ChannelAttention(cfg.mid_channels, cfg.attention_reduction) if cfg.attention else None
        self.project = nn.Conv2d(cfg.mid_channels, cfg.out_channels, 1)

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def forward(self, freq: torch.Tensor) -> torch.Tensor:
        if freq.shape[1] != self.in_channels:
            raise ModelConfigError(f"AFIMB expects {self.in_channels} channels, got {freq.shape[1]}")
        x = self.pool(self.mixing(self.grouped(freq)))
        if self.attention is not None:
            x = self.attention(x)
        return self.project(x)


class Fusion(nn.Module):
    def __init__(self, cfg: FusionConfig, rgb_channels: int, freq_channels: int):
        super().__init__()
        self.cfg = cfg
        self.rgb_channels, self.freq_channels = rgb_channels, freq_channels
        if cfg.kind == "sum" and rgb_channels != freq_channels:
            raise ModelConfigError(
                f"sum fusion needs equal channels, got {rgb_channels} and {freq_channels}"
            )
        self.block = None
        if cfg.kind == "conv":
            if (rgb_channels + freq_channels) % cfg.groups or rgb_channels % cfg.groups:
                raise ModelConfigError("channel counts not divisible by fusion groups")
            self.block = ConvBlock(rgb_channels + freq_channels, rgb_channels, cfg.kernel, groups=cfg.groups)

    @property
    def out_channels(self) -> int:
        if self.cfg.kind == "concat":
            return self.rgb_channels + self.freq_channels
        return self.rgb_channels

    def forward(self, rgb: torch.Tensor, freq: torch.Tensor) -> torch.Tensor:
        if rgb.shape[2:] != freq.shape[2:]:
            raise ModelConfigError(f"spatial mismatch {tuple(rgb.shape[2:])} vs {tuple(freq.shape[2:])}")
        if self.cfg.kind == "sum":
            if rgb.shape[1] != freq.shape[1]:
                raise ModelConfigError("sum fusion needs equal channel counts")
            return rgb + freq
        x = torch.cat([rgb, freq], dim=1)
        return x if self.block is None else self.block(x)


def fuse(rgb: torch.Tensor, freq: torch.Tensor, cfg: FusionConfig, module: Fusion | None = None) -> torch.Tensor:
    """Functional entry point; ``module`` carries the conv parameters when kind='conv'."""
    if module is None:
        if cfg.kind == "conv":
            raise ModelConfigError("conv fusion requires a Fusion module with parameters")
        module = Fusion(cfg, rgb.shape[1], freq.shape[1])
    return module(rgb, freq)


class ReferenceBackbone(nn.Module):
    """Small stride-2 CNN with an early tap at stride 16.

    stem (two stride-2 conv blocks) -> stage1 -> stage2 -> [tap] -> stage3 ->
    stage4 -> global average pool.
    """

    stride_to_tap = 16

    def __init__(self, widths: list[int]):
        super().__init__()
        if len(widths) != 5:
            raise ModelConfigError("reference backbone takes 5 widths (stem + 4 stages)")
        w0, w1, w2, w3, w4 = widths
        self.widths = widths
        self.entry = nn.Sequential(
            ConvBlock(3, w0, 3, stride=2),
            ConvBlock(w0, w0, 3, stride=2),
            ConvBlock(w0, w1, 3, stride=2),
            ConvBlock(w1, w2, 3, stride=2),
        )
        self.tap_channels = w2
        self.exit: nn.Module | None = None
        self.feature_dim = w4

    def build_exit(self, in_channels: int) -> None:
        _, _, _, w3, w4 = self.widths
        self.exit = nn.Sequential(
            ConvBlock(in_channels, w3, 3, stride=2),
            ConvBlock(w3, w4, 3, stride=2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def to_tap(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[-1] % self.stride_to_tap or img.shape[-2] % self.stride_to_tap:
            raise ModelConfigError(f"image size {tuple(img.shape[-2:])} not divisible by {self.stride_to_tap}")
        return self.entry(img)

    def from_tap(self, x: torch.Tensor) -> torch.Tensor:
        return self.exit(x)


BACKBONES = {"reference": ReferenceBackbone}


class ModelOutput(NamedTuple):
    tap: torch.Tensor
    logits: torch.Tensor
    embeddings: torch.Tensor


class Detector(nn.Module):
    """RGB backbone with optional frequency branch fused at the early tap."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.backbone not in BACKBONES:
            raise ModelConfigError(f"unknown backbone {cfg.backbone!r}")
        self.cfg = cfg
        self.backbone = BACKBONES[cfg.backbone](cfg.widths)
        tap_channels = self.backbone.tap_channels
        if cfg.use_affgm:
            self.afimb = AFIMB(cfg.afimb)
            self.fusion = Fusion(cfg.fusion, tap_channels, self.afimb.out_channels)
            tap_channels = self.fusion.out_channels
        else:
            self.afimb = None
            self.fusion = None
        self.backbone.build_exit(tap_channels)
        self.embed = nn.Linear(self.backbone.feature_dim, cfg.embedding_dim)
        self.classifier = nn.Linear(cfg.embedding_dim, cfg.num_classes)

    def _align(self, freq_feat: torch.Tensor, size: torch.Size) -> torch.Tensor:
        if freq_feat.shape[2:] == size:
            return freq_feat
        if self.cfg.fusion.align == "pool":
            return F.adaptive_max_pool2d(freq_feat, size)
        return F.interpolate(freq_feat, size=size, mode="bilinear", align_corners=False)

    def forward(self, img: torch.Tensor, freq: torch.Tensor | None = None) -> ModelOutput:
        tap = self.backbone.to_tap(img)
        x = tap
        if self.afimb is not None:
            if freq is None:
                raise ModelConfigError("model uses the frequency branch but no frequency input was given")
            x = self.fusion(tap, self._align(self.afimb(freq), tap.shape[2:]))
        emb = self.embed(self.backbone.from_tap(x))
        return ModelOutput(tap, self.classifier(emb), emb)


def backbone_forward(img: torch.Tensor, model: Detector, freq: torch.Tensor | None = None) -> ModelOutput:
    return model(img, freq)


def afimb_forward(freq: torch.Tensor, block: AFIMB) -> torch.Tensor:
    return block(freq)


def weight_parameters(module: nn.Module):
    """Split parameters into (decayed conv/linear weights, everything else)."""
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        (decay if p.ndim >= 2 and name.endswith("weight") else no_decay).append(p)
    return decay, no_decay
