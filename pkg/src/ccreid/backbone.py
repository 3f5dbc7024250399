"""Image-to-feature-map trunks: a 50-layer bottleneck residual network cut
after its fourth stage (full scale) and a small residual stack (toy scale),
sharing one forward contract.

Feature maps are NCHW throughout: (batch, channels, H/stride, W/stride).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

FULL_INPUT = (384, 192)
FULL_CHANNELS_OUT = 1024
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneConfig:
    scale: str = "toy"
    input_height: int = 64
    input_width: int = 32
    channels_out: int = 64
    toy_stage_widths: tuple[int, ...] = (16, 32, 64)
    external_weights_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.scale not in ("full", "toy"):
            raise ValueError(f"unknown backbone scale '{self.scale}'")
        if self.scale == "full":
            if (self.input_height, self.input_width) != FULL_INPUT:
                raise ValueError(f"full scale fixes the input size to "
                                 f"{FULL_INPUT[0]}x{FULL_INPUT[1]}")
            if self.channels_out != FULL_CHANNELS_OUT:
                raise ValueError(f"full scale outputs {FULL_CHANNELS_OUT} channels")
        else:
            if not self.toy_stage_widths:
                raise ValueError("toy scale needs at least one stage width")
            if self.channels_out != self.toy_stage_widths[-1]:
                raise ValueError("channels_out must equal the last toy stage width")
            if (self.input_height % self.stride or self.input_width % self.stride):
                raise ValueError(f"input size must be divisible by the total "
                                 f"stride {self.stride}")

    @property
    def stride(self) -> int:
        if self.scale == "full":
            return 16
        return 2 ** len(self.toy_stage_widths)

    @property
    def output_size(self) -> tuple[int, int]:
        return self.input_height // self.stride, self.input_width // self.stride


def conv1x1(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=1, stride=stride, bias=False)


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False)


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block with a projection shortcut when needed."""

    def __init__(self, cin: int, cout: int, stride: int = 1,
                 mid: Optional[int] = None):
        super().__init__()
        mid = mid or cout // 4
        self.conv1 = conv1x1(cin, mid)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = conv3x3(mid, mid, stride)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = conv1x1(mid, cout)
        self.bn3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.downsample: Optional[nn.Module] = nn.Sequential(
                conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))
        else:
            self.downsample = None

    def forward(self, x: Tensor) -> Tensor:
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class BasicBlock(nn.Module):
    """3x3 -> 3x3 residual block used by the toy trunk."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.downsample: Optional[nn.Module] = nn.Sequential(
                conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))
        else:
            self.downsample = None

    def forward(self, x: Tensor) -> Tensor:
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class ResNetTrunk(nn.Module):
    """Stages 1-4 of the standard 50-layer residual network (total stride 16)."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = self._make_stage(64, 64, 256, blocks=3, stride=1)
        self.layer2 = self._make_stage(256, 128, 512, blocks=4, stride=2)
        self.layer3 = self._make_stage(512, 256, 1024, blocks=6, stride=2)

    @staticmethod
    def _make_stage(cin: int, mid: int, cout: int, blocks: int,
                    stride: int) -> nn.Sequential:
        layers = [Bottleneck(cin, cout, stride=stride, mid=mid)]
        layers += [Bottleneck(cout, cout, mid=mid) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer1(x)
        x = self.layer2(x)
        return self.layer3(x)


class ToyTrunk(nn.Module):
    """Small residual stack: stride-2 stem plus one stride-2 block per width."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.stem = nn.Sequential(
            conv3x3(3, widths[0], stride=2), nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(*[
            BasicBlock(widths[i - 1], widths[i], stride=2)
            for i in range(1, len(widths))
        ])

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(self.stem(x))


class Backbone(nn.Module):
    """Wraps a trunk with the input contract of its configuration."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = (ResNetTrunk() if cfg.scale == "full"
                      else ToyTrunk(cfg.toy_stage_widths))

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError("expected images of shape (batch, 3, H, W)")
        if images.shape[2] != self.cfg.input_height or \
                images.shape[3] != self.cfg.input_width:
            raise ValueError(
                f"expected {self.cfg.input_height}x{self.cfg.input_width} input, "
                f"got {images.shape[2]}x{images.shape[3]}")
        if not torch.isfinite(images).all():
            raise ValueError("non-finite values in input images")
        return self.trunk(images)


def init_module_weights(module: nn.Module) -> None:
    """Fan-in-scaled normal for convolutions and linear maps, unit/zero for
    normalization affine parameters."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    """Construct and deterministically initialize a backbone.

    If ``cfg.external_weights_path`` is set, tensors named ``backbone.<param>``
    in the archive are loaded over the seeded initialization; any shape
    mismatch is an error.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        backbone = Backbone(cfg)
        init_module_weights(backbone)
    if cfg.external_weights_path:
        from .weights import apply_weights, load_weight_archive
        _, tensors = load_weight_archive(cfg.external_weights_path)
        apply_weights(backbone, tensors, prefix="backbone.")
    return backbone


def input_normalization(scale: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel (mean, std) applied to [0, 1] inputs before the trunk."""
    if scale == "full":
        return IMAGENET_MEAN, IMAGENET_STD
    return (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)


def normalize_images(images: Tensor, scale: str) -> Tensor:
    mean, std = input_normalization(scale)
    mean_t = images.new_tensor(mean).view(1, 3, 1, 1)
    std_t = images.new_tensor(std).view(1, 3, 1, 1)
    return (images - mean_t) / std_t
