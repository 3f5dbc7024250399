"""Semantics mining and refinement (SMR) block.

One implementation parameterized by pooling mode: the content variant pools
with spatial averages, the salient variant with spatial maxima. The block
appends a bottleneck convolution to its input map, mines a global pooled
vector plus per-band local vectors, concatenates them into a supervised
embedding, and recalibrates the convolved map with a channel gate driven by
the global vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .backbone import Bottleneck

MODES = ("content", "salient")


@dataclass(frozen=True)
class SMRConfig:
    mode: str
    num_parts: int
    in_channels: int
    out_channels: int
    part_channels: int
    reduction_ratio: int
    local_mining: bool = True
    refinement: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown SMR mode '{self.mode}'")
        if self.num_parts < 1:
            raise ValueError("num_parts must be >= 1")
        if self.part_channels < 1:
            raise ValueError("part_channels must be >= 1")
        if self.out_channels % self.reduction_ratio:
            raise ValueError("reduction_ratio must divide out_channels")

    @property
    def feature_dim(self) -> int:
        """Width of the concatenated global+local embedding."""
        if self.local_mining:
            return self.out_channels + self.num_parts * self.part_channels
        return self.out_channels


@dataclass
class SMROutput:
    """Intermediate bundle of one SMR application.

    ``concat_feat[:, :d]`` equals ``global_feat`` exactly; ``refined_map`` has
    the same shape as ``conv_map``. ``logits`` is None outside training.
    """

    mode: str
    conv_map: Tensor
    global_feat: Tensor
    concat_feat: Tensor
    refined_map: Tensor
    logits: Optional[Tensor]


def global_pool(fmap: Tensor, mode: str) -> Tensor:
    """Spatial mean (content) or maximum (salient) per channel: NCHW -> NC.

    Max pooling routes its gradient to the first maximal element in row-major
    scan order.
    """
    if mode not in MODES:
        raise ValueError(f"unknown pooling mode '{mode}'")
    if fmap.ndim != 4:
        raise ValueError("global_pool expects an NCHW tensor")
    if fmap.shape[2] == 0 or fmap.shape[3] == 0:
        raise ValueError("cannot pool over an empty spatial extent")
    flat = fmap.flatten(2)
    if mode == "content":
        return flat.mean(dim=2)
    return flat.max(dim=2).values


def band_slices(height: int, num_parts: int) -> list[tuple[int, int]]:
    """Contiguous horizontal bands; the first ``height % num_parts`` bands get
    one extra row."""
    if height < num_parts:
        raise ValueError(f"feature height {height} is smaller than "
                         f"num_parts {num_parts}")
    base, rem = divmod(height, num_parts)
    bands, start = [], 0
    for p in range(num_parts):
        stop = start + base + (1 if p < rem else 0)
        bands.append((start, stop))
        start = stop
    return bands


def concat_semantics(global_feat: Tensor, parts: Tensor) -> Tensor:
    """Concatenate [global; part_1; ...; part_P] along the feature dimension.

    ``parts`` is (batch, P, part_channels).
    """
    if parts.ndim != 3 or global_feat.ndim != 2 or \
            parts.shape[0] != global_feat.shape[0]:
        raise ValueError("inconsistent global/part feature shapes")
    return torch.cat([global_feat, parts.flatten(1)], dim=1)


class SMRModule(nn.Module):
    """One SMR application: convolve, mine global+local semantics, refine."""

    def __init__(self, cfg: SMRConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.conv_block = Bottleneck(cfg.in_channels, cfg.out_channels, stride=1)
        if cfg.local_mining:
            self.part_reduce = nn.ModuleList([
                nn.Conv2d(cfg.out_channels, cfg.part_channels, kernel_size=1)
                for _ in range(cfg.num_parts)
            ])
        else:
            self.part_reduce = None
        if cfg.refinement:
            hidden = cfg.out_channels // cfg.reduction_ratio
            self.gate_fc1 = nn.Linear(cfg.out_channels, hidden, bias=False)
            self.gate_fc2 = nn.Linear(hidden, cfg.out_channels, bias=False)
        self.neck = nn.BatchNorm1d(cfg.feature_dim)
        self.classifier = nn.Linear(cfg.feature_dim, num_classes, bias=False)

    def part_features(self, fmap: Tensor) -> Tensor:
        """Pool each horizontal band (with the module's mode) and reduce it
        through that band's 1x1 convolution. Returns (batch, P, part_channels)."""
        if self.part_reduce is None:
            raise RuntimeError("local mining is disabled for this module")
        bands = band_slices(fmap.shape[2], self.cfg.num_parts)
        feats = []
        for conv, (lo, hi) in zip(self.part_reduce, bands):
            pooled = global_pool(fmap[:, :, lo:hi, :], self.cfg.mode)
            feats.append(conv(pooled[:, :, None, None]).flatten(1))
        return torch.stack(feats, dim=1)

    def gate_values(self, global_feat: Tensor) -> Tensor:
        """Channel gate sigmoid(W2 relu(W1 f)); every entry lies in (0, 1)."""
        pre = self.gate_fc2(torch.relu(self.gate_fc1(global_feat)))
        if not torch.isfinite(pre).all():
            raise ValueError("non-finite gate pre-activation")
        return torch.sigmoid(pre)

    def refine(self, fmap: Tensor, global_feat: Tensor) -> Tensor:
        """Recalibrate channels of ``fmap`` with the gate; identity when
        refinement is disabled."""
        if not self.cfg.refinement:
            return fmap
        gate = self.gate_values(global_feat)
        return fmap * gate[:, :, None, None]

    def forward(self, fmap: Tensor) -> SMROutput:
        if fmap.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, "
                             f"got {fmap.shape[1]}")
        conv_map = self.conv_block(fmap)
        global_feat = global_pool(conv_map, self.cfg.mode)
        if self.part_reduce is not None:
            concat_feat = concat_semantics(global_feat, self.part_features(conv_map))
        else:
            concat_feat = global_feat
        refined_map = self.refine(conv_map, global_feat)
        logits = self.classifier(self.neck(concat_feat)) if self.training else None
        return SMROutput(mode=self.cfg.mode, conv_map=conv_map,
                         global_feat=global_feat, concat_feat=concat_feat,
                         refined_map=refined_map, logits=logits)
