"""Cross-parallel two-branch model: branch 1 applies the content SMR then the
salient SMR (each consuming the previous refined map), branch 2 applies them
in the opposite order, and a fusion block over the elementwise sum of the two
branch outputs yields the final max-pooled retrieval feature.

Ablation flags are build-time so parameter counts match the ablated
architectures. When both the second branch and the second SMR position are
disabled, the network degenerates to a single SMR head and the fusion stage is
omitted; with local mining and refinement also disabled that is exactly the
plain baseline (backbone + one conv block + average pooling + classifier).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn

from .backbone import (Backbone, BackboneConfig, Bottleneck, build_backbone,
                       init_module_weights)
from .smr import MODES, SMRConfig, SMRModule, SMROutput, global_pool
from .weights import apply_weights, load_weight_archive

MODE_KEY = {"content": "smr_c", "salient": "smr_s"}
ABLATION_FLAGS = ("disable_branch2", "disable_second_smr",
                  "disable_local_mining", "disable_refinement",
                  "swap_branch_order")


@dataclass(frozen=True)
class SMRTemplate:
    """Shared SMR hyperparameters; per-position mode and channel wiring are
    derived by the model builder."""

    num_parts: int = 8
    embed_channels: int = 2048
    part_channels: int = 256
    reduction_ratio: int = 16


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    smr: SMRTemplate = field(default_factory=SMRTemplate)
    num_train_identities: int = 2
    neck_enabled: bool = True
    disable_branch2: bool = False
    disable_second_smr: bool = False
    disable_local_mining: bool = False
    disable_refinement: bool = False
    swap_branch_order: bool = False

    def __post_init__(self) -> None:
        if self.num_train_identities < 1:
            raise ValueError("num_train_identities must be >= 1")

    @property
    def branch1_modes(self) -> tuple[str, ...]:
        order = ("salient", "content") if self.swap_branch_order \
            else ("content", "salient")
        return order[:1] if self.disable_second_smr else order

    @property
    def branch2_modes(self) -> tuple[str, ...]:
        order = ("content", "salient") if self.swap_branch_order \
            else ("salient", "content")
        return order[:1] if self.disable_second_smr else order

    @property
    def fusion_enabled(self) -> bool:
        # With a single SMR module in the whole network there is nothing to
        # fuse; that module's own head is the model head.
        return not (self.disable_branch2 and self.disable_second_smr)


@dataclass
class ForwardOutputs:
    """All per-branch SMR bundles plus the fused map and final feature."""

    branch1_first: SMROutput
    branch1_second: Optional[SMROutput]
    branch2_first: Optional[SMROutput]
    branch2_second: Optional[SMROutput]
    fused_map: Tensor
    final_feat: Tensor
    final_logits: Optional[Tensor]

    def smr_outputs(self) -> list[tuple[int, str, SMROutput]]:
        """(branch index, position mode, output) for every active SMR."""
        out = [(1, "first", self.branch1_first)]
        if self.branch1_second is not None:
            out.append((1, "second", self.branch1_second))
        if self.branch2_first is not None:
            out.append((2, "first", self.branch2_first))
        if self.branch2_second is not None:
            out.append((2, "second", self.branch2_second))
        return out


class FusionHead(nn.Module):
    """Convolutional block over the summed branch maps plus the final
    neck/classifier head."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.conv_block = Bottleneck(channels, channels, stride=1)
        self.neck = nn.BatchNorm1d(channels)
        self.classifier = nn.Linear(channels, num_classes, bias=False)

    def fuse(self, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
        return self.conv_block(a if b is None else a + b)


class CSSCModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        d = cfg.smr.embed_channels
        if cfg.backbone.channels_out < 1:
            raise ValueError("backbone must output at least one channel")

        def make_branch(modes: tuple[str, ...]) -> nn.ModuleDict:
            branch = {}
            cin = cfg.backbone.channels_out
            for mode in modes:
                branch[MODE_KEY[mode]] = SMRModule(
                    SMRConfig(mode=mode, num_parts=cfg.smr.num_parts,
                              in_channels=cin, out_channels=d,
                              part_channels=cfg.smr.part_channels,
                              reduction_ratio=cfg.smr.reduction_ratio,
                              local_mining=not cfg.disable_local_mining,
                              refinement=not cfg.disable_refinement),
                    cfg.num_train_identities)
                cin = d
            return nn.ModuleDict(branch)

        self.branch1 = make_branch(cfg.branch1_modes)
        self.branch2 = None if cfg.disable_branch2 \
            else make_branch(cfg.branch2_modes)
        self.fusion = FusionHead(d, cfg.num_train_identities) \
            if cfg.fusion_enabled else None

    # -- forward ------------------------------------------------------------

    def _run_branch(self, branch: nn.ModuleDict, modes: tuple[str, ...],
                    fmap: Tensor) -> list[SMROutput]:
        outputs = []
        for mode in modes:
            out = branch[MODE_KEY[mode]](fmap)
            outputs.append(out)
            fmap = out.refined_map
        return outputs

    def forward(self, images: Tensor) -> ForwardOutputs:
        fmap = self.backbone(images)
        b1 = self._run_branch(self.branch1, self.cfg.branch1_modes, fmap)
        b2 = self._run_branch(self.branch2, self.cfg.branch2_modes, fmap) \
            if self.branch2 is not None else []

        if self.fusion is not None:
            fused = self.fusion.fuse(b1[-1].refined_map,
                                     b2[-1].refined_map if b2 else None)
            final_feat = global_pool(fused, "salient")
            final_logits = self.fusion.classifier(self.fusion.neck(final_feat)) \
                if self.training else None
        else:
            fused = b1[-1].refined_map
            final_feat = b1[-1].global_feat
            final_logits = None

        return ForwardOutputs(
            branch1_first=b1[0],
            branch1_second=b1[1] if len(b1) > 1 else None,
            branch2_first=b2[0] if b2 else None,
            branch2_second=b2[1] if len(b2) > 1 else None,
            fused_map=fused,
            final_feat=final_feat,
            final_logits=final_logits,
        )

    def fuse_maps(self, a: Tensor, b: Tensor) -> Tensor:
        """Test hook: apply the fusion block to explicit branch maps."""
        if self.fusion is None:
            raise RuntimeError("fusion stage is disabled for this configuration")
        return self.fusion.fuse(a, b)

    def embed(self, images: Tensor) -> Tensor:
        """Retrieval feature: the final pooled vector, after the neck when the
        neck is enabled. Evaluation mode only; never returns logits."""
        if self.training:
            raise RuntimeError("embed requires evaluation mode")
        outputs = self.forward(images)
        if not self.cfg.neck_enabled:
            return outputs.final_feat
        if self.fusion is not None:
            return self.fusion.neck(outputs.final_feat)
        # Single-SMR configuration: the head neck normalizes the concatenated
        # embedding per feature, so its leading slice is the necked global one.
        first = self.branch1[MODE_KEY[self.cfg.branch1_modes[0]]]
        necked = first.neck(outputs.branch1_first.concat_feat)
        return necked[:, : self.cfg.smr.embed_channels]

    @property
    def embed_dim(self) -> int:
        return self.cfg.smr.embed_channels

    def smr_modules(self) -> list[tuple[str, str, SMRModule]]:
        """(branch name, position, module) for every SMR in forward order."""
        mods = []
        for name, branch, modes in (("branch1", self.branch1, self.cfg.branch1_modes),
                                    ("branch2", self.branch2, self.cfg.branch2_modes)):
            if branch is None:
                continue
            for pos, mode in zip(("first", "second"), modes):
                mods.append((name, pos, branch[MODE_KEY[mode]]))
        return mods


def build_model(cfg: ModelConfig, seed: int = 0) -> CSSCModel:
    """Deterministically build and initialize the model.

    Convolutions and gate layers use fan-in-scaled normal initialization,
    normalization affine parameters start at unit/zero, and classifiers start
    near zero. If the backbone configuration points at a weight archive, its
    ``backbone.*`` tensors overwrite the backbone and any ``stage5.block1..3``
    templates initialize (as independent copies) the first-position SMR
    blocks, second-position SMR blocks, and the fusion block respectively.
    """
    if cfg.smr.embed_channels % cfg.smr.reduction_ratio:
        raise ValueError("reduction_ratio must divide embed_channels")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CSSCModel(cfg)
        init_module_weights(model)
        for module in model.modules():
            if isinstance(module, (SMRModule, FusionHead)):
                nn.init.normal_(module.classifier.weight, std=0.001)

    path = cfg.backbone.external_weights_path
    if path:
        _, tensors = load_weight_archive(path)
        apply_weights(model.backbone, tensors, prefix="backbone.")
        templates = {"first": "stage5.block1.", "second": "stage5.block2."}
        for _, pos, module in model.smr_modules():
            apply_weights(module.conv_block, tensors, prefix=templates[pos])
        if model.fusion is not None:
            apply_weights(model.fusion.conv_block, tensors, prefix="stage5.block3.")
    return model


def count_params(model: nn.Module) -> tuple[int, dict[str, int]]:
    """Exact count of learnable scalars, with a per-submodule breakdown.

    Breakdown keys are the archive module paths (``backbone``,
    ``branch1.smr_c``, ..., ``fusion``).
    """
    breakdown: dict[str, int] = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] in ("branch1", "branch2") \
            else parts[0]
        breakdown[group] = breakdown.get(group, 0) + param.numel()
    return sum(breakdown.values()), breakdown


def model_archive_tensors(model: CSSCModel) -> dict[str, Tensor]:
    """State dict (parameters and buffers) under archive naming."""
    return dict(model.state_dict())


def save_model_archive(model: CSSCModel, path) -> None:
    from .weights import save_weight_archive
    save_weight_archive(model_archive_tensors(model), path)


def load_model_archive(model: CSSCModel, path) -> None:
    _, tensors = load_weight_archive(path)
    apply_weights(model, tensors, prefix="")
