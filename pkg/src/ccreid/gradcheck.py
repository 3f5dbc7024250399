"""Central finite-difference gradient checking for the model and losses.

The numeric side perturbs every scalar of every parameter tensor (64-bit,
central differences) and is compared against the analytic gradients from
backpropagation. Relative error uses max(1, |analytic|, |numeric|) as the
denominator so near-zero gradients are judged absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
from torch import Tensor

from .backbone import BackboneConfig
from .losses import LossConfig, batch_hard_triplet, total_loss
from .model import ModelConfig, SMRTemplate, build_model
from .smr import SMRConfig, SMRModule

DEFAULT_EPS = 1e-6
DEFAULT_THRESHOLD = 1e-5


@dataclass
class GradCheckReport:
    """Per-section, per-parameter-group maximum relative errors."""

    eps: float
    threshold: float
    sections: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max((err for group in self.sections.values()
                    for err in group.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold

    def as_dict(self) -> dict:
        return {"eps": self.eps, "threshold": self.threshold,
                "max_relative_error": self.max_error, "passed": self.passed,
                "sections": {name: dict(sorted(group.items()))
                             for name, group in self.sections.items()}}


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    denom = torch.maximum(torch.ones_like(analytic),
                          torch.maximum(analytic.abs(), numeric.abs()))
    return float(((analytic - numeric).abs() / denom).max())


def check_gradients(loss_fn: Callable[[], Tensor],
                    named_tensors: Iterable[tuple[str, Tensor]],
                    eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    Every entry of every named tensor is perturbed. Tensors must require
    gradients and be 64-bit for the stated tolerances to be meaningful.
    """
    named_tensors = list(named_tensors)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [t for _, t in named_tensors],
                                allow_unused=False)
    analytic = {name: g.detach().clone()
                for (name, _), g in zip(named_tensors, grads)}

    errors: dict[str, float] = {}
    with torch.no_grad():
        for name, tensor in named_tensors:
            flat = tensor.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2 * eps)
            errors[name] = relative_error(analytic[name].view(-1), numeric)
    return errors


def _scalarize(tensors: Iterable[Tensor], seed: int = 123) -> Tensor:
    """Deterministic random projection of several tensors to one scalar."""
    gen = torch.Generator().manual_seed(seed)
    total = None
    for t in tensors:
        w = torch.randn(t.shape, generator=gen, dtype=t.dtype)
        term = (t * w).sum()
        total = term if total is None else total + term
    return total


def toy_model_config(num_identities: int = 2) -> ModelConfig:
    """Smallest sensible full-architecture config for gradient checking."""
    return ModelConfig(
        backbone=BackboneConfig(scale="toy", input_height=8, input_width=8,
                                channels_out=16, toy_stage_widths=(8, 16)),
        smr=SMRTemplate(num_parts=2, embed_channels=16, part_channels=4,
                        reduction_ratio=4),
        num_train_identities=num_identities)


def check_smr_forward(seed: int = 0, eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Gradcheck through one SMR application (all parameters plus the input)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = SMRModule(SMRConfig(mode="content", num_parts=2,
                                     in_channels=8, out_channels=16,
                                     part_channels=4, reduction_ratio=4),
                           num_classes=3).double().train()
        fmap = torch.randn(2, 8, 4, 3, dtype=torch.float64, requires_grad=True)

    def loss_fn() -> Tensor:
        out = module(fmap)
        return _scalarize([out.conv_map, out.global_feat, out.concat_feat,
                           out.refined_map, out.logits])

    tensors = [("input", fmap)] + list(module.named_parameters())
    return check_gradients(loss_fn, tensors, eps=eps)


def check_total_loss(seed: int = 0, eps: float = DEFAULT_EPS,
                     triplet_active: bool = False,
                     batch_labels: tuple[int, ...] = (0, 1)) -> dict[str, float]:
    """Gradcheck through the full model and overall objective.

    The default two-image batch keeps the triplet term gated off (a two-image
    batch cannot satisfy its sampling precondition); pass four labels and
    ``triplet_active=True`` to cover the triplet path.
    """
    cfg = toy_model_config(num_identities=max(batch_labels) + 1)
    model = build_model(cfg, seed=seed).double().train()
    with torch.random.fork_rng():
        torch.manual_seed(seed + 1)
        images = torch.rand(len(batch_labels), 3, cfg.backbone.input_height,
                            cfg.backbone.input_width, dtype=torch.float64)
    labels = torch.tensor(batch_labels, dtype=torch.int64)
    loss_cfg = LossConfig(triplet_active=triplet_active)

    def loss_fn() -> Tensor:
        return total_loss(model(images), labels, loss_cfg).total

    return check_gradients(loss_fn, list(model.named_parameters()), eps=eps)


def check_triplet(seed: int = 0, eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Gradcheck of the batch-hard triplet loss on a 2x2 feature batch."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        features = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1])

    def loss_fn() -> Tensor:
        return batch_hard_triplet(features, labels, margin=0.3)

    return check_gradients(loss_fn, [("features", features)], eps=eps)


def run_gradcheck(seed: int = 0, eps: float = DEFAULT_EPS,
                  threshold: float = DEFAULT_THRESHOLD) -> GradCheckReport:
    report = GradCheckReport(eps=eps, threshold=threshold)
    report.sections["smr_forward"] = check_smr_forward(seed=seed, eps=eps)
    report.sections["total_loss"] = check_total_loss(seed=seed, eps=eps)
    report.sections["triplet_loss"] = check_triplet(seed=seed, eps=eps)
    return report
