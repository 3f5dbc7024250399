"""Identity classification loss, batch-hard triplet loss, per-head SMR losses,
and the overall objective.

Every active SMR head contributes ``id_loss`` on its concatenated embedding
plus (when the schedule has activated it) ``batch_hard_triplet`` on its pooled
global vector; the fusion head contributes both terms on the final pooled
feature. The overall objective is the plain unweighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from .model import ForwardOutputs
from .smr import SMROutput


@dataclass
class LossConfig:
    triplet_margin: float = 0.3
    label_smoothing: float = 0.1
    triplet_active: bool = False

    def __post_init__(self) -> None:
        if self.triplet_margin < 0:
            raise ValueError("triplet_margin must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")


@dataclass
class LossBundle:
    """All loss terms; disabled or inactive terms are exact zeros.

    ``total`` is the unweighted sum branch1 + branch2 + cssc and the identity
    ``smr_x_bN == smr_x_bN_id + smr_x_bN_tri`` holds by construction.
    """

    smr_c_b1_id: Tensor
    smr_c_b1_tri: Tensor
    smr_s_b1_id: Tensor
    smr_s_b1_tri: Tensor
    smr_s_b2_id: Tensor
    smr_s_b2_tri: Tensor
    smr_c_b2_id: Tensor
    smr_c_b2_tri: Tensor
    cssc_id: Tensor
    cssc_tri: Tensor

    @property
    def smr_c_b1(self) -> Tensor:
        return self.smr_c_b1_id + self.smr_c_b1_tri

    @property
    def smr_s_b1(self) -> Tensor:
        return self.smr_s_b1_id + self.smr_s_b1_tri

    @property
    def smr_s_b2(self) -> Tensor:
        return self.smr_s_b2_id + self.smr_s_b2_tri

    @property
    def smr_c_b2(self) -> Tensor:
        return self.smr_c_b2_id + self.smr_c_b2_tri

    @property
    def branch1(self) -> Tensor:
        return self.smr_c_b1 + self.smr_s_b1

    @property
    def branch2(self) -> Tensor:
        return self.smr_s_b2 + self.smr_c_b2

    @property
    def cssc(self) -> Tensor:
        return self.cssc_id + self.cssc_tri

    @property
    def total(self) -> Tensor:
        return self.branch1 + self.branch2 + self.cssc

    def triplet_terms(self) -> list[Tensor]:
        return [self.smr_c_b1_tri, self.smr_s_b1_tri, self.smr_s_b2_tri,
                self.smr_c_b2_tri, self.cssc_tri]

    def as_dict(self) -> dict[str, float]:
        """Scalar view used for the JSON-lines training log."""
        out = {name: float(getattr(self, name).detach()) for name in (
            "smr_c_b1_id", "smr_c_b1_tri", "smr_s_b1_id", "smr_s_b1_tri",
            "smr_s_b2_id", "smr_s_b2_tri", "smr_c_b2_id", "smr_c_b2_tri",
            "cssc_id", "cssc_tri",
            "smr_c_b1", "smr_s_b1", "smr_s_b2", "smr_c_b2",
            "branch1", "branch2", "cssc", "total")}
        return out


def id_loss(logits: Tensor, labels: Tensor, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed cross-entropy, averaged over the batch.

    The true class receives target 1 - eps + eps/C, every other class eps/C.
    """
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ValueError("logits must be (batch, C) with one label per row")
    num_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    log_probs = torch.log_softmax(logits, dim=1)
    with torch.no_grad():
        targets = torch.full_like(log_probs, smoothing / num_classes)
        targets.scatter_(1, labels.view(-1, 1),
                         1.0 - smoothing + smoothing / num_classes)
    return -(targets * log_probs).sum(dim=1).mean()


def pairwise_euclidean(features: Tensor) -> Tensor:
    """All-pairs Euclidean distances with a zero subgradient at coincident
    points (a bare sqrt would backpropagate NaN through the diagonal)."""
    diff = features[:, None, :] - features[None, :, :]
    sq = diff.pow(2).sum(dim=2)
    tiny = torch.finfo(sq.dtype).tiny
    return torch.where(sq > 0, sq.clamp_min(tiny).sqrt(), sq.new_zeros(()))


def batch_hard_triplet(features: Tensor, labels: Tensor,
                       margin: float) -> Tensor:
    """Batch-hard triplet loss with Euclidean distances and a hinge.

    Per anchor, the hardest positive is the farthest same-label other sample
    and the hardest negative the closest different-label sample. Every label
    in the batch must have at least two instances and at least one other
    label must be present.
    """
    if features.ndim != 2 or labels.ndim != 1 or \
            features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (batch, m) with one label per row")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~torch.eye(len(labels), dtype=torch.bool,
                                 device=labels.device)
    neg_mask = ~same
    if not pos_mask.any(dim=1).all():
        raise ValueError("every label needs at least two instances in the batch")
    if not neg_mask.any(dim=1).all():
        raise ValueError("batch contains a single label; triplet needs negatives")
    dist = pairwise_euclidean(features)
    d_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    d_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return (margin + d_pos - d_neg).clamp_min(0).mean()


def smr_head_loss(output: SMROutput, labels: Tensor,
                  cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Per-head pair (id term on the concatenated embedding's logits, gated
    triplet term on the pooled global vector)."""
    if output.logits is None:
        raise ValueError("smr_head_loss needs train-mode outputs with logits")
    id_term = id_loss(output.logits, labels, cfg.label_smoothing)
    if cfg.triplet_active:
        tri_term = batch_hard_triplet(output.global_feat, labels,
                                      cfg.triplet_margin)
    else:
        tri_term = torch.zeros((), dtype=output.global_feat.dtype,
                               device=output.global_feat.device)
    return id_term, tri_term


def total_loss(outputs: ForwardOutputs, labels: Tensor,
               cfg: LossConfig) -> LossBundle:
    """Assemble the full bundle from the forward outputs.

    SMR terms are keyed by (pooling mode, branch); absent modules contribute
    exact zeros. The fusion term supervises the final pooled feature with both
    losses when the fusion stage exists.
    """
    zero = torch.zeros((), dtype=outputs.final_feat.dtype,
                       device=outputs.final_feat.device)
    terms = {name: zero for name in (
        "smr_c_b1_id", "smr_c_b1_tri", "smr_s_b1_id", "smr_s_b1_tri",
        "smr_s_b2_id", "smr_s_b2_tri", "smr_c_b2_id", "smr_c_b2_tri")}

    for branch_idx, _, smr_out in outputs.smr_outputs():
        mode = "c" if smr_out.mode == "content" else "s"
        key = f"smr_{mode}_b{branch_idx}"
        id_term, tri_term = smr_head_loss(smr_out, labels, cfg)
        terms[f"{key}_id"] = id_term
        terms[f"{key}_tri"] = tri_term

    if outputs.final_logits is not None:
        cssc_id = id_loss(outputs.final_logits, labels, cfg.label_smoothing)
        cssc_tri = batch_hard_triplet(outputs.final_feat, labels,
                                      cfg.triplet_margin) \
            if cfg.triplet_active else zero
    else:
        cssc_id, cssc_tri = zero, zero

    return LossBundle(**terms, cssc_id=cssc_id, cssc_tri=cssc_tri)
