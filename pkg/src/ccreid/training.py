"""PK batch sampling, the warmup + step-decay learning-rate schedule, the
training loop with delayed triplet activation, and checkpointing.

The optimizer is the adaptive-moment method (moment decays 0.9/0.999, epsilon
1e-8) with decoupled weight decay; normalization affine parameters and any
classifier bias are excluded from decay. Triplet terms join the objective at
``triplet_start_epoch``, strictly after the first learning-rate decay under
the default schedule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import normalize_images
from .data import AugConfig, Manifest, Sample, augment_train, load_image
from .losses import LossBundle, LossConfig, total_loss
from .model import CSSCModel, ModelConfig, build_model, count_params

CHECKPOINT_VERSION = "ccreid-checkpoint-1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_ids: int = 8
    instances_per_id: int = 4
    base_lr: float = 3e-4
    warmup_start_lr: float = 3e-5
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (30, 60)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    triplet_start_epoch: int = 31
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_ids < 1 or self.instances_per_id < 1:
            raise ValueError("epochs, batch_ids and instances_per_id must be >= 1")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epochs_run: int
    epoch_mean_total: list[float] = field(default_factory=list)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-based epoch: linear warmup hitting the base rate
    at the last warmup epoch, then a step decay at each decay epoch."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if cfg.warmup_epochs > 1 and epoch <= cfg.warmup_epochs:
        frac = (epoch - 1) / (cfg.warmup_epochs - 1)
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    num_decays = sum(1 for d in cfg.decay_epochs if d <= epoch)
    return cfg.base_lr * cfg.decay_factor ** num_decays


def pk_sampler(labels: Sequence[int], batch_ids: int, instances_per_id: int,
               rng: np.random.Generator) -> list[list[int]]:
    """Batches of ``batch_ids`` distinct identities x ``instances_per_id``.

    Each identity's images are shuffled and chunked (the last chunk padded by
    resampling with replacement from that identity); chunks are packed into
    batches with distinct identities and incomplete batches are filled with
    extra identities. Every identity appears at least once per epoch and the
    sequence is deterministic for a fixed generator.
    """
    by_label: dict[int, list[int]] = {}
    for idx, label in enumerate(labels):
        by_label.setdefault(int(label), []).append(idx)
    if len(by_label) < batch_ids:
        raise ValueError(f"need at least {batch_ids} identities, "
                         f"got {len(by_label)}")

    k = instances_per_id
    chunks: list[tuple[int, list[int]]] = []
    for label in sorted(by_label):
        pool = by_label[label][:]
        rng.shuffle(pool)
        for i in range(0, len(pool), k):
            chunk = pool[i:i + k]
            if len(chunk) < k:
                extra = rng.choice(pool, size=k - len(chunk), replace=True)
                chunk = chunk + [int(e) for e in extra]
            chunks.append((label, chunk))
    order = rng.permutation(len(chunks))

    batches: list[dict[int, list[int]]] = []
    for pos in order:
        label, chunk = chunks[pos]
        for batch in batches:
            if len(batch) < batch_ids and label not in batch:
                batch[label] = chunk
                break
        else:
            batches.append({label: chunk})

    for batch in batches:
        if len(batch) < batch_ids:
            candidates = sorted(set(by_label) - set(batch))
            fill = rng.choice(candidates, size=batch_ids - len(batch),
                              replace=False)
            for label in (int(f) for f in fill):
                pool = by_label[label]
                pick = rng.choice(pool, size=k, replace=len(pool) < k)
                batch[label] = [int(p) for p in pick]
    return [[i for chunk in batch.values() for i in chunk] for batch in batches]


def split_decay_groups(model: nn.Module) -> tuple[list, list]:
    """(decayed, undecayed) parameters; normalization affine terms and
    classifier biases are exempt from weight decay."""
    no_decay_ids = set()
    for module in model.modules():
        if isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
            no_decay_ids.update(id(p) for p in module.parameters(recurse=False))
        elif isinstance(module, nn.Linear) and module.bias is not None:
            no_decay_ids.add(id(module.bias))
    decay, no_decay = [], []
    for param in model.parameters():
        (no_decay if id(param) in no_decay_ids else decay).append(param)
    return decay, no_decay


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = split_decay_groups(model)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: CSSCModel,
                    optimizer: torch.optim.Optimizer, epoch: int,
                    model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "torch_rng_state": torch.get_rng_state(),
    }, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{ckpt.get('version')!r}")
    return ckpt


def model_config_from_checkpoint(ckpt: dict) -> ModelConfig:
    from .backbone import BackboneConfig
    from .model import SMRTemplate
    raw = dict(ckpt["model_config"])
    backbone = dict(raw.pop("backbone"))
    backbone["toy_stage_widths"] = tuple(backbone["toy_stage_widths"])
    smr = dict(raw.pop("smr"))
    return ModelConfig(backbone=BackboneConfig(**backbone),
                       smr=SMRTemplate(**smr), **raw)


def load_model_from_checkpoint(path: str | Path) -> tuple[CSSCModel, dict]:
    ckpt = load_checkpoint(path)
    model = build_model(model_config_from_checkpoint(ckpt), seed=0)
    model.load_state_dict(ckpt["model_state"])
    return model, ckpt


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class _ImageCache:
    """Caches decoded, resized [0, 1] float images by path (desk-scale data)."""

    def __init__(self, height: int, width: int, limit: int = 4096):
        self.height, self.width, self.limit = height, width, limit
        self._store: dict[str, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        key = str(path)
        hit = self._store.get(key)
        if hit is None:
            hit = load_image(path, self.height, self.width)
            if len(self._store) < self.limit:
                self._store[key] = hit
        return hit


def _first_nonfinite(bundle: LossBundle, outputs, model: nn.Module) -> str:
    """Name of the first non-finite tensor, searched loss terms, forward
    outputs, then parameters."""
    for name in ("smr_c_b1_id", "smr_c_b1_tri", "smr_s_b1_id", "smr_s_b1_tri",
                 "smr_s_b2_id", "smr_s_b2_tri", "smr_c_b2_id", "smr_c_b2_tri",
                 "cssc_id", "cssc_tri"):
        if not torch.isfinite(getattr(bundle, name)).all():
            return f"loss.{name}"
    for branch_idx, pos, smr_out in outputs.smr_outputs():
        for field_name in ("conv_map", "global_feat", "concat_feat",
                           "refined_map", "logits"):
            t = getattr(smr_out, field_name)
            if t is not None and not torch.isfinite(t).all():
                return f"branch{branch_idx}.{pos}.{field_name}"
    for field_name in ("fused_map", "final_feat"):
        if not torch.isfinite(getattr(outputs, field_name)).all():
            return field_name
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            return f"param.{name}"
    return "total"


def _augment_rng(seed: int, epoch: int, step: int, position: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(2, epoch, step, position))
    return np.random.default_rng(seq)


def _sampler_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(1, epoch)))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest: Manifest,
          out_dir: str | Path, aug_cfg: Optional[AugConfig] = None,
          loss_cfg: Optional[LossConfig] = None,
          resume_from: Optional[str | Path] = None,
          log_name: str = "trainlog.jsonl") -> TrainResult:
    """Run the training loop and checkpoint at every epoch end.

    The per-step loss breakdown, learning rate and triplet flag are appended
    to a JSON-lines log. Batches and augmentations are derived statelessly
    from (seed, epoch, step, position), so resuming from a checkpoint
    reproduces the uninterrupted run bit for bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aug_cfg = aug_cfg or AugConfig()
    loss_cfg = loss_cfg or LossConfig()

    train_samples = manifest.split("train")
    if not train_samples:
        raise ValueError("manifest has no train split")
    labels_np = np.array([s.identity for s in train_samples], dtype=np.int64)
    if model_cfg.num_train_identities != manifest.num_identities:
        raise ValueError(
            f"model expects {model_cfg.num_train_identities} identities but "
            f"the manifest has {manifest.num_identities}")

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = build_model(model_config_from_checkpoint(ckpt),
                            seed=train_cfg.seed)
        model.load_state_dict(ckpt["model_state"])
        optimizer = make_optimizer(model, train_cfg)
        optimizer.load_state_dict(ckpt["optimizer_state"])
        start_epoch = ckpt["epoch"] + 1
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
        optimizer = make_optimizer(model, train_cfg)
        start_epoch = 1
    model.train()

    bb = model_cfg.backbone
    cache = _ImageCache(bb.input_height, bb.input_width)
    ckpt_path = out_dir / "checkpoints" / "last.pt"
    log_path = out_dir / log_name
    epoch_means: list[float] = []

    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(start_epoch, train_cfg.epochs + 1):
            lr = lr_schedule(epoch, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss_cfg.triplet_active = epoch >= train_cfg.triplet_start_epoch

            batches = pk_sampler(labels_np, train_cfg.batch_ids,
                                 train_cfg.instances_per_id,
                                 _sampler_rng(train_cfg.seed, epoch))
            totals = []
            for step, batch in enumerate(batches):
                images, labels = _load_batch(
                    manifest, train_samples, batch, cache, aug_cfg,
                    train_cfg.seed, epoch, step)
                images = normalize_images(images, bb.scale)
                outputs = model(images)
                bundle = total_loss(outputs, labels, loss_cfg)
                loss = bundle.total
                if not torch.isfinite(loss):
                    name = _first_nonfinite(bundle, outputs, model)
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"first non-finite tensor: {name}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                record = {"epoch": epoch, "step": step, "lr": lr,
                          "triplet_active": loss_cfg.triplet_active}
                record.update(bundle.as_dict())
                log.write(json.dumps(record) + "\n")
                totals.append(float(loss.detach()))
            epoch_means.append(float(np.mean(totals)))
            save_checkpoint(ckpt_path, model, optimizer, epoch, model_cfg,
                            train_cfg)
            log.flush()

    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       epochs_run=train_cfg.epochs - start_epoch + 1,
                       epoch_mean_total=epoch_means)


def _load_batch(manifest: Manifest, samples: list[Sample], indices: list[int],
                cache: _ImageCache, aug_cfg: AugConfig, seed: int, epoch: int,
                step: int) -> tuple[torch.Tensor, torch.Tensor]:
    arrays, labels = [], []
    for position, idx in enumerate(indices):
        sample = samples[idx]
        img = cache.get(manifest.image_path(sample))
        rng = _augment_rng(seed, epoch, step, position)
        arrays.append(augment_train(img, aug_cfg, rng).astype(np.float32))
        labels.append(sample.identity)
    batch = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()
    return batch, torch.tensor(labels, dtype=torch.int64)


def write_param_report(model: CSSCModel, path: str | Path) -> dict:
    total, breakdown = count_params(model)
    report = {"total": total, "breakdown": dict(sorted(breakdown.items()))}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
