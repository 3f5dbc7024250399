"""Cloth-changing person re-identification via content and salient semantics
collaboration: a two-branch model whose semantics mining and refinement blocks
pool with averages (content) and maxima (salient), cross-applied in both
orders and fused for retrieval."""

from .backbone import BackboneConfig, build_backbone
from .data import (AugConfig, Manifest, Sample, SynthSpec, augment_train,
                   generate_synthetic, load_manifest, save_manifest)
from .evaluation import (EmbeddingTable, Metrics, ProtocolSetting, cmc_map,
                         cosine_distance, extract_all, rank_list,
                         validity_mask)
from .losses import (LossBundle, LossConfig, batch_hard_triplet, id_loss,
                     smr_head_loss, total_loss)
from .model import (CSSCModel, ForwardOutputs, ModelConfig, SMRTemplate,
                    build_model, count_params)
from .smr import SMRConfig, SMRModule, SMROutput, concat_semantics, global_pool
from .training import TrainConfig, lr_schedule, pk_sampler, train

__version__ = "0.1.0"

__all__ = [
    "AugConfig", "BackboneConfig", "CSSCModel", "EmbeddingTable",
    "ForwardOutputs", "LossBundle", "LossConfig", "Manifest", "Metrics",
    "ModelConfig", "ProtocolSetting", "SMRConfig", "SMRModule", "SMROutput",
    "SMRTemplate", "Sample", "SynthSpec", "TrainConfig", "augment_train",
    "batch_hard_triplet", "build_backbone", "build_model", "cmc_map",
    "concat_semantics", "cosine_distance", "count_params", "extract_all",
    "generate_synthetic", "global_pool", "id_loss", "load_manifest",
    "lr_schedule", "pk_sampler", "rank_list", "save_manifest",
    "smr_head_loss", "total_loss", "train", "validity_mask",
]
