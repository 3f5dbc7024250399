import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ccreid.backbone import BackboneConfig
from ccreid.data import SynthSpec, generate_synthetic
from ccreid.model import ModelConfig, SMRTemplate

torch.set_num_threads(4)


TOY_SPEC = SynthSpec(num_identities=20, clothes_per_identity=3,
                     images_per_clothing=4, image_height=64, image_width=32,
                     num_cameras=2, seed=7)


def toy_backbone_config(**kwargs) -> BackboneConfig:
    defaults = dict(scale="toy", input_height=64, input_width=32,
                    channels_out=64, toy_stage_widths=(16, 32, 64))
    defaults.update(kwargs)
    return BackboneConfig(**defaults)


def toy_model_config(num_ids: int = 20, **kwargs) -> ModelConfig:
    defaults = dict(
        backbone=toy_backbone_config(),
        smr=SMRTemplate(num_parts=8, embed_channels=64, part_channels=8,
                        reduction_ratio=8),
        num_train_identities=num_ids)
    defaults.update(kwargs)
    return ModelConfig(**defaults)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """The 20-identity synthetic benchmark shared across tests."""
    root = tmp_path_factory.mktemp("toy_dataset")
    manifest = generate_synthetic(TOY_SPEC, root)
    return manifest


@pytest.fixture(scope="session")
def full_scale_model():
    """The full-scale architecture with 77 training identities (built once;
    forward passes on it are expensive)."""
    from ccreid.model import build_model
    cfg = ModelConfig(
        backbone=BackboneConfig(scale="full", input_height=384,
                                input_width=192, channels_out=1024),
        smr=SMRTemplate(num_parts=8, embed_channels=2048, part_channels=256,
                        reduction_ratio=16),
        num_train_identities=77)
    return build_model(cfg, seed=0)
