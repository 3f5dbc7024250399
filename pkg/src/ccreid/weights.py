"""Versioned weight archives: an ``.npz`` container mapping dotted module-path
names to tensors.

Reserved key ``__archive_version__`` carries the format tag. Model archives use
the module-path prefixes ``backbone.``, ``branch1.smr_c.``, ``branch1.smr_s.``,
``branch2.smr_s.``, ``branch2.smr_c.`` and ``fusion.``. Externally pretrained
fifth-stage blocks may be shipped under ``stage5.block1.`` / ``stage5.block2.`` /
``stage5.block3.`` and are used as initialization templates.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

ARCHIVE_VERSION = "ccreid-weights-1"
VERSION_KEY = "__archive_version__"


def save_weight_archive(named_tensors: dict[str, torch.Tensor],
                        path: str | Path) -> None:
    """Write tensors to a versioned ``.npz`` archive."""
    arrays = {name: t.detach().cpu().numpy() for name, t in named_tensors.items()}
    arrays[VERSION_KEY] = np.asarray(ARCHIVE_VERSION)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_weight_archive(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a weight archive; returns (version, name -> array)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight archive not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if VERSION_KEY not in data:
            raise ValueError(f"{path} is not a versioned weight archive")
        version = str(data[VERSION_KEY])
        if version != ARCHIVE_VERSION:
            raise ValueError(f"unsupported weight archive version '{version}'")
        tensors = {k: np.array(data[k]) for k in data.files if k != VERSION_KEY}
    return version, tensors


def apply_weights(module: nn.Module, tensors: dict[str, np.ndarray],
                  prefix: str = "") -> list[str]:
    """Copy archive entries under ``prefix`` into matching module tensors.

    Parameters and buffers are matched by their state-dict name; a shape
    mismatch is an error. Returns the list of names that were loaded.
    """
    state = module.state_dict()
    loaded = []
    for name, array in tensors.items():
        if not name.startswith(prefix):
            continue
        local = name[len(prefix):]
        if local not in state:
            raise KeyError(f"archive tensor '{name}' has no matching "
                           f"parameter '{local}'")
        target = state[local]
        if tuple(target.shape) != tuple(array.shape):
            raise ValueError(
                f"shape mismatch for '{name}': archive {tuple(array.shape)} "
                f"vs model {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(torch.from_numpy(array).to(target.dtype))
        loaded.append(local)
    return loaded
