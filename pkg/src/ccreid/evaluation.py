"""Embedding extraction, cosine-distance retrieval, protocol validity masks,
CMC/mAP computation, and rank-list export.

Protocol rules: under the standard setting a gallery item is invalid for a
query iff it shares identity and camera; under the cloth-changing setting iff
it shares identity and (camera or clothing); the camera-split setting first
restricts queries/gallery to explicit camera sets and then applies the
standard rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import normalize_images
from .data import Manifest, load_image
from .model import CSSCModel

SETTINGS = ("standard", "cloth_changing", "camera_split")


@dataclass(frozen=True)
class ProtocolSetting:
    name: str
    query_cameras: Optional[frozenset[int]] = None
    gallery_cameras: Optional[frozenset[int]] = None

    def __post_init__(self) -> None:
        if self.name not in SETTINGS:
            raise ValueError(f"unknown protocol setting '{self.name}'")
        if self.name == "camera_split":
            if not self.query_cameras or not self.gallery_cameras:
                raise ValueError("camera_split requires explicit query and "
                                 "gallery camera sets")
            if self.query_cameras & self.gallery_cameras:
                raise ValueError("camera_split camera sets must be disjoint")


@dataclass
class Metrics:
    """CMC curve (index k-1 holds rank-k), mAP, and the valid-query count."""

    cmc: np.ndarray
    map: float
    num_valid_queries: int

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self, setting: str) -> dict:
        return {
            "setting": setting,
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
            "rank20": self.rank(20),
            "map": float(self.map),
            "num_valid_queries": int(self.num_valid_queries),
        }


@dataclass
class EmbeddingTable:
    """One embedding row per sample, in manifest order."""

    embeddings: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    clothing: np.ndarray
    paths: list[str]

    def __len__(self) -> int:
        return len(self.paths)


def extract_all(model: CSSCModel, manifest: Manifest, split: str,
                batch_size: int = 32) -> EmbeddingTable:
    """Embed every sample of a split (resize + normalize only, no
    augmentation). Row order equals manifest order."""
    if model.training:
        raise RuntimeError("extract_all requires an evaluation-mode model")
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"manifest has no '{split}' samples")
    bb = model.cfg.backbone
    rows = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            arrays = [load_image(manifest.image_path(s), bb.input_height,
                                 bb.input_width).astype(np.float32)
                      for s in chunk]
            batch = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2)
            batch = normalize_images(batch.contiguous(), bb.scale)
            rows.append(model.embed(batch).cpu().numpy())
    return EmbeddingTable(
        embeddings=np.concatenate(rows, axis=0),
        identities=np.array([s.identity for s in samples], dtype=np.int64),
        cameras=np.array([s.camera for s in samples], dtype=np.int64),
        clothing=np.array([s.clothing for s in samples], dtype=np.int64),
        paths=[s.path for s in samples],
    )


def cosine_distance(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """1 - cosine similarity, elementwise in [0, 2]. Zero-norm rows are
    rejected by name."""
    qn = np.linalg.norm(query, axis=1)
    gn = np.linalg.norm(gallery, axis=1)
    for name, norms in (("query", qn), ("gallery", gn)):
        bad = np.where(norms == 0)[0]
        if bad.size:
            raise ValueError(f"zero-norm {name} row {int(bad[0])}")
    sim = (query / qn[:, None]) @ (gallery / gn[:, None]).T
    return 1.0 - sim


def validity_mask(query_ids: np.ndarray, query_cams: np.ndarray,
                  gallery_ids: np.ndarray, gallery_cams: np.ndarray,
                  setting: ProtocolSetting,
                  query_clothing: Optional[np.ndarray] = None,
                  gallery_clothing: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean (num_query, num_gallery) matrix of permitted comparisons."""
    same_id = query_ids[:, None] == gallery_ids[None, :]
    same_cam = query_cams[:, None] == gallery_cams[None, :]
    if setting.name == "standard":
        return ~(same_id & same_cam)
    if setting.name == "cloth_changing":
        if query_clothing is None or gallery_clothing is None:
            raise ValueError("cloth_changing requires clothing labels")
        same_clo = query_clothing[:, None] == gallery_clothing[None, :]
        return ~(same_id & (same_cam | same_clo))
    q_ok = np.isin(query_cams, sorted(setting.query_cameras))
    g_ok = np.isin(gallery_cams, sorted(setting.gallery_cameras))
    mask = ~(same_id & same_cam)
    mask &= q_ok[:, None]
    mask &= g_ok[None, :]
    return mask


def cmc_map(distmat: np.ndarray, query_ids: np.ndarray,
            gallery_ids: np.ndarray, mask: np.ndarray,
            max_rank: int = 50) -> Metrics:
    """CMC and mAP over valid queries.

    Valid gallery items are sorted by ascending distance with ties broken by
    gallery index; queries without any valid positive are excluded. AP follows
    the rank-precision sum (1/R) * sum_r r / rank_of_rth_match.
    """
    if distmat.shape != mask.shape or distmat.shape[0] != len(query_ids) \
            or distmat.shape[1] != len(gallery_ids):
        raise ValueError("inconsistent distance/mask/label shapes")
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    cmc_hits = np.zeros(max_rank, dtype=np.float64)
    aps = []
    for qi in range(distmat.shape[0]):
        cols = np.where(mask[qi])[0]
        if cols.size == 0:
            continue
        order = cols[np.argsort(distmat[qi, cols], kind="stable")]
        matches = gallery_ids[order] == query_ids[qi]
        if not matches.any():
            continue
        match_ranks = np.where(matches)[0] + 1
        first = match_ranks[0]
        if first <= max_rank:
            cmc_hits[first - 1:] += 1.0
        ranks_of_match = np.arange(1, len(match_ranks) + 1)
        aps.append(float(np.mean(ranks_of_match / match_ranks)))
    if not aps:
        raise ValueError("no valid queries")
    num_valid = len(aps)
    return Metrics(cmc=cmc_hits / num_valid, map=float(np.mean(aps)),
                   num_valid_queries=num_valid)


@dataclass(frozen=True)
class RankEntry:
    gallery_index: int
    path: str
    identity: int
    distance: float
    correct: bool


def rank_list(distmat: np.ndarray, mask: np.ndarray, query_ids: np.ndarray,
              gallery_ids: np.ndarray, gallery_paths: Sequence[str],
              k: int = 10) -> list[list[RankEntry]]:
    """Top-k valid gallery entries per query, with match flags; lists shorter
    than k when fewer valid entries exist."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lists = []
    for qi in range(distmat.shape[0]):
        cols = np.where(mask[qi])[0]
        order = cols[np.argsort(distmat[qi, cols], kind="stable")][:k]
        lists.append([
            RankEntry(gallery_index=int(gi), path=gallery_paths[gi],
                      identity=int(gallery_ids[gi]),
                      distance=float(distmat[qi, gi]),
                      correct=bool(gallery_ids[gi] == query_ids[qi]))
            for gi in order
        ])
    return lists


def write_rank_list(lists: list[list[RankEntry]], query_paths: Sequence[str],
                    path: str | Path) -> None:
    """Tab-separated export: query path, rank, gallery path, distance, flag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query\trank\tgallery\tdistance\tcorrect\n")
        for qp, entries in zip(query_paths, lists):
            for rank, entry in enumerate(entries, start=1):
                fh.write(f"{qp}\t{rank}\t{entry.path}\t"
                         f"{entry.distance:.6f}\t{int(entry.correct)}\n")


def metrics_json(metrics: Metrics, setting: str) -> str:
    """Deterministic JSON serialization of a metrics summary."""
    return json.dumps(metrics.summary(setting), sort_keys=True, indent=2) + "\n"
