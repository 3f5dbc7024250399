"""Dataset schema, manifest I/O, synthetic benchmark generation, and augmentation.

The on-disk contract is a CSV manifest with header ``path,identity,camera,clothing,split``
and image paths relative to the manifest's directory. Images are 8-bit RGB PNG.

The synthetic generator produces a desk-scale cloth-changing benchmark in which
identity is carried exclusively by clothing-invariant cues (silhouette geometry,
head placement, and a per-identity binary pixel stamp) while each clothing index
only repaints the torso with a distinct solid color. Cameras add a fixed
brightness offset and a small translation; backgrounds are per-image seeded noise.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

MANIFEST_COLUMNS = ("path", "identity", "camera", "clothing", "split")
SPLITS = ("train", "query", "gallery")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}

# Per-camera nuisance effects, indexed by camera modulo table length.
CAMERA_BRIGHTNESS = (0.0, 0.08, -0.08, 0.05, -0.05)
CAMERA_SHIFTS = ((0, 0), (1, -1), (-1, 1), (1, 1), (-1, -1))


@dataclass(frozen=True)
class Sample:
    """One manifest row: an image with identity, camera and clothing labels."""

    path: str
    identity: int
    camera: int
    clothing: int
    split: str


@dataclass
class Manifest:
    """An ordered collection of samples plus training-identity bookkeeping.

    ``identity_map`` records the raw-to-contiguous relabeling applied to the
    train split; query/gallery identities keep their raw labels.
    """

    samples: list[Sample]
    num_identities: int
    source: str
    root: Path = field(compare=False, default=Path("."))
    identity_map: dict[int, int] = field(compare=False, default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ValueError(f"unknown split '{name}'")
        return [s for s in self.samples if s.split == name]

    def image_path(self, sample: Sample) -> Path:
        return self.root / sample.path


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic cloth-changing dataset."""

    num_identities: int = 20
    clothes_per_identity: int = 3
    images_per_clothing: int = 4
    image_height: int = 64
    image_width: int = 32
    num_cameras: int = 2
    seed: int = 7

    def __post_init__(self) -> None:
        for name in ("num_identities", "clothes_per_identity", "images_per_clothing",
                     "image_height", "image_width", "num_cameras"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthSpec.{name} must be >= 1")
        if self.clothes_per_identity < 2:
            raise ValueError("clothes_per_identity must be >= 2 for a "
                             "non-empty cloth-changing protocol")


@dataclass(frozen=True)
class AugConfig:
    """Training-time augmentation: flip, pad+crop, random erasing."""

    flip_probability: float = 0.5
    pad_pixels: int = 10
    erase_probability: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.4)
    erase_aspect_range: tuple[float, float] = (0.3, 3.33)

    def __post_init__(self) -> None:
        for name in ("flip_probability", "erase_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"AugConfig.{name} must be in [0, 1]")
        if self.pad_pixels < 0:
            raise ValueError("AugConfig.pad_pixels must be >= 0")
        for name in ("erase_area_range", "erase_aspect_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"AugConfig.{name} must be an ordered positive pair")


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def load_manifest(path: str | Path, source: str = "external") -> Manifest:
    """Parse a manifest CSV, validate rows, and relabel train identities.

    Train identities are remapped to contiguous 0-based labels (sorted by raw
    label); the mapping is recorded on the returned manifest. Rows are ordered
    lexicographically by (path, split) so extraction order is reproducible.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows or (len(rows) == 1 and not any(rows[0])):
        raise ValueError("empty manifest")
    header = tuple(h.strip() for h in rows[0])
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"manifest missing column: {missing[0]}")
    extra = [c for c in header if c not in MANIFEST_COLUMNS]
    if extra:
        raise ValueError(f"manifest has unknown column: {extra[0]}")
    col = {name: header.index(name) for name in MANIFEST_COLUMNS}

    samples: list[Sample] = []
    seen: set[tuple[str, str]] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(f.strip() for f in row):
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            raise ValueError(f"manifest line {lineno}: expected "
                             f"{len(MANIFEST_COLUMNS)} fields, got {len(row)}")
        rel = row[col["path"]].strip()
        ext = os.path.splitext(rel)[1].lower()
        if ext not in IMAGE_EXTENSIONS:
            raise ValueError(f"manifest line {lineno}: '{rel}' is not an image path")
        try:
            identity = int(row[col["identity"]])
            camera = int(row[col["camera"]])
            clothing = int(row[col["clothing"]])
        except ValueError as exc:
            raise ValueError(f"manifest line {lineno}: {exc}") from None
        split = row[col["split"]].strip()
        if split not in SPLITS:
            raise ValueError(f"manifest line {lineno}: unknown split '{split}'")
        if min(identity, camera, clothing) < 0:
            raise ValueError(f"manifest line {lineno}: labels must be non-negative")
        if (rel, split) in seen:
            raise ValueError(f"manifest line {lineno}: duplicate (path, split) "
                             f"pair ('{rel}', '{split}')")
        seen.add((rel, split))
        samples.append(Sample(rel, identity, camera, clothing, split))
    if not samples:
        raise ValueError("empty manifest")

    samples.sort(key=lambda s: (s.path, s.split))
    train_ids = sorted({s.identity for s in samples if s.split == "train"})
    identity_map = {raw: new for new, raw in enumerate(train_ids)}
    remapped = [
        Sample(s.path, identity_map[s.identity], s.camera, s.clothing, s.split)
        if s.split == "train" else s
        for s in samples
    ]
    return Manifest(samples=remapped, num_identities=len(train_ids),
                    source=source, root=path.parent, identity_map=identity_map)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest CSV (rows ordered by (path, split))."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(manifest.samples, key=lambda s: (s.path, s.split))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for s in rows:
            writer.writerow([s.path, s.identity, s.camera, s.clothing, s.split])


# ---------------------------------------------------------------------------
# Synthetic benchmark generation
# ---------------------------------------------------------------------------

def _style_rng(spec: SynthSpec, *key: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *key])


def identity_style(spec: SynthSpec, identity: int) -> dict:
    """Deterministic clothing-invariant appearance parameters for one identity.

    Identities come in pairs (2k, 2k+1) that share silhouette geometry and the
    same two binary leg stamps but stack the stamps in opposite vertical
    order. Within a pair, globally pooled pixel statistics coincide; telling
    the two apart requires spatially local (part-level) evidence.
    """
    pair_rng = _style_rng(spec, 11, identity // 2)
    H, W = spec.image_height, spec.image_width
    stamp_a = pair_rng.integers(0, 2, size=(3, 3))
    stamp_b = 1 - stamp_a  # complementary: same total ink, different layout
    if identity % 2:
        stamp_a, stamp_b = stamp_b, stamp_a
    return {
        "center_y": 0.565 * H + pair_rng.uniform(-0.02, 0.02) * H,
        "center_x": 0.5 * W,
        "semi_h": pair_rng.uniform(0.32, 0.36) * H,
        "semi_w": pair_rng.uniform(0.30, 0.44) * W,
        "head_radius": pair_rng.uniform(0.06, 0.11) * H,
        "head_dx": pair_rng.uniform(-0.12, 0.12) * W,
        "stamp_upper": stamp_a,
        "stamp_lower": stamp_b,
    }


def clothing_color(spec: SynthSpec, identity: int, clothing: int,
                   image_index: int = 0) -> np.ndarray:
    """Solid torso color for one clothing index.

    Hues live in disjoint bins indexed by clothing and shared by all
    identities, with per-image jitter inside the bin (lighting variation).
    Torso color therefore separates clothing indices crisply while carrying
    no identity information: identity must come from structure.
    """
    rng = _style_rng(spec, 22, identity, clothing, image_index)
    hue = (clothing + 0.5 + rng.uniform(-0.35, 0.35)) / spec.clothes_per_identity
    return _hsv_to_rgb(hue % 1.0, 0.95, rng.uniform(0.8, 1.0))


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.asarray(rgb, dtype=np.float64)


def render_person(spec: SynthSpec, identity: int, clothing: int,
                  offset: tuple[int, int] = (0, 0),
                  image_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Render the person layer before any camera effect.

    Returns ``(image, mask)`` where ``image`` is HxWx3 in [0, 1] and ``mask``
    marks person pixels. For a fixed identity the mask is pixel-identical
    across clothing indices, image indices and cameras (at equal ``offset``).
    """
    style = identity_style(spec, identity)
    H, W = spec.image_height, spec.image_width
    dy, dx = offset
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    cy, cx = style["center_y"] + dy, style["center_x"] + dx
    ry, rx = style["semi_h"], style["semi_w"]
    # Fourth-power superellipse: a capsule-like body that stays wide toward
    # the feet, leaving room for the leg stamps.
    body = ((yy - cy) / ry) ** 4 + ((xx - cx) / rx) ** 4 <= 1.0

    hr = style["head_radius"]
    hy, hx = cy - ry - 0.55 * hr, cx + style["head_dx"]
    head = (yy - hy) ** 2 + (xx - hx) ** 2 <= hr ** 2
    mask = body | head

    img = np.zeros((H, W, 3), dtype=np.float64)
    img[body] = np.array([0.22, 0.22, 0.22])
    torso = body & (yy >= cy - 0.55 * ry) & (yy <= cy + 0.05 * ry)
    img[torso] = clothing_color(spec, identity, clothing, image_index)
    img[head] = np.array([0.92, 0.78, 0.68])

    # Two 3x3 binary stamps (3 px per cell) stacked in the leg region, clipped
    # to the body so the silhouette is unaffected.
    cell = 3
    sy_upper = int(round(cy + 0.08 * ry))
    sx = int(round(cx)) - cell * 3 // 2
    for sy, stamp in ((sy_upper, style["stamp_upper"]),
                      (sy_upper + 3 * cell + 1, style["stamp_lower"])):
        for i in range(3):
            for j in range(3):
                shade = 0.97 if stamp[i, j] else 0.03
                y0, x0 = sy + i * cell, sx + j * cell
                for y in range(max(y0, 0), min(y0 + cell, H)):
                    for x in range(max(x0, 0), min(x0 + cell, W)):
                        if body[y, x] and not torso[y, x]:
                            img[y, x] = shade
    return img, mask


def camera_effect(camera: int) -> tuple[float, tuple[int, int]]:
    """Fixed brightness offset and translation for a camera index."""
    k = camera % len(CAMERA_BRIGHTNESS)
    return CAMERA_BRIGHTNESS[k], CAMERA_SHIFTS[k]


def _compose_image(spec: SynthSpec, identity: int, clothing: int, camera: int,
                   image_index: int) -> np.ndarray:
    brightness, shift = camera_effect(camera)
    person, mask = render_person(spec, identity, clothing, offset=shift,
                                 image_index=image_index)
    rng = _style_rng(spec, 33, identity, clothing, image_index)
    img = 0.30 + 0.50 * rng.random((spec.image_height, spec.image_width, 3))
    img[mask] = person[mask]
    img = np.clip(img + brightness, 0.0, 1.0)
    return img


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> Manifest:
    """Generate the synthetic dataset under ``out_dir`` and return its manifest.

    Split layout: for each identity the last clothing index is held out of
    training; its images alternate between query and gallery so the gallery
    retains same-clothing matches (keeping the standard protocol non-trivial).
    All other images populate both the train and gallery splits. Deterministic
    for a fixed spec (byte-identical images and manifest across runs).
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {img_dir}: {exc}") from exc

    held_out = spec.clothes_per_identity - 1
    samples: list[Sample] = []
    for identity in range(spec.num_identities):
        for clothing in range(spec.clothes_per_identity):
            for j in range(spec.images_per_clothing):
                camera = j % spec.num_cameras
                rel = (f"images/id{identity:04d}_clo{clothing}"
                       f"_cam{camera}_{j:02d}.png")
                img = _compose_image(spec, identity, clothing, camera, j)
                arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(arr, mode="RGB").save(out_dir / rel)
                if clothing == held_out:
                    split = "query" if j % 2 == 0 else "gallery"
                    samples.append(Sample(rel, identity, camera, clothing, split))
                else:
                    samples.append(Sample(rel, identity, camera, clothing, "train"))
                    samples.append(Sample(rel, identity, camera, clothing, "gallery"))

    manifest = Manifest(samples=samples, num_identities=spec.num_identities,
                        source="synthetic", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return load_manifest(out_dir / "manifest.csv", source="synthetic")


# ---------------------------------------------------------------------------
# Image loading and augmentation
# ---------------------------------------------------------------------------

def load_image(path: str | Path, height: Optional[int] = None,
               width: Optional[int] = None) -> np.ndarray:
    """Load an RGB image as HxWx3 float64 in [0, 1], optionally resized."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if height is not None and width is not None and im.size != (width, height):
            im = im.resize((width, height), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def augment_train(image: np.ndarray, cfg: AugConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Apply flip, reflection-pad + random crop, and random erasing, in order.

    ``image`` is HxWx3 with values in [0, 1]; the output has identical shape
    and range. Erased rectangles are filled with per-pixel noise drawn from
    ``rng``; their realized area fraction and aspect ratio are guaranteed to
    lie inside the configured ranges.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("augment_train expects an HxWx3 image")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    H, W = image.shape[:2]
    if cfg.pad_pixels >= min(H, W):
        raise ValueError(f"pad_pixels ({cfg.pad_pixels}) must be smaller "
                         f"than min(H, W) = {min(H, W)}")

    out = image
    if rng.random() < cfg.flip_probability:
        out = out[:, ::-1, :]
    if cfg.pad_pixels > 0:
        p = cfg.pad_pixels
        padded = np.pad(out, ((p, p), (p, p), (0, 0)), mode="reflect")
        y0 = int(rng.integers(0, 2 * p + 1))
        x0 = int(rng.integers(0, 2 * p + 1))
        out = padded[y0:y0 + H, x0:x0 + W, :]
    if rng.random() < cfg.erase_probability:
        out = np.ascontiguousarray(out)
        area = H * W
        lo_a, hi_a = cfg.erase_area_range
        lo_r, hi_r = cfg.erase_aspect_range
        for _ in range(100):
            target = rng.uniform(lo_a, hi_a) * area
            ratio = rng.uniform(lo_r, hi_r)
            eh = int(round(math.sqrt(target * ratio)))
            ew = int(round(math.sqrt(target / ratio)))
            if eh < 1 or ew < 1 or eh >= H or ew >= W:
                continue
            if not (lo_a <= eh * ew / area <= hi_a and lo_r <= eh / ew <= hi_r):
                continue
            y0 = int(rng.integers(0, H - eh + 1))
            x0 = int(rng.integers(0, W - ew + 1))
            out[y0:y0 + eh, x0:x0 + ew, :] = rng.random((eh, ew, 3))
            break
    return np.ascontiguousarray(out)
