"""Dataset ingestion, resizing, splits and paired augmentation.

Directory convention (ISIC style): ``<id>.jpg`` or ``<id>.png`` for images and
``<id>_segmentation.png`` for masks.  A ``manifest.csv`` with lines
``image_path,mask_path,id`` overrides the convention; ``mask_path`` may be
empty for prediction-only inputs.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, ContractError, IngestionError
from .postprocess import resample_nearest

logger = logging.getLogger(__name__)

NET_SIZE = (192, 256)
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
MASK_SUFFIX = "_segmentation.png"
MANIFEST = "manifest.csv"


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (h, w, 3) uint8
    mask: Optional[np.ndarray]  # (h, w) uint8 in {0, 1}
    original_size: tuple[int, int]


@dataclass
class NetSample:
    """A sample resized to network resolution, keeping its full-size mask for scoring."""

    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: Optional[np.ndarray]  # (1, H, W) float32 in {0, 1}
    original_size: tuple[int, int]
    original_mask: Optional[np.ndarray] = None


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"cannot decode mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)


def _pairs_from_manifest(root: Path) -> list[tuple[Path, Optional[Path], str]]:
    rows = []
    with open(root / MANIFEST, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise IngestionError(f"{root / MANIFEST}:{lineno}: expected image_path,mask_path,id")
            img, mask, sid = (c.strip() for c in row)
            rows.append((root / img, root / mask if mask else None, sid))
    return rows


def _pairs_from_names(root: Path) -> list[tuple[Path, Optional[Path], str]]:
    images: dict[str, Path] = {}
    masks: dict[str, Path] = {}
    for p in sorted(root.iterdir()):
        if not p.is_file():
            continue
        name = p.name
        if name.lower().endswith(MASK_SUFFIX):
            masks[name[: -len(MASK_SUFFIX)]] = p
        elif p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in images:
                raise IngestionError(f"two images share id '{p.stem}': {images[p.stem].name}, {name}")
            images[p.stem] = p
    orphans = sorted(set(masks) - set(images))
    if orphans:
        raise IngestionError(f"mask without image for id(s): {', '.join(orphans)}")
    return [(images[i], masks.get(i), i) for i in images]


def load_dataset(directory) -> list[Sample]:
    root = Path(directory)
    if not root.is_dir():
        raise IngestionError(f"dataset directory not found: {root}")
    pairs = _pairs_from_manifest(root) if (root / MANIFEST).exists() else _pairs_from_names(root)
    samples = []
    for img_path, mask_path, sid in pairs:
        image = _read_image(img_path)
        mask = None
        if mask_path is not None:
            mask = _read_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise IngestionError(f"mask {mask_path} is {mask.shape}, image is {image.shape[:2]}")
        samples.append(Sample(sid, image, mask, image.shape[:2]))
    samples.sort(key=lambda s: s.id)
    logger.info("loaded %d samples from %s", len(samples), root)
    return samples


def resize_image(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of an (h, w, 3) uint8 image to (3, H, W) float32 in [0, 1]."""
    h, w = size
    if image.shape[:2] != (h, w):
        image = np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))
    return (image.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def resize_for_net(s: Sample, size=NET_SIZE) -> NetSample:
    image = resize_image(s.image, size)
    mask = None
    if s.mask is not None:
        mask = resample_nearest(s.mask, size).astype(np.float32)[None]
    return NetSample(s.id, image, mask, tuple(s.original_size), s.mask)


def prepare(samples: Sequence[Sample], size=NET_SIZE) -> list[NetSample]:
    return [resize_for_net(s, size) for s in samples]


@dataclass
class SplitPlan:
    seed: int
    train: list[str]
    validation: list[str]


def _shuffled(ids: Sequence[str], seed: int) -> list[str]:
    ordered = sorted(ids)
    if len(set(ordered)) != len(ordered):
        raise ContractError("ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    return [ordered[i] for i in perm]


def split_80_20(ids: Sequence[str], seed: int) -> SplitPlan:
    if len(ids) < 2:
        raise ContractError(f"need at least 2 ids to split, got {len(ids)}")
    order = _shuffled(ids, seed)
    n_val = len(order) // 5
    if n_val == 0:
        n_val = 1
    return SplitPlan(seed, train=sorted(order[n_val:]), validation=sorted(order[:n_val]))


def kfold(ids: Sequence[str], k: int = 5, seed: int = 0) -> list[SplitPlan]:
    if k < 2:
        raise ContractError("k must be >= 2")
    if len(ids) < k:
        raise ContractError(f"need at least k={k} ids, got {len(ids)}")
    order = _shuffled(ids, seed)
    folds = [list(f) for f in np.array_split(np.asarray(order, dtype=object), k)]
    plans = []
    for i, val in enumerate(folds):
        train = [x for j, f in enumerate(folds) if j != i for x in f]
        plans.append(SplitPlan(seed, train=sorted(train), validation=sorted(val)))
    return plans


@dataclass
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_deg: float = 20.0
    zoom_min: float = 0.8
    zoom_max: float = 1.25
    enabled: bool = True

    def validate(self) -> None:
        if not (0 <= self.hflip_p <= 1 and 0 <= self.vflip_p <= 1):
            raise ConfigError("flip probabilities must lie in [0, 1]")
        if not (0 < self.zoom_min <= self.zoom_max):
            raise ConfigError("zoom bounds must be positive with zoom_min <= zoom_max")
        if self.rotation_deg < 0:
            raise ConfigError("rotation_deg must be >= 0")


@dataclass(frozen=True)
class Transform:
    hflip: bool = False
    vflip: bool = False
    angle_deg: float = 0.0
    zoom: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.hflip and not self.vflip and self.angle_deg == 0.0 and self.zoom == 1.0


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator) -> Transform:
    hflip = bool(rng.random() < cfg.hflip_p)
    vflip = bool(rng.random() < cfg.vflip_p)
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    # log-uniform so that zooming in and out are equally likely
    zoom = float(math.exp(rng.uniform(math.log(cfg.zoom_min), math.log(cfg.zoom_max))))
    return Transform(hflip, vflip, angle, zoom)


def source_coords(t: Transform, h: int, w: int) -> np.ndarray:
    """(2, h, w) source row/col sampled by each output pixel under ``t``.

    Flips are applied after rotation/zoom about the image centre.
    """
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if t.vflip:
        r = (h - 1) - r
    if t.hflip:
        c = (w - 1) - c
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(t.angle_deg)
    cos, sin = math.cos(a) / t.zoom, math.sin(a) / t.zoom
    dy, dx = r - cy, c - cx
    return np.stack([cy + cos * dy - sin * dx, cx + sin * dy + cos * dx])


def apply_transform(image: np.ndarray, mask: Optional[np.ndarray], t: Transform):
    """Warp a (c, H, W) image bilinearly and a (1, H, W) mask by nearest neighbour."""
    if t.is_identity:
        return image, mask
    h, w = image.shape[-2:]
    if t.angle_deg == 0.0 and t.zoom == 1.0:
        # pure flips are exact index permutations
        sl = (slice(None), slice(None, None, -1) if t.vflip else slice(None), slice(None, None, -1) if t.hflip else slice(None))
        return image[sl].copy(), None if mask is None else mask[sl].copy()
    coords = source_coords(t, h, w)
    out_img = np.stack(
        [ndimage.map_coordinates(ch, coords, order=1, mode="grid-constant", cval=0.0) for ch in image]
    ).astype(image.dtype)
    out_mask = None
    if mask is not None:
        out_mask = np.stack(
            [ndimage.map_coordinates(ch, coords, order=0, mode="grid-constant", cval=0.0) for ch in mask]
        ).astype(mask.dtype)
    return out_img, out_mask


def augment(image: np.ndarray, mask: Optional[np.ndarray], cfg: AugmentConfig, rng: np.random.Generator):
    if not cfg.enabled:
        return image, mask
    return apply_transform(image, mask, sample_transform(cfg, rng))


def sample_seed(run_seed: int, sample_id: str, epoch: int) -> np.random.SeedSequence:
    """Per-sample augmentation stream, independent of batch order."""
    return np.random.SeedSequence([run_seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


def make_toy(out_dir, n: int, seed: int = 0, size=(144, 192)) -> list[str]:
    """Write ``n`` synthetic image/mask pairs: textured skin plus one darker ellipse."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = size
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    ids = []
    for i in range(n):
        while True:
            ry = rng.uniform(0.15, 0.42) * h
            rx = rng.uniform(0.15, 0.42) * w
            frac = math.pi * ry * rx / (h * w)
            if 0.05 <= frac <= 0.4:
                break
        cy = rng.uniform(ry, h - ry)
        cx = rng.uniform(rx, w - rx)
        theta = rng.uniform(0, math.pi)
        dy, dx = rr - cy, cc - cx
        u = dy * math.cos(theta) + dx * math.sin(theta)
        v = -dy * math.sin(theta) + dx * math.cos(theta)
        mask = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0

        coarse = rng.normal(0, 1, size=(h // 8 + 1, w // 8 + 1))
        texture = ndimage.zoom(coarse, 8, order=1)[:h, :w]
        skin = np.array([205, 160, 140]) + rng.uniform(-15, 15, size=3)
        lesion = np.array([115, 75, 60]) + rng.uniform(-15, 15, size=3)
        base = np.where(mask[..., None], lesion, skin)
        img = base + 12 * texture[..., None] + rng.normal(0, 8, size=(h, w, 3))
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

        sid = f"toy_{i:04d}"
        Image.fromarray(img).save(out / f"{sid}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / f"{sid}{MASK_SUFFIX}")
        ids.append(sid)
    return ids


def write_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
