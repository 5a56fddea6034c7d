"""Two-scale crop extraction and stochastic augmentation.

Every annotated object yields one SamplePair: the tight crop and the
crop enlarged by fraction s (total side growth 1+s, i.e. pad s/2 of the
box dimension on each edge, clipped to the image). Both are resized to
128x128; training pairs get independent augmentations per crop.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import imgproc


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.2
    p_rrc: float = 0.8
    rrc_area: tuple = (0.7, 1.0)
    p_affine: float = 0.3
    affine_deg: float = 10.0
    shear_deg: float = 5.0
    p_perspective: float = 0.2
    perspective: float = 0.1
    p_jitter: float = 0.8
    jitter: float = 0.2

    @classmethod
    def disabled(cls):
        return cls(p_hflip=0, p_vflip=0, p_rrc=0, p_affine=0,
                   p_perspective=0, p_jitter=0)


@dataclass
class SamplePair:
    crop00: np.ndarray  # (3, 128, 128) float32 in [0, 1]
    crop03: np.ndarray
    class_id: int
    source: str  # "main" | "distractor"
    uid: str


def crop_enlarged(image: np.ndarray, box, s: float) -> np.ndarray:
    """Crop `box` grown by fraction s per side, clipped to the image."""
    x0, y0, x1, y1 = box
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {box}")
    if s < 0:
        raise ValueError(f"enlargement must be >= 0, got {s}")
    w, h = x1 - x0, y1 - y0
    px0 = x0 - s * w / 2
    py0 = y0 - s * h / 2
    px1 = x1 + s * w / 2
    py1 = y1 + s * h / 2
    ih, iw = image.shape[:2]
    cx0 = max(0, int(np.floor(px0)))
    cy0 = max(0, int(np.floor(py0)))
    cx1 = min(iw, int(np.ceil(px1)))
    cy1 = min(ih, int(np.ceil(py1)))
    return image[cy0:cy1, cx0:cx1]


def padded_box(box, s: float):
    """The pre-clipping enlarged box, for geometry checks."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    return (x0 - s * w / 2, y0 - s * h / 2, x1 + s * w / 2, y1 + s * h / 2)


def resize_bilinear(crop: np.ndarray, target: int = 128) -> np.ndarray:
    """Channels-first 128x128 float crop; values stay in [0, 1]."""
    if crop.size == 0:
        raise ValueError("empty crop")
    out = imgproc.resize_bilinear(crop.astype(np.float32), target, target)
    return np.clip(out, 0.0, 1.0).transpose(2, 0, 1)


def augment(crop: np.ndarray, rng, config: AugmentConfig = None) -> np.ndarray:
    """Stochastic augmentation of a (3, S, S) crop; draws are independent."""
    cfg = config or AugmentConfig()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    img = crop.transpose(1, 2, 0)
    size = img.shape[0]

    if rng.uniform() < cfg.p_hflip:
        img = img[:, ::-1]
    if rng.uniform() < cfg.p_vflip:
        img = img[::-1]
    if rng.uniform() < cfg.p_rrc:
        area = rng.uniform(*cfg.rrc_area)
        side = int(round(size * np.sqrt(area)))
        side = max(1, min(size, side))
        oy = int(rng.integers(0, size - side + 1))
        ox = int(rng.integers(0, size - side + 1))
        img = imgproc.resize_bilinear(
            np.ascontiguousarray(img[oy:oy + side, ox:ox + side]), size, size)
    if rng.uniform() < cfg.p_affine:
        mat = imgproc.affine_matrix(
            angle_deg=float(rng.uniform(-cfg.affine_deg, cfg.affine_deg)),
            shear_deg=float(rng.uniform(-cfg.shear_deg, cfg.shear_deg)),
            center=(size / 2, size / 2))
        img = imgproc.warp_homography(
            np.ascontiguousarray(img), np.linalg.inv(mat), size, size, fill=0.0)
    if rng.uniform() < cfg.p_perspective:
        d = cfg.perspective * size
        src = [(0, 0), (size, 0), (size, size), (0, size)]
        dst = [(x + float(rng.uniform(-d, d)), y + float(rng.uniform(-d, d)))
               for (x, y) in src]
        mat = imgproc.homography_from_points(src, dst)
        img = imgproc.warp_homography(
            np.ascontiguousarray(img), np.linalg.inv(mat), size, size, fill=0.0)
    if rng.uniform() < cfg.p_jitter:
        j = cfg.jitter
        img = img * (1.0 + float(rng.uniform(-j, j)))  # brightness
        mean = img.mean()
        img = mean + (img - mean) * (1.0 + float(rng.uniform(-j, j)))  # contrast
        gray = img.mean(axis=-1, keepdims=True)
        img = gray + (img - gray) * (1.0 + float(rng.uniform(-j, j)))  # saturation
    return np.clip(np.ascontiguousarray(img), 0.0, 1.0) \
        .astype(np.float32).transpose(2, 0, 1)


class _ImageCache:
    def __init__(self, root, capacity=256):
        self.root = root
        self.capacity = capacity
        self._cache = {}

    def get(self, rel_path: str) -> np.ndarray:
        if rel_path not in self._cache:
            path = os.path.join(self.root, rel_path)
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except FileNotFoundError:
                raise FileNotFoundError(f"missing image file: {path}")
            if len(self._cache) >= self.capacity:
                self._cache.pop(next(iter(self._cache)))
            self._cache[rel_path] = arr
        return self._cache[rel_path]


def object_records(manifest, split: str, source=None):
    """Flat, uid-ordered (uid, image, box, class_id, source) records."""
    records = []
    src = source or ("distractor" if split == "distractor" else "main")
    for rec in manifest.splits[split]:
        stem = os.path.splitext(os.path.basename(rec.image))[0]
        for oi, obj in enumerate(rec.objects):
            records.append({
                "uid": f"{stem}_o{oi:02d}",
                "image": rec.image,
                "box": tuple(obj["box"]),
                "class_id": obj["class"],
                "source": src,
            })
    records.sort(key=lambda r: r["uid"])
    return records


def build_pair(record, cache: _ImageCache, s03: float, target=128,
               rng=None, aug: AugmentConfig = None) -> SamplePair:
    img = cache.get(record["image"])
    c00 = resize_bilinear(crop_enlarged(img, record["box"], 0.0), target)
    c03 = resize_bilinear(crop_enlarged(img, record["box"], s03), target)
    if rng is not None:
        # the two crops draw independent augmentations
        c00 = augment(c00, rng, aug)
        c03 = augment(c03, rng, aug)
    return SamplePair(crop00=c00, crop03=c03, class_id=record["class_id"],
                      source=record["source"], uid=record["uid"])


def make_pairs(manifest, data_dir: str, split: str, s03: float, seed: int,
               epoch: int = 0, train: bool = False,
               aug: AugmentConfig = None, target: int = 128):
    """Yield one SamplePair per annotated object.

    Training streams are shuffled deterministically from (seed, epoch)
    and augmented; eval streams are unaugmented and uid-ordered.
    """
    records = object_records(manifest, split)
    cache = _ImageCache(data_dir)
    if train:
        order_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        order = order_rng.permutation(len(records))
        for rank, idx in enumerate(order):
            pair_rng = np.random.default_rng(
                np.random.SeedSequence([seed, epoch, int(idx)]))
            yield build_pair(records[idx], cache, s03, target,
                             rng=pair_rng, aug=aug)
    else:
        for rec in records:
            yield build_pair(rec, cache, s03, target)
