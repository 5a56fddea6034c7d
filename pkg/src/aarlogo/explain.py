"""Gradient-weighted attention heatmaps per branch and per scale.

The matching score is the cosine between the query's final embedding and
its top-1 gallery neighbor. Its gradient w.r.t. each block's output
patch tokens is global-average-pooled over token positions into channel
weights, re-combined with the activations, ReLU'd, reshaped onto the
4x4 patch grid (row-major, matching the sequence indexing) and
max-normalized.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import imgproc, model
from . import numeric as nm
from .numeric import Tensor
from .retrieval import GalleryIndex
from .trainer import ModelBundle

BRANCHES = ("pos", "neg")
SCALES = ("scale00", "scale03")
_TOKEN_RANGES = {"scale00": (1, 17), "scale03": (18, 34)}


@dataclass
class HeatmapSet:
    grids: dict  # (branch, scale) -> (4, 4) in [0, 1]
    upsampled: dict  # (branch, scale) -> (128, 128)
    matched_uid: str
    score: float


def _cam(tokens: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """tokens/grads (16, C) -> max-normalized ReLU'd 4x4 grid."""
    weights = grads.mean(axis=0)  # global average pool over positions
    cam = np.maximum(tokens @ weights, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.reshape(4, 4)


def gradcam(bundle: ModelBundle, pair, index: GalleryIndex,
            score_fn=None) -> HeatmapSet:
    """Heatmaps for one sample pair against a gallery's best match.

    `score_fn(outputs, p2n) -> scalar Tensor` overrides the default
    top-1 cosine score (used by the sanity checks).
    """
    if bundle.mode != "aar":
        raise ValueError("heatmaps need the dual-branch model")
    img00 = Tensor(pair.crop00[None])
    img03 = Tensor(pair.crop03[None])
    outputs = model.aar_forward(img00, img03, bundle.params,
                                bundle.model_config)
    p2n = nm.l2_normalize(outputs.p2)
    sims = index.embeddings @ np.asarray(p2n.data)[0]
    uid_rank = np.argsort(np.argsort(index.uids))
    best = np.lexsort((uid_rank, -sims))[0]
    if score_fn is None:
        target = Tensor(index.embeddings[best][None])
        score = nm.tensor_sum(nm.mul(p2n, target))
    else:
        score = score_fn(outputs, p2n)
    nm.backward(score)

    grids = {}
    upsampled = {}
    crop_size = bundle.cfg["input_size"]
    for branch, seq in (("pos", outputs.seq_mid_a), ("neg", outputs.seq_mid_b)):
        act = np.asarray(seq.data)[0]
        grad = np.zeros_like(act) if seq.grad is None else np.asarray(seq.grad)[0]
        for scale in SCALES:
            lo, hi = _TOKEN_RANGES[scale]
            grid = _cam(act[lo:hi], grad[lo:hi])
            grids[(branch, scale)] = grid
            upsampled[(branch, scale)] = imgproc.resize_bilinear(
                grid.astype(np.float32), crop_size, crop_size)
    return HeatmapSet(grids=grids, upsampled=upsampled,
                      matched_uid=index.uids[best], score=float(score.item()))


def write_overlays(heat: HeatmapSet, pair, out_dir: str) -> list:
    """PNG overlays (heatmap alpha-blended at 0.5), one per branch/scale."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    crops = {"scale00": pair.crop00, "scale03": pair.crop03}
    for branch in BRANCHES:
        for scale in SCALES:
            hm = heat.upsampled[(branch, scale)]
            heat_rgb = np.stack([hm, 0.15 * np.ones_like(hm), 1.0 - hm], axis=-1)
            base = crops[scale].transpose(1, 2, 0)
            blend = np.clip(0.5 * base + 0.5 * heat_rgb, 0, 1)
            arr = np.rint(blend * 255).astype(np.uint8)
            path = os.path.join(out_dir, f"{pair.uid}_{branch}_{scale}.png")
            Image.fromarray(arr, mode="RGB").save(path, format="PNG")
            written.append(path)
    return written
