"""Gallery construction, cosine ranking, truncated mAP, and the two
evaluation protocols (without / with distractors injected into the
gallery) over close-set and open-set splits.

Protocol 1 gallery = training-split objects, queries = test-split
objects. Protocol 2 appends distractor objects to the gallery only;
retrieving one is always irrelevant. Open-set evaluation holds out 40%
of the classes: their objects are split 50/50 per class into gallery and
queries by uid order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import datagen, pairs
from .trainer import ModelBundle


class EvalConfigError(ValueError):
    pass


@dataclass
class GalleryIndex:
    embeddings: np.ndarray  # (N, D), unit rows
    labels: np.ndarray  # (N,)
    sources: list  # "main" | "distractor"
    uids: list

    def __post_init__(self):
        if len(set(self.uids)) != len(self.uids):
            raise ValueError("gallery uids must be unique")


@dataclass
class EvalReport:
    protocol: int
    split: str
    map1: float
    map5: float
    query_count: int
    gallery_size: int
    distractor_count: int
    per_query_top5: dict = field(default_factory=dict)  # uid -> [uids]

    def to_json(self) -> str:
        return json.dumps({
            "protocol": self.protocol, "split": self.split,
            "map1": self.map1, "map5": self.map5,
            "query_count": self.query_count,
            "gallery_size": self.gallery_size,
            "distractor_count": self.distractor_count,
        }, sort_keys=True)

    def csv_row(self) -> list:
        return [self.protocol, self.split, f"{self.map1:.6f}",
                f"{self.map5:.6f}", self.query_count, self.gallery_size,
                self.distractor_count]


def embed_records(bundle: ModelBundle, records, data_dir: str,
                  batch_size: int = 64) -> np.ndarray:
    cache = pairs._ImageCache(data_dir)
    s = bundle.eval_s03
    out = []
    batch = []
    for rec in records:
        batch.append(pairs.build_pair(rec, cache, s,
                                      target=bundle.cfg["input_size"]))
        if len(batch) == batch_size:
            out.append(bundle.embed_batch(batch))
            batch = []
    if batch:
        out.append(bundle.embed_batch(batch))
    if not out:
        return np.zeros((0, bundle.cfg["d_embed"]), dtype=np.float32)
    return np.concatenate(out, axis=0)


def build_gallery(bundle: ModelBundle, records, data_dir: str) -> GalleryIndex:
    """Embed uid-ordered object records, one row each, unaugmented."""
    records = sorted(records, key=lambda r: r["uid"])
    emb = embed_records(bundle, records, data_dir)
    return GalleryIndex(
        embeddings=emb,
        labels=np.array([r["class_id"] for r in records], dtype=np.int64),
        sources=[r["source"] for r in records],
        uids=[r["uid"] for r in records])


def rank(query: np.ndarray, index: GalleryIndex):
    """uids by descending cosine similarity, ties by ascending uid."""
    n = len(index.uids)
    if n == 0:
        raise ValueError("empty gallery")
    sims = index.embeddings @ np.asarray(query, dtype=index.embeddings.dtype)
    uid_rank = np.argsort(np.argsort(index.uids))
    order = np.lexsort((uid_rank, -sims))
    return [index.uids[i] for i in order], sims[order]


def ap_at_k(ranked_labels, query_label, relevant_count: int, k: int) -> float:
    """AP truncated at k, normalized by min(k, R); 0 when R == 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if relevant_count <= 0:
        return 0.0
    hits = 0
    total = 0.0
    for i, lab in enumerate(ranked_labels[:k]):
        if lab == query_label:
            hits += 1
            total += hits / (i + 1)
    return total / min(k, relevant_count)


def _map_at_ks(query_emb, query_labels, index: GalleryIndex, ks=(1, 5)):
    """Vectorized mean AP at each k; returns (maps, per-query top-5 rows)."""
    sims = query_emb @ index.embeddings.T  # (Q, N)
    uid_rank = np.argsort(np.argsort(index.uids))
    maps = {k: [] for k in ks}
    top5 = []
    kmax = max(ks)
    relevant = {lab: int((index.labels == lab).sum())
                for lab in set(query_labels.tolist())}
    for qi in range(sims.shape[0]):
        order = np.lexsort((uid_rank, -sims[qi]))
        ranked = index.labels[order]
        r = relevant[int(query_labels[qi])]
        for k in ks:
            maps[k].append(ap_at_k(ranked, query_labels[qi], r, k))
        top5.append([index.uids[i] for i in order[:kmax]])
    return {k: float(np.mean(v)) if v else 0.0 for k, v in maps.items()}, top5


def split_open_set(class_ids, seed: int) -> dict:
    """Class-disjoint split: 60% train (8:2 train/val downstream), 40% test."""
    class_ids = sorted(class_ids)
    if len(class_ids) < 5:
        raise EvalConfigError(
            f"open split needs >= 5 classes, got {len(class_ids)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x09E2]))
    perm = rng.permutation(len(class_ids))
    n_test = max(1, int(round(0.4 * len(class_ids))))
    test = sorted(class_ids[i] for i in perm[:n_test])
    train = sorted(class_ids[i] for i in perm[n_test:])
    return {"train": train, "test": test}


def _records_for(manifest, split):
    if split not in manifest.splits:
        return []
    return pairs.object_records(manifest, split)


def _close_set_pools(manifest):
    gallery = _records_for(manifest, "train")
    queries = _records_for(manifest, "test")
    return gallery, queries


def _open_set_pools(manifest):
    held = set(split_open_set(
        sorted(manifest.class_ids(distractor=False)), manifest.seed)["test"])
    objects = []
    for split in ("train", "val", "test"):
        objects.extend(r for r in _records_for(manifest, split)
                       if r["class_id"] in held)
    objects.sort(key=lambda r: r["uid"])
    gallery, queries = [], []
    by_class = {}
    for r in objects:
        by_class.setdefault(r["class_id"], []).append(r)
    for cid in sorted(by_class):
        rs = by_class[cid]
        half = len(rs) // 2
        gallery.extend(rs[:half])
        queries.extend(rs[half:])
    return gallery, queries


def evaluate(bundle: ModelBundle, manifest, data_dir: str, protocol: int,
             gallery_split: str, query_split: str,
             restrict_classes=None) -> EvalReport:
    """mAP over explicit gallery/query splits (used by the val hook)."""
    gallery = _records_for(manifest, gallery_split)
    queries = _records_for(manifest, query_split)
    if restrict_classes is not None:
        gallery = [r for r in gallery if r["class_id"] in restrict_classes]
        queries = [r for r in queries if r["class_id"] in restrict_classes]
    return _run(bundle, manifest, data_dir, protocol, "close", gallery, queries)


def run_protocol(bundle: ModelBundle, manifest, data_dir: str, protocol: int,
                 split: str) -> EvalReport:
    if protocol not in (1, 2):
        raise EvalConfigError(f"protocol must be 1 or 2, got {protocol}")
    if split == "close":
        gallery, queries = _close_set_pools(manifest)
    elif split == "open":
        gallery, queries = _open_set_pools(manifest)
    else:
        raise EvalConfigError(f"unknown split: {split!r}")
    return _run(bundle, manifest, data_dir, protocol, split, gallery, queries)


def _run(bundle, manifest, data_dir, protocol, split, gallery_records,
         query_records) -> EvalReport:
    distractors = []
    if protocol == 2:
        if "distractor" not in manifest.splits:
            raise EvalConfigError(
                "protocol 2 requires a distractor manifest (distractor.jsonl)")
        distractors = _records_for(manifest, "distractor")
    index = build_gallery(bundle, gallery_records + distractors, data_dir)
    query_records = sorted(query_records, key=lambda r: r["uid"])
    q_emb = embed_records(bundle, query_records, data_dir)
    q_labels = np.array([r["class_id"] for r in query_records], dtype=np.int64)
    maps, top5 = _map_at_ks(q_emb, q_labels, index)
    return EvalReport(
        protocol=protocol, split=split, map1=maps[1], map5=maps[5],
        query_count=len(query_records), gallery_size=len(index.uids),
        distractor_count=len(distractors),
        per_query_top5={r["uid"]: t for r, t in zip(query_records, top5)})


def ablate_scales(cfg: dict, data_dir: str, scales, seeds, protocols=(1, 2),
                  split: str = "close", workdir: str = None):
    """Train both modes per (scale, seed) and evaluate each protocol.

    Returns rows [mode, scale, protocol, split, map1, map5, seed].
    """
    import os
    import tempfile

    from . import runconfig, trainer

    manifest = datagen.load_manifest(data_dir)
    workdir = workdir or tempfile.mkdtemp(prefix="ablate_")
    os.makedirs(workdir, exist_ok=True)
    rows = []
    for seed in seeds:
        for scale in scales:
            for mode in ("aar", "baseline_arcface_00"):
                run_cfg = dict(cfg)
                run_cfg["mode"] = mode
                run_cfg["seed"] = int(seed)
                if mode == "aar":
                    run_cfg["s03"] = float(scale)
                else:
                    run_cfg["baseline_scale"] = float(scale)
                run_cfg = runconfig.make_config(run_cfg)
                path = os.path.join(workdir, f"{mode}_s{scale}_r{seed}.ckpt")
                bundle = trainer.train(run_cfg, data_dir, path)
                for protocol in protocols:
                    rep = run_protocol(bundle, manifest, data_dir, protocol,
                                       split)
                    rows.append([mode, float(scale), protocol, split,
                                 rep.map1, rep.map5, int(seed)])
    return rows


SWEEP_HEADER = ("mode", "scale", "protocol", "split", "map1", "map5", "seed")
