"""Deterministic synthetic logo-scene generator.

Each class is a short glyph string in a fixed color, and each class is
statistically tied to a margin motif (a textured color pattern painted
around every instance of that class). The motif correlation is the whole
point: it gives the marginal background a learnable, class-predictive
signal, so context-aware models have something real to exploit and
distractor scenes (drawn from a disjoint class and motif pool) look
contextually foreign.

Scenes composite: background texture -> motif region around each logo's
margin -> glyph (random scale / rotation / perspective) -> clutter
shapes -> optional blur and occluding bars. Every instance is annotated
with the pixel bbox of its rendered glyph.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from . import imgproc

# fixed per-scene object-count cycle: keeps per-class totals exactly equal
OBJECT_COUNT_CYCLE = (3, 4, 2, 5, 1, 6)

MOTIF_PATTERNS = ("hstripes", "vstripes", "dots", "checker", "diag")


@dataclass
class LogoClassSpec:
    class_id: int
    glyphs: str
    color: tuple  # (r, g, b) in [0, 1]
    form: str  # "symbol" | "text"
    motif: int
    distractor: bool = False


@dataclass
class DataConfig:
    num_classes: int = 8
    scenes_per_class: int = 25
    image_size: int = 256
    clutter: float = 0.5
    blur_prob: float = 0.3
    occlusion_prob: float = 0.3
    distractor_classes: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class SceneRecord:
    image: str  # path relative to the dataset root
    objects: list  # [{"box": [x0, y0, x1, y1], "class": id}, ...]


@dataclass
class DatasetManifest:
    seed: int
    classes: list  # LogoClassSpec
    splits: dict = field(default_factory=dict)  # split -> [SceneRecord]

    def class_ids(self, distractor=None):
        return [c.class_id for c in self.classes
                if distractor is None or c.distractor == distractor]


def _scene_rng(master_seed: int, scene_index: int) -> np.random.Generator:
    # per-scene seed derived from (master, index): parallel == serial
    return np.random.default_rng(np.random.SeedSequence([master_seed, scene_index]))


def _palette(n: int, rng: np.random.Generator, sat=0.85, val=0.8):
    hues = (np.arange(n) / n + rng.uniform(0, 1)) % 1.0
    return [colorsys.hsv_to_rgb(h, sat, val) for h in hues]


def _motif_table(num_motifs: int, rng: np.random.Generator, hue_shift=0.0):
    colors = _palette(num_motifs, rng, sat=0.55, val=0.65)
    table = []
    for i, c in enumerate(colors):
        h, s, v = colorsys.rgb_to_hsv(*c)
        c = colorsys.hsv_to_rgb((h + hue_shift) % 1.0, s, v)
        table.append((MOTIF_PATTERNS[i % len(MOTIF_PATTERNS)], c))
    return table


def make_class_specs(num_classes: int, rng: np.random.Generator,
                     *, id_offset=0, motif_offset=0, distractor=False,
                     taken_glyphs=None) -> list:
    """Unique (glyph string, color) classes tied to a motif pool >= n/2."""
    taken = set(taken_glyphs or ())
    colors = _palette(num_classes, rng)
    num_motifs = max(2, math.ceil(num_classes / 2))
    specs = []
    for i in range(num_classes):
        while True:
            n = int(rng.integers(3, 9))
            glyphs = "".join(rng.choice(list(imgproc.FONT_ALPHABET), size=n))
            if glyphs not in taken:
                taken.add(glyphs)
                break
        specs.append(LogoClassSpec(
            class_id=id_offset + i,
            glyphs=glyphs,
            color=tuple(round(float(c), 4) for c in colors[i]),
            form="symbol" if i % 2 == 0 else "text",
            motif=motif_offset + int(rng.integers(0, num_motifs)),
            distractor=distractor,
        ))
    return specs


def _mutate_glyphs(glyphs: str, rng: np.random.Generator, taken: set) -> str:
    """Single-character mutation of an existing glyph string, kept unique."""
    alphabet = list(imgproc.FONT_ALPHABET)
    for _ in range(64):
        pos = int(rng.integers(0, len(glyphs)))
        ch = str(rng.choice(alphabet))
        cand = glyphs[:pos] + ch + glyphs[pos + 1:]
        if cand not in taken and cand != glyphs:
            taken.add(cand)
            return cand
    # pathological collision streak: fall back to a fresh random string
    while True:
        n = int(rng.integers(3, 9))
        cand = "".join(rng.choice(alphabet, size=n))
        if cand not in taken:
            taken.add(cand)
            return cand


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    low = rng.uniform(0.25, 0.75, size=(8, 8, 3)).astype(np.float32)
    bg = imgproc.resize_bilinear(low, size, size)
    return bg * 0.6 + bg.mean() * 0.4  # mute the contrast


def _paint_motif(img, region, motif, rng):
    """Fill a rectangular region with the motif's pattern/color blend."""
    pattern, color = motif
    x0, y0, x1, y1 = region
    h, w = y1 - y0, x1 - x0
    if h <= 0 or w <= 0:
        return
    yy, xx = np.mgrid[0:h, 0:w]
    period = max(4, int(min(h, w) / 6))
    if pattern == "hstripes":
        m = (yy // period) % 2
    elif pattern == "vstripes":
        m = (xx // period) % 2
    elif pattern == "checker":
        m = ((yy // period) + (xx // period)) % 2
    elif pattern == "diag":
        m = ((yy + xx) // period) % 2
    else:  # dots
        m = (((yy % period) - period / 2) ** 2
             + ((xx % period) - period / 2) ** 2) < (period / 3) ** 2
    m = m.astype(np.float32)
    c1 = np.asarray(color, dtype=np.float32)
    c2 = c1 * 0.55
    patch = m[..., None] * c1 + (1 - m[..., None]) * c2
    alpha = 0.85
    img[y0:y1, x0:x1] = (1 - alpha) * img[y0:y1, x0:x1] + alpha * patch


def _render_instance(spec: LogoClassSpec, size: int, rng: np.random.Generator):
    """Rasterize one logo into a full-frame mask; None if placement fails."""
    base = imgproc.render_text(spec.glyphs)
    if spec.form == "symbol":
        # symbol classes carry a filled emblem block left of the text
        emblem = np.ones((imgproc.GLYPH_H, 4), dtype=np.float32)
        gap = np.zeros((imgproc.GLYPH_H, 2), dtype=np.float32)
        base = np.concatenate([emblem, gap, base], axis=1)
    target_h = float(rng.uniform(24, 96))
    scale = target_h / base.shape[0]
    gw = base.shape[1] * scale
    if gw > 0.7 * size:
        scale *= 0.7 * size / gw
        target_h = base.shape[0] * scale

    angle = float(rng.uniform(-15, 15))
    persp = float(rng.uniform(0.0, 0.06))
    for _ in range(20):
        gh = base.shape[0] * scale
        gw = base.shape[1] * scale
        pad = 0.25 * max(gh, gw)  # headroom for rotation corners
        ox = float(rng.uniform(pad, size - gw - pad)) if size - gw - 2 * pad > 0 else None
        oy = float(rng.uniform(pad, size - gh - pad)) if size - gh - 2 * pad > 0 else None
        if ox is None or oy is None:
            scale *= 0.85
            continue
        # forward corners of the scaled glyph, jittered for perspective
        src = [(0, 0), (base.shape[1], 0), (base.shape[1], base.shape[0]),
               (0, base.shape[0])]
        cx, cy = base.shape[1] / 2, base.shape[0] / 2
        t = np.deg2rad(angle)
        dst = []
        for (x, y) in src:
            xr = (x - cx) * np.cos(t) - (y - cy) * np.sin(t)
            yr = (x - cx) * np.sin(t) + (y - cy) * np.cos(t)
            jx = rng.uniform(-persp, persp) * base.shape[1]
            jy = rng.uniform(-persp, persp) * base.shape[0]
            dst.append((ox + gw / 2 + (xr + jx) * scale,
                        oy + gh / 2 + (yr + jy) * scale))
        mat = imgproc.homography_from_points(src, dst)
        inv = np.linalg.inv(mat)
        mask = imgproc.warp_homography(base, inv, size, size, fill=0.0)
        ys, xs = np.nonzero(mask > 0.5)
        if ys.size < 10:
            return None
        if ys.min() <= 0 or xs.min() <= 0 or ys.max() >= size - 1 \
                or xs.max() >= size - 1:
            scale *= 0.85
            continue
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        return mask, box
    return None


def render_scene(specs_for_objects, image_size, clutter, blur_prob,
                 occlusion_prob, motifs, rng, collect_masks=False):
    """Composite one scene; returns (float image, object dicts)."""
    img = _background(image_size, rng)
    objects = []
    for spec in specs_for_objects:
        placed = _render_instance(spec, image_size, rng)
        if placed is None:
            continue  # placement failed after retries; skip this instance
        mask, box = placed
        x0, y0, x1, y1 = box
        bw, bh = x1 - x0, y1 - y0
        region = (max(0, int(x0 - 0.6 * bw)), max(0, int(y0 - 0.6 * bh)),
                  min(image_size, int(x1 + 0.6 * bw)),
                  min(image_size, int(y1 + 0.6 * bh)))
        _paint_motif(img, region, motifs[spec.motif], rng)
        color = np.asarray(spec.color, dtype=np.float32)
        img = img * (1 - mask[..., None]) + color * mask[..., None]
        obj = {"box": list(box), "class": spec.class_id}
        if collect_masks:
            obj["_mask"] = mask > 0.5
            obj["_alpha"] = mask  # float coverage, for compositing checks
        objects.append(obj)

    n_clutter = int(round(clutter * 6))
    for _ in range(n_clutter):
        cw = int(rng.integers(4, 18))
        ch = int(rng.integers(4, 18))
        cx = int(rng.integers(0, image_size - cw))
        cy = int(rng.integers(0, image_size - ch))
        col = rng.uniform(0, 1, size=3).astype(np.float32)
        if rng.uniform() < 0.5:
            img[cy:cy + ch, cx:cx + cw] = col
        else:
            yy, xx = np.mgrid[0:ch, 0:cw]
            circ = ((yy - ch / 2) ** 2 + (xx - cw / 2) ** 2) < (min(ch, cw) / 2) ** 2
            img[cy:cy + ch, cx:cx + cw][circ] = col

    if rng.uniform() < blur_prob:
        img = imgproc.gaussian_blur(img, float(rng.uniform(0.4, 1.0)))
    if rng.uniform() < occlusion_prob:
        for _ in range(int(rng.integers(1, 3))):
            horizontal = rng.uniform() < 0.5
            thick = int(rng.integers(3, 8))
            pos = int(rng.integers(0, image_size - thick))
            col = rng.uniform(0, 0.3, size=3).astype(np.float32)
            if horizontal:
                img[pos:pos + thick, :] = col
            else:
                img[:, pos:pos + thick] = col
    return np.clip(img, 0.0, 1.0), objects


def _save_png(img: np.ndarray, path: str):
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _split_counts(n: int):
    n_train = int(round(0.64 * n))
    n_val = int(round(0.16 * n))
    return n_train, n_val, n - n_train - n_val


def generate_dataset(config: DataConfig, seed: int, out_dir: str,
                     collect_masks=False) -> DatasetManifest:
    """Render all main-class scenes to `out_dir`; byte-deterministic."""
    rng0 = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    specs = make_class_specs(config.num_classes, rng0)
    num_motifs = max(2, math.ceil(config.num_classes / 2))
    motifs = {i: m for i, m in enumerate(_motif_table(num_motifs, rng0))}

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    manifest = DatasetManifest(seed=seed, classes=specs,
                               splits={"train": [], "val": [], "test": []})
    n_train, n_val, _ = _split_counts(config.scenes_per_class)
    scene_index = 0
    for spec in specs:
        for si in range(config.scenes_per_class):
            rng = _scene_rng(seed, scene_index)
            count = OBJECT_COUNT_CYCLE[si % len(OBJECT_COUNT_CYCLE)]
            img, objects = render_scene(
                [spec] * count, config.image_size, config.clutter,
                config.blur_prob, config.occlusion_prob, motifs, rng,
                collect_masks=collect_masks)
            rel = f"images/scene_{scene_index:05d}.png"
            _save_png(img, os.path.join(out_dir, rel))
            split = ("train" if si < n_train
                     else "val" if si < n_train + n_val else "test")
            manifest.splits[split].append(SceneRecord(image=rel, objects=objects))
            scene_index += 1

    _write_classes(out_dir, specs)
    for split in ("train", "val", "test"):
        _write_split(out_dir, split, seed, manifest.splits[split])
    return manifest


def make_distractor_set(config: DataConfig, seed: int, out_dir: str,
                        target_objects: int,
                        collect_masks=False) -> DatasetManifest:
    """Disjoint-class scenes whose object count lands within 10% of target."""
    if config.distractor_classes < 1:
        raise ValueError("need at least one distractor class")
    main = _load_classes(out_dir) if os.path.exists(
        os.path.join(out_dir, "classes.json")) else []
    taken = {c.glyphs for c in main}
    rng0 = np.random.default_rng(np.random.SeedSequence([seed, 0xD157]))
    num_main_motifs = max(2, math.ceil(config.num_classes / 2))
    specs = make_class_specs(
        config.distractor_classes, rng0,
        id_offset=config.num_classes, motif_offset=num_main_motifs,
        distractor=True, taken_glyphs=taken)
    # mimic the main marks: mutate one glyph and barely nudge the color, so
    # distractors are confusable by appearance and separable only by context
    main_non_distractor = [c for c in main if not c.distractor]
    for i, spec in enumerate(specs):
        if not main_non_distractor:
            break
        base = main_non_distractor[i % len(main_non_distractor)]
        spec.glyphs = _mutate_glyphs(base.glyphs, rng0, taken)
        h, s, v = colorsys.rgb_to_hsv(*base.color)
        nudged = colorsys.hsv_to_rgb((h + 0.02) % 1.0, s, min(1.0, v * 1.05))
        spec.color = tuple(round(float(c), 4) for c in nudged)
        spec.form = base.form
    # distractor motifs sit in a shifted hue band: foreign context, on purpose
    num_motifs = max(2, math.ceil(config.distractor_classes / 2))
    motifs = {num_main_motifs + i: m
              for i, m in enumerate(_motif_table(num_motifs, rng0, hue_shift=0.5))}

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    records = []
    total = 0
    scene_index = 0
    while total < target_objects:
        remaining = target_objects - total
        count = OBJECT_COUNT_CYCLE[scene_index % len(OBJECT_COUNT_CYCLE)]
        count = min(count, remaining)
        rng = _scene_rng(seed ^ 0x5A5A5A, scene_index)
        spec = specs[scene_index % len(specs)]
        img, objects = render_scene(
            [spec] * count, config.image_size, config.clutter,
            config.blur_prob, config.occlusion_prob, motifs, rng,
            collect_masks=collect_masks)
        rel = f"images/dist_{scene_index:05d}.png"
        _save_png(img, os.path.join(out_dir, rel))
        records.append(SceneRecord(image=rel, objects=objects))
        total += len(objects)
        scene_index += 1

    manifest = DatasetManifest(seed=seed, classes=specs,
                               splits={"distractor": records})
    _write_classes(out_dir, main + specs)
    _write_split(out_dir, "distractor", seed, records)
    return manifest


# -- on-disk format -------------------------------------------------------


def _write_classes(out_dir: str, specs):
    payload = {"classes": [
        {"id": s.class_id, "glyphs": s.glyphs, "color": list(s.color),
         "form": s.form, "motif": s.motif, "distractor": s.distractor}
        for s in specs]}
    with open(os.path.join(out_dir, "classes.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _write_split(out_dir: str, split: str, seed: int, records):
    path = os.path.join(out_dir, f"{split}.jsonl")
    with open(path, "w") as f:
        f.write(json.dumps({"seed": seed, "split": split}, sort_keys=True) + "\n")
        for rec in records:
            objs = [{"box": o["box"], "class": o["class"]} for o in rec.objects]
            f.write(json.dumps({"image": rec.image, "objects": objs},
                               sort_keys=True) + "\n")


def _load_classes(data_dir: str):
    with open(os.path.join(data_dir, "classes.json")) as f:
        payload = json.load(f)
    return [LogoClassSpec(class_id=c["id"], glyphs=c["glyphs"],
                          color=tuple(c["color"]), form=c["form"],
                          motif=c["motif"], distractor=c["distractor"])
            for c in payload["classes"]]


def load_manifest(data_dir: str) -> DatasetManifest:
    """Read back the classes.json + per-split jsonl contract."""
    classes = _load_classes(data_dir)
    splits = {}
    seed = None
    for split in ("train", "val", "test", "distractor"):
        path = os.path.join(data_dir, f"{split}.jsonl")
        if not os.path.exists(path):
            continue
        records = []
        with open(path) as f:
            header = json.loads(f.readline())
            if seed is None:
                seed = header["seed"]
            for line in f:
                d = json.loads(line)
                records.append(SceneRecord(image=d["image"], objects=d["objects"]))
        splits[split] = records
    if seed is None:
        raise FileNotFoundError(f"no split manifests found in {data_dir}")
    return DatasetManifest(seed=seed, classes=classes, splits=splits)
