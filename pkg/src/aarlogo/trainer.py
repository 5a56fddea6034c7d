"""Optimization loop: pairs in, loss breakdown out, Adam updates,
checkpointing, and the single-scale baseline mode.

Label space note: the angular-margin head covers only the classes seen
in training (all main classes in close-set runs, the 60% split in
open-set runs); the mapping class_id -> head row is stored in the
checkpoint so evaluation can reconstruct it.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from . import datagen, losses, model, pairs, runconfig
from . import numeric as nm
from .backbone import BackboneConfig
from .numeric import Tensor

LOG_COLUMNS = ("step", "epoch", "d_pos", "d_neg", "l_con",
               "l_arc_p1", "l_arc_p2", "l_metr", "l_aar")


class NanAbort(RuntimeError):
    def __init__(self, step, component):
        super().__init__(f"NaN loss at step {step} in {component}")
        self.step = step
        self.component = component


def backbone_config(cfg: dict) -> BackboneConfig:
    size = cfg["input_size"]
    n_stages = int(math.log2(size / 4))
    base = (32, 64, 128, 256, 512, 1024)
    channels = base[:n_stages - 1] + (cfg["c_out"],)
    return BackboneConfig(input_size=size, stage_channels=channels)


@dataclass
class ModelBundle:
    """Everything needed to run a trained (or fresh) model."""
    cfg: dict
    mode: str
    params: dict
    head: losses.ArcFaceHead
    model_config: model.ModelConfig
    label_map: dict  # class_id -> head row

    def embed_batch(self, pair_batch) -> np.ndarray:
        """Unit-norm embeddings for a list of SamplePairs (numpy out)."""
        if self.mode == "aar":
            img00 = Tensor(np.stack([p.crop00 for p in pair_batch]))
            img03 = Tensor(np.stack([p.crop03 for p in pair_batch]))
            out = model.embed(img00, img03, self.params, self.model_config)
        else:
            # baseline consumes its own single-scale crop (crop03 of the
            # stream, which make_pairs built at baseline_scale)
            img = Tensor(np.stack([p.crop03 for p in pair_batch]))
            out = model.baseline_embed(img, self.params, self.model_config)
        return np.asarray(out.data)

    @property
    def eval_s03(self) -> float:
        """Enlargement used to build this model's evaluation crops."""
        if self.mode == "aar":
            return self.cfg["s03"]
        return self.cfg["baseline_scale"]


def build_bundle(cfg: dict, train_class_ids, rng: np.random.Generator) -> ModelBundle:
    mconf = model.ModelConfig(backbone=backbone_config(cfg),
                              d_embed=cfg["d_embed"])
    if cfg["mode"] == "aar":
        params = model.init_model(mconf, rng)
    else:
        params = model.init_baseline(mconf, rng)
    label_map = {cid: i for i, cid in enumerate(sorted(train_class_ids))}
    head = losses.init_arcface(len(label_map), cfg["d_embed"], rng,
                               s=cfg["arcface_s"], m=cfg["arcface_m"])
    params["arcface.w"] = head.weights
    return ModelBundle(cfg=cfg, mode=cfg["mode"], params=params, head=head,
                       model_config=mconf, label_map=label_map)


def bundle_from_checkpoint(ck: ckpt_io.Checkpoint) -> ModelBundle:
    cfg = runconfig.make_config(ck.config)
    mconf = model.ModelConfig(backbone=backbone_config(cfg),
                              d_embed=cfg["d_embed"])
    head = losses.ArcFaceHead(weights=ck.params["arcface.w"],
                              s=cfg["arcface_s"], m=cfg["arcface_m"])
    label_map = {int(k): v for k, v in ck.extra["label_map"].items()}
    return ModelBundle(cfg=cfg, mode=cfg["mode"], params=ck.params, head=head,
                       model_config=mconf, label_map=label_map)


def forward_batch(bundle: ModelBundle, pair_batch):
    """Mode-dispatched forward + loss. Returns (LossBreakdown, loss Tensor)."""
    labels = np.array([bundle.label_map[p.class_id] for p in pair_batch])
    if bundle.mode == "aar":
        img00 = Tensor(np.stack([p.crop00 for p in pair_batch]))
        img03 = Tensor(np.stack([p.crop03 for p in pair_batch]))
        outputs = model.aar_forward(img00, img03, bundle.params,
                                    bundle.model_config)
        breakdown = losses.total_loss(outputs, labels, bundle.head,
                                      bundle.cfg["lam_neg"])
        return breakdown, breakdown.l_aar, outputs
    img = Tensor(np.stack([p.crop03 for p in pair_batch]))
    p_emb = model.baseline_forward(img, bundle.params, bundle.model_config)
    l_arc = losses.arcface_loss(p_emb, labels, bundle.head)
    return None, l_arc, p_emb


def _collect_grads(params: dict) -> dict:
    grads = {}
    for name, p in params.items():
        if p.grad is not None:
            grads[name] = p.grad
        p.grad = None
    return grads


def _nan_component(breakdown, loss):
    if breakdown is not None:
        for key, value in breakdown.scalars().items():
            if not np.isfinite(value):
                return key
    if not np.isfinite(loss.item()):
        return "loss"
    return None


def _log_row(writer, step, epoch, breakdown, loss):
    if breakdown is not None:
        s = breakdown.scalars()
        writer.writerow([step, epoch] +
                        [f"{s[k]:.10g}" for k in LOG_COLUMNS[2:]])
    else:
        v = f"{loss.item():.10g}"
        writer.writerow([step, epoch, "", "", "", v, "", v, v])


def _train_stream_scale(cfg: dict) -> float:
    return cfg["s03"] if cfg["mode"] == "aar" else cfg["baseline_scale"]


def train(cfg: dict, data_dir: str, ckpt_path: str, log_path: str = None,
          max_steps: int = None) -> ModelBundle:
    """Full training run; writes the checkpoint and per-step loss CSV."""
    manifest = datagen.load_manifest(data_dir)
    main_ids = sorted(manifest.class_ids(distractor=False))
    if cfg["split"] == "open":
        from . import retrieval
        open_split = retrieval.split_open_set(main_ids, manifest.seed)
        train_ids = open_split["train"]
    else:
        train_ids = main_ids

    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0xAA2]))
    bundle = build_bundle(cfg, train_ids, rng)
    state = nm.AdamState()
    train_id_set = set(train_ids)

    log_path = log_path or (os.path.splitext(ckpt_path)[0] + "_loss.csv")
    val_path = os.path.splitext(log_path)[0] + "_val.csv"
    step = 0
    stop = False
    with open(log_path, "w", newline="") as logf, \
            open(val_path, "w", newline="") as valf:
        writer = csv.writer(logf)
        writer.writerow(LOG_COLUMNS)
        val_writer = csv.writer(valf)
        val_writer.writerow(["epoch", "val_map1"])
        for epoch in range(cfg["epochs"]):
            stream = pairs.make_pairs(
                manifest, data_dir, "train", _train_stream_scale(cfg),
                cfg["seed"], epoch=epoch, train=True,
                target=cfg["input_size"])
            batch = []
            for pair in stream:
                if pair.class_id not in train_id_set:
                    continue
                batch.append(pair)
                if len(batch) < cfg["batch_size"]:
                    continue
                breakdown, loss, _ = forward_batch(bundle, batch)
                bad = _nan_component(breakdown, loss)
                if bad is not None:
                    raise NanAbort(step, bad)
                nm.backward(loss)
                grads = _collect_grads(bundle.params)
                nm.adam_step(bundle.params, grads, state, cfg["lr"])
                _log_row(writer, step, epoch, breakdown, loss)
                step += 1
                batch = []
                if max_steps is not None and step >= max_steps:
                    stop = True
                    break
            if cfg["val_every"] and (epoch + 1) % cfg["val_every"] == 0 \
                    and manifest.splits.get("val") and not stop:
                from . import retrieval
                report = retrieval.evaluate(
                    bundle, manifest, data_dir, protocol=1,
                    gallery_split="train", query_split="val",
                    restrict_classes=train_id_set)
                val_writer.writerow([epoch, f"{report.map1:.6f}"])
            if stop:
                break

    _save(bundle, state, ckpt_path, epoch=cfg["epochs"], rng=rng)
    return bundle


def _save(bundle: ModelBundle, state: nm.AdamState, path: str, epoch: int,
          rng: np.random.Generator):
    cfg_hash = runconfig.config_hash(bundle.cfg)
    rng_state = rng.bit_generator.state
    ckpt_io.save(path, bundle.cfg, cfg_hash, bundle.params, state, epoch,
                 rng_state,
                 extra={"label_map": {str(k): v
                                      for k, v in bundle.label_map.items()}})


def load_bundle(path: str, expect_cfg: dict = None) -> ModelBundle:
    expect = runconfig.config_hash(expect_cfg) if expect_cfg else None
    return bundle_from_checkpoint(ckpt_io.load(path, expect_hash=expect))
