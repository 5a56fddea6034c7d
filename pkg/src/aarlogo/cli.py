"""Command-line surface: gen-data, train, eval, ablate, explain.

One JSON config document drives everything; flags override config
values. Every command prints its config hash so runs are attributable.
Exit codes: 0 ok, 2 numerical abort, 3 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import checkpoint as ckpt_io
from . import datagen, explain, pairs, retrieval, runconfig, trainer


class UsageError(RuntimeError):
    pass


def _parse_override(kv: str):
    if "=" not in kv:
        raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
    key, value = kv.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass  # keep as string
    return key, value


def _config_from_args(args) -> dict:
    overrides = {}
    if args.config:
        with open(args.config) as f:
            overrides.update(json.load(f))
    for kv in args.set or []:
        key, value = _parse_override(kv)
        overrides[key] = value
    try:
        return runconfig.make_config(overrides)
    except runconfig.ConfigError as e:
        raise UsageError(str(e))


def _print_hash(cfg: dict):
    print(f"config_hash: {runconfig.config_hash(cfg):016x}")


def _data_config(cfg: dict) -> datagen.DataConfig:
    return datagen.DataConfig(
        num_classes=cfg["num_classes"],
        scenes_per_class=cfg["scenes_per_class"],
        image_size=cfg["image_size"], clutter=cfg["clutter"],
        blur_prob=cfg["blur_prob"], occlusion_prob=cfg["occlusion_prob"],
        distractor_classes=cfg["distractor_classes"])


def cmd_gen_data(args):
    cfg = _config_from_args(args)
    _print_hash(cfg)
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise UsageError(f"output dir {out!r} is not empty (use --force)")
    os.makedirs(out, exist_ok=True)
    dconf = _data_config(cfg)
    manifest = datagen.generate_dataset(dconf, cfg["data_seed"], out)
    for split in ("train", "val", "test"):
        n = sum(len(r.objects) for r in manifest.splits[split])
        print(f"{split}: {len(manifest.splits[split])} scenes, {n} objects")
    if args.distractors:
        target = sum(len(r.objects) for r in manifest.splits["train"])
        dman = datagen.make_distractor_set(dconf, cfg["data_seed"], out, target)
        n = sum(len(r.objects) for r in dman.splits["distractor"])
        print(f"distractor: {len(dman.splits['distractor'])} scenes, {n} objects")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    _print_hash(cfg)
    if not os.path.isdir(args.data):
        raise UsageError(f"data dir not found: {args.data}")
    try:
        datagen.load_manifest(args.data)
    except (FileNotFoundError, KeyError) as e:
        raise UsageError(f"invalid dataset at {args.data}: {e}")
    trainer.train(cfg, args.data, args.out, log_path=args.log)
    print(f"checkpoint: {args.out}")
    return 0


def _load_bundle(ckpt_path: str):
    try:
        return trainer.load_bundle(ckpt_path)
    except ckpt_io.CheckpointError as e:
        raise UsageError(str(e))


def cmd_eval(args):
    bundle = _load_bundle(args.ckpt)
    _print_hash(bundle.cfg)
    manifest = datagen.load_manifest(args.data)
    try:
        report = retrieval.run_protocol(bundle, manifest, args.data,
                                        args.protocol, args.split)
    except retrieval.EvalConfigError as e:
        raise UsageError(str(e))
    print(report.to_json())
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["protocol", "split", "map1", "map5", "query_count",
                        "gallery_size", "distractor_count"])
            w.writerow(report.csv_row())
    if args.dump_topk:
        path = args.dump_topk_file or "topk.txt"
        with open(path, "w") as f:
            for uid in sorted(report.per_query_top5):
                tops = report.per_query_top5[uid][:args.dump_topk]
                f.write(uid + "\t" + " ".join(tops) + "\n")
        print(f"top-{args.dump_topk} dump: {path}")
    return 0


def cmd_ablate(args):
    cfg = _config_from_args(args)
    _print_hash(cfg)
    scales = [float(s) for s in args.scales.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = retrieval.ablate_scales(cfg, args.data, scales, seeds,
                                   workdir=args.workdir)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(retrieval.SWEEP_HEADER)
        for row in rows:
            w.writerow(row)
    print(f"sweep: {args.out} ({len(rows)} rows)")
    return 0


def cmd_explain(args):
    bundle = _load_bundle(args.ckpt)
    _print_hash(bundle.cfg)
    manifest = datagen.load_manifest(args.data)
    records = pairs.object_records(manifest, "test") \
        + pairs.object_records(manifest, "train")
    match = [r for r in records if r["uid"] == args.uid]
    if not match:
        raise UsageError(f"unknown uid: {args.uid}")
    gallery = retrieval.build_gallery(
        bundle, pairs.object_records(manifest, "train"), args.data)
    cache = pairs._ImageCache(args.data)
    pair = pairs.build_pair(match[0], cache, bundle.eval_s03,
                            target=bundle.cfg["input_size"])
    heat = explain.gradcam(bundle, pair, gallery)
    written = explain.write_overlays(heat, pair, args.out)
    for path in written:
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="aarlogo")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (repeatable)")

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--distractors", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run a retrieval protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", type=int, choices=(1, 2), default=1)
    p.add_argument("--split", choices=("close", "open"), default="close")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--dump-topk", type=int, dest="dump_topk")
    p.add_argument("--dump-topk-file", dest="dump_topk_file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="enlargement-scale sweep")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--scales", default="0.0,0.1,0.3,0.5,1.0")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--workdir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="write heatmap overlays for one object")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--uid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except runconfig.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except trainer.NanAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
