"""Command-line entry point: generate | train | eval | bench | ablate.

All outputs are CSV or plain structured text; every run directory gets
the fully resolved config as config.json so the run can be reproduced
bit for bit (single-task execution, fixed seed).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import metrics
from .backbone import (NetworkSpec, build_network, count_flops, count_params,
                       load_network_spec, pedestrian_spec, vehicle_spec)
from .config import RunConfig, resolve_training_defaults
from .detector import read_detections, write_detections
from .kernels import FLOP_CONVENTION, KERNEL_TAGS, KernelKind
from .metrics import EvalConfig, format_report, write_report_csv
from .simulate import SceneConfig, SensorModel, generate_dataset
from .tensor import load_checkpoint
from .training import TrainSettings, TrainingDiverged, evaluate_model, load_dataset, predict_frames, train

DEFAULT_COUNTS = {"pedestrian": (1, 3), "vehicle": (1, 2)}
BENCH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _make_spec(cfg: RunConfig, num_classes: int) -> NetworkSpec:
    kernel = KernelKind(cfg.kernel, cfg.encoding)
    if cfg.spec == "pedestrian":
        spec = pedestrian_spec(kernel, cfg.multiplier, num_classes,
                               sampling=cfg.sampling, n_buckets=cfg.n_buckets)
    elif cfg.spec == "vehicle":
        spec = vehicle_spec(kernel, cfg.multiplier, num_classes,
                            sampling=cfg.sampling, n_buckets=cfg.n_buckets)
    else:
        spec = load_network_spec(cfg.spec).with_kernel(kernel)
    return spec


def _settings_from(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(
        epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, lr_final_fraction=cfg.lr_final_fraction,
        reg_weight=cfg.reg_weight, seed=cfg.seed,
        checkpoint_every=cfg.checkpoint_every, eval_every=cfg.eval_every,
        early_stop_ap=cfg.early_stop_ap, max_seconds=cfg.max_seconds,
        score_threshold=cfg.score_threshold, nms_iou=cfg.nms_iou)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = RunConfig(command="generate", seed=args.seed, out=args.out,
                    frames=args.frames, width=args.width, height=args.height,
                    classes=args.classes.split(","), range_min=args.range_min,
                    range_max=args.range_max, noise=args.noise, dropout=args.dropout,
                    stripes=args.stripes, ground=not args.no_ground)
    counts = {}
    for cname in cfg.classes:
        if cname not in DEFAULT_COUNTS:
            return _fail(f"unknown class {cname!r} (have {sorted(DEFAULT_COUNTS)})")
        counts[cname] = DEFAULT_COUNTS[cname]
    sensor = SensorModel(beams=cfg.height, azimuth_steps=cfg.width,
                         noise_sigma=cfg.noise, dropout_prob=cfg.dropout,
                         stripe_every=cfg.stripes)
    scene_cfg = SceneConfig(counts=counts, range_min=cfg.range_min,
                            range_max=cfg.range_max, ground=cfg.ground)
    generate_dataset(cfg.out, cfg.frames, scene_cfg, sensor, cfg.seed)
    cfg.save(os.path.join(cfg.out, "config.json"))
    print(f"wrote {cfg.frames} frames ({cfg.height}x{cfg.width}) to {cfg.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if not os.path.isdir(args.data):
        return _fail(f"dataset directory not found: {args.data}")
    cfg = RunConfig(
        command="train", seed=args.seed, out=args.out, data=args.data,
        spec=args.spec, kernel=args.kernel, encoding=args.encoding,
        sampling=args.sampling, multiplier=args.multiplier, n_buckets=args.buckets,
        learning_rate=args.lr, lr_final_fraction=args.lr_final_fraction,
        reg_weight=args.reg_weight, checkpoint_every=args.checkpoint_every,
        eval_every=args.eval_every, early_stop_ap=args.early_stop_ap,
        max_seconds=args.max_seconds, score_threshold=args.score_threshold,
        nms_iou=args.nms_iou)
    if args.spec not in ("pedestrian", "vehicle") and not os.path.isfile(args.spec):
        return _fail(f"network spec not found: {args.spec}")
    dataset = load_dataset(cfg.data)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch is not None:
        cfg.batch_size = args.batch
    resolve_training_defaults(cfg, len(dataset), args.epochs is not None,
                              args.batch is not None)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.save(os.path.join(cfg.out, "config.json"))

    spec = _make_spec(cfg, num_classes=len(dataset.class_names))
    network = build_network(spec, seed=cfg.seed)
    try:
        history = train(network, dataset, _settings_from(cfg), cfg.out,
                        resume=args.resume)
    except TrainingDiverged as e:
        return _fail(str(e))
    last = history[-1] if history else {}
    print(f"trained {len(history)} epochs; final loss "
          f"{last.get('total_loss', float('nan')):.6f}; outputs in {cfg.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    if not os.path.isdir(args.data):
        return _fail(f"dataset directory not found: {args.data}")
    dataset = load_dataset(args.data)
    cfg = RunConfig(command="eval", seed=args.seed, out=args.out, data=args.data,
                    spec=args.spec, kernel=args.kernel, encoding=args.encoding,
                    sampling=args.sampling, multiplier=args.multiplier,
                    n_buckets=args.buckets, score_threshold=args.score_threshold,
                    nms_iou=args.nms_iou)
    thresholds = dict(metrics.DEFAULT_IOU_THRESHOLDS)
    if args.iou_pedestrian is not None:
        thresholds["pedestrian"] = args.iou_pedestrian
    if args.iou_vehicle is not None:
        thresholds["vehicle"] = args.iou_vehicle
    cfg.iou_thresholds = thresholds
    os.makedirs(cfg.out, exist_ok=True)
    cfg.save(os.path.join(cfg.out, "config.json"))

    gts = dataset.gts_by_frame()
    if args.detections:
        if not os.path.isfile(args.detections):
            return _fail(f"detections file not found: {args.detections}")
        dets = read_detections(args.detections)
        n_dets = sum(len(v) for v in dets.values())
        if n_dets == 0:
            print("warning: detections file is empty; AP will be 0", file=sys.stderr)
        results = {}
        for geom in ("bev", "3d"):
            results[geom] = metrics.evaluate(
                dets, gts, EvalConfig(iou_thresholds=thresholds, geometry=geom))
    elif args.checkpoint:
        if not os.path.isfile(args.checkpoint):
            return _fail(f"checkpoint not found: {args.checkpoint}")
        spec = _make_spec(cfg, num_classes=len(dataset.class_names))
        network = build_network(spec, seed=cfg.seed)
        values, _ = load_checkpoint(args.checkpoint)
        network.load_param_values(values)
        settings = _settings_from(cfg)
        dets = predict_frames(network, dataset, settings)
        write_detections(os.path.join(cfg.out, "detections.txt"), dets)
        results = {}
        for geom in ("bev", "3d"):
            results[geom] = metrics.evaluate(
                dets, gts, EvalConfig(iou_thresholds=thresholds, geometry=geom))
    else:
        return _fail("eval needs --checkpoint or --detections")

    report = format_report(results)
    print(report)
    with open(os.path.join(cfg.out, "report.txt"), "w") as f:
        f.write(report)
    write_report_csv(os.path.join(cfg.out, "report.csv"), results)
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    rows = []
    for tag in KERNEL_TAGS:
        for mult in BENCH_MULTIPLIERS:
            cfg = RunConfig(command="bench", spec=args.spec, kernel=tag,
                            multiplier=mult, n_buckets=args.buckets)
            spec = _make_spec(cfg, num_classes=args.classes)
            network = build_network(spec, seed=0)
            params = count_params(network)
            flops = count_flops(network, args.height, args.width)
            rows.append({
                "kernel": tag, "multiplier": mult,
                "params": params["total"],
                "kernel_flops": flops["total"]["kernel_flops"],
                "other_flops": flops["total"]["other_flops"],
                "total_flops": flops["total"]["flops"],
            })
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        f.write(f"# flop convention: {FLOP_CONVENTION}\n")
        f.write(f"# network spec: {args.spec}; input {args.height}x{args.width}; "
                f"rq buckets K={args.buckets}; kernel_flops covers aggregation "
                f"layers only, other_flops adds 1x1 projections and the head\n")
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} bench rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def _train_and_eval(cfg: RunConfig, dataset, eval_dataset, out_dir, spec) -> dict:
    network = build_network(spec, seed=cfg.seed)
    settings = _settings_from(cfg)
    train(network, dataset, settings, out_dir)
    res = evaluate_model(network, eval_dataset, settings,
                         iou_thresholds=cfg.iou_thresholds or None)
    summary = {}
    for geom in res:
        aps = [r["all"].ap for r in res[geom].values() if r["all"].ap is not None]
        aphs = [r["all"].aph for r in res[geom].values() if r["all"].aph is not None]
        summary[f"{geom}_ap"] = float(np.mean(aps)) if aps else 0.0
        summary[f"{geom}_aph"] = float(np.mean(aphs)) if aphs else 0.0
    return summary


def cmd_ablate(args) -> int:
    if not os.path.isdir(args.data):
        return _fail(f"dataset directory not found: {args.data}")
    dataset = load_dataset(args.data)
    eval_dataset = load_dataset(args.eval_data) if args.eval_data else dataset
    cfg = RunConfig(command="ablate", seed=args.seed, out=args.out, data=args.data,
                    spec=args.spec, kernel=args.kernel, multiplier=args.multiplier,
                    epochs=args.epochs, batch_size=args.batch,
                    learning_rate=args.lr, checkpoint_every=0, eval_every=10**9)
    cfg.iou_thresholds = {c: args.iou for c in dataset.class_names}
    os.makedirs(cfg.out, exist_ok=True)
    cfg.save(os.path.join(cfg.out, "config.json"))
    n_classes = len(dataset.class_names)

    variants = []
    if args.mode == "encoding":
        for enc in ("polar", "cartesian"):
            c = RunConfig(**{**cfg.__dict__, "encoding": enc})
            variants.append((enc, _make_spec(c, n_classes), c))
    elif args.mode == "sampling":
        for samp in ("smart", "fixed"):
            c = RunConfig(**{**cfg.__dict__, "sampling": samp})
            variants.append((samp, _make_spec(c, n_classes), c))
    elif args.mode == "blocks":
        base_cfg = RunConfig(**{**cfg.__dict__, "kernel": "conv2d"})
        base = _make_spec(base_cfg, n_classes)
        variants.append(("all_conv2d", base, base_cfg))
        for b in base.blocks:
            variants.append((
                f"{b.name}_{args.kernel}",
                base.with_block_kernel(b.name, KernelKind(args.kernel, cfg.encoding)),
                base_cfg))
        variants.append((f"all_{args.kernel}", _make_spec(cfg, n_classes), cfg))
    else:
        return _fail(f"unknown ablation mode {args.mode!r}")

    rows = []
    baseline = None
    for name, spec, vcfg in variants:
        run_dir = os.path.join(cfg.out, f"run_{name}")
        summary = _train_and_eval(vcfg, dataset, eval_dataset, run_dir, spec)
        if baseline is None:
            baseline = summary
        row = {"variant": name, **{k: f"{v:.4f}" for k, v in summary.items()},
               "delta_bev_ap": f"{summary['bev_ap'] - baseline['bev_ap']:+.4f}",
               "delta_bev_aph": f"{summary['bev_aph'] - baseline['bev_aph']:+.4f}"}
        rows.append(row)
        print(f"[{args.mode}] {name}: bev_ap={summary['bev_ap']:.4f} "
              f"bev_aph={summary['bev_aph']:.4f}")
    with open(os.path.join(cfg.out, "ablation.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    print(f"ablation table in {os.path.join(cfg.out, 'ablation.csv')}")
    return 0


# ---------------------------------------------------------------------------


def _add_net_flags(p, kernel_default="edgeconv"):
    p.add_argument("--spec", default="pedestrian",
                   help="pedestrian | vehicle | path to a spec JSON")
    p.add_argument("--kernel", default=kernel_default, choices=KERNEL_TAGS)
    p.add_argument("--encoding", default="polar", choices=["polar", "cartesian"])
    p.add_argument("--sampling", default="smart", choices=["smart", "fixed"])
    p.add_argument("--multiplier", type=float, default=1.0)
    p.add_argument("--buckets", type=int, default=4, help="rq_conv2d weight sets")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ri3d",
                                 description="Range-image 3D detection toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic labeled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=265)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--classes", default="pedestrian")
    g.add_argument("--range-min", type=float, default=5.0)
    g.add_argument("--range-max", type=float, default=40.0)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--dropout", type=float, default=0.01)
    g.add_argument("--stripes", type=int, default=0)
    g.add_argument("--no-ground", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_net_flags(t)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-final-fraction", type=float, default=0.01)
    t.add_argument("--reg-weight", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=50)
    t.add_argument("--eval-every", type=int, default=10)
    t.add_argument("--early-stop-ap", type=float, default=None)
    t.add_argument("--max-seconds", type=float, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--score-threshold", type=float, default=0.1)
    t.add_argument("--nms-iou", type=float, default=0.5)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or detections file")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--detections", default=None)
    _add_net_flags(e)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--iou-pedestrian", type=float, default=None)
    e.add_argument("--iou-vehicle", type=float, default=None)
    e.add_argument("--score-threshold", type=float, default=0.1)
    e.add_argument("--nms-iou", type=float, default=0.5)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="parameter/flop table across kernels and widths")
    b.add_argument("--out", required=True)
    b.add_argument("--spec", default="pedestrian")
    b.add_argument("--height", type=int, default=64)
    b.add_argument("--width", type=int, default=2650)
    b.add_argument("--buckets", type=int, default=4)
    b.add_argument("--classes", type=int, default=1)
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablate", help="paired ablation runs with metric deltas")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--eval-data", default=None)
    a.add_argument("--mode", required=True, choices=["encoding", "sampling", "blocks"])
    _add_net_flags(a)
    a.add_argument("--epochs", type=int, default=30)
    a.add_argument("--batch", type=int, default=8)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--iou", type=float, default=0.5)
    a.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
