"""Dataset loading, the training loop, and model evaluation.

Frames are independent, so a "plan" (coordinate pyramid, sampling
records, neighbor contexts) and the training targets are precomputed
once per frame; epochs then only run the parameter-dependent feature
path. Gradients are averaged over the batch by accumulating per-frame
backward passes, which keeps tape memory bounded by one frame.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import detector, metrics
from . import tensor as T
from .backbone import Network, calibrate_rq_boundaries
from .detector import TargetMap, build_targets, decode, detection_loss, nms_bev
from .geometry import spherical_to_cartesian
from .metrics import EvalConfig
from .rangeimage import RangeImage, read_labels, read_rimg
from .tensor import LrSchedule, OptimizerState, adam_step, load_checkpoint, save_checkpoint

__all__ = [
    "Dataset", "FrameData", "TrainSettings", "TrainingDiverged",
    "load_dataset", "prepare_frames", "train", "predict_frames",
    "evaluate_model",
]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; diagnostics were dumped next to the run."""


@dataclass
class Dataset:
    frame_ids: list
    frames: list          # RangeImage per frame
    labels: list          # [(class_name, Box7DoF)] per frame
    class_names: list
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def gts_by_frame(self) -> dict:
        return dict(zip(self.frame_ids, self.labels))


def load_dataset(path) -> Dataset:
    """Read a generated dataset directory (RIMG + label files + manifest)."""
    manifest_path = os.path.join(path, "dataset.json")
    if os.path.isfile(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
        frame_ids = manifest["frames"]
        class_names = manifest["class_names"]
    else:
        frame_ids = sorted(
            f[:-5] for f in os.listdir(path) if f.endswith(".rimg"))
        manifest = {}
        class_names = None
    if not frame_ids:
        raise FileNotFoundError(f"no .rimg frames under {path}")
    frames, labels = [], []
    for fid in frame_ids:
        frames.append(read_rimg(os.path.join(path, fid + ".rimg")))
        labels.append(read_labels(os.path.join(path, fid + ".labels")))
    if class_names is None:
        class_names = sorted({c for lab in labels for c, _ in lab})
    return Dataset(frame_ids, frames, labels, class_names, manifest)


@dataclass
class FrameData:
    frame_id: str
    img: RangeImage
    labels: list
    plan: object
    points: np.ndarray   # [N, 3] world positions at the head resolution
    valid: np.ndarray    # [N]
    targets: TargetMap


def _head_level(network: Network, plan) -> object:
    out_block = network.info["__out__"]
    return plan.levels[network.info[out_block]["level"]]


def prepare_frames(network: Network, dataset: Dataset,
                   sigmas: dict | None = None) -> list:
    out = []
    for fid, img, labels in zip(dataset.frame_ids, dataset.frames, dataset.labels):
        plan = network.make_plan(img)
        level = _head_level(network, plan)
        valid = level.mask.reshape(-1)
        points = spherical_to_cartesian(level.coords.reshape(-1, 3))
        targets = build_targets(points, valid, labels, dataset.class_names, sigmas)
        out.append(FrameData(fid, img, labels, plan, points, valid, targets))
    return out


@dataclass
class TrainSettings:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_final_fraction: float = 0.01
    reg_weight: float = 1.0
    seed: int = 0
    checkpoint_every: int = 50
    eval_every: int = 10
    early_stop_ap: float | None = None   # train-set BEV AP target
    early_stop_iou: float = 0.5
    max_seconds: float | None = None
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    sigmas: dict = field(default_factory=lambda: dict(detector.DEFAULT_SIGMAS))


def _loss_on_frame(network: Network, fd: FrameData, reg_weight: float):
    head = network.predict(fd.img, plan=fd.plan)
    return detection_loss(head.cls_logits, head.reg, fd.targets, fd.valid, reg_weight)


def train(network: Network, dataset: Dataset, settings: TrainSettings,
          out_dir, resume: str | None = None) -> list:
    """Adam training with exponential lr decay; returns per-epoch history.

    Writes loss_log.csv and periodic checkpoints under out_dir. A
    non-finite loss aborts with a diagnostic dump of the offending
    batch. Deterministic for a fixed seed under single-task execution.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(settings.seed)
    schedule = LrSchedule(settings.learning_rate, settings.lr_final_fraction,
                          settings.epochs)
    state = OptimizerState(schedule=schedule)
    start_epoch = 0
    n = len(dataset)
    batches_per_epoch = max(1, -(-n // settings.batch_size))
    if resume:
        values, prev = load_checkpoint(resume)
        network.load_param_values(values)
        if prev is not None:
            state = prev
            state.schedule = schedule
            start_epoch = state.step // batches_per_epoch

    if any(b.kernel.tag == "rq_conv2d" for b in network.spec.blocks):
        calibrate_rq_boundaries(network, dataset.frames)

    frame_data = prepare_frames(network, dataset, settings.sigmas)
    history = []
    t0 = time.time()
    log_path = os.path.join(out_dir, "loss_log.csv")
    log_exists = os.path.isfile(log_path) and resume
    log = open(log_path, "a" if log_exists else "w", newline="")
    writer = csv.writer(log)
    if not log_exists:
        writer.writerow(["epoch", "cls_loss", "reg_loss", "total_loss", "lr", "seconds"])

    try:
        for epoch in range(start_epoch, settings.epochs):
            order = rng.permutation(n)
            lr = schedule.at(epoch)
            ep_cls = ep_reg = ep_tot = 0.0
            for b0 in range(0, n, settings.batch_size):
                batch = order[b0:b0 + settings.batch_size]
                grads_sum: dict = {}
                name_of = {id(t): nm for nm, t in network.params.items()}
                b_cls = b_reg = b_tot = 0.0
                for fi in batch:
                    fd = frame_data[fi]
                    with T.Tape() as tape:
                        total, lc, lrg = _loss_on_frame(network, fd, settings.reg_weight)
                    if not np.isfinite(total.values):
                        dump = {
                            "epoch": epoch, "frame": fd.frame_id,
                            "cls_loss": float(lc.values), "reg_loss": float(lrg.values),
                        }
                        with open(os.path.join(out_dir, "nan_dump.json"), "w") as f:
                            json.dump(dump, f, indent=2)
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch}, frame {fd.frame_id}; "
                            f"diagnostics in nan_dump.json")
                    grads = tape.gradients(total)
                    for t, g in grads.items():
                        nm = name_of.get(id(t))
                        if nm is None:
                            continue
                        if nm in grads_sum:
                            grads_sum[nm] += g
                        else:
                            grads_sum[nm] = g.copy()
                    b_cls += float(lc.values)
                    b_reg += float(lrg.values)
                    b_tot += float(total.values)
                k = len(batch)
                for nm in grads_sum:
                    grads_sum[nm] /= k
                adam_step(network.params, grads_sum, state, lr=lr)
                ep_cls += b_cls
                ep_reg += b_reg
                ep_tot += b_tot
            row = {
                "epoch": epoch, "cls_loss": ep_cls / n, "reg_loss": ep_reg / n,
                "total_loss": ep_tot / n, "lr": lr, "seconds": time.time() - t0,
            }
            history.append(row)
            writer.writerow([row["epoch"], f"{row['cls_loss']:.8f}", f"{row['reg_loss']:.8f}",
                             f"{row['total_loss']:.8f}", f"{lr:.8g}", f"{row['seconds']:.2f}"])
            log.flush()

            done = epoch + 1
            if settings.checkpoint_every and done % settings.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{done:05d}.ckpt"),
                                network.params, state)
            stop = False
            if settings.early_stop_ap is not None and done % settings.eval_every == 0:
                ap = _train_set_ap(network, frame_data, dataset, settings)
                row["train_ap"] = ap
                if ap >= settings.early_stop_ap:
                    stop = True
            if settings.max_seconds is not None and time.time() - t0 > settings.max_seconds:
                stop = True
            if stop:
                break
    finally:
        log.close()
    save_checkpoint(os.path.join(out_dir, "checkpoint_final.ckpt"), network.params, state)
    return history


def _train_set_ap(network, frame_data, dataset, settings) -> float:
    dets = {}
    for fd in frame_data:
        dets[fd.frame_id] = _decode_frame(network, fd, dataset.class_names, settings)
    cfg = EvalConfig(iou_thresholds={c: settings.early_stop_iou for c in dataset.class_names},
                     geometry="bev")
    res = metrics.evaluate(dets, dataset.gts_by_frame(), cfg)
    aps = [r["all"].ap for r in res.values() if r["all"].ap is not None]
    return float(np.mean(aps)) if aps else 0.0


def _decode_frame(network: Network, fd: FrameData, class_names, settings) -> list:
    head = network.predict(fd.img, plan=fd.plan)
    dets = decode(head.cls_logits.values, head.reg.values, fd.points, fd.valid,
                  class_names, settings.score_threshold)
    return nms_bev(dets, settings.nms_iou)


def predict_frames(network: Network, dataset: Dataset,
                   settings: TrainSettings | None = None,
                   frame_data: list | None = None) -> dict:
    """Detections per frame (decoded and duplicate-suppressed)."""
    settings = settings or TrainSettings()
    if frame_data is None:
        frame_data = prepare_frames(network, dataset, settings.sigmas)
    return {fd.frame_id: _decode_frame(network, fd, dataset.class_names, settings)
            for fd in frame_data}


def evaluate_model(network: Network, dataset: Dataset,
                   settings: TrainSettings | None = None,
                   iou_thresholds: dict | None = None) -> dict:
    """BEV and 3D AP/APH reports for a model on a dataset."""
    dets = predict_frames(network, dataset, settings)
    gts = dataset.gts_by_frame()
    out = {}
    for geom in ("bev", "3d"):
        cfg = EvalConfig(geometry=geom)
        if iou_thresholds:
            cfg.iou_thresholds = dict(iou_thresholds)
        out[geom] = metrics.evaluate(dets, gts, cfg)
    return out
