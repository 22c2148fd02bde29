"""Resolved run configuration, serialized into every run directory."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class RunConfig:
    """Everything a run needs to be reproduced. Defaults everywhere;
    train-time epoch/batch defaults depend on dataset size and are
    filled in before the config is written."""

    command: str = ""
    seed: int = 0
    out: str = ""
    data: str = ""

    # network
    spec: str = "pedestrian"
    kernel: str = "edgeconv"
    encoding: str = "polar"
    sampling: str = "smart"
    multiplier: float = 1.0
    n_buckets: int = 4

    # training (paper-scale defaults: batch 256 over 300 epochs; desk
    # scale swaps in batch 8 / 200 epochs for datasets under 1000 frames)
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_final_fraction: float = 0.01
    reg_weight: float = 1.0
    checkpoint_every: int = 50
    eval_every: int = 10
    early_stop_ap: float | None = None
    max_seconds: float | None = None

    # detection / eval
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    iou_thresholds: dict = field(default_factory=dict)

    # generation
    frames: int = 10
    width: int = 265
    height: int = 64
    classes: list = field(default_factory=lambda: ["pedestrian"])
    range_min: float = 5.0
    range_max: float = 40.0
    noise: float = 0.01
    dropout: float = 0.01
    stripes: int = 0
    ground: bool = True

    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as f:
            d = json.load(f)
        cfg = RunConfig()
        for k, v in d.items():
            if hasattr(cfg, k):
                setattr(cfg, k, v)
        return cfg


PAPER_EPOCHS = 300
PAPER_BATCH = 256
DESK_EPOCHS = 200
DESK_BATCH = 8
DESK_DATASET_LIMIT = 1000


def resolve_training_defaults(cfg: RunConfig, n_frames: int,
                              epochs_given: bool, batch_given: bool) -> None:
    """Desk-scale datasets (< 1000 frames) default to batch 8 / 200
    epochs; explicit flags always win."""
    desk = n_frames < DESK_DATASET_LIMIT
    if not epochs_given:
        cfg.epochs = DESK_EPOCHS if desk else PAPER_EPOCHS
    if not batch_given:
        cfg.batch_size = DESK_BATCH if desk else PAPER_BATCH
