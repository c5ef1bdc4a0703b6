"""Adamax training loop with per-batch gating and optional PGD adversarial training."""

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

from nsrobust.attacks import AttackConfig, pgd_attack
from nsrobust.data import batch_iter
from nsrobust.errors import ArgumentError, TrainingError
from nsrobust.losses import LossConfig, objective
from nsrobust.optim import AdamaxConfig, AdamaxState, adamax_step
from nsrobust.persist import save_model
from nsrobust.report import metrics, predict
from nsrobust.tensor import RandStream

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "val_prec", "gated_fraction", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 50
    lr: float = 0.001
    batch_size: int = 128
    seed: int = 0
    beta_m: float = 0.9
    beta_u: float = 0.999
    stab: float = 1e-8
    # PGD adversarial training: used when loss.kind == "adv"
    adv_eps: float = 0.1
    adv_steps: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ArgumentError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def adamax(self):
        return AdamaxConfig(self.lr, self.beta_m, self.beta_u, self.stab)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown train keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = None
    best_val_acc: float = -1.0
    best_model: object = None

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def evaluate_clean(model, hset):
    """``(ACC, PREC)`` on un-attacked data."""
    return metrics(predict(model, hset.signals), hset.labels, model.class_count)


def train(model, train_set, val_set=None, cfg=TrainConfig(), out_dir=None, progress=None):
    """Train ``model`` in place and return ``(model, TrainLog)``.

    Every batch: forward, gate on the current predictions, form the loss
    (effective weights only where the loss needs them), frozen-mask
    backprop, Adamax.  The best-validation-accuracy parameters are kept in
    ``log.best_model`` (and ``best.json`` under ``out_dir``).
    """
    state = AdamaxState()
    opt = cfg.adamax
    stream = RandStream(cfg.seed, 500)
    tlog = TrainLog()
    last_good = None
    step = 0
    adv = cfg.loss.kind == "adv"
    attack_cfg = AttackConfig(eps=cfg.adv_eps, steps=cfg.adv_steps, random_start=True) if adv else None
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        total, seen, gated = 0.0, 0, 0.0
        for b, (x, y) in enumerate(batch_iter(train_set, cfg.batch_size, cfg.seed, epoch)):
            x = x.astype(model.dtype)
            x_adv = None
            if adv:
                x_adv = pgd_attack(model, x, y, attack_cfg, stream=stream.spawn(epoch * 1_000_003 + b))
            value, grads, stats = objective(model, x, y, cfg.loss, x_adv=x_adv)
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {b}", checkpoint=last_good)
            step += 1
            try:
                adamax_step(model.params, grads, state, step, opt)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {b}", checkpoint=last_good)
            total += value * len(y)
            gated += stats.get("correct", 0.0) * len(y)
            seen += len(y)
        train_acc, _ = evaluate_clean(model, train_set)
        val_acc, val_prec = evaluate_clean(model, val_set) if val_set is not None else (float("nan"),) * 2
        row = {
            "epoch": epoch,
            "train_loss": total / seen,
            "train_acc": train_acc,
            "val_acc": val_acc,
            "val_prec": val_prec,
            "gated_fraction": gated / seen,
            "wall_time": time.perf_counter() - started,
        }
        tlog.rows.append(row)
        score = val_acc if val_set is not None else train_acc
        if score > tlog.best_val_acc:
            tlog.best_val_acc, tlog.best_epoch = score, epoch
            tlog.best_model = model.copy()
            if out_dir:
                save_model(model, os.path.join(out_dir, "best.json"))
        if out_dir:
            last_good = os.path.join(out_dir, "last_good.json")
            save_model(model, last_good)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f", epoch, row["train_loss"], train_acc, val_acc)
        if progress:
            progress(row)
    return model, tlog


def with_loss(cfg, **changes):
    return replace(cfg, loss=replace(cfg.loss, **changes))


__all__ = ["TrainConfig", "TrainLog", "adamax_step", "evaluate_clean", "train", "with_loss"]
