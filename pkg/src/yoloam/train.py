"""SGD training loop, model evaluation and batched prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Sample, collate
from .detector import YOLO, assign_targets, decode, save_checkpoint
from .losses import LossWeights, total_loss
from .metrics import evaluate


class SGD:
    """Momentum SGD; weight decay applies to conv/linear weights only (rank >= 2)."""

    def __init__(self, named_params, lr: float = 1e-2, momentum: float = 0.937, weight_decay: float = 5e-4):
        self.named = list(named_params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim >= 2:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state_dict(self) -> dict:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state_dict(self, state: dict) -> None:
        for k in self.velocity:
            key = f"velocity/{k}"
            if key in state:
                self.velocity[k] = np.asarray(state[key], dtype=self.velocity[k].dtype).copy()


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 16
    lr0: float = 1e-2
    momentum: float = 0.937
    weight_decay: float = 5e-4
    seed: int = 0
    warmup_epochs: float = 0.0
    cosine: bool = False
    lrf: float = 0.01  # final lr fraction for cosine decay
    patience: int | None = None  # early stop after this many evals without improvement
    target_map50: float | None = None  # stop once validation mAP50 reaches this
    eval_every: int = 1
    eval_conf: float = 0.001
    nms_iou: float = 0.45
    loss: LossWeights = field(default_factory=LossWeights)

    def lr_at(self, epoch: int, step: int, steps_per_epoch: int) -> float:
        t = epoch + step / max(steps_per_epoch, 1)
        lr = self.lr0
        if self.cosine and self.epochs > 0:
            lr *= self.lrf + (1 - self.lrf) * 0.5 * (1 + math.cos(math.pi * epoch / self.epochs))
        if self.warmup_epochs > 0 and t < self.warmup_epochs:
            lr *= t / self.warmup_epochs
        return lr


def predict_samples(model: YOLO, samples: Sequence[Sample], conf: float = 0.25, nms_iou: float = 0.45, batch: int = 16):
    """Eval-mode forward + decode, one Detections per sample."""
    was = model.training
    model.eval()
    out = []
    dtype = model.backbone.layers[0].conv.weight.dtype
    try:
        with T.no_grad():
            for i in range(0, len(samples), batch):
                images, _ = collate(samples[i : i + batch])
                out.extend(decode(model(T.Tensor(images, dtype=dtype)), conf, nms_iou))
    finally:
        model.train(was)
    return out


def evaluate_model(model: YOLO, samples: Sequence[Sample], conf: float = 0.001, nms_iou: float = 0.45, **extra):
    dets = predict_samples(model, samples, conf, nms_iou)
    gts = [s.pixel_boxes() for s in samples]
    return evaluate(dets, gts, model.cfg.num_classes, **extra)


def train_step(model: YOLO, opt: SGD, images: np.ndarray, gts: list, weights: LossWeights) -> dict:
    cfg = model.cfg
    targets = assign_targets(gts, cfg.input_size, cfg.num_classes, cfg.reg_max)
    opt.zero_grad()
    raw = model(T.Tensor(images, dtype=np.float32))
    loss, parts = total_loss(raw, targets, weights, cfg.reg_max)
    loss.backward()
    opt.step()
    parts["loss"] = loss.item()
    parts["num_pos"] = targets.num_pos
    return parts


class Trainer:
    """Epoch loop with per-epoch records (no wall-clock fields, so logs of equal-seed runs match byte for byte).

    Batch order for epoch ``e`` comes from ``default_rng(seed + e)``, so a run
    resumed from an end-of-epoch checkpoint continues exactly as the unbroken one.
    """

    def __init__(self, model: YOLO, cfg: TrainConfig, train_set: Sequence[Sample], val_set: Sequence[Sample] = ()):
        self.model = model
        self.cfg = cfg
        self.train_set = list(train_set)
        self.val_set = list(val_set)
        self.opt = SGD(model.named_parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay)
        self.epoch = 0
        self.best_map50 = -1.0
        self.history: list = []

    def batches(self, epoch: int):
        order = np.random.default_rng(self.cfg.seed + epoch).permutation(len(self.train_set))
        for i in range(0, len(order), self.cfg.batch):
            yield [self.train_set[j] for j in order[i : i + self.cfg.batch]]

    def run_epoch(self) -> dict:
        cfg, model = self.cfg, self.model
        model.train()
        steps = math.ceil(len(self.train_set) / cfg.batch)
        sums = {"loss": 0.0, "box": 0.0, "cls": 0.0, "dfl": 0.0}
        for k, batch in enumerate(self.batches(self.epoch)):
            self.opt.lr = cfg.lr_at(self.epoch, k, steps)
            images, gts = collate(batch)
            parts = train_step(model, self.opt, images, gts, cfg.loss)
            for key in sums:
                sums[key] += parts[key] / steps
        rec = {"epoch": self.epoch, "lr": self.opt.lr, **sums}
        self.epoch += 1
        return rec

    def fit(self, on_record: Callable[[dict], None] | None = None, checkpoint_dir=None, extra_meta=None) -> list:
        cfg = self.cfg
        stale = 0
        while self.epoch < cfg.epochs:
            rec = self.run_epoch()
            due = self.epoch % cfg.eval_every == 0 or self.epoch == cfg.epochs
            if self.val_set and due:
                rep = evaluate_model(self.model, self.val_set, cfg.eval_conf, cfg.nms_iou)
                rec["val_map50"] = rep.map50
                rec["val_map50_95"] = rep.map50_95
                if rep.map50 > self.best_map50:
                    self.best_map50 = rep.map50
                    stale = 0
                    if checkpoint_dir is not None:
                        self.save(f"{checkpoint_dir}/best.npz", extra_meta)
                else:
                    stale += 1
            self.history.append(rec)
            if on_record is not None:
                on_record(rec)
            if checkpoint_dir is not None:
                self.save(f"{checkpoint_dir}/last.npz", extra_meta)
            if cfg.target_map50 is not None and rec.get("val_map50", -1) >= cfg.target_map50:
                break
            if cfg.patience is not None and stale >= cfg.patience:
                break
        return self.history

    def save(self, path, extra_meta=None) -> None:
        extra = {"epoch": self.epoch, "best_map50": self.best_map50, **(extra_meta or {})}
        save_checkpoint(path, self.model, extra, self.opt.state_dict())

    def restore(self, meta: dict, optim_state: dict) -> None:
        self.epoch = int(meta["extra"].get("epoch", 0))
        self.best_map50 = float(meta["extra"].get("best_map50", -1.0))
        self.opt.load_state_dict(optim_state)
