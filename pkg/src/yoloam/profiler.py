"""Parameter and FLOP counts, per-layer cost tables, and wall-clock inference timing."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import letterbox, to_chw
from .detector import YOLO, decode
from .metrics import CONVENTIONS


def count_params(model) -> int:
    """Trainable element count; BN running statistics are buffers and excluded."""
    return int(sum(p.size for p in model.parameters()))


def count_flops(model: YOLO, input_size: int | None = None, batch: int = 1) -> int:
    return int(model.cost(input_size, batch))


def cost_rows(model: YOLO, input_size: int | None = None) -> list:
    rows = []
    model.cost(input_size, 1, rows)
    return rows


def cost_table(model: YOLO, input_size: int | None = None) -> str:
    """Aligned text table of per-layer output shape, params and FLOPs."""
    s = input_size or model.cfg.input_size
    rows = cost_rows(model, s)
    cfg = model.cfg
    lines = [
        f"# model size={cfg.size} attention={cfg.attention.kind} classes={cfg.num_classes} input={s}",
        f"# flops: {CONVENTIONS['flops']}",
        f"{'layer':<24} {'type':<18} {'output':<20} {'params':>12} {'flops':>16}",
    ]
    for name, kind, shape, params, flops in rows:
        lines.append(f"{name:<24} {kind:<18} {'x'.join(map(str, shape[1:])):<20} {params:>12,d} {flops:>16,d}")
    lines.append(f"{'total':<24} {'':<18} {'':<20} {count_params(model):>12,d} {count_flops(model, s):>16,d}")
    return "\n".join(lines) + "\n"


def _preprocess(image: np.ndarray, size: int) -> np.ndarray:
    if image.dtype == np.uint8 and image.ndim == 3 and image.shape[2] == 3:
        boxed, _, _ = letterbox(image, size)
        return to_chw(boxed)[None]
    return np.asarray(image, dtype=np.float32).reshape(1, 3, size, size)


def time_inference(
    model: YOLO,
    images: Sequence[np.ndarray],
    warmup: int = 1,
    reps: int = 3,
    input_size: int | None = None,
    conf_thresh: float = 0.25,
    nms_iou: float = 0.45,
) -> float:
    """Mean milliseconds per image for preprocess + forward + decode/NMS, after warmup passes.

    ``images`` are uint8 [H, W, 3] arrays (letterboxed here) or already
    preprocessed float [3, S, S] arrays.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    size = input_size or model.cfg.input_size
    dtype = model.backbone.layers[0].conv.weight.dtype
    was_training = model.training
    model.eval()

    def one_pass():
        for img in images:
            x = T.Tensor(_preprocess(img, size), dtype=dtype)
            decode(model(x), conf_thresh, nms_iou)

    try:
        with T.no_grad():
            for _ in range(warmup):
                one_pass()
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                one_pass()
                times.append((time.perf_counter() - t0) * 1000 / max(len(images), 1))
    finally:
        model.train(was_training)
    return float(np.mean(times))
