"""YOLOv8 backbone, FPN+PAN neck with attention after each neck C2f, and the decoupled head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionSpec, build_attention
from .nn import C2f, CBS, SPPF, Conv2d, Module, Upsample

# (depth_multiple, width_multiple, max_channels)
SIZES = {
    "nano-desk": (0.34, 0.25, 1024),
    "small": (0.33, 0.50, 1024),
    "medium": (0.67, 0.75, 768),
    "large": (1.00, 1.00, 512),
}
STRIDES = (8, 16, 32)
CHECKPOINT_FORMAT = "yoloam-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    size: str = "nano-desk"
    num_classes: int = 2
    reg_max: int = 16
    input_size: int = 160
    attention: AttentionSpec = field(default_factory=AttentionSpec)

    def __post_init__(self):
        if self.size not in SIZES:
            raise ValueError(f"unknown model size {self.size!r}; expected one of {tuple(SIZES)}")
        if self.reg_max < 2:
            raise ValueError(f"reg_max must be >= 2, got {self.reg_max}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionSpec(**self.attention))

    @property
    def strides(self) -> tuple:
        return STRIDES

    @property
    def multiples(self) -> tuple:
        return SIZES[self.size]

    def channels(self, c: int) -> int:
        _, width, max_ch = SIZES[self.size]
        return int(math.ceil(min(c, max_ch) * width / 8) * 8)

    def depth(self, n: int) -> int:
        return max(round(n * SIZES[self.size][0]), 1) if n > 1 else n

    def with_attention(self, kind: str, **kw) -> "ModelConfig":
        return replace(self, attention=AttentionSpec(kind, **kw))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = AttentionSpec(**d.get("attention", {}))
        return cls(**d)


@dataclass
class RawPrediction:
    """Per-level head outputs ordered by stride."""

    cls: list  # Tensor[N, num_classes, H_l, W_l]
    box: list  # Tensor[N, 4*reg_max, H_l, W_l]
    strides: tuple = STRIDES

    def flat(self, reg_max: int):
        """Concatenate levels: class logits [N, A, nc] and box logits [N, A, 4, reg_max]."""
        n = self.cls[0].shape[0]
        cls = T.concat([T.reshape(c, (n, c.shape[1], -1)) for c in self.cls], axis=2)
        box = T.concat([T.reshape(b, (n, b.shape[1], -1)) for b in self.box], axis=2)
        a = cls.shape[2]
        cls = T.permute(cls, (0, 2, 1))
        box = T.reshape(T.permute(box, (0, 2, 1)), (n, a, 4, reg_max))
        return cls, box


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng):
        ch, d = cfg.channels, cfg.depth
        self.layers = [
            CBS(3, ch(64), 3, 2, rng=rng),
            CBS(ch(64), ch(128), 3, 2, rng=rng),
            C2f(ch(128), ch(128), d(3), True, rng=rng),
            CBS(ch(128), ch(256), 3, 2, rng=rng),
            C2f(ch(256), ch(256), d(6), True, rng=rng),  # P3
            CBS(ch(256), ch(512), 3, 2, rng=rng),
            C2f(ch(512), ch(512), d(6), True, rng=rng),  # P4
            CBS(ch(512), ch(1024), 3, 2, rng=rng),
            C2f(ch(1024), ch(1024), d(3), True, rng=rng),
            SPPF(ch(1024), ch(1024), 5, rng=rng),  # P5
        ]
        self.out_channels = (ch(256), ch(512), ch(1024))

    def forward(self, x):
        taps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in (4, 6, 9):
                taps.append(x)
        return taps

    def cost(self, shape, rows=None, prefix="backbone"):
        taps, total = [], 0
        for i, layer in enumerate(self.layers):
            shape, f = layer.cost(shape)
            total += f
            if rows is not None:
                rows.append((f"{prefix}.layers.{i}", type(layer).__name__, shape, layer.num_params(), f))
            if i in (4, 6, 9):
                taps.append(shape)
        return taps, total


class Neck(Module):
    """Top-down FPN then bottom-up PAN; each of the four C2f outputs passes through attention."""

    def __init__(self, cfg: ModelConfig, in_ch: tuple, rng):
        ch, n = cfg.channels, cfg.depth(3)
        c3, c4, c5 = in_ch
        spec = cfg.attention
        self.up = Upsample()
        self.td4 = C2f(c5 + c4, ch(512), n, False, rng=rng)
        self.attn_td4 = build_attention(spec, ch(512), rng=rng)
        self.out3 = C2f(ch(512) + c3, ch(256), n, False, rng=rng)
        self.attn_out3 = build_attention(spec, ch(256), rng=rng)
        self.down3 = CBS(ch(256), ch(256), 3, 2, rng=rng)
        self.out4 = C2f(ch(256) + ch(512), ch(512), n, False, rng=rng)
        self.attn_out4 = build_attention(spec, ch(512), rng=rng)
        self.down4 = CBS(ch(512), ch(512), 3, 2, rng=rng)
        self.out5 = C2f(ch(512) + c5, ch(1024), n, False, rng=rng)
        self.attn_out5 = build_attention(spec, ch(1024), rng=rng)
        self.out_channels = (ch(256), ch(512), ch(1024))

    def forward(self, feats):
        p3, p4, p5 = feats
        t4 = self.attn_td4(self.td4(T.concat([self.up(p5), p4], axis=1)))
        o3 = self.attn_out3(self.out3(T.concat([self.up(t4), p3], axis=1)))
        o4 = self.attn_out4(self.out4(T.concat([self.down3(o3), t4], axis=1)))
        o5 = self.attn_out5(self.out5(T.concat([self.down4(o4), p5], axis=1)))
        return [o3, o4, o5]

    def cost(self, shapes, rows=None, prefix="neck"):
        s3, s4, s5 = shapes
        total = 0

        def run(name, shape):
            nonlocal total
            m = getattr(self, name)
            out, f = m.cost(shape)
            total += f
            if rows is not None:
                rows.append((f"{prefix}.{name}", type(m).__name__, out, m.num_params(), f))
            return out

        def cat(a, b):
            return (a[0], a[1] + b[1], max(a[2], b[2]), max(a[3], b[3]))

        def up(s):
            return (s[0], s[1], 2 * s[2], 2 * s[3])

        t4 = run("attn_td4", run("td4", cat(up(s5), s4)))
        o3 = run("attn_out3", run("out3", cat(up(t4), s3)))
        o4 = run("attn_out4", run("out4", cat(run("down3", o3), t4)))
        o5 = run("attn_out5", run("out5", cat(run("down4", o4), s5)))
        return [o3, o4, o5], total


class Branch(Module):
    """Two 3x3 CBS followed by a 1x1 conv with bias."""

    def __init__(self, cin, cmid, cout, rng, bias_init):
        self.cv1 = CBS(cin, cmid, 3, rng=rng)
        self.cv2 = CBS(cmid, cmid, 3, rng=rng)
        self.pred = Conv2d(cmid, cout, 1, bias=True, rng=rng)
        self.pred.bias.data[:] = bias_init

    def forward(self, x):
        return self.pred(self.cv2(self.cv1(x)))

    def cost(self, shape):
        s, f1 = self.cv1.cost(shape)
        s, f2 = self.cv2.cost(s)
        s, f3 = self.pred.cost(s)
        return s, f1 + f2 + f3


class Head(Module):
    """Decoupled anchor-free head: separate classification and box-distribution branches per level."""

    def __init__(self, cfg: ModelConfig, in_ch: tuple, rng):
        nc, reg = cfg.num_classes, cfg.reg_max
        c2 = max(16, in_ch[0] // 4, 4 * reg)
        c3 = max(in_ch[0], min(nc, 100))
        self.box = [Branch(c, c2, 4 * reg, rng, 1.0) for c in in_ch]
        self.cls = [
            Branch(c, c3, nc, rng, math.log(5 / nc / (cfg.input_size / s) ** 2)) for c, s in zip(in_ch, STRIDES)
        ]

    def forward(self, feats):
        return RawPrediction([m(x) for m, x in zip(self.cls, feats)], [m(x) for m, x in zip(self.box, feats)])

    def cost(self, shapes, rows=None, prefix="head"):
        total = 0
        for i, s in enumerate(shapes):
            for name in ("box", "cls"):
                m = getattr(self, name)[i]
                out, f = m.cost(s)
                total += f
                if rows is not None:
                    rows.append((f"{prefix}.{name}.{i}", "Branch", out, m.num_params(), f))
        return total


class YOLO(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.neck = Neck(cfg, self.backbone.out_channels, rng)
        self.head = Head(cfg, self.neck.out_channels, rng)

    def forward(self, images) -> RawPrediction:
        if not isinstance(images, T.Tensor):
            images = T.Tensor(images, dtype=self.backbone.layers[0].conv.weight.dtype)
        s = images.shape[-1]
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != s:
            raise ValueError(f"expected images [N,3,S,S], got {images.shape}")
        if s % 32:
            raise ValueError(f"input size {s} is not divisible by 32")
        return self.head(self.neck(self.backbone(images)))

    def cost(self, input_size: int | None = None, batch: int = 1, rows=None):
        s = input_size or self.cfg.input_size
        taps, fb = self.backbone.cost((batch, 3, s, s), rows)
        outs, fn = self.neck.cost(taps, rows)
        fh = self.head.cost(outs, rows)
        return fb + fn + fh


def build(cfg: ModelConfig, seed: int = 0) -> YOLO:
    """Build a model; attention divisibility problems raise ValueError naming the channel count."""
    return YOLO(cfg, seed)


# -- anchors, targets, decoding ----------------------------------------------
def make_anchors(input_size: int, strides=STRIDES):
    """Cell centers (A, 2) in pixels and per-cell strides (A,), level-major, row-major."""
    centers, st = [], []
    for s in strides:
        g = input_size // s
        ys, xs = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        centers.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
        st.append(np.full(g * g, s, dtype=np.float64))
    return np.concatenate(centers), np.concatenate(st)


@dataclass
class Targets:
    """Per-image, per-cell assignment (A cells over all levels)."""

    cls: np.ndarray  # [N, A, nc] in {0, 1}
    ltrb: np.ndarray  # [N, A, 4] distances in stride units, clamped
    boxes: np.ndarray  # [N, A, 4] assigned GT xyxy in pixels
    pos: np.ndarray  # [N, A] bool
    gt_index: np.ndarray  # [N, A] int, -1 for background

    @property
    def num_pos(self) -> int:
        return int(self.pos.sum())


def assign_targets(gt: list, input_size: int, num_classes: int, reg_max: int = 16, strides=STRIDES) -> Targets:
    """Center-radius assignment.

    ``gt[i]`` is an array [M, 5] of (class, x1, y1, x2, y2) in pixels. A cell is
    positive for a box when its center lies inside the box and within
    2.5*stride of the box center along both axes; a cell claimed by several
    boxes takes the smallest. A box that claims no cell falls back to the
    stride-8 cell containing its center.
    """
    centers, st = make_anchors(input_size, strides)
    a = len(st)
    n = len(gt)
    cls = np.zeros((n, a, num_classes))
    ltrb = np.zeros((n, a, 4))
    boxes = np.zeros((n, a, 4))
    gidx = np.full((n, a), -1, dtype=np.int64)
    hi = reg_max - 1 - 1e-3
    g0 = input_size // strides[0]
    for i, g in enumerate(gt):
        g = np.asarray(g, dtype=np.float64).reshape(-1, 5)
        if len(g) == 0:
            continue
        x1, y1, x2, y2 = g[:, 1], g[:, 2], g[:, 3], g[:, 4]
        if np.any(x2 <= x1) or np.any(y2 <= y1):
            raise ValueError("degenerate ground-truth box (zero width or height)")
        gcx, gcy = (x1 + x2) / 2, (y1 + y2) / 2
        area = (x2 - x1) * (y2 - y1)
        cx, cy = centers[:, 0:1], centers[:, 1:2]
        inside = (cx >= x1) & (cx <= x2) & (cy >= y1) & (cy <= y2)
        near = (np.abs(cx - gcx) <= 2.5 * st[:, None]) & (np.abs(cy - gcy) <= 2.5 * st[:, None])
        cand = inside & near  # [A, M]
        for m in np.flatnonzero(~cand.any(axis=0)):
            gx = min(int(gcx[m] // strides[0]), g0 - 1)
            gy = min(int(gcy[m] // strides[0]), g0 - 1)
            cand[gy * g0 + gx, m] = True
        cost = np.where(cand, area[None, :], np.inf)
        best = np.argmin(cost, axis=1)
        pos = np.isfinite(cost[np.arange(a), best])
        idx = np.flatnonzero(pos)
        m = best[idx]
        gidx[i, idx] = m
        cls[i, idx, g[m, 0].astype(int)] = 1.0
        boxes[i, idx] = g[m, 1:5]
        s = st[idx]
        d = np.stack([cx[idx, 0] - x1[m], cy[idx, 0] - y1[m], x2[m] - cx[idx, 0], y2[m] - cy[idx, 0]], axis=1)
        ltrb[i, idx] = np.clip(d / s[:, None], 0, hi)
    return Targets(cls, ltrb, boxes, gidx >= 0, gidx)


@dataclass
class Detections:
    boxes: np.ndarray  # [K, 4] xyxy pixels
    scores: np.ndarray  # [K]
    classes: np.ndarray  # [K] int

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, [len(a), len(b)]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = box_iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ious < iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def dfl_expectation(logits: np.ndarray) -> np.ndarray:
    """Expected bin index of softmax(logits) over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ np.arange(logits.shape[-1], dtype=p.dtype)


def decode(
    raw: RawPrediction,
    conf_thresh: float = 0.25,
    nms_iou: float = 0.45,
    reg_max: int | None = None,
    max_det: int = 300,
) -> list:
    """Turn head outputs into per-image :class:`Detections`.

    Best class per cell, boxes clipped to the input square, then per-class NMS.
    """
    if not (0 <= conf_thresh <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    reg_max = reg_max or raw.box[0].shape[1] // 4
    input_size = raw.cls[0].shape[-1] * raw.strides[0]
    with T.no_grad():
        cls_t, box_t = raw.flat(reg_max)
    centers, st = make_anchors(input_size, raw.strides)
    scores_all = T.core._sigmoid_np(cls_t.data.astype(np.float64))
    dist = dfl_expectation(box_t.data.astype(np.float64)) * st[None, :, None]
    out = []
    for i in range(scores_all.shape[0]):
        cls_id = scores_all[i].argmax(axis=1)
        score = scores_all[i, np.arange(len(cls_id)), cls_id]
        keep = score >= conf_thresh
        if not keep.any():
            out.append(Detections.empty())
            continue
        d, c = dist[i, keep], centers[keep]
        boxes = np.stack([c[:, 0] - d[:, 0], c[:, 1] - d[:, 1], c[:, 0] + d[:, 2], c[:, 1] + d[:, 3]], axis=1)
        np.clip(boxes, 0, input_size, out=boxes)
        score, cls_id = score[keep], cls_id[keep]
        kept = []
        for k in np.unique(cls_id):
            sel = np.flatnonzero(cls_id == k)
            kept.append(sel[nms(boxes[sel], score[sel], nms_iou)])
        kept = np.concatenate(kept)
        kept = kept[np.argsort(-score[kept], kind="stable")][:max_det]
        out.append(Detections(boxes[kept], score[kept], cls_id[kept]))
    return out


# -- checkpoints ---------------------------------------------------------------
def save_checkpoint(path, model: YOLO, extra: dict | None = None, optim_state: dict | None = None) -> None:
    """Write a flat named-tensor ``.npz`` container.

    Entries: ``param/<name>`` trainable tensors, ``buffer/<name>`` BN running
    statistics, ``optim/<name>`` optimizer slots, and ``__meta__`` a JSON string
    holding the format tag, the ModelConfig, per-tensor shapes and ``extra``.
    """
    arrays = {f"param/{k}": v.data for k, v in model.named_parameters()}
    arrays.update({f"buffer/{k}": v for k, v in model.named_buffers()})
    for k, v in (optim_state or {}).items():
        arrays[f"optim/{k}"] = np.asarray(v)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
        "extra": extra or {},
    }
    arrays["__meta__"] = np.asarray(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> tuple:
    """Return (meta, params, buffers, optim) dicts from a checkpoint file."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        groups = {"param": {}, "buffer": {}, "optim": {}}
        for key in z.files:
            if key == "__meta__":
                continue
            kind, name = key.split("/", 1)
            arr = z[key]
            if list(arr.shape) != meta["shapes"].get(key):
                raise ValueError(f"{path}: {key} has shape {list(arr.shape)}, metadata says {meta['shapes'].get(key)}")
            groups[kind][name] = arr
    return meta, groups["param"], groups["buffer"], groups["optim"]


def load_checkpoint(path, seed: int = 0) -> tuple:
    """Rebuild the model recorded in a checkpoint; returns (model, meta, optim_state)."""
    meta, params, buffers, optim = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model = build(cfg, seed)
    state = dict(params)
    state.update(buffers)
    model.load_state_dict(state)
    return model, meta, optim
