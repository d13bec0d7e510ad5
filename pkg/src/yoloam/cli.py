"""Command-line entry point: ``yoloam {train,eval,predict,info,synth}``.

Settings resolve as defaults < ``--config`` YAML file < explicit flags. The
output root is ``--out``, else ``$YOLOAM_OUTPUT/<command>``, else ``runs/<command>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attention import KINDS, AttentionSpec
from .data import IMAGE_SUFFIXES, YoloDataset, letterbox, read_image, synth_shapes, to_chw, write_dataset, write_image
from .detector import SIZES, ModelConfig, build, decode, load_checkpoint
from .losses import LossWeights
from .profiler import cost_table, count_flops, count_params
from .tensor import Tensor, kernels, no_grad
from .train import TrainConfig, Trainer, evaluate_model

OUTPUT_ENV = "YOLOAM_OUTPUT"


class CLIError(Exception):
    """User-facing failure; reported on stderr with exit status 2."""


@dataclass
class RunConfig:
    data: str | None = None
    size: str = "nano-desk"
    num_classes: int = 2
    reg_max: int = 16
    input_size: int = 160
    attention: str = "none"
    reduction: int | None = None
    groups: int = 8
    optimizer: str = "sgd"
    lr0: float = 1e-2
    momentum: float = 0.937
    weight_decay: float = 5e-4
    epochs: int = 100
    batch: int = 16
    seed: int = 0
    warmup_epochs: float = 0.0
    cosine: bool = False
    patience: int | None = None
    target_map50: float | None = None
    eval_every: int = 1
    train_split: str = "train"
    val_split: str = "val"
    out: str | None = None
    extra: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        spec = AttentionSpec(self.attention, r=self.reduction, groups=self.groups)
        return ModelConfig(self.size, self.num_classes, self.reg_max, self.input_size, spec)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch=self.batch,
            lr0=self.lr0,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            warmup_epochs=self.warmup_epochs,
            cosine=self.cosine,
            patience=self.patience,
            target_map50=self.target_map50,
            eval_every=self.eval_every,
            loss=LossWeights(),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CLIError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise CLIError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise CLIError(f"{path}: expected a mapping of settings")
    unknown = sorted(set(data) - set(RUN_FIELDS))
    if unknown:
        raise CLIError(f"{path}: unknown settings {unknown}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in RUN_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = RunConfig(**values)
        cfg.model_config()
    except (TypeError, ValueError) as exc:
        raise CLIError(str(exc)) from None
    if cfg.optimizer != "sgd":
        raise CLIError(f"unsupported optimizer {cfg.optimizer!r}; only 'sgd' is implemented")
    return cfg


def output_dir(args, command: str, configured: str | None = None) -> Path:
    out = getattr(args, "out", None) or configured
    if out is None:
        root = os.environ.get(OUTPUT_ENV)
        out = Path(root) / command if root else Path("runs") / command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def header(command: str, seed: int, config_hash: str, **extra) -> dict:
    return {
        "header": {
            "command": command,
            "version": __version__,
            "seed": seed,
            "config_hash": config_hash,
            "kernels": kernels.BACKEND,
            "python": platform.python_version(),
            "numpy": np.__version__,
            **extra,
        }
    }


def _jsonl(path: Path, records, mode="w") -> None:
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _dataset(root, split, cfg: ModelConfig) -> list:
    if root is None:
        raise CLIError("no dataset given (use --data or a config file entry)")
    try:
        samples = list(YoloDataset(root, split, cfg.input_size, cfg.num_classes))
    except FileNotFoundError as exc:
        raise CLIError(str(exc)) from None
    if not samples:
        raise CLIError(f"dataset split {split!r} under {root} has no images")
    return samples


def _open_checkpoint(path):
    if not Path(path).is_file():
        raise CLIError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (KeyError, ValueError, OSError) as exc:
        raise CLIError(f"{path}: cannot load checkpoint ({exc})") from None


# -- commands ----------------------------------------------------------------------
def cmd_train(args) -> int:
    rc = resolve_config(args)
    mcfg = rc.model_config()
    try:
        model = build(mcfg, seed=rc.seed)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    train_set = _dataset(rc.data, rc.train_split, mcfg)
    try:
        val_set = _dataset(rc.data, rc.val_split, mcfg)
    except CLIError:
        val_set = train_set
    out = output_dir(args, "train", rc.out)
    trainer = Trainer(model, rc.train_config(), train_set, val_set)
    log_path = out / "log.jsonl"
    if args.resume:
        resumed, meta, optim = _open_checkpoint(args.resume)
        if resumed.cfg != mcfg:
            raise CLIError("checkpoint model config differs from the run config")
        trainer.model = model = resumed
        trainer.opt = type(trainer.opt)(model.named_parameters(), rc.lr0, rc.momentum, rc.weight_decay)
        trainer.restore(meta, optim)
        _jsonl(log_path, [{"resume": str(args.resume), "epoch": trainer.epoch}], mode="a")
    else:
        shown = {k: v for k, v in rc.to_dict().items() if k != "out"}
        _jsonl(log_path, [header("train", rc.seed, rc.digest(), config=shown)])

    t0 = time.perf_counter()

    def on_record(rec):
        _jsonl(log_path, [rec], mode="a")
        if not args.quiet:
            shown = " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())
            print(f"{shown} elapsed={time.perf_counter() - t0:.1f}s", flush=True)

    trainer.fit(on_record, checkpoint_dir=out, extra_meta={"config_hash": rc.digest(), "seed": rc.seed})
    print(f"best val mAP50 {trainer.best_map50:.4f}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    model, meta, _ = _open_checkpoint(args.checkpoint)
    cfg = model.cfg
    samples = _dataset(args.data, args.split, cfg)
    out = output_dir(args, "eval")
    rep = evaluate_model(
        model,
        samples,
        conf=args.conf,
        nms_iou=args.iou,
        params=count_params(model),
        flops=count_flops(model),
        input_size=cfg.input_size,
    )
    if args.time:
        from .profiler import time_inference

        imgs = [s.image for s in samples[: args.time]]
        rep.inference_ms = time_inference(model, imgs, warmup=1, reps=3)
    rep.write(out / "report.json", out / "pr_curves")
    digest = meta.get("extra", {}).get("config_hash", "")
    _jsonl(out / "header.jsonl", [header("eval", meta.get("extra", {}).get("seed", 0), digest, checkpoint=str(args.checkpoint))])
    print(rep.to_text(), end="")
    return 0


def _collect_images(paths) -> list:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.is_file():
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                raise CLIError(f"unsupported image format: {p}")
            found.append(p)
        else:
            raise CLIError(f"no such image or directory: {p}")
    if not found:
        raise CLIError("no input images")
    return found


def draw_overlay(image: np.ndarray, records: list) -> np.ndarray:
    """Copy of ``image`` with labeled boxes; unchanged when there are no records."""
    if not records:
        return image.copy()
    from PIL import Image, ImageDraw

    im = Image.fromarray(image)
    draw = ImageDraw.Draw(im)
    palette = [(255, 56, 56), (56, 255, 56), (56, 128, 255), (255, 200, 0), (255, 0, 255), (0, 255, 255)]
    for r in records:
        color = palette[r["class"] % len(palette)]
        x1, y1, x2, y2 = r["xyxy"]
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        draw.text((x1 + 2, max(y1 - 11, 0)), f"{r['class']} {r['score']:.2f}", fill=color)
    return np.asarray(im)


def predict_image(model, image: np.ndarray, conf: float, iou: float) -> list:
    """Detections in original-image pixel coordinates as JSON-ready dicts."""
    size = model.cfg.input_size
    boxed, scale, (px, py) = letterbox(image, size)
    model.eval()
    with no_grad():
        det = decode(model(Tensor(to_chw(boxed)[None])), conf, iou)[0]
    h, w = image.shape[:2]
    recs = []
    for b, s, c in zip(det.boxes, det.scores, det.classes):
        x1 = float(np.clip((b[0] - px) / scale, 0, w))
        y1 = float(np.clip((b[1] - py) / scale, 0, h))
        x2 = float(np.clip((b[2] - px) / scale, 0, w))
        y2 = float(np.clip((b[3] - py) / scale, 0, h))
        recs.append({"class": int(c), "score": float(s), "xyxy": [x1, y1, x2, y2]})
    return recs


def cmd_predict(args) -> int:
    model, meta, _ = _open_checkpoint(args.checkpoint)
    images = _collect_images(args.images)
    out = output_dir(args, "predict")
    (out / "overlays").mkdir(exist_ok=True)
    digest = meta.get("extra", {}).get("config_hash", "")
    records = [header("predict", meta.get("extra", {}).get("seed", 0), digest, checkpoint=str(args.checkpoint))]
    total = 0
    for path in images:
        try:
            img = read_image(path)
        except (OSError, ValueError) as exc:
            raise CLIError(f"cannot read {path}: {exc}") from None
        recs = predict_image(model, img, args.conf, args.iou)
        for r in recs:
            records.append({"image": path.name, **r})
        total += len(recs)
        write_image(out / "overlays" / path.name, draw_overlay(img, recs))
    _jsonl(out / "predictions.jsonl", records)
    print(f"{total} detections over {len(images)} images -> {out}")
    return 0


def cmd_info(args) -> int:
    sizes = args.sizes or ["nano-desk"]
    kinds = args.kinds or list(KINDS)
    for s in sizes:
        if s not in SIZES:
            raise CLIError(f"unknown size {s!r}; expected one of {tuple(SIZES)}")
    for k in kinds:
        if k not in KINDS:
            raise CLIError(f"unknown attention kind {k!r}; expected one of {KINDS}")
    print(f"# input={args.input_size} classes={args.num_classes} flops=2*MACs (weighted layers only)")
    print(f"{'size':<10} {'attention':<10} {'params':>14} {'GFLOPs':>10}")
    for s in sizes:
        for k in kinds:
            try:
                cfg = ModelConfig(s, args.num_classes, 16, args.input_size, AttentionSpec(k))
                model = build(cfg)
            except ValueError as exc:
                raise CLIError(str(exc)) from None
            print(f"{s:<10} {k:<10} {count_params(model):>14,d} {count_flops(model) / 1e9:>10.3f}")
            if args.table:
                print(cost_table(model))
    return 0


def cmd_synth(args) -> int:
    out = Path(args.root)
    for split, n, seed in (("train", args.n, args.seed), ("val", args.val or args.n, args.seed if not args.val else args.seed + 1)):
        write_dataset(synth_shapes(seed, n, args.num_classes, args.input_size), out, split, args.format)
    print(f"wrote synthetic dataset to {out}")
    return 0


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="yoloam", description="Attention-augmented YOLO detector on a numpy autodiff core.")
    p.add_argument("--version", action="version", version=f"yoloam {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector with SGD")
    t.add_argument("--config", help="YAML file of run settings")
    t.add_argument("--data", help="dataset root with images/<split> and labels/<split>")
    t.add_argument("--size", choices=tuple(SIZES))
    t.add_argument("--num-classes", dest="num_classes", type=int)
    t.add_argument("--reg-max", dest="reg_max", type=int)
    t.add_argument("--input-size", dest="input_size", type=int)
    t.add_argument("--attention", choices=KINDS)
    t.add_argument("--reduction", type=int)
    t.add_argument("--groups", type=int)
    t.add_argument("--optimizer")
    t.add_argument("--lr0", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--warmup-epochs", dest="warmup_epochs", type=float)
    t.add_argument("--cosine", action="store_true", default=None)
    t.add_argument("--patience", type=int, help="early stop after this many evaluations without improvement")
    t.add_argument("--target-map50", dest="target_map50", type=float, help="stop once val mAP50 reaches this")
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--train-split", dest="train_split")
    t.add_argument("--val-split", dest="val_split")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--conf", type=float, default=0.001)
    e.add_argument("--iou", type=float, default=0.45)
    e.add_argument("--time", type=int, default=0, metavar="N", help="also time inference on N images")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="detect objects and write records plus overlays")
    pr.add_argument("checkpoint")
    pr.add_argument("images", nargs="+", help="image files or directories (.ppm, .png)")
    pr.add_argument("--conf", type=float, default=0.25)
    pr.add_argument("--iou", type=float, default=0.45)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    i = sub.add_parser("info", help="parameter and FLOP counts per size and attention kind")
    i.add_argument("--sizes", nargs="+")
    i.add_argument("--kinds", nargs="+")
    i.add_argument("--input-size", dest="input_size", type=int, default=640)
    i.add_argument("--num-classes", dest="num_classes", type=int, default=9)
    i.add_argument("--table", action="store_true", help="also print per-layer cost tables")
    i.set_defaults(func=cmd_info)

    s = sub.add_parser("synth", help="write a synthetic shapes dataset")
    s.add_argument("root")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--val", type=int, default=0, help="separate val images (default: copy of train)")
    s.add_argument("--num-classes", dest="num_classes", type=int, default=2)
    s.add_argument("--input-size", dest="input_size", type=int, default=160)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--format", choices=(".ppm", ".png"), default=".ppm")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"yoloam {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
