"""Datasets in the YOLO label convention, splitting, photometric augmentation, synthetic shapes.

Directory layout: ``images/<split>/<stem>.{ppm,png}`` with labels in
``labels/<split>/<stem>.txt``, one ``class cx cy w h`` line per box, all
coordinates normalized to [0, 1].
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SPLIT_FRACTIONS = (0.7, 0.2, 0.1)
IMAGE_SUFFIXES = (".ppm", ".png")
PAD_VALUE = 114


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    boxes: np.ndarray  # [M, 5] (class, cx, cy, w, h) normalized
    name: str = ""

    def pixel_boxes(self) -> np.ndarray:
        """Boxes as (class, x1, y1, x2, y2) in pixels of ``image``."""
        h, w = self.image.shape[1:]
        return to_pixel_boxes(self.boxes, w, h)


def to_pixel_boxes(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    out = np.empty_like(b)
    out[:, 0] = b[:, 0]
    out[:, 1] = (b[:, 1] - b[:, 3] / 2) * width
    out[:, 2] = (b[:, 2] - b[:, 4] / 2) * height
    out[:, 3] = (b[:, 1] + b[:, 3] / 2) * width
    out[:, 4] = (b[:, 2] + b[:, 4] / 2) * height
    return out


def to_normalized_boxes(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    out = np.empty_like(b)
    out[:, 0] = b[:, 0]
    out[:, 1] = (b[:, 1] + b[:, 3]) / 2 / width
    out[:, 2] = (b[:, 2] + b[:, 4]) / 2 / height
    out[:, 3] = (b[:, 3] - b[:, 1]) / width
    out[:, 4] = (b[:, 4] - b[:, 2]) / height
    return out


# -- image codecs --------------------------------------------------------------
def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and chr(buf[pos]).isspace():
            pos += 1
        if pos < n and buf[pos] == ord("#"):
            while pos < n and buf[pos] not in (10, 13):
                pos += 1
            continue
        start = pos
        while pos < n and not chr(buf[pos]).isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos


def read_ppm(path) -> np.ndarray:
    """Decode a binary (P6) PPM to uint8 [H, W, 3]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4, 0)
    if magic != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported, got {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    pos += 1  # single whitespace byte after maxval
    if maxval < 256:
        data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
        return data.reshape(h, w, 3).copy()
    data = np.frombuffer(buf, dtype=">u2", count=w * h * 3, offset=pos)
    return (data.reshape(h, w, 3).astype(np.float64) * 255 / maxval).round().astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_image(path) -> np.ndarray:
    """Return uint8 RGB [H, W, 3] for PPM or PNG files."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
        return
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path)


def to_chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32) / 255.0


def to_hwc_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)


def letterbox(image: np.ndarray, size: int) -> tuple:
    """Resize uint8 [H, W, 3] into a gray-padded square; returns (image, scale, (pad_x, pad_y))."""
    h, w = image.shape[:2]
    scale = min(size / h, size / w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if (nh, nw) != (h, w):
        from PIL import Image

        image = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    out = np.full((size, size, 3), PAD_VALUE, dtype=np.uint8)
    px, py = (size - nw) // 2, (size - nh) // 2
    out[py : py + nh, px : px + nw] = image
    return out, scale, (px, py)


# -- labels ----------------------------------------------------------------------
def load_yolo_labels(path, num_classes: int | None = None) -> np.ndarray:
    """Parse a YOLO label file into [M, 5] (class, cx, cy, w, h); boxes are clamped to the image."""
    path = Path(path)
    rows = []
    if not path.exists():
        return np.zeros((0, 5))
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            cls = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed label line {line!r} ({exc})") from None
        if cls < 0 or (num_classes is not None and cls >= num_classes):
            raise ValueError(f"{path}:{lineno}: class id {cls} out of range")
        if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
            raise ValueError(f"{path}:{lineno}: coordinates must lie in [0, 1]")
        x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x2, y2 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"{path}:{lineno}: degenerate box (zero width or height)")
        rows.append((cls, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def write_yolo_labels(path, boxes: np.ndarray) -> None:
    lines = [f"{int(b[0])} {b[1]:.6f} {b[2]:.6f} {b[3]:.6f} {b[4]:.6f}" for b in np.asarray(boxes).reshape(-1, 5)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_sample(image_path, label_path, input_size: int, num_classes: int | None = None) -> Sample:
    """Read an image and its labels, letterboxed to ``input_size``."""
    img = read_image(image_path)
    h, w = img.shape[:2]
    boxes = load_yolo_labels(label_path, num_classes)
    boxed, scale, (px, py) = letterbox(img, input_size)
    if len(boxes):
        pix = to_pixel_boxes(boxes, w, h)
        pix[:, [1, 3]] = pix[:, [1, 3]] * scale + px
        pix[:, [2, 4]] = pix[:, [2, 4]] * scale + py
        boxes = to_normalized_boxes(pix, input_size, input_size)
    return Sample(to_chw(boxed), boxes, Path(image_path).stem)


class YoloDataset:
    """Samples from ``root/images/<split>`` paired with ``root/labels/<split>``."""

    def __init__(self, root, split: str, input_size: int, num_classes: int | None = None):
        self.root = Path(root)
        img_dir = self.root / "images" / split
        if not img_dir.is_dir():
            raise FileNotFoundError(f"dataset split not found: {img_dir}")
        self.images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        self.label_dir = self.root / "labels" / split
        self.input_size = input_size
        self.num_classes = num_classes

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        p = self.images[i]
        return load_sample(p, self.label_dir / f"{p.stem}.txt", self.input_size, self.num_classes)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]


def write_dataset(samples: Sequence[Sample], root, split: str, suffix: str = ".ppm") -> None:
    root = Path(root)
    (root / "images" / split).mkdir(parents=True, exist_ok=True)
    (root / "labels" / split).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = s.name or f"{i:05d}"
        write_image(root / "images" / split / f"{stem}{suffix}", to_hwc_uint8(s.image))
        write_yolo_labels(root / "labels" / split / f"{stem}.txt", s.boxes)


# -- split -----------------------------------------------------------------------
@dataclass
class SplitManifest:
    seed: int
    train: list
    val: list
    test: list
    fractions: tuple = SPLIT_FRACTIONS

    def counts(self) -> tuple:
        return len(self.train), len(self.val), len(self.test)

    def to_text(self) -> str:
        lines = [f"seed {self.seed}", "fractions " + " ".join(str(f) for f in self.fractions)]
        lines.append("counts " + " ".join(str(c) for c in self.counts()))
        for name in ("train", "val", "test"):
            lines.append(f"[{name}]")
            lines.extend(getattr(self, name))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        seed, fractions, groups, cur = 0, SPLIT_FRACTIONS, {"train": [], "val": [], "test": []}, None
        for line in Path(path).read_text().splitlines():
            if line.startswith("seed "):
                seed = int(line.split()[1])
            elif line.startswith("fractions "):
                fractions = tuple(float(v) for v in line.split()[1:])
            elif line.startswith("counts "):
                continue
            elif line.startswith("[") and line.endswith("]"):
                cur = line[1:-1]
            elif line:
                groups[cur].append(line)
        return cls(seed, groups["train"], groups["val"], groups["test"], fractions)


def split(files: Sequence[str], seed: int = 0, fractions: tuple = SPLIT_FRACTIONS) -> SplitManifest:
    """Seeded shuffle then partition: round(0.7n) train, round(0.2n) val, remainder test."""
    files = [str(f) for f in files]
    if not files:
        raise ValueError("cannot split an empty file list")
    order = sorted(files)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return SplitManifest(seed, order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :], fractions)


# -- augmentation ----------------------------------------------------------------
def augment_brightness_contrast(image: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Per-pixel ``clip(alpha * p + beta, 0, 1)`` (weighted blend with a black image plus offset)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return np.clip(alpha * image + beta, 0.0, 1.0).astype(image.dtype, copy=False)


@dataclass(frozen=True)
class AugmentConfig:
    alpha_range: tuple = (0.8, 1.2)
    beta_range: tuple = (-0.1, 0.1)
    copies: int = 1  # augmented copies per training image


def expand_with_augmentation(samples: Sequence[Sample], seed: int, cfg: AugmentConfig = AugmentConfig()) -> list:
    """Originals followed by ``cfg.copies`` brightness/contrast-jittered copies of each; labels unchanged."""
    rng = np.random.default_rng(seed)
    out = list(samples)
    for _ in range(cfg.copies):
        for s in samples:
            a = rng.uniform(*cfg.alpha_range)
            b = rng.uniform(*cfg.beta_range)
            out.append(Sample(augment_brightness_contrast(s.image, a, b), s.boxes.copy(), s.name + "_aug"))
    return out


# -- synthetic shapes ------------------------------------------------------------
SHAPES = ("rectangle", "ellipse", "triangle", "cross")


def _shape_mask(kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    if kind == "ellipse":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if kind == "triangle":
        return np.abs(u - 0.5) <= v / 2
    return (np.abs(u - 0.5) <= 0.17) | (np.abs(v - 0.5) <= 0.17)


def synth_shapes(seed: int, n: int, classes: int = 2, size: int = 160, max_objects: int = 3) -> list:
    """Filled shapes (one shape kind per class) on noise backgrounds with exact box labels."""
    if not 1 <= classes <= len(SHAPES):
        raise ValueError(f"synth_shapes supports 1..{len(SHAPES)} classes, got {classes}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = rng.uniform(0.0, 0.35, size=(size, size, 3))
        taken = np.zeros((size, size), dtype=bool)
        boxes = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(20):
                bw, bh = (int(v) for v in rng.integers(size // 8, size // 3, size=2))
                x0 = int(rng.integers(0, size - bw))
                y0 = int(rng.integers(0, size - bh))
                if not taken[max(y0 - 2, 0) : y0 + bh + 2, max(x0 - 2, 0) : x0 + bw + 2].any():
                    break
            else:
                continue
            cls = int(rng.integers(0, classes))
            mask = _shape_mask(SHAPES[cls], bh, bw)
            color = rng.uniform(0.6, 1.0, size=3)
            region = img[y0 : y0 + bh, x0 : x0 + bw]
            region[mask] = color
            taken[y0 : y0 + bh, x0 : x0 + bw] = True
            ys, xs = np.nonzero(mask)
            x1, x2 = x0 + xs.min(), x0 + xs.max() + 1
            y1, y2 = y0 + ys.min(), y0 + ys.max() + 1
            boxes.append((cls, x1, y1, x2, y2))
        pix = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
        image = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)
        # exact labels survive an 8-bit round trip when written to disk
        image = (np.round(image * 255) / 255).astype(np.float32)
        out.append(Sample(image, to_normalized_boxes(pix, size, size), f"synth_{seed}_{i:04d}"))
    return out


def collate(samples: Sequence[Sample]) -> tuple:
    """Stack images to [N, 3, S, S] and return per-image pixel boxes (class, x1, y1, x2, y2)."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    return images, [s.pixel_boxes() for s in samples]
