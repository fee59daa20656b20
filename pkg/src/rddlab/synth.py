"""Procedural multi-class segmentation scenes.

Each sample is a pure function of ``(seed, split, index)``. Foreground classes
come in colour pairs: odd classes are flat, even classes carry a stripe
texture of the same hue, so telling them apart needs spatial context. Image
blur softens object boundaries without touching the labels, and a small
fraction of labels is flipped to a wrong class.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

SPLITS = {"train": 0, "val": 1}
SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


@dataclass
class SceneConfig:
    image_size: int = 64
    num_classes: int = 5
    shapes_min: int = 2
    shapes_max: int = 5
    noise_rate: float = 0.05
    boundary_blur: int = 1
    texture_noise: float = 0.2
    stripe_period: int = 6
    hflip: bool = False
    seed: int = 0

    def validate(self, downsample_factor: int = 1) -> None:
        if self.image_size < 1:
            raise ValueError("image_size must be positive")
        if self.image_size % downsample_factor:
            raise ValueError(
                f"image_size {self.image_size} not divisible by downsampling factor {downsample_factor}"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.noise_rate < 0.5:
            raise ValueError(f"noise_rate must lie in [0, 0.5), got {self.noise_rate}")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ValueError("need 0 <= shapes_min <= shapes_max")
        if self.boundary_blur < 0:
            raise ValueError("boundary_blur must be >= 0")
        if self.stripe_period < 2:
            raise ValueError("stripe_period must be >= 2")


class SegBatch(NamedTuple):
    images: np.ndarray  # [B, 3, H, W] float64 in [0, 1]
    labels: np.ndarray  # [B, H, W] int64
    clean_labels: np.ndarray  # [B, H, W] int64
    indices: np.ndarray  # [B] sample indices


@dataclass
class Shape:
    kind: str
    cls: int
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0
    jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)


def class_color(cls: int, num_classes: int) -> np.ndarray:
    if cls == 0:
        return np.array([0.45, 0.45, 0.45])
    n_hues = max(1, (num_classes - 1 + 1) // 2)
    hue = ((cls - 1) // 2) / n_hues
    return np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85))


def is_striped(cls: int) -> bool:
    return cls > 0 and cls % 2 == 0


def _shape_mask(shape: Shape, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - shape.cy, xx - shape.cx
    c, s = np.cos(shape.angle), np.sin(shape.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape.kind == "ellipse":
        return (u / shape.rx) ** 2 + (v / shape.ry) ** 2 <= 1.0
    if shape.kind == "rectangle":
        return (np.abs(u) <= shape.rx) & (np.abs(v) <= shape.ry)
    if shape.kind == "triangle":
        # apex up in the rotated frame, base at v = +ry
        t = (v + shape.ry) / (2 * shape.ry)
        return (t >= 0) & (t <= 1) & (np.abs(u) <= shape.rx * t)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return img
    k = 2 * radius + 1
    p = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    c = np.cumsum(np.cumsum(p, axis=1), axis=2)
    c = np.pad(c, ((0, 0), (1, 0), (1, 0)))
    return (c[:, k:, k:] - c[:, :-k, k:] - c[:, k:, :-k] + c[:, :-k, :-k]) / (k * k)


def render_scene(shapes: list[Shape], config: SceneConfig, rng: np.random.Generator):
    """Paint shapes (later ones on top) and return (image [3,H,W], labels [H,W])."""
    size = config.image_size
    C = config.num_classes
    # low-frequency background texture
    coarse = rng.normal(0.0, 0.06, size=(3, 4, 4))
    rep = -(-size // 4)
    bg = np.kron(coarse, np.ones((rep, rep)))[:, :size, :size]
    img = class_color(0, C)[:, None, None] + _box_blur(bg, max(1, size // 16))
    labels = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for sh in shapes:
        if not 0 <= sh.cls < C:
            raise ValueError(f"shape class {sh.cls} out of range for {C} classes")
        m = _shape_mask(sh, size)
        color = np.clip(class_color(sh.cls, C) + np.asarray(sh.jitter), 0, 1)
        layer = np.broadcast_to(color[:, None, None], img.shape)
        if is_striped(sh.cls):
            phase = 2 * np.pi * (xx * np.cos(sh.angle) + yy * np.sin(sh.angle)) / config.stripe_period
            layer = layer * (0.55 + 0.45 * (np.sin(phase) > 0))
        img = np.where(m[None], layer, img)
        labels[m] = sh.cls
    img = _box_blur(img, config.boundary_blur)
    if config.texture_noise > 0:
        img = img + rng.normal(0.0, config.texture_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), labels


def sample_shapes(config: SceneConfig, rng: np.random.Generator) -> list[Shape]:
    size = config.image_size
    n = int(rng.integers(config.shapes_min, config.shapes_max + 1))
    shapes = []
    for _ in range(n):
        shapes.append(
            Shape(
                kind=SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
                cls=int(rng.integers(1, config.num_classes)),
                cy=float(rng.uniform(0, size)),
                cx=float(rng.uniform(0, size)),
                ry=float(rng.uniform(0.1, 0.3) * size),
                rx=float(rng.uniform(0.1, 0.3) * size),
                angle=float(rng.uniform(0, np.pi)),
                jitter=tuple(rng.normal(0.0, 0.05, size=3)),
            )
        )
    return shapes


def inject_label_noise(labels: np.ndarray, rho: float, seed, num_classes: int) -> np.ndarray:
    """Flip each pixel with probability rho to a uniformly chosen wrong class."""
    if not 0 <= rho < 0.5:
        raise ValueError(f"noise rate must lie in [0, 0.5), got {rho}")
    labels = np.asarray(labels)
    if rho == 0:
        return labels.copy()
    rng = np.random.default_rng(seed)
    flip = rng.random(labels.shape) < rho
    shift = rng.integers(1, num_classes, size=labels.shape)
    return np.where(flip, (labels + shift) % num_classes, labels)


def _split_code(split: str) -> int:
    try:
        return SPLITS[split]
    except KeyError:
        raise ValueError(f"split must be one of {sorted(SPLITS)}, got {split!r}") from None


def generate(config: SceneConfig, split: str, index: int):
    """Return (image [3,H,W], noisy labels [H,W], clean labels [H,W])."""
    config.validate()
    code = _split_code(split)
    if index < 0:
        raise ValueError("index must be >= 0")
    rng = np.random.default_rng([config.seed, code, index])
    img, clean = render_scene(sample_shapes(config, rng), config, rng)
    noisy = inject_label_noise(clean, config.noise_rate, [config.seed, code, index, 1], config.num_classes)
    return img, noisy, clean


def materialize(config: SceneConfig, split: str, count: int) -> SegBatch:
    items = [generate(config, split, i) for i in range(count)]
    return SegBatch(
        images=np.stack([it[0] for it in items]),
        labels=np.stack([it[1] for it in items]),
        clean_labels=np.stack([it[2] for it in items]),
        indices=np.arange(count),
    )


def epoch_order(count: int, split: str, seed: int, epoch: int) -> np.ndarray:
    if split == "val":
        return np.arange(count)
    return np.random.default_rng([seed, epoch, 7]).permutation(count)


def flip_mask(n: int, seed: int, epoch: int, batch_no: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, batch_no, 11]).random(n) < 0.5


def apply_hflip(batch: SegBatch, mask: np.ndarray) -> SegBatch:
    if not mask.any():
        return batch
    imgs, lab, cl = batch.images.copy(), batch.labels.copy(), batch.clean_labels.copy()
    imgs[mask] = imgs[mask][..., ::-1]
    lab[mask] = lab[mask][..., ::-1]
    cl[mask] = cl[mask][..., ::-1]
    return SegBatch(imgs, lab, cl, batch.indices)


def dataset(
    config: SceneConfig,
    split: str,
    count: int,
    batch_size: int = 8,
    epoch: int = 0,
    shuffle_seed: int = 0,
) -> Iterator[SegBatch]:
    """Yield batches for one epoch; the last batch may be short."""
    if count < 1:
        raise ValueError("count must be >= 1")
    _split_code(split)
    order = epoch_order(count, split, shuffle_seed, epoch)
    for b, start in enumerate(range(0, count, batch_size)):
        idx = order[start : start + batch_size]
        items = [generate(config, split, int(i)) for i in idx]
        batch = SegBatch(
            np.stack([it[0] for it in items]),
            np.stack([it[1] for it in items]),
            np.stack([it[2] for it in items]),
            idx,
        )
        if config.hflip and split == "train":
            batch = apply_hflip(batch, flip_mask(len(idx), shuffle_seed, epoch, b))
        yield batch


def dump_dataset(config: SceneConfig, split: str, count: int, out_dir: str | Path) -> Path:
    """Write ``{split}_{index:05d}.png`` images and ``{split}_{index:05d}_label.pgm`` maps.

    Label PGMs store the raw class index as the grey value.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        img, noisy, _ = generate(config, split, i)
        rgb = np.rint(np.transpose(img, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out / f"{split}_{i:05d}.png")
        Image.fromarray(noisy.astype(np.uint8), mode="L").save(out / f"{split}_{i:05d}_label.pgm")
    return out
