"""Samples, annotations, target rasterization, splits, and synthetic scenes.

Annotations come as bounding boxes for balls (converted to filled ellipses
inscribed in the box) and ground-contact points for goalposts (converted to
filled circles of radius 20 px). Geometry uses pixel centers at +0.5: a pixel
belongs to a shape iff its center satisfies the shape inequality.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .imageio import load_image_ppm

BALL = 1
GOALPOST = 2
GOALPOST_FOOT_RADIUS = 20.0


@dataclass(frozen=True)
class Annotation:
    """A ball bounding box (x1, y1 exclusive) or a goalpost foot point (x0, y0)."""

    class_id: int
    x0: int
    y0: int
    x1: int | None = None
    y1: int | None = None

    def __post_init__(self):
        if self.class_id < 1:
            raise ShapeError(f"class_id must be >= 1, got {self.class_id}")
        if self.is_box and (self.x1 <= self.x0 or self.y1 <= self.y0):
            raise ShapeError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def is_box(self) -> bool:
        return self.x1 is not None and self.y1 is not None


@dataclass
class Sample:
    """An RGB image tensor (1, 3, H, W) in [0, 1] plus its class-index mask (H, W)."""

    image: np.ndarray
    target: np.ndarray
    name: str = ""


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    validation: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def rasterize_targets(annotations, height: int, width: int, classes: int) -> np.ndarray:
    """Burn annotations into a (H, W) class-index mask; ball pixels win overlaps."""
    mask = np.zeros((height, width), dtype=np.uint8)
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    for ann in annotations:
        if ann.class_id >= classes:
            raise ShapeError(f"class_id {ann.class_id} needs classes > {ann.class_id}, got {classes}")
        if ann.is_box:
            if ann.x0 < 0 or ann.y0 < 0 or ann.x1 > width or ann.y1 > height:
                raise ShapeError(f"box ({ann.x0},{ann.y0},{ann.x1},{ann.y1}) outside {width}x{height}")
            cx, cy = (ann.x0 + ann.x1) / 2.0, (ann.y0 + ann.y1) / 2.0
            a, b = (ann.x1 - ann.x0) / 2.0, (ann.y1 - ann.y0) / 2.0
            inside = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
        else:
            if not (0 <= ann.x0 < width and 0 <= ann.y0 < height):
                raise ShapeError(f"point ({ann.x0},{ann.y0}) outside {width}x{height}")
            cx, cy = ann.x0 + 0.5, ann.y0 + 0.5
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= GOALPOST_FOOT_RADIUS**2
        if ann.class_id == BALL:
            mask[inside] = BALL
        else:
            mask[inside & (mask != BALL)] = ann.class_id
    return mask


def split_dataset(samples, ratios=(0.75, 0.15, 0.10), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle then contiguous train/validation/test split.

    Non-final part sizes are floored; the remainder goes to the test set.
    """
    if not samples:
        raise ShapeError("cannot split an empty sample list")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ShapeError(f"ratios must be three values summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    n_train = int(len(samples) * ratios[0])
    n_val = int(len(samples) * ratios[1])
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


def hflip_sample(sample: Sample) -> Sample:
    return Sample(
        image=sample.image[:, :, :, ::-1].copy(),
        target=sample.target[:, ::-1].copy(),
        name=sample.name + "~flip" if sample.name else "",
    )


def augment_hflip(split: DatasetSplit) -> DatasetSplit:
    """Double every set by appending the horizontally mirrored samples."""

    def doubled(samples):
        return list(samples) + [hflip_sample(s) for s in samples]

    return DatasetSplit(doubled(split.train), doubled(split.validation), doubled(split.test))


# --- synthetic scenes --------------------------------------------------------


def _fill_disk(image, cx, cy, radius, color, rng, noise=0.02):
    h, w = image.shape[1], image.shape[2]
    y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
    x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
    ys = np.arange(y0, y1)[:, None]
    xs = np.arange(x0, x1)[None, :]
    inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= (radius + 0.5) ** 2
    patch = image[:, y0:y1, x0:x1]
    values = color[:, None, None] + rng.normal(0.0, noise, (3,) + inside.shape)
    patch[:, inside] = values[:, inside]


def _fill_rect(image, x0, y0, x1, y1, color, rng, noise=0.02):
    region = image[:, y0:y1, x0:x1]
    region[...] = color[:, None, None] + rng.normal(0.0, noise, region.shape)


def _white(rng):
    return np.array([rng.uniform(0.82, 0.98)] * 3) + rng.normal(0.0, 0.015, 3)


def _synth_scene(rng: np.random.Generator, height: int, width: int, classes: int):
    image = np.empty((3, height, width), dtype=np.float64)
    base = np.array([rng.uniform(0.03, 0.16), rng.uniform(0.35, 0.60), rng.uniform(0.03, 0.14)])
    shade = np.linspace(rng.uniform(0.85, 0.95), rng.uniform(1.0, 1.15), height)
    image[:] = base[:, None, None] * shade[None, :, None]
    image += rng.normal(0.0, 0.035, image.shape)

    # white field lines and patches share the ball's colors on purpose, so a
    # per-pixel color classifier cannot separate them from the ball
    for _ in range(rng.integers(0, 3)):
        thickness = int(rng.integers(1, 3))
        if rng.random() < 0.5:
            y = int(rng.integers(0, height - thickness))
            _fill_rect(image, 0, y, width, y + thickness, _white(rng), rng)
        else:
            x = int(rng.integers(0, width - thickness))
            _fill_rect(image, x, 0, x + thickness, height, _white(rng), rng)
    for _ in range(rng.integers(1, 4)):
        if rng.random() < 0.5:
            length = int(rng.integers(width // 8, width // 3))
            thickness = int(rng.integers(1, 4))
            x = int(rng.integers(0, width - length))
            y = int(rng.integers(0, height - thickness))
            _fill_rect(image, x, y, x + length, y + thickness, _white(rng), rng)
        else:
            side = int(rng.integers(2, 6))
            x = int(rng.integers(0, width - side))
            y = int(rng.integers(0, height - side))
            _fill_rect(image, x, y, x + side, y + side, _white(rng), rng)

    annotations = []
    if classes > GOALPOST and rng.random() < 0.8:
        stripe_w = int(rng.integers(2, 5))
        gx = int(rng.integers(1, width - stripe_w - 1))
        foot_y = int(rng.integers(int(0.5 * height), height - 1))
        _fill_rect(image, gx, 0, gx + stripe_w, foot_y + 1, _white(rng), rng)
        annotations.append(Annotation(GOALPOST, gx + stripe_w // 2, foot_y))

    max_radius = min(10, height // 4 - 1, width // 4 - 1)
    radius = int(rng.integers(5, max_radius + 1))
    cx = int(rng.integers(radius, width - radius - 1))
    cy = int(rng.integers(radius, height - radius - 1))
    _fill_disk(image, cx, cy, radius, _white(rng), rng)
    for _ in range(rng.integers(1, 4)):  # dark pattern spots on the ball
        angle = rng.uniform(0.0, 2 * np.pi)
        dist = rng.uniform(0.0, 0.6 * radius)
        sx = int(round(cx + dist * np.cos(angle)))
        sy = int(round(cy + dist * np.sin(angle)))
        _fill_disk(image, sx, sy, max(1, radius // 4), np.full(3, rng.uniform(0.05, 0.30)), rng)
    annotations.insert(0, Annotation(BALL, cx - radius, cy - radius, cx + radius + 1, cy + radius + 1))

    return np.clip(image, 0.0, 1.0).astype(np.float32)[None], annotations


def synth_generate(n: int, height: int, width: int, seed: int = 0, classes: int = 2) -> list[Sample]:
    """Deterministic synthetic dataset: green field, ball-colored distractors,
    one patterned white ball per image, optional goalpost stripe when classes > 2."""
    if n < 1:
        raise ShapeError("need at least one sample")
    rng = np.random.default_rng(seed)
    samples = []
    for index in range(n):
        image, annotations = _synth_scene(rng, height, width, classes)
        target = rasterize_targets(annotations, height, width, classes)
        samples.append(Sample(image, target, name=f"synth{index:04d}"))
    return samples


# --- annotation CSV and dataset manifest --------------------------------------

_CSV_FIELDS = ("image", "class", "x0", "y0", "x1", "y1")


def write_annotations_csv(path, annotations_by_image: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for image_name, annotations in annotations_by_image.items():
            for ann in annotations:
                row = [image_name, ann.class_id, ann.x0, ann.y0]
                row += [ann.x1, ann.y1] if ann.is_box else ["", ""]
                writer.writerow(row)


def read_annotations_csv(path) -> dict:
    annotations: dict[str, list[Annotation]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != _CSV_FIELDS:
            raise FormatError(f"{path}: expected header {','.join(_CSV_FIELDS)}")
        for line, row in enumerate(reader, start=2):
            try:
                boxed = row["x1"] not in ("", None)
                ann = Annotation(
                    class_id=int(row["class"]),
                    x0=int(row["x0"]),
                    y0=int(row["y0"]),
                    x1=int(row["x1"]) if boxed else None,
                    y1=int(row["y1"]) if boxed else None,
                )
            except (TypeError, ValueError, ShapeError) as exc:
                raise FormatError(f"{path}:{line}: bad annotation row: {exc}") from None
            annotations.setdefault(row["image"], []).append(ann)
    return annotations


def load_manifest(manifest_path, annotations_path=None, classes: int = 2) -> list[Sample]:
    """Load a dataset from a manifest of image paths (relative to the manifest)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    if annotations_path is None:
        annotations_path = root / "annotations.csv"
    annotations = read_annotations_csv(annotations_path)
    samples = []
    with open(manifest_path) as fh:
        for raw in fh:
            name = raw.strip()
            if not name or name.startswith("#"):
                continue
            image = load_image_ppm(root / name)
            target = rasterize_targets(
                annotations.get(name, []), image.shape[2], image.shape[3], classes
            )
            samples.append(Sample(image, target, name=name))
    if not samples:
        raise FormatError(f"{manifest_path}: no image entries")
    return samples
