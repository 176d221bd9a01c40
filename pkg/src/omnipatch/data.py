"""Segmentation samples: a synthetic street-scene generator and a directory loader.

Directory layout for ``load_dataset``::

    root/images/<split>/<stem>.png|.jpg|.jpeg
    root/labels/<split>/<stem>.png        single-channel integer ids, 255 = ignore
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError

IGNORE_VALUE = 255
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Synthetic class roles in id order; ids >= len(ROLES) become small blobs.
ROLES = ("sky", "building", "road", "pole", "sidewalk", "vegetation", "car", "sign")
POLE_CLASS = ROLES.index("pole")

_BASE_COLORS = {
    "sky": (0.55, 0.70, 0.90),
    "building": (0.50, 0.46, 0.43),
    "road": (0.36, 0.36, 0.39),
    # deliberately close to building/road so thin poles stay ambiguous
    "pole": (0.52, 0.50, 0.47),
    "sidewalk": (0.66, 0.55, 0.60),
    "vegetation": (0.24, 0.50, 0.22),
    "car": (0.16, 0.22, 0.56),
    "sign": (0.86, 0.74, 0.16),
}


@dataclass
class SegmentationSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    labels: np.ndarray  # H x W int64, class id or ignore_value
    ignore_value: int = IGNORE_VALUE
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ConfigurationError(f"image must be H x W x 3, got {self.image.shape}")
        if self.labels.shape != self.image.shape[:2]:
            raise ConfigurationError(
                f"labels {self.labels.shape} do not match image {self.image.shape[:2]}"
            )

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape

    def valid_mask(self) -> np.ndarray:
        return self.labels != self.ignore_value


def _class_color(c: int) -> np.ndarray:
    if c < len(ROLES):
        return np.array(_BASE_COLORS[ROLES[c]])
    return np.random.default_rng(1000 + c).uniform(0.1, 0.9, size=3)


def _role_id(role: str, num_classes: int, fallback: int) -> int:
    c = ROLES.index(role)
    return c if c < num_classes else fallback


def _render_scene(rng: np.random.Generator, H: int, W: int, num_classes: int):
    labels = np.zeros((H, W), dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]
    road = ROLES.index("road")
    sidewalk = _role_id("sidewalk", num_classes, road)

    horizon = int(rng.uniform(0.38, 0.5) * H)
    curb = min(H - 1, horizon + max(2, int(rng.uniform(0.08, 0.14) * H)))

    # buildings: a skyline of blocks ending at the horizon
    x = 0
    while x < W:
        bw = int(rng.uniform(0.08, 0.25) * W) + 1
        if rng.random() < 0.8:
            top = int(rng.uniform(0.08, 0.32) * H)
            labels[top:horizon, x : x + bw] = ROLES.index("building")
        x += bw
    labels[horizon:curb] = sidewalk
    labels[curb:] = road

    if num_classes > ROLES.index("vegetation"):
        for _ in range(rng.integers(1, 4)):
            cy = horizon - rng.uniform(0.0, 0.1) * H
            cx = rng.uniform(0, W)
            ry, rx = rng.uniform(0.05, 0.1) * H, rng.uniform(0.04, 0.1) * W
            labels[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1] = ROLES.index("vegetation")

    if num_classes > ROLES.index("car"):
        for _ in range(rng.integers(0, 3)):
            ch, cw = int(rng.uniform(0.08, 0.14) * H), int(rng.uniform(0.1, 0.2) * W)
            y0 = int(rng.uniform(curb, max(curb + 1, H - ch)))
            x0 = int(rng.uniform(0, W - cw))
            labels[y0 : y0 + ch, x0 : x0 + cw] = ROLES.index("car")

    for c in range(len(ROLES), num_classes):
        if rng.random() < 0.7:
            cy, cx = rng.uniform(0.2, 0.9) * H, rng.uniform(0, W)
            r = rng.uniform(0.02, 0.05) * min(H, W) + 1
            labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = c

    # thin vertical poles, drawn last so they stay fully visible
    pw = max(1, round(W / 128))
    for _ in range(rng.integers(1, 4)):
        px = int(rng.uniform(0.02, 0.98) * (W - pw))
        top = int(rng.uniform(0.15, 0.32) * H)
        labels[top:curb, px : px + pw] = POLE_CLASS
        if num_classes > ROLES.index("sign") and rng.random() < 0.5:
            s = max(2, round(0.025 * H))
            labels[top : top + s, max(0, px - s // 2) : px + pw + s // 2] = ROLES.index("sign")
    return labels


def _paint(rng: np.random.Generator, labels: np.ndarray, num_classes: int) -> np.ndarray:
    H, W = labels.shape
    palette = np.stack([_class_color(c) for c in range(num_classes)])
    palette = palette + rng.uniform(-0.05, 0.05, size=palette.shape)
    image = palette[labels]
    shade = np.linspace(1.04, 0.94, H)[:, None, None]
    image = image * shade + rng.normal(0.0, 0.04, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(
    num_images: int, size: tuple[int, int], num_classes: int, seed: int
) -> list[SegmentationSample]:
    """Deterministic street-like scenes whose labels are the painted geometry."""
    if num_images < 1:
        raise ConfigurationError("num_images must be positive")
    if num_classes < 4:
        raise ConfigurationError("synthetic scenes need at least 4 classes")
    H, W = (int(v) for v in size)
    if H < 16 or W < 16:
        raise ConfigurationError(f"image size {size} too small")
    samples = []
    for i in range(num_images):
        rng = np.random.default_rng([seed, i])
        labels = _render_scene(rng, H, W, num_classes)
        image = _paint(rng, labels, num_classes)
        samples.append(SegmentationSample(image, labels, IGNORE_VALUE, f"synthetic_{seed}_{i:05d}"))
    return samples


def _stems(directory: Path, suffixes) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in suffixes}


def _read_pair(image_path: Path, label_path: Path, resolution, num_classes):
    H, W = resolution
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("RGB").resize((W, H), Image.BILINEAR), dtype=np.float32) / 255.0
    with Image.open(label_path) as lb:
        if lb.mode not in ("L", "P", "I", "I;16"):
            raise IngestionError("label rasters must be single-channel", [label_path.name])
        labels = np.asarray(lb.resize((W, H), Image.NEAREST)).astype(np.int64)
    if num_classes is not None:
        bad = (labels >= num_classes) & (labels != IGNORE_VALUE)
        if bad.any():
            raise IngestionError(f"label ids outside [0, {num_classes})", [label_path.name])
    return SegmentationSample(image, labels, IGNORE_VALUE, image_path.stem)


def load_dataset(
    root, split: str, resolution: tuple[int, int], num_classes: int | None = None, workers: int = 1
) -> list[SegmentationSample]:
    root = Path(root)
    image_dir, label_dir = root / "images" / split, root / "labels" / split
    for d in (image_dir, label_dir):
        if not d.is_dir():
            raise IngestionError(f"missing directory {d}")
    images = _stems(image_dir, IMAGE_SUFFIXES)
    labels = _stems(label_dir, (".png",))
    if not images and not labels:
        raise IngestionError(f"no image/label files under {root} for split {split!r}")
    offenders = sorted(
        [f"images/{split}/{images[s].name}" for s in images.keys() - labels.keys()]
        + [f"labels/{split}/{labels[s].name}" for s in labels.keys() - images.keys()]
    )
    if offenders:
        raise IngestionError("unpaired files", offenders)
    stems = sorted(images)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(
            pool.map(lambda s: _read_pair(images[s], labels[s], resolution, num_classes), stems)
        )


def write_dataset(samples, root, split: str) -> None:
    """Write samples in the directory layout read by ``load_dataset``."""
    root = Path(root)
    (root / "images" / split).mkdir(parents=True, exist_ok=True)
    (root / "labels" / split).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = s.name or f"{i:05d}"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / "images" / split / f"{stem}.png")
        Image.fromarray(s.labels.astype(np.uint8), mode="L").save(root / "labels" / split / f"{stem}.png")
