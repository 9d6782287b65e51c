"""
Procedural shape/texture dataset and the on-disk dataset format
(directory of VTF1 images + labels.csv with filename,label).
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from app.config import ViTConfig
from app.errors import ConfigError, DataError
from app.storage import load_tensor, read_csv, save_tensor, write_csv, write_json

logger = logging.getLogger(__name__)

NOISE_STD = 0.03


@dataclass
class Dataset:
    ids: List[str]
    images: np.ndarray  # (n, C, S, S) in [0, 1]
    labels: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.ids)

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.ids[:count], self.images[:count], self.labels[:count])


def _disk(yy, xx, cy, cx, r, rng):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2


def _square(yy, xx, cy, cx, r, rng):
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def _triangle(yy, xx, cy, cx, r, rng):
    top = cy - r
    return (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - top) * 0.6)


def _cross(yy, xx, cy, cx, r, rng):
    width = r / 3
    return ((np.abs(yy - cy) <= width) & (np.abs(xx - cx) <= r)) | ((np.abs(xx - cx) <= width) & (np.abs(yy - cy) <= r))


def _ring(yy, xx, cy, cx, r, rng):
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return (dist <= r) & (dist >= 0.6 * r)


def _stripes(direction: str):
    def pattern(yy, xx, cy, cx, r, rng):
        period = rng.uniform(0.15, 0.25)
        coord = {"h": yy, "v": xx, "d": (yy + xx) / np.sqrt(2)}[direction]
        return np.sin(2 * np.pi * coord / period + rng.uniform(0, 2 * np.pi)) > 0
    return pattern


def _checker(yy, xx, cy, cx, r, rng):
    period = rng.uniform(0.15, 0.25)
    return (np.floor((yy + cy) / period) + np.floor((xx + cx) / period)) % 2 == 0


def _blob(yy, xx, cy, cx, r, rng):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (r / 1.5) ** 2))


PATTERNS: Dict[int, Callable] = {
    0: _square, 1: _disk, 2: _triangle, 3: _stripes("h"), 4: _stripes("v"),
    5: _stripes("d"), 6: _checker, 7: _cross, 8: _ring, 9: _blob,
}


def render_sample(label: int, cfg: ViTConfig, rng: np.random.Generator) -> np.ndarray:
    side = cfg.image_side
    yy, xx = np.meshgrid((np.arange(side) + 0.5) / side, (np.arange(side) + 0.5) / side, indexing="ij")
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    radius = rng.uniform(0.2, 0.32)
    mask = PATTERNS[label](yy, xx, cy, cx, radius, rng).astype(float)
    background = rng.uniform(0.0, 0.3, size=(cfg.channels, 1, 1))
    foreground = rng.uniform(0.6, 1.0, size=(cfg.channels, 1, 1))
    image = background + (foreground - background) * mask[None]
    image = image + rng.normal(0.0, NOISE_STD, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_synthetic(cfg: ViTConfig, per_class: int, seed: int) -> Dataset:
    """Classes are interleaved (sample i has label i mod K) so any prefix stays balanced."""
    if cfg.num_classes > len(PATTERNS):
        raise ConfigError(f"Synthetic data offers {len(PATTERNS)} classes, config asks for {cfg.num_classes}")
    rng = np.random.default_rng(seed)
    count = per_class * cfg.num_classes
    labels = np.arange(count) % cfg.num_classes
    images = np.stack([render_sample(int(label), cfg, rng) for label in labels]) if count else \
        np.zeros((0, cfg.channels, cfg.image_side, cfg.image_side))
    ids = [f"sample_{i:05d}.vtf" for i in range(count)]
    return Dataset(ids, images, labels.astype(int))


def save_dataset(directory: Path, dataset: Dataset, manifest: dict):
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"Cannot create dataset directory {directory}: {exc}") from exc
    for name, image in zip(dataset.ids, dataset.images):
        save_tensor(directory / name, image)
    write_csv(directory / "labels.csv", ["filename", "label"], zip(dataset.ids, dataset.labels.tolist()))
    write_json(directory / "manifest.json", manifest)


def load_dataset(directory: Path, cfg: ViTConfig) -> Dataset:
    directory = Path(directory)
    rows = read_csv(directory / "labels.csv")
    if not rows:
        raise DataError(f"{directory}: labels.csv lists no samples")
    rows.sort(key=lambda row: row["filename"])
    expected = (cfg.channels, cfg.image_side, cfg.image_side)
    images, labels = [], []
    for row in rows:
        image = load_tensor(directory / row["filename"])
        if image.shape != expected:
            raise DataError(f"{row['filename']}: shape {image.shape} != {expected}")
        if np.any(image < 0) or np.any(image > 1):
            raise DataError(f"{row['filename']}: pixels outside [0, 1]")
        try:
            label = int(row["label"])
        except ValueError:
            raise DataError(f"{row['filename']}: label {row['label']!r} is not an integer")
        if not 0 <= label < cfg.num_classes:
            raise DataError(f"{row['filename']}: label {label} outside [0, {cfg.num_classes})")
        images.append(image)
        labels.append(label)
    logger.info("Loaded %d samples from %s", len(rows), directory)
    return Dataset([row["filename"] for row in rows], np.stack(images), np.array(labels, dtype=int))
