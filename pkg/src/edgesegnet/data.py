"""Datasets: CamVid-style image/label folders, synthetic rectangles, palettes
and label-map rendering."""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .config import data_path
from .errors import ArgumentError, DataError
from .tensor import resize_bilinear

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")
# CamVid ships labels as "<frame>_L.png" next to "<frame>.png".
LABEL_STEM_SUFFIXES = ("_L",)


@dataclass
class Palette:
    names: List[str]
    colors: np.ndarray  # (K, 3) uint8
    ignore_label: Optional[int] = None

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.names) != len(self.colors):
            raise DataError("palette names and colors differ in length")
        codes = self._codes(self.colors)
        if len(set(codes.tolist())) != len(codes):
            raise DataError("palette colors must be unique")
        self._order = np.argsort(codes)
        self._sorted = codes[self._order]

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @staticmethod
    def _codes(rgb: np.ndarray) -> np.ndarray:
        rgb = rgb.astype(np.int64)
        return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]

    def lookup(self, rgb: np.ndarray) -> Tuple[np.ndarray, int]:
        """Map an (h, w, 3) RGB array to class indices.

        Returns ``(indices, n_unknown)``; unknown pixels are set to -1.
        """
        codes = self._codes(rgb)
        pos = np.clip(np.searchsorted(self._sorted, codes), 0, len(self._sorted) - 1)
        hit = self._sorted[pos] == codes
        idx = np.where(hit, self._order[pos], -1)
        return idx, int((~hit).sum())

    @classmethod
    def from_dict(cls, d: dict) -> "Palette":
        classes = sorted(d["classes"], key=lambda c: c["index"])
        if [c["index"] for c in classes] != list(range(len(classes))):
            raise DataError("palette class indices must be dense 0..K-1")
        return cls([c["name"] for c in classes], [c["rgb"] for c in classes], d.get("ignore_label"))

    def to_dict(self) -> dict:
        return {
            "ignore_label": self.ignore_label,
            "classes": [
                {"index": i, "name": n, "rgb": [int(v) for v in c]}
                for i, (n, c) in enumerate(zip(self.names, self.colors))
            ],
        }


def load_palette(path) -> Palette:
    return Palette.from_dict(json.loads(Path(path).read_text()))


def camvid_palette() -> Palette:
    return load_palette(data_path("camvid32.json"))


def class_colors(num_classes: int) -> np.ndarray:
    """Evenly spaced hues as float RGB in [0, 1], shape (K, 3)."""
    return np.array(
        [colorsys.hsv_to_rgb(k / num_classes, 0.7, 0.8) for k in range(num_classes)],
        dtype=np.float64,
    )


def synth_palette(num_classes: int) -> Palette:
    names = ["background"] + [f"class{k}" for k in range(1, num_classes)]
    return Palette(names, np.round(class_colors(num_classes) * 255).astype(np.uint8))


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, h, w) float32 in [0, 1]
    label: np.ndarray  # (1, h, w) int64
    name: str = ""


@dataclass
class Dataset:
    samples: List[Sample]
    split: str = "train"
    skipped: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def images(self, idx: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.concatenate([self.samples[i].image for i in idx], axis=0)

    def labels(self, idx: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.concatenate([self.samples[i].label for i in idx], axis=0)


# -- images ------------------------------------------------------------------------


def read_rgb(path) -> np.ndarray:
    """Decode an 8-bit image to an (h, w, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def image_to_tensor(rgb: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(rgb.transpose(2, 0, 1)[None], dtype=np.float32) / np.float32(255)


def write_image_png(image: np.ndarray, path) -> None:
    """Save a (1, 3, h, w) or (3, h, w) tensor in [0, 1] as an 8-bit PNG."""
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    rgb = np.clip(np.round(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path, format="PNG")


def resize_nearest(label: np.ndarray, out_hw) -> np.ndarray:
    h, w = label.shape[-2:]
    oh, ow = out_hw
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return label[..., rows[:, None], cols[None, :]]


def read_label(path, palette: Palette) -> np.ndarray:
    """Decode a label image to an (h, w) index map."""
    with Image.open(path) as im:
        if im.mode in ("P", "L"):
            idx = np.asarray(im, dtype=np.int64)
            bad = idx >= palette.num_classes
            if palette.ignore_label is not None:
                bad &= idx != palette.ignore_label
            if bad.any():
                raise DataError(f"{path}: {int(bad.sum())} pixels have indices outside the palette")
            return idx
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    idx, unknown = palette.lookup(rgb)
    if unknown:
        raise DataError(f"{path}: {unknown} pixels have colors absent from the palette")
    return idx


def write_label_png(labels: np.ndarray, palette: Palette, path) -> None:
    """Render a label map as an RGB PNG using the palette colors."""
    labels = np.asarray(labels)
    if labels.ndim == 3:
        if labels.shape[0] != 1:
            raise DataError(f"expected a single label map, got shape {labels.shape}")
        labels = labels[0]
    if labels.size and (labels.min() < 0 or labels.max() >= palette.num_classes):
        raise DataError(f"labels must lie in [0, {palette.num_classes})")
    Image.fromarray(palette.colors[labels], "RGB").save(path, format="PNG")


def _stems(directory: Path, strip=()) -> dict:
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES or not p.is_file():
            continue
        stem = p.stem
        for suf in strip:
            if stem.endswith(suf):
                stem = stem[: -len(suf)]
        out[stem] = p
    return out


def load_dataset(image_dir, label_dir, palette: Palette, target_size, split: str = "train") -> Dataset:
    """Pair images and labels by file stem, decode and resize them.

    Images are resized bilinearly and labels by nearest neighbour to
    ``target_size`` = (h, w).  Stems present in only one directory are
    skipped with a warning.
    """
    images = _stems(Path(image_dir))
    labels = _stems(Path(label_dir), LABEL_STEM_SUFFIXES)
    unmatched = sorted(set(images) ^ set(labels))
    if unmatched:
        log.warning("skipping %d unmatched stems: %s", len(unmatched), ", ".join(unmatched[:10]))
    th, tw = target_size
    samples = []
    for stem in sorted(set(images) & set(labels)):
        img = image_to_tensor(read_rgb(images[stem]))
        lab = read_label(labels[stem], palette)
        if img.shape[2:] != lab.shape:
            raise DataError(f"{stem}: image {img.shape[2:]} and label {lab.shape} extents differ")
        if img.shape[2:] != (th, tw):
            img = np.clip(resize_bilinear(img, (th, tw)), 0, 1).astype(np.float32)
            lab = resize_nearest(lab, (th, tw))
        samples.append(Sample(img, lab[None].astype(np.int64), stem))
    return Dataset(samples, split, unmatched)


def synth_dataset(
    seed: int,
    count: int,
    h: int,
    w: int,
    num_classes: int,
    noise: float = 0.05,
    split: str = "train",
    reduction_factor: int = 16,
) -> Dataset:
    """Rectangles on a background, one per foreground class.

    Sample ``i`` is drawn from ``numpy.random.default_rng([seed, i])``
    (PCG64 seeded through SeedSequence): for classes 1..K-1 in order, a
    rectangle with sides in [extent/4, extent/2] is painted at a uniform
    position, later classes over earlier ones.  Pixels take their class
    color (evenly spaced hues) plus Gaussian noise of std ``noise``, then
    are clipped to [0, 1].
    """
    if num_classes < 2:
        raise ArgumentError(f"num_classes must be >= 2, got {num_classes}")
    if h % reduction_factor or w % reduction_factor or h < 1 or w < 1:
        raise ArgumentError(f"extents {h}x{w} must be positive multiples of {reduction_factor}")
    colors = class_colors(num_classes)
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        label = np.zeros((h, w), dtype=np.int64)
        for k in range(1, num_classes):
            rh = int(rng.integers(max(h // 4, 1), h // 2 + 1))
            rw = int(rng.integers(max(w // 4, 1), w // 2 + 1))
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            label[y0 : y0 + rh, x0 : x0 + rw] = k
        image = colors[label].transpose(2, 0, 1)
        if noise > 0:
            image = image + noise * rng.standard_normal(image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
        samples.append(Sample(np.ascontiguousarray(image), label[None], f"synth_{seed}_{i}"))
    return Dataset(samples, split)


def synth_split(seed: int, n_train: int, n_val: int, h: int, w: int, num_classes: int, noise: float = 0.05):
    """Train / held-out validation sets: samples ``0..n_train-1`` and the next ``n_val``."""
    full = synth_dataset(seed, n_train + n_val, h, w, num_classes, noise)
    return Dataset(full.samples[:n_train], "train"), Dataset(full.samples[n_train:], "val")
