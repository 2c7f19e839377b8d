"""Synthetic Voronoi scenes and the test-time batch stream."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .corruptions import NONE, Corruption, apply
from .images import read_pgm, write_pgm
from .rng import box_muller, make_rng

CLASS_NAMES = ("agriculture", "rangeland", "forest", "water", "barren", "urban")

# Per class: base RGB, texture amplitude, spatial frequency (cycles/pixel),
# orientation (degrees).  Pairs of classes share close base colours and
# differ mostly by texture.
CLASS_STYLES = (
    ((0.52, 0.50, 0.22), 0.10, 0.20, 0.0),
    ((0.46, 0.47, 0.28), 0.05, 0.06, 45.0),
    ((0.16, 0.34, 0.16), 0.08, 0.25, 90.0),
    ((0.12, 0.20, 0.38), 0.03, 0.04, 0.0),
    ((0.58, 0.50, 0.40), 0.05, 0.10, 135.0),
    ((0.42, 0.42, 0.44), 0.12, 0.30, 0.0),
)
GRAIN_STD = 0.02
COLOR_JITTER = 0.06  # per-scene, per-class uniform offset on the base colour


def class_style(k: int):
    if k < len(CLASS_STYLES):
        return CLASS_STYLES[k]
    rng = make_rng(("style", k))
    return (tuple(rng.uniform(0.1, 0.6, 3)), rng.uniform(0.03, 0.12), rng.uniform(0.03, 0.3),
            rng.uniform(0, 180))


@dataclass
class Scene:
    image: np.ndarray  # (1, 3, h, w) in [0, 1]
    mask: np.ndarray  # (h, w) int labels

    def __post_init__(self):
        if self.image.shape[2:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} dims differ")


def generate_scene(seed, num_classes: int = 6, h: int = 64, w: int = 64, cells: int = 12) -> Scene:
    """Voronoi partition of ``cells`` sites painted with class textures.

    The first ``num_classes`` cells receive a permutation of all classes so
    every class is present; remaining cells draw classes uniformly.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if h < 32 or w < 32 or h % 4 or w % 4:
        raise ValueError(f"scene size must be >= 32 and divisible by 4, got {h}x{w}")
    rng = make_rng(("scene", seed))
    sites = rng.random((cells, 2)) * (h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    owner = d.argmin(axis=0)
    first = rng.permutation(num_classes)[:cells]
    rest = rng.integers(0, num_classes, size=max(cells - len(first), 0))
    cell_class = np.concatenate([first, rest]).astype(np.int64)
    mask = cell_class[owner]

    image = np.empty((3, h, w), dtype=np.float64)
    phases = rng.random(num_classes) * 2 * np.pi
    jitter = COLOR_JITTER * rng.uniform(-1.0, 1.0, (num_classes, 3))
    for k in np.unique(mask):
        base, amp, freq, angle = class_style(int(k))
        theta = np.deg2rad(angle)
        wave = amp * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phases[k])
        sel = mask == k
        for c in range(3):
            image[c][sel] = base[c] + jitter[k, c] + wave[sel]
    image += GRAIN_STD * box_muller(rng, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(T.DTYPE)[None]
    return Scene(image, mask.astype(np.int64))


@dataclass
class Dataset:
    splits: dict  # name -> list[Scene]
    num_classes: int = 6

    def __getitem__(self, name):
        return self.splits[name]


DEFAULT_SPLITS = (("train", 200), ("val", 20), ("test", 80))


def make_dataset(seed: int = 0, splits=DEFAULT_SPLITS, num_classes: int = 6, h: int = 64,
                 w: int = 64, cells: int = 12) -> Dataset:
    """Disjoint splits over one scene index range, in the order given."""
    out = {}
    start = 0
    for name, count in splits:
        out[name] = [generate_scene((seed, i), num_classes, h, w, cells) for i in range(start, start + count)]
        start += count
    return Dataset(out, num_classes)


@dataclass
class StreamBatch:
    images: np.ndarray  # (B, 3, h, w)
    masks: np.ndarray  # (B, h, w)
    index: int  # batch index t, starting at 0
    scene_ids: list = field(default_factory=list)


class Stream:
    """Ordered, fixed sequence of batches; iterate it more than once freely."""

    def __init__(self, batches: list):
        self.batches = batches

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)

    def __getitem__(self, i):
        return self.batches[i]


def make_stream(scenes, batch_size: int = 8, corruption: Corruption = NONE, order_seed: int = 0) -> Stream:
    """Shuffle scenes, corrupt each with seed ``corruption.seed ^ scene_index``, batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not scenes:
        raise ValueError("cannot build a stream from an empty scene list")
    order = make_rng(("order", order_seed)).permutation(len(scenes))
    batches = []
    for t, start in enumerate(range(0, len(scenes), batch_size)):
        ids = [int(i) for i in order[start:start + batch_size]]
        images = [apply(scenes[i].image, replace(corruption, seed=corruption.seed ^ i)) for i in ids]
        batches.append(StreamBatch(
            images=np.concatenate(images, axis=0),
            masks=np.stack([scenes[i].mask for i in ids]),
            index=t,
            scene_ids=ids,
        ))
    return Stream(batches)


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/images/<split>_<i>.dtns, <dir>/masks/<split>_<i>.pgm, manifest.json

MANIFEST_VERSION = 1


def save_dataset(dataset: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = {"manifest_version": MANIFEST_VERSION, "num_classes": dataset.num_classes,
                "class_names": list(CLASS_NAMES[:dataset.num_classes]), "splits": {}}
    for name, scenes in dataset.splits.items():
        entries = []
        for i, s in enumerate(scenes):
            stem = f"{name}_{i:04d}"
            T.write_tensor(s.image, root / "images" / f"{stem}.dtns")
            write_pgm(s.mask, root / "masks" / f"{stem}.pgm")
            entries.append({"image": f"images/{stem}.dtns", "mask": f"masks/{stem}.pgm"})
        manifest["splits"][name] = entries
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    splits = {}
    for name, entries in manifest["splits"].items():
        splits[name] = [Scene(T.read_tensor(root / e["image"]), read_pgm(root / e["mask"]).astype(np.int64))
                        for e in entries]
    return Dataset(splits, int(manifest["num_classes"]))
