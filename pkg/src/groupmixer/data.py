"""
Image-folder ingestion for BreakHis-style trees::

    root/<magnification>/<benign|malignant>/*.png

plus seeded train/val/test splitting, flip augmentation and batching.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import EmptyDatasetError, ImageDecodeError, MissingDirectoryError, UsageError

MAGNIFICATIONS = ("40X", "100X", "200X", "400X")
CLASSES = ("benign", "malignant")
IMAGE_SUFFIXES = (".png",)
DEFAULT_FRACTIONS = (0.70, 0.20, 0.10)

# e.g. SOB_B_A-14-22549AB-40-001.png -> patient "14-22549AB"
_BREAKHIS_NAME = re.compile(r"^SOB_[BM]_[A-Z]+-(\d+-[0-9A-Za-z]+)-\d+-\d+", re.IGNORECASE)


@dataclass(frozen=True)
class Sample:
    image_path: str
    label: str
    magnification: str
    patient_id: Optional[str] = None

    @property
    def key(self) -> str:
        """Identifier relative to the dataset root."""
        return f"{self.magnification}/{self.label}/{Path(self.image_path).name}"

    @property
    def target(self) -> int:
        return CLASSES.index(self.label)


def parse_patient_id(filename: str) -> Optional[str]:
    m = _BREAKHIS_NAME.match(Path(filename).name)
    return m.group(1) if m else None


def normalize_magnification(mag: str) -> str:
    key = str(mag).strip().upper()
    if not key.endswith("X"):
        key += "X"
    if key not in MAGNIFICATIONS:
        raise UsageError(f"unknown magnification {mag!r}; expected one of {', '.join(MAGNIFICATIONS)}")
    return key


def scan_dataset(root, magnification: str | None = None) -> List[Sample]:
    """One Sample per PNG, ordered by (magnification, class, filename).

    With ``magnification=None`` every magnification directory present is scanned.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingDirectoryError(f"dataset root {root} does not exist")
    if magnification is None:
        mags = [m for m in MAGNIFICATIONS if (root / m).is_dir()]
        if not mags:
            raise MissingDirectoryError(f"no magnification directories ({', '.join(MAGNIFICATIONS)}) under {root}")
    else:
        mags = [normalize_magnification(magnification)]

    samples = []
    for mag in mags:
        for label in CLASSES:
            d = root / mag / label
            if not d.is_dir():
                raise MissingDirectoryError(f"missing class directory {d}")
            files = sorted(p for p in d.iterdir()
                           if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise EmptyDatasetError(f"no images in {d}")
            samples.extend(Sample(str(p), label, mag, parse_patient_id(p.name)) for p in files)
    return samples


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitManifest:
    seed: int
    train: List[str]
    val: List[str]
    test: List[str]
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    by_patient: bool = False
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "by_patient": self.by_patient,
            "counts": self.counts,
            "train": self.train,
            "val": self.val,
            "test": self.test,
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(
            seed=d["seed"], train=d["train"], val=d["val"], test=d["test"],
            fractions=tuple(d["fractions"]), by_patient=d.get("by_patient", False),
            counts=d.get("counts", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text())

    def select(self, samples: Sequence[Sample], part: str) -> List[Sample]:
        """The samples of one partition, in manifest order."""
        by_key = {s.key: s for s in samples}
        keys = getattr(self, part)
        missing = [k for k in keys if k not in by_key]
        if missing:
            raise UsageError(f"{len(missing)} manifest entries not found in dataset, e.g. {missing[0]}")
        return [by_key[k] for k in keys]


def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    """Val and test sizes rounded to nearest, remainder to train."""
    n_val = math.floor(n * fractions[1] + 0.5)
    n_test = math.floor(n * fractions[2] + 0.5)
    return n - n_val - n_test, n_val, n_test


def split(
    samples: Sequence[Sample],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    by_patient: bool = False,
) -> SplitManifest:
    """Seeded shuffle followed by a contiguous train/val/test partition.

    ``by_patient`` keeps every image of a patient in one partition; partition
    sizes then only approximate the fractions.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(samples)
    if n < 10:
        raise UsageError(f"refusing to split only {n} samples (need at least 10)")
    keys = [s.key for s in samples]
    if len(set(keys)) != n:
        raise UsageError("sample identifiers are not unique")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_train, n_val, n_test = split_sizes(n, fractions)

    if not by_patient:
        order = rng.permutation(n)
        ids = [keys[i] for i in order]
        train, val, test = ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]
    else:
        groups: Dict[str, List[str]] = {}
        for s in samples:
            groups.setdefault(s.patient_id or s.key, []).append(s.key)
        names = sorted(groups)
        order = rng.permutation(len(names))
        train, val, test = [], [], []
        for i in order:
            members = groups[names[i]]
            if len(test) < n_test:
                test.extend(members)
            elif len(val) < n_val:
                val.extend(members)
            else:
                train.extend(members)

    label_of = {s.key: s.label for s in samples}
    counts = {
        part: {c: sum(1 for k in ids if label_of[k] == c) for c in CLASSES}
        for part, ids in (("train", train), ("val", val), ("test", test))
    }
    return SplitManifest(seed, train, val, test, tuple(fractions), by_patient, counts)


# ---------------------------------------------------------------------------
# decoding and batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64, 0 benign / 1 malignant

    def __len__(self):
        return len(self.labels)


def decode_image(path) -> np.ndarray:
    """RGB uint8 array of shape (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(path, str(exc)) from None


def resize_bilinear(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array to ``size`` = (H, W), in float32.

    Each channel goes through PIL's 32-bit float mode so no uint8 rounding
    happens in between.
    """
    h, w = size
    src = image.astype(np.float32)
    if src.shape[:2] == (h, w):
        return src
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(src[..., c])).resize((w, h), Image.Resampling.BILINEAR))
        for c in range(src.shape[2])
    ]
    return np.stack(channels, axis=-1)


def load_image(path, target_size: Tuple[int, int]) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]."""
    pixels = resize_bilinear(decode_image(path), target_size)
    out = np.clip(pixels / np.float32(255.0), 0.0, 1.0)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def _as_size(target_size) -> Tuple[int, int]:
    if isinstance(target_size, int):
        return target_size, target_size
    h, w = target_size
    return int(h), int(w)


def load_batch(samples: Sequence[Sample], indices: Sequence[int], target_size, workers: int = 1) -> Batch:
    size = _as_size(target_size)
    if size[0] % 7 or size[1] % 7:
        raise UsageError(f"target size {size} must be divisible by 7")
    paths = [samples[i].image_path for i in indices]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(lambda p: load_image(p, size), paths))
    else:
        images = [load_image(p, size) for p in paths]
    labels = np.array([samples[i].target for i in indices], dtype=np.int64)
    return Batch(np.stack(images), labels)


def augment(batch: Batch, rng: np.random.Generator, p_hflip: float = 0.5, p_vflip: float = 0.5) -> Batch:
    """Independent random horizontal and vertical flips per image."""
    images = batch.images.copy()
    draws = rng.random((len(batch), 2))
    for i, (dh, dv) in enumerate(draws):
        if dh < p_hflip:
            images[i] = images[i][:, :, ::-1]
        if dv < p_vflip:
            images[i] = images[i][:, ::-1, :]
    return Batch(images, batch.labels.copy())


class ArrayDataset:
    """Preloaded images and labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        if len(images) != len(labels):
            raise UsageError("images and labels differ in length")
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.images[idx], self.labels[idx])


class ImageDataset:
    """Samples decoded on demand; decoded images are cached when ``cache`` is set."""

    def __init__(self, samples: Sequence[Sample], target_size, cache: bool = True, workers: int = 1):
        self.samples = list(samples)
        self.target_size = _as_size(target_size)
        self.labels = np.array([s.target for s in self.samples], dtype=np.int64)
        self.workers = workers
        self._cache: Dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self):
        return len(self.samples)

    def batch(self, indices) -> Batch:
        indices = [int(i) for i in indices]
        if self._cache is None:
            return load_batch(self.samples, indices, self.target_size, self.workers)
        todo = [i for i in indices if i not in self._cache]
        if todo:
            fresh = load_batch(self.samples, todo, self.target_size, self.workers)
            self._cache.update(zip(todo, fresh.images))
        return Batch(np.stack([self._cache[i] for i in indices]), self.labels[indices])


def class_counts(samples: Sequence[Sample]) -> Dict[str, int]:
    c = Counter(s.label for s in samples)
    return {name: c.get(name, 0) for name in CLASSES}


# ---------------------------------------------------------------------------
# synthetic smoke-test data
# ---------------------------------------------------------------------------

def _synthetic_image(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    """Stained-tissue lookalike; the classes differ only in nucleus count and size."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    base = np.array([235, 200, 215], dtype=np.float32) + rng.normal(0, 10, size=3).astype(np.float32)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img += rng.normal(0, 12, size=(size, size, 3)).astype(np.float32)
    nucleus = np.array([120, 70, 150], dtype=np.float32) + rng.normal(0, 15, size=3).astype(np.float32)
    if label == 0:
        count, rmin, rmax = rng.integers(3, 6), size * 0.09, size * 0.14
    else:
        count, rmin, rmax = rng.integers(14, 22), size * 0.035, size * 0.06
    for _ in range(count):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(rmin, rmax)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = nucleus + rng.normal(0, 12, size=(int(mask.sum()), 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_synthetic_dataset(out, n: int = 32, seed: int = 0, size: int = 64,
                           magnification: str = "40X") -> List[Path]:
    """Write ``n`` PNGs (half per class) into ``out/<magnification>/<class>/``."""
    if n < 2 or n % 2:
        raise UsageError(f"n must be an even number >= 2, got {n}")
    mag = normalize_magnification(magnification)
    rng = np.random.Generator(np.random.PCG64(seed))
    written = []
    for label, name in enumerate(CLASSES):
        d = Path(out) / mag / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n // 2):
            path = d / f"synth_{name}_{i:04d}.png"
            Image.fromarray(_synthetic_image(rng, label, size)).save(path, format="PNG")
            written.append(path)
    return written
