"""Loading, resizing, splitting and synthesizing labeled image datasets.

Also holds the two on-disk containers used by the CLI:

transformed dataset (``.btd``), little-endian::

    magic "BTDS" | u16 version | u8 dtype (0=uint8, 1=float64) | u8 reserved
    u32 N | u32 H | u32 W | u32 C | u32 label-bytes
    labels as a UTF-8 JSON list | N*H*W*C pixel values, C order

normalization statistics (``.bns``), little-endian::

    magic "BNST" | u16 version | u16 reserved | u64 count
    u32 H | u32 W | u32 C | f8[H*W*C] per-position sums | f8[H*W*C] std
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .transform import NormStats, as_batch

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm", ".bmp"}


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x H x W x C
    labels: np.ndarray
    split: str = "all"

    def __post_init__(self) -> None:
        self.images = as_batch(self.images) if len(self.images) else np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list:
        return sorted(set(self.labels.tolist()))


@dataclass(frozen=True)
class SplitSpec:
    train_per_class: int
    test_per_class: int
    seed: int | None = None  # None keeps the loaded (lexicographic) order


def _read_image(path: Path, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr[:, :, None] if arr.ndim == 2 else arr


def load_directory(
    root,
    channels: int = 1,
    size: tuple[int, int] | None = None,
    strict: bool = True,
) -> LabeledDataset:
    """Read ``root/<class>/<image>`` files, classes and files in lexicographic order.

    Images are converted to grayscale (``channels=1``) or RGB and, when
    ``size=(H, W)`` is given, resized bilinearly.  Unreadable files raise in
    strict mode and are skipped with a warning otherwise.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DatasetError(f"need at least 2 class subdirectories in {root}, found {len(class_dirs)}")
    images, labels = [], []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        loaded = 0
        for path in files:
            try:
                img = _read_image(path, channels)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                if strict:
                    raise DatasetError(f"cannot read image {path}: {exc}") from None
                log.warning("skipping unreadable image %s: %s", path, exc)
                continue
            if size is not None:
                img = resize(img, size)
            images.append(img)
            labels.append(cdir.name)
            loaded += 1
        if loaded == 0:
            raise DatasetError(f"class directory {cdir} contains no readable images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"images have differing sizes {sorted(shapes)}; pass a target size")
    return LabeledDataset(np.stack(images), np.asarray(labels))


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping, rounded to uint8.

    Output pixel ``(r, c)`` samples the source at
    ``((r + 0.5) * H / H' - 0.5, (c + 0.5) * W / W' - 0.5)``.
    """
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise DatasetError(f"target size must be at least 1x1, got {out_h}x{out_w}")
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        out = img.copy()
    else:
        src = img.astype(np.float64)

        def axis(n_out: int, n_in: int):
            pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
            pos = np.clip(pos, 0, n_in - 1)
            lo = np.floor(pos).astype(np.int64)
            hi = np.minimum(lo + 1, n_in - 1)
            return lo, hi, pos - lo

        r0, r1, fr = axis(out_h, h)
        c0, c1, fc = axis(out_w, w)
        fr = fr[:, None, None]
        fc = fc[None, :, None]
        top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
        bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
        out = np.clip(np.rint(top * (1 - fr) + bottom * fr), 0, 255).astype(np.uint8)
    return out[:, :, 0] if squeeze else out


def split(dataset: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Per class: the first ``train_per_class`` images train, the next ``test_per_class`` test."""
    train_idx, test_idx = [], []
    rng = np.random.default_rng(spec.seed) if spec.seed is not None else None
    for cls in dataset.classes:
        idx = np.flatnonzero(dataset.labels == cls)
        need = spec.train_per_class + spec.test_per_class
        if idx.size < need:
            raise DatasetError(f"class {cls!r} has {idx.size} images, split needs {need}")
        if rng is not None:
            idx = idx[rng.permutation(idx.size)]
        train_idx.extend(idx[: spec.train_per_class])
        test_idx.extend(idx[spec.train_per_class : need])
    train_idx = np.asarray(train_idx, dtype=np.int64)
    test_idx = np.asarray(test_idx, dtype=np.int64)
    shape = dataset.images.shape[1:]
    return (
        LabeledDataset(dataset.images[train_idx].reshape(-1, *shape), dataset.labels[train_idx], "train"),
        LabeledDataset(dataset.images[test_idx].reshape(-1, *shape), dataset.labels[test_idx], "test"),
    )


def _smooth_field(rng: np.random.Generator, h: int, w: int, grid: int = 5) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(grid, grid))
    return resize((coarse * 255).astype(np.uint8), (h, w)).astype(np.float64) / 255.0


def synth_faces(
    classes: int,
    per_class: int,
    height: int = 20,
    width: int = 20,
    seed: int = 0,
    noise: float = 12.0,
) -> LabeledDataset:
    """Desk-scale stand-in for a face corpus.

    Each class gets a smooth random base image; samples add Gaussian noise
    (clipped to 3 sigma) and a small brightness shift, then are clamped to
    [0, 255].  A base is redrawn until it is at least four times the
    expected noise norm away from every earlier base.
    """
    if classes < 2 or per_class < 2:
        raise DatasetError("need at least 2 classes and 2 images per class")
    if height < 1 or width < 1:
        raise DatasetError(f"image size must be positive, got {height}x{width}")
    rng = np.random.default_rng(seed)
    noise_norm = noise * np.sqrt(height * width)
    bases: list[np.ndarray] = []
    for _ in range(classes):
        for _attempt in range(1000):
            base = 40.0 + 175.0 * _smooth_field(rng, height, width)
            if all(np.linalg.norm(base - b) >= 4 * noise_norm for b in bases):
                break
        else:
            raise DatasetError("could not place well-separated class bases; lower the noise")
        bases.append(base)
    images = np.empty((classes * per_class, height, width, 1), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), per_class)
    for k, base in enumerate(bases):
        for s in range(per_class):
            jitter = np.clip(rng.normal(0.0, noise, size=base.shape), -3 * noise, 3 * noise)
            shift = rng.uniform(-noise, noise)
            img = np.clip(np.rint(base + jitter + shift), 0, 255)
            images[k * per_class + s, :, :, 0] = img
    return LabeledDataset(images, labels)


def write_image_tree(dataset: LabeledDataset, root) -> None:
    """Write ``root/<label>/<index>.png``; labels become directory names."""
    root = Path(root)
    counters: dict[str, int] = {}
    width = len(str(max(len(dataset) - 1, 0)))
    for img, label in zip(dataset.images, dataset.labels.tolist()):
        name = label if isinstance(label, str) else f"class{int(label):03d}"
        n = counters.get(name, 0)
        counters[name] = n + 1
        out = root / name
        out.mkdir(parents=True, exist_ok=True)
        arr = img[:, :, 0] if img.shape[2] == 1 else img
        Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8)).save(out / f"{n:0{width}d}.png")


# -- containers ------------------------------------------------------------

_DS_HEAD = struct.Struct("<4sHBBIIIII")
_DS_MAGIC = b"BTDS"
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f8")}
_ST_HEAD = struct.Struct("<4sHHQIII")
_ST_MAGIC = b"BNST"
FORMAT_VERSION = 1


def write_dataset(path, images, labels) -> None:
    batch = as_batch(images)
    code = 0 if batch.dtype == np.uint8 else 1
    labels_blob = json.dumps(np.asarray(labels).tolist(), separators=(",", ":")).encode("utf-8")
    n, h, w, c = batch.shape
    head = _DS_HEAD.pack(_DS_MAGIC, FORMAT_VERSION, code, 0, n, h, w, c, len(labels_blob))
    data = np.ascontiguousarray(batch, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(head + labels_blob + data)


def read_dataset(path) -> LabeledDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _DS_HEAD.size:
        raise DatasetError(f"{path}: truncated dataset file")
    magic, version, code, _, n, h, w, c, nlab = _DS_HEAD.unpack_from(blob)
    if magic != _DS_MAGIC:
        raise DatasetError(f"{path}: not a transformed-dataset file")
    if version != FORMAT_VERSION or code not in _DTYPES:
        raise DatasetError(f"{path}: unsupported version {version} / dtype code {code}")
    start = _DS_HEAD.size + nlab
    dtype = _DTYPES[code]
    expected = start + n * h * w * c * dtype.itemsize
    if len(blob) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(blob)}")
    labels = json.loads(blob[_DS_HEAD.size:start].decode("utf-8"))
    images = np.frombuffer(blob[start:], dtype=dtype).reshape(n, h, w, c).copy()
    return LabeledDataset(images, np.asarray(labels))


def write_stats(path, stats: NormStats) -> None:
    h, w, c = stats.shape
    head = _ST_HEAD.pack(_ST_MAGIC, FORMAT_VERSION, 0, stats.count, h, w, c)
    body = np.ascontiguousarray(stats.total, "<f8").tobytes() + np.ascontiguousarray(stats.std, "<f8").tobytes()
    Path(path).write_bytes(head + body)


def read_stats(path) -> NormStats:
    blob = Path(path).read_bytes()
    if len(blob) < _ST_HEAD.size:
        raise DatasetError(f"{path}: truncated statistics file")
    magic, version, _, count, h, w, c = _ST_HEAD.unpack_from(blob)
    if magic != _ST_MAGIC or version != FORMAT_VERSION:
        raise DatasetError(f"{path}: not a version-{FORMAT_VERSION} statistics file")
    p = h * w * c
    if len(blob) != _ST_HEAD.size + 16 * p:
        raise DatasetError(f"{path}: statistics file has wrong length")
    arr = np.frombuffer(blob[_ST_HEAD.size:], dtype="<f8")
    return NormStats(count=int(count), total=arr[:p].copy(), std=arr[p:].copy(), shape=(h, w, c))
