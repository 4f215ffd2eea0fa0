"""Block-wise keyed image transformation.

Pipeline order is fixed: block permutation, pixel shuffling, bit flipping,
z-score normalization.  Images are ``H x W x C`` arrays; a dataset is an
``N x H x W x C`` array.  Inside a block, pixels are flattened row-major
(rows, then columns, then channels), which is plain C-order on the
``M x M x C`` block.  Block indices run in raster order over the block grid.

A single pixel-shuffle permutation and a single flip mask are shared by
every block of every image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .keymat import SecretKey, derive_subkeys, gen_flip_mask, gen_permutation

BITS = 8
PIXEL_MAX = (1 << BITS) - 1
STD_EPS = 1e-12
STEP_NAMES = ("block_permutation", "pixel_shuffle", "bit_flip", "zscore")


class TransformError(ValueError):
    pass


def as_image(image: np.ndarray) -> np.ndarray:
    """View a 2-D grayscale image as ``H x W x 1``; 3-D images pass through."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image[:, :, None]
    if image.ndim != 3:
        raise TransformError(f"expected H x W or H x W x C image, got shape {image.shape}")
    return image


def as_batch(images) -> np.ndarray:
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return images
    if isinstance(images, np.ndarray) and images.ndim == 3:
        # a 3-D array is read as a stack of grayscale images
        return images[..., None]
    batch = [as_image(im) for im in images]
    if not batch:
        raise TransformError("empty image list")
    shapes = {im.shape for im in batch}
    if len(shapes) != 1:
        raise TransformError(f"images have differing dimensions: {sorted(shapes)}")
    return np.stack(batch)


def _check_divisible(h: int, w: int, m: int) -> None:
    if m < 1:
        raise TransformError(f"block size must be >= 1, got {m}")
    if h % m or w % m:
        raise TransformError(f"image of {h}x{w} pixels is not divisible into {m}x{m} blocks")


@dataclass(frozen=True)
class BlockGrid:
    """Blocks of shape ``(rows * cols, M, M, C)`` in raster order."""

    blocks: np.ndarray
    rows: int
    cols: int

    @property
    def block_size(self) -> int:
        return self.blocks.shape[1]

    def __len__(self) -> int:
        return self.blocks.shape[0]


def segment(image: np.ndarray, block_size: int) -> BlockGrid:
    image = as_image(image)
    h, w, c = image.shape
    m = block_size
    _check_divisible(h, w, m)
    rows, cols = h // m, w // m
    blocks = image.reshape(rows, m, cols, m, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, m, m, c)
    return BlockGrid(blocks.copy(), rows, cols)


def assemble(grid: BlockGrid) -> np.ndarray:
    blocks = np.asarray(grid.blocks)
    if blocks.ndim != 4 or blocks.shape[1] != blocks.shape[2]:
        raise TransformError(f"blocks must have shape (K, M, M, C), got {blocks.shape}")
    if blocks.shape[0] != grid.rows * grid.cols:
        raise TransformError(
            f"grid of {grid.rows}x{grid.cols} needs {grid.rows * grid.cols} blocks, got {blocks.shape[0]}"
        )
    _, m, _, c = blocks.shape
    return (
        blocks.reshape(grid.rows, grid.cols, m, m, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.rows * m, grid.cols * m, c)
    )


def permute_blocks(grid: BlockGrid, v: np.ndarray) -> BlockGrid:
    """Gather: output block ``k`` is input block ``v[k]``."""
    v = np.asarray(v)
    if v.shape != (len(grid),):
        raise TransformError(f"permutation length {v.size} does not match block count {len(grid)}")
    return BlockGrid(grid.blocks[v], grid.rows, grid.cols)


def shuffle_pixels(block: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gather on a flattened block (or on the last axis of a stack of them)."""
    block = np.asarray(block)
    v = np.asarray(v)
    if v.ndim != 1 or v.size != block.shape[-1]:
        raise TransformError(f"permutation length {v.size} does not match block length {block.shape[-1]}")
    return block[..., v]


def flip_bits(block: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Negative-positive transform: ``x XOR 255`` wherever the mask is 1."""
    block = np.asarray(block)
    mask = np.asarray(mask)
    if mask.ndim != 1 or mask.size != block.shape[-1]:
        raise TransformError(f"mask length {mask.size} does not match block length {block.shape[-1]}")
    if not np.issubdtype(block.dtype, np.integer):
        if not np.all(np.equal(np.mod(block, 1), 0)):
            raise TransformError("bit flipping needs integer pixel values")
    if block.size and (block.min() < 0 or block.max() > PIXEL_MAX):
        raise TransformError(f"pixel values must lie in [0, {PIXEL_MAX}]")
    out = block.astype(np.int64, copy=True)
    out[..., mask.astype(bool)] ^= PIXEL_MAX
    return out.astype(block.dtype)


@dataclass(frozen=True)
class NormStats:
    """Per-position statistics of a training set (population std).

    ``total`` holds the per-position sums rather than means so that
    integer data is centred exactly: ``N*x - total``.
    """

    count: int
    total: np.ndarray
    std: np.ndarray
    shape: tuple = field(default=())

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.count

    @property
    def size(self) -> int:
        return self.total.size


def _centered(flat: np.ndarray, count: int, total: np.ndarray) -> np.ndarray:
    return count * flat.astype(np.float64) - total


def zscore_fit(images) -> NormStats:
    batch = as_batch(images)
    n = batch.shape[0]
    if n < 2:
        raise TransformError(f"z-score statistics need at least 2 images, got {n}")
    flat = batch.reshape(n, -1)
    # integer data: exact integer centring keeps flipped positions exact negations
    if np.issubdtype(flat.dtype, np.integer) and n <= 20000:
        ints = flat.astype(np.int64)
        total = ints.sum(axis=0)
        centered = n * ints - total
        sumsq = (centered * centered).sum(axis=0).astype(np.float64)
        total = total.astype(np.float64)
    else:
        flat = flat.astype(np.float64)
        total = flat.sum(axis=0)
        centered = n * flat - total
        sumsq = (centered * centered).sum(axis=0)
    std = np.sqrt(sumsq / float(n) ** 3)
    return NormStats(count=n, total=total, std=std, shape=tuple(batch.shape[1:]))


def zscore_apply(images, stats: NormStats) -> np.ndarray:
    """Normalize one image or a batch; positions with ``std < 1e-12`` map to 0."""
    arr = np.asarray(images)
    single = arr.ndim in (2, 3) and arr.size == stats.size
    batch = as_image(arr)[None] if single else as_batch(arr)
    flat = batch.reshape(batch.shape[0], -1)
    if flat.shape[1] != stats.size:
        raise TransformError(
            f"image has {flat.shape[1]} values but statistics cover {stats.size} positions"
        )
    denom = stats.count * stats.std
    live = stats.std >= STD_EPS
    z = np.zeros(flat.shape, dtype=np.float64)
    z[:, live] = _centered(flat[:, live], stats.count, stats.total[live]) / denom[live]
    z = z.reshape(batch.shape)
    return z[0] if single else z


@dataclass(frozen=True)
class TransformConfig:
    block_size: int
    key: SecretKey | None = None
    block_permutation: bool = True
    pixel_shuffle: bool = True
    bit_flip: bool = True
    zscore: bool = True

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise TransformError(f"block size must be >= 1, got {self.block_size}")
        if self.keyed and self.key is None:
            raise TransformError("keyed steps are enabled but no key was given")

    @property
    def keyed(self) -> bool:
        return self.block_permutation or self.pixel_shuffle or self.bit_flip

    @property
    def steps(self) -> tuple[str, ...]:
        return tuple(name for name in STEP_NAMES if getattr(self, name))

    @classmethod
    def from_steps(cls, block_size: int, key: SecretKey | None, steps) -> TransformConfig:
        steps = set(steps)
        unknown = steps - set(STEP_NAMES)
        if unknown:
            raise TransformError(f"unknown steps: {sorted(unknown)}; choose from {STEP_NAMES}")
        return cls(block_size, key, **{name: name in steps for name in STEP_NAMES})

    def fingerprint(self) -> dict:
        """Key-free description of the configuration."""
        return {"block_size": self.block_size, "steps": list(self.steps)}

    def materials(self, channels: int, n_blocks: int):
        """Block permutation, pixel permutation and flip mask for this key."""
        k1, k2, k3 = derive_subkeys(self.key)
        p = self.block_size * self.block_size * channels
        v_block = gen_permutation(k1, n_blocks) if self.block_permutation else None
        v_pixel = gen_permutation(k2, p) if self.pixel_shuffle else None
        mask = gen_flip_mask(k3, p) if self.bit_flip else None
        return v_block, v_pixel, mask


def scramble(images, config: TransformConfig) -> np.ndarray:
    """Apply the keyed steps (no normalization) to a batch of 8-bit images."""
    batch = as_batch(images)
    if not config.keyed:
        return batch.copy()
    n, h, w, c = batch.shape
    m = config.block_size
    _check_divisible(h, w, m)
    rows, cols = h // m, w // m
    v_block, v_pixel, mask = config.materials(c, rows * cols)
    blocks = (
        batch.reshape(n, rows, m, cols, m, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, rows * cols, m * m * c)
    )
    if v_block is not None:
        blocks = blocks[:, v_block, :]
    if v_pixel is not None:
        blocks = shuffle_pixels(blocks, v_pixel)
    if mask is not None:
        blocks = flip_bits(blocks, mask)
    return (
        blocks.reshape(n, rows, cols, m, m, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h, w, c)
    )


def transform_dataset(images, config: TransformConfig, stats: NormStats | None = None):
    """Run the enabled steps over a dataset.

    Returns ``(transformed, stats)``.  Without ``stats`` the normalization is
    fitted on the scrambled (post bit-flip) data; with ``stats`` those are
    applied unchanged.  When z-scoring is disabled the 8-bit scrambled
    images are returned with ``stats=None``.
    """
    out = scramble(images, config)
    if not config.zscore:
        return out, None
    if stats is None:
        stats = zscore_fit(out)
    return zscore_apply(out, stats), stats
