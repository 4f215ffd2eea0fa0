"""Secret keys, subkey derivation and keyed permutation / flip-mask generation.

Every random choice made by the block-wise transformation comes from a
SHA-256 counter-mode stream so that the same master key produces the same
permutations on every platform and in every implementation:

    block(seed, nonce, counter) = SHA256(seed || u64le(nonce) || u64le(counter))

Each 32-byte block is consumed as four little-endian unsigned 64-bit words.
Bounded integers use rejection sampling (no modulo bias) and permutations
use the descending Fisher-Yates shuffle.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

MIN_KEY_BYTES = 16
SUBKEY_LABELS = (b"K1", b"K2", b"K3")
KEY_ENV_VAR = "BLOCKSVM_KEY"

_U64 = struct.Struct("<Q")
_TWO64 = 1 << 64


class InvalidKeyError(ValueError):
    """Raised for malformed or too-short secret keys."""


@dataclass(frozen=True)
class SecretKey:
    """A master secret; never serialized into model or dataset files."""

    master: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.master, (bytes, bytearray)):
            raise TypeError("master key must be bytes")
        if len(self.master) < MIN_KEY_BYTES:
            raise InvalidKeyError(
                f"master key must be at least {MIN_KEY_BYTES} bytes, got {len(self.master)}"
            )
        object.__setattr__(self, "master", bytes(self.master))

    @classmethod
    def from_hex(cls, text: str) -> SecretKey:
        try:
            raw = bytes.fromhex(text.strip())
        except ValueError as exc:
            raise InvalidKeyError(f"key is not valid hex: {exc}") from None
        return cls(raw)

    @classmethod
    def from_env(cls, var: str = KEY_ENV_VAR) -> SecretKey | None:
        value = os.environ.get(var)
        return cls.from_hex(value) if value else None

    def subkeys(self) -> tuple[bytes, bytes, bytes]:
        return derive_subkeys(self)

    def __repr__(self) -> str:  # keep key bytes out of logs and tracebacks
        return f"SecretKey(<{len(self.master)} bytes>)"


def derive_subkeys(key: SecretKey | bytes) -> tuple[bytes, bytes, bytes]:
    """Return the 32-byte seeds ``(K1, K2, K3)`` as ``SHA256(master || label)``.

    K1 drives block permutation, K2 pixel shuffling and K3 the flip mask.
    """
    if not isinstance(key, SecretKey):
        key = SecretKey(key)
    k1, k2, k3 = (hashlib.sha256(key.master + label).digest() for label in SUBKEY_LABELS)
    return k1, k2, k3


class KeyedStream:
    """Deterministic stream of 64-bit words from a seed and a nonce."""

    def __init__(self, seed: bytes, nonce: int = 0):
        if not seed:
            raise ValueError("seed must be non-empty")
        self._prefix = bytes(seed) + _U64.pack(nonce % _TWO64)
        self._counter = 0
        self._words: list[int] = []

    def next_u64(self) -> int:
        if not self._words:
            digest = hashlib.sha256(self._prefix + _U64.pack(self._counter)).digest()
            self._counter += 1
            # pop() takes from the end, so store reversed to consume words in order
            self._words = list(struct.unpack("<4Q", digest))[::-1]
        return self._words.pop()

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)``."""
        if bound < 1:
            raise ValueError("bound must be positive")
        if bound == 1:
            return 0
        limit = _TWO64 - (_TWO64 % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound


def gen_permutation(seed: bytes, n: int, nonce: int = 0) -> np.ndarray:
    """Keyed uniform permutation of ``0..n-1`` (Fisher-Yates, descending)."""
    if n < 1:
        raise ValueError(f"permutation length must be >= 1, got {n}")
    stream = KeyedStream(seed, nonce)
    entries = list(range(n))
    for i in range(n - 1, 0, -1):
        j = stream.below(i + 1)
        entries[i], entries[j] = entries[j], entries[i]
    return np.asarray(entries, dtype=np.int64)


def gen_flip_mask(seed: bytes, p: int, nonce: int = 0) -> np.ndarray:
    """Binary mask of length ``p`` with exactly ``p // 2`` ones.

    The ones sit at the first ``p // 2`` entries of a keyed permutation.
    """
    if p < 1:
        raise ValueError(f"mask length must be >= 1, got {p}")
    mask = np.zeros(p, dtype=np.uint8)
    mask[gen_permutation(seed, p, nonce)[: p // 2]] = 1
    return mask


def is_permutation(v: np.ndarray, n: int | None = None) -> bool:
    v = np.asarray(v)
    if v.ndim != 1 or (n is not None and v.size != n):
        return False
    return bool(np.array_equal(np.sort(v), np.arange(v.size)))


def inverse_permutation(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    inv = np.empty_like(v)
    inv[v] = np.arange(v.size)
    return inv
