import hashlib
import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2, norm

from blocksvm.keymat import (
    InvalidKeyError,
    KeyedStream,
    SecretKey,
    derive_subkeys,
    gen_flip_mask,
    gen_permutation,
    inverse_permutation,
    is_permutation,
)

VECTORS = json.loads((Path(__file__).parent / "vectors" / "keymat_vectors.json").read_text())["vectors"]
SEED = hashlib.sha256(b"fixed test seed").digest()


def reference_permutation(seed: bytes, n: int, nonce: int = 0) -> list[int]:
    """Straight-line re-reading of the documented byte-level procedure."""
    words = []
    counter = 0

    def word():
        nonlocal counter
        if not words:
            block = hashlib.sha256(seed + nonce.to_bytes(8, "little") + counter.to_bytes(8, "little")).digest()
            counter += 1
            words.extend(int.from_bytes(block[k : k + 8], "little") for k in range(24, -8, -8))
        return words.pop()

    out = list(range(n))
    for i in range(n - 1, 0, -1):
        bound = i + 1
        limit = 2**64 - (2**64 % bound)
        while (x := word()) >= limit:
            pass
        j = x % bound
        out[i], out[j] = out[j], out[i]
    return out


def test_subkeys_deterministic():
    key = SecretKey(bytes(range(16)))
    assert derive_subkeys(key) == derive_subkeys(SecretKey(bytes(range(16))))


def test_subkeys_are_labelled_hashes():
    key = SecretKey(b"0123456789abcdef")
    assert derive_subkeys(key) == tuple(hashlib.sha256(key.master + lab).digest() for lab in (b"K1", b"K2", b"K3"))


def test_one_byte_change_changes_all_subkeys():
    a = bytearray(range(16))
    b = bytearray(a)
    b[7] ^= 1
    for ka, kb in zip(derive_subkeys(bytes(a)), derive_subkeys(bytes(b))):
        assert ka != kb


def test_distinct_labels_distinct_subkeys():
    k1, k2, k3 = derive_subkeys(bytes(16))
    assert len({k1, k2, k3}) == 3


def test_short_key_rejected():
    with pytest.raises(InvalidKeyError):
        SecretKey(bytes(15))
    with pytest.raises(InvalidKeyError):
        SecretKey.from_hex("00" * 15)
    with pytest.raises(InvalidKeyError):
        SecretKey.from_hex("not hex at all!!")


def test_key_repr_hides_bytes():
    key = SecretKey(b"supersecretkey!!")
    assert "supersecret" not in repr(key)


def test_key_from_env(monkeypatch):
    monkeypatch.setenv("BLOCKSVM_KEY", "ab" * 16)
    assert SecretKey.from_env().master == bytes([0xAB]) * 16
    monkeypatch.delenv("BLOCKSVM_KEY")
    assert SecretKey.from_env() is None


@pytest.mark.parametrize("vec", VECTORS, ids=lambda v: v["master_hex"][:8])
def test_published_vectors(vec):
    k1, k2, k3 = derive_subkeys(bytes.fromhex(vec["master_hex"]))
    assert (k1.hex(), k2.hex(), k3.hex()) == (vec["K1"], vec["K2"], vec["K3"])
    assert gen_permutation(k1, 10).tolist() == vec["perm_K1_n10"]
    assert gen_permutation(k1, 100, nonce=7).tolist() == vec["perm_K1_n100_nonce7"]
    assert gen_permutation(k2, 4).tolist() == vec["perm_K2_n4"]
    assert gen_flip_mask(k3, 25).tolist() == vec["mask_K3_p25"]
    assert gen_flip_mask(k3, 12).tolist() == vec["mask_K3_p12"]


@pytest.mark.parametrize("n,nonce", [(1, 0), (2, 0), (10, 3), (257, 0), (1000, 9)])
def test_matches_reference_procedure(n, nonce):
    assert gen_permutation(SEED, n, nonce).tolist() == reference_permutation(SEED, n, nonce)


def test_stream_words_in_order():
    stream = KeyedStream(SEED, 0)
    block = hashlib.sha256(SEED + bytes(8) + bytes(8)).digest()
    expected = [int.from_bytes(block[k : k + 8], "little") for k in range(0, 32, 8)]
    assert [stream.next_u64() for _ in range(4)] == expected


def test_permutation_of_one():
    assert gen_permutation(SEED, 1).tolist() == [0]


def test_zero_sizes_rejected():
    with pytest.raises(ValueError):
        gen_permutation(SEED, 0)
    with pytest.raises(ValueError):
        gen_flip_mask(SEED, 0)


@settings(max_examples=60, deadline=None)
@given(seed=st.binary(min_size=1, max_size=40), n=st.integers(1, 4096))
def test_permutation_is_bijection(seed, n):
    v = gen_permutation(seed, n)
    assert is_permutation(v, n)
    assert np.array_equal(gen_permutation(seed, n), v)


@settings(max_examples=60, deadline=None)
@given(seed=st.binary(min_size=1, max_size=40), p=st.integers(1, 4096))
def test_flip_mask_count(seed, p):
    mask = gen_flip_mask(seed, p)
    assert mask.shape == (p,)
    assert set(np.unique(mask)) <= {0, 1}
    assert int(mask.sum()) == p // 2
    assert np.array_equal(gen_flip_mask(seed, p), mask)


def test_flip_mask_examples():
    assert sorted(gen_flip_mask(SEED, 2).tolist()) == [0, 1]
    assert int(gen_flip_mask(SEED, 25).sum()) == 12


def test_inverse_permutation():
    v = gen_permutation(SEED, 50)
    inv = inverse_permutation(v)
    assert np.array_equal(v[inv], np.arange(50))
    assert np.array_equal(inv[v], np.arange(50))


def test_permutation_uniformity_chi_square():
    draws = 100_000
    index = {p: k for k, p in enumerate(itertools.permutations(range(4)))}
    counts = np.zeros(24, dtype=np.int64)
    for nonce in range(draws):
        counts[index[tuple(gen_permutation(SEED, 4, nonce).tolist())]] += 1
    expected = draws / 24
    sigma = np.sqrt(draws * (1 / 24) * (23 / 24))
    # 3 sigma per cell, Bonferroni-corrected over the 24 cells (two-sided 0.27% family-wise)
    z = norm.isf(0.0027 / 2 / 24)
    assert np.all(np.abs(counts - expected) <= z * sigma), counts
    stat = float(((counts - expected) ** 2 / expected).sum())
    assert chi2.sf(stat, df=23) > 1e-3
