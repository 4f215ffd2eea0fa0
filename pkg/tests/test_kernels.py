import math

import numpy as np
import pytest

from blocksvm.kernels import KernelSpec, gram, kernel_eval, kernel_matrix
from blocksvm.keymat import SecretKey
from blocksvm.transform import TransformConfig, transform_dataset, zscore_apply, zscore_fit

SPECS = [KernelSpec.rbf(0.5), KernelSpec.poly(0.1, 3, 1.0), KernelSpec.poly(1.0, 2, 0.0), KernelSpec.linear()]


def test_rbf_self_is_one():
    x = np.random.default_rng(0).normal(size=7)
    assert kernel_eval(x, x, KernelSpec.rbf(3.0)) == 1.0


def test_poly_orthogonal():
    assert kernel_eval([1, 0], [0, 1], KernelSpec.poly(1.0, 2, 1.0)) == 1.0


def test_rbf_example():
    assert math.isclose(kernel_eval([0, 0], [1, 1], KernelSpec.rbf(0.5)), math.exp(-1.0), rel_tol=1e-15)
    assert round(kernel_eval([0, 0], [1, 1], KernelSpec.rbf(0.5)), 6) == 0.367879


def test_poly_reduces_to_plain_form():
    x, y = np.array([1.0, 2.0, -1.0]), np.array([0.5, 0.5, 3.0])
    assert kernel_eval(x, y, KernelSpec.poly(1.0, 2, 1.0)) == (1 + x @ y) ** 2


def test_kernel_eval_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel_eval([1, 2], [1, 2, 3], KernelSpec.linear())


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec.rbf(0.0)
    with pytest.raises(ValueError):
        KernelSpec.poly(1.0, 0)
    with pytest.raises(ValueError):
        KernelSpec("sigmoid")
    assert KernelSpec.from_dict(KernelSpec.poly(0.1, 3, 2.0).to_dict()) == KernelSpec.poly(0.1, 3, 2.0)


def test_gram_single_vector():
    x = np.array([[1.0, 2.0]])
    assert gram(x, KernelSpec.linear()).tolist() == [[5.0]]


def test_gram_empty_rejected():
    with pytest.raises(ValueError):
        gram(np.empty((0, 3)), KernelSpec.linear())


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind + str(s.gamma))
def test_gram_matches_double_loop(spec):
    X = np.random.default_rng(1).normal(size=(10, 6))
    brute = np.array([[kernel_eval(a, b, spec) for b in X] for a in X])
    G = gram(X, spec)
    assert np.allclose(G, brute, rtol=1e-12, atol=1e-12)
    assert np.max(np.abs(G - G.T)) <= 1e-12
    assert np.allclose(kernel_matrix(X, X[:4], spec), brute[:, :4], rtol=1e-12, atol=1e-12)


def test_rbf_gram_diagonal_and_psd():
    X = np.random.default_rng(2).normal(size=(30, 8))
    G = gram(X, KernelSpec.rbf(0.3))
    assert np.all(np.diag(G) == 1.0)
    assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_gram_relabeling():
    X = np.random.default_rng(3).normal(size=(8, 4))
    perm = np.random.default_rng(4).permutation(8)
    spec = KernelSpec.rbf(0.2)
    assert np.allclose(gram(X[perm], spec), gram(X, spec)[np.ix_(perm, perm)], rtol=1e-13)


@pytest.mark.parametrize("spec", [KernelSpec.rbf(1e-4), KernelSpec.rbf(1e-2), KernelSpec.poly(1e-3, 2, 1.0)])
@pytest.mark.parametrize("m", [2, 5])
def test_gram_invariant_under_full_transform(spec, m):
    data = np.random.default_rng(5).integers(0, 256, (30, 10, 10, 1), dtype=np.uint8)
    base = zscore_apply(data, zscore_fit(data)).reshape(30, -1)
    full, _ = transform_dataset(data, TransformConfig(m, SecretKey(b"k" * 16)))
    g0, g1 = gram(base, spec), gram(full.reshape(30, -1), spec)
    assert np.max(np.abs(g1 - g0) / np.abs(g0)) < 1e-9
