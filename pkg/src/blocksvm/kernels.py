"""Kernel functions and Gram matrices.

The feature map behind each kernel is never built; kernels are evaluated
directly on flattened feature vectors (rows of ``X``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

KINDS = ("rbf", "poly", "linear")


@dataclass(frozen=True)
class KernelSpec:
    """``rbf``: exp(-gamma |x-y|^2); ``poly``: (coef0 + gamma <x,y>)^degree; ``linear``: <x,y>."""

    kind: str
    gamma: float = 1.0
    degree: int = 2
    coef0: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KINDS}")
        if self.kind != "linear" and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.kind == "poly" and (int(self.degree) != self.degree or self.degree < 1):
            raise ValueError(f"degree must be a positive integer, got {self.degree}")

    @classmethod
    def rbf(cls, gamma: float) -> KernelSpec:
        return cls("rbf", gamma=gamma)

    @classmethod
    def poly(cls, gamma: float = 1.0, degree: int = 2, coef0: float = 1.0) -> KernelSpec:
        return cls("poly", gamma=gamma, degree=int(degree), coef0=coef0)

    @classmethod
    def linear(cls) -> KernelSpec:
        return cls("linear")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> KernelSpec:
        return cls(d["kind"], float(d["gamma"]), int(d["degree"]), float(d["coef0"]))


def kernel_eval(x, y, spec: KernelSpec) -> float:
    x = np.ravel(np.asarray(x, dtype=np.float64))
    y = np.ravel(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.size} vs {y.size}")
    if spec.kind == "rbf":
        d = x - y
        return float(np.exp(-spec.gamma * np.dot(d, d)))
    dot = float(np.dot(x, y))
    if spec.kind == "poly":
        return float((spec.coef0 + spec.gamma * dot) ** spec.degree)
    return dot


def _rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    elif X.ndim > 2:
        X = X.reshape(X.shape[0], -1)
    return X


def kernel_matrix(X, Y, spec: KernelSpec) -> np.ndarray:
    """Cross-kernel ``K[i, j] = k(X[i], Y[j])``."""
    X, Y = _rows(X), _rows(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    dots = X @ Y.T
    if spec.kind == "rbf":
        sq = np.einsum("ij,ij->i", X, X)[:, None] + np.einsum("ij,ij->i", Y, Y)[None, :] - 2.0 * dots
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-spec.gamma * sq)
    if spec.kind == "poly":
        return (spec.coef0 + spec.gamma * dots) ** spec.degree
    return dots


def gram(X, spec: KernelSpec) -> np.ndarray:
    """Symmetric ``n x n`` Gram matrix of the rows of ``X``."""
    X = _rows(X)
    if X.shape[0] == 0:
        raise ValueError("cannot build a Gram matrix of an empty set")
    dots = X @ X.T
    dots = 0.5 * (dots + dots.T)  # BLAS may not return an exactly symmetric product
    if spec.kind == "rbf":
        norms = np.diag(dots).copy()
        sq = norms[:, None] + norms[None, :] - 2.0 * dots
        np.maximum(sq, 0.0, out=sq)
        np.fill_diagonal(sq, 0.0)
        return np.exp(-spec.gamma * sq)
    if spec.kind == "poly":
        return (spec.coef0 + spec.gamma * dots) ** spec.degree
    return dots
