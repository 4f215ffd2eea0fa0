"""Soft-margin kernel SVM trained by SMO, with one-vs-one multiclass voting.

The binary solver maximizes the dual

    W(a) = sum(a) - 1/2 sum_ij a_i a_j y_i y_j K_ij,   0 <= a_i <= C,  sum a_i y_i = 0

by repeatedly optimizing the maximal violating pair (first-order working
set selection, no shrinking) until the violation gap drops below ``tol``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .kernels import KernelSpec, gram, kernel_matrix
from .transform import NormStats

TAU = 1e-12
MODEL_MAGIC = b"BSVM"
MODEL_VERSION = 1
_HEAD = struct.Struct("<4sHHI")  # magic, version, reserved, header length


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, gap: float):
        super().__init__(f"SMO did not converge after {iterations} iterations (violation gap {gap:.3g})")
        self.iterations = iterations
        self.gap = gap


class ModelFormatError(ValueError):
    pass


@dataclass
class DualSolution:
    alpha: np.ndarray
    bias: float
    iterations: int


def dual_objective(alpha: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def solve_dual(
    K: np.ndarray,
    y: np.ndarray,
    C: float,
    tol: float = 1e-3,
    max_iter: int | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> DualSolution:
    """SMO on a precomputed Gram matrix.

    ``callback(iteration, alpha)`` is called after every pair update.
    """
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if K.shape != (n, n):
        raise ValueError(f"Gram matrix shape {K.shape} does not match {n} labels")
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iter is None:
        max_iter = max(1_000_000, 100 * n)

    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a with Q = yy'K
    pos = y > 0
    diag = np.diag(K)
    it = 0
    while True:
        score = -y * grad
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        gap = score[i] - score[j]
        if gap < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(it, float(gap))
        it += 1

        yi, yj = y[i], y[j]
        ai_old, aj_old = alpha[i], alpha[j]
        quad = diag[i] + diag[j] - 2.0 * K[i, j]
        if quad <= 0:
            quad = TAU
        if yi != yj:
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        # Q[:, i] = y * y_i * K[:, i]
        grad += y * (K[:, i] * (yi * (ai - ai_old)) + K[:, j] * (yj * (aj - aj_old)))
        if callback is not None:
            callback(it, alpha)

    score = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(score[free].mean())
    else:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        hi = score[up].max() if up.any() else score[low].min()
        lo = score[low].min() if low.any() else score[up].max()
        bias = float(0.5 * (hi + lo))
    return DualSolution(alpha, bias, it)


def kkt_violation(K: np.ndarray, y: np.ndarray, alpha: np.ndarray, bias: float, C: float) -> float:
    """Largest violation of the soft-margin KKT conditions in terms of ``y f(x)``."""
    yf = y * (K @ (alpha * y) + bias)
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~(at_zero | at_c)
    worst = 0.0
    if at_zero.any():
        worst = max(worst, float(np.max(1.0 - yf[at_zero])))
    if at_c.any():
        worst = max(worst, float(np.max(yf[at_c] - 1.0)))
    if free.any():
        worst = max(worst, float(np.max(np.abs(yf[free] - 1.0))))
    return worst


@dataclass
class BinaryModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    kernel: KernelSpec
    support_index: np.ndarray | None = None
    iterations: int = 0

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(X.shape[0], -1) if X.ndim > 1 else X[None, :]
        if X.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(
                f"input has {X.shape[1]} features, model expects {self.support_vectors.shape[1]}"
            )
        return kernel_matrix(X, self.support_vectors, self.kernel) @ self.dual_coef + self.bias

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) > 0, 1, -1)


def _check_binary_labels(y: np.ndarray) -> None:
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("binary labels must be -1 or +1")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValueError("binary problem needs both classes present")


def train_binary(
    X,
    y,
    C: float,
    kernel: KernelSpec,
    tol: float = 1e-3,
    max_iter: int | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> BinaryModel:
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} samples but {y.size} labels")
    _check_binary_labels(y)
    sol = solve_dual(gram(X, kernel), y, C, tol, max_iter, callback)
    sv = np.flatnonzero(sol.alpha > 0)
    return BinaryModel(X[sv].copy(), sol.alpha[sv] * y[sv], sol.bias, kernel, sv, sol.iterations)


def predict_binary(model: BinaryModel, x) -> tuple[int, float]:
    """Label (+1 when the margin is strictly positive, else -1) and margin."""
    margin = float(model.decision_function(np.ravel(x))[0])
    return (1 if margin > 0 else -1), margin


@dataclass
class PairModel:
    first: int  # class index voted for on a positive margin
    second: int
    sv_index: np.ndarray  # rows of TrainedModel.support_vectors
    dual_coef: np.ndarray
    bias: float


@dataclass
class TrainedModel:
    classes: list
    kernel: KernelSpec
    C: float
    support_vectors: np.ndarray
    pairs: list[PairModel]
    stats: NormStats | None = None
    transform: dict = field(default_factory=dict)
    tol: float = 1e-3
    train_index: np.ndarray | None = None  # training rows of support_vectors; not saved

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1]

    def binary(self, k: int) -> BinaryModel:
        p = self.pairs[k]
        return BinaryModel(self.support_vectors[p.sv_index], p.dual_coef, p.bias, self.kernel)

    def pair_margins(self, X) -> np.ndarray:
        """Margins of every pairwise model, shape ``(n_samples, n_pairs)``."""
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(X.shape[0], -1)
        if X.shape[1] != self.n_features:
            raise ValueError(f"input has {X.shape[1]} features, model expects {self.n_features}")
        Kx = kernel_matrix(X, self.support_vectors, self.kernel)
        out = np.empty((X.shape[0], len(self.pairs)))
        for k, p in enumerate(self.pairs):
            out[:, k] = Kx[:, p.sv_index] @ p.dual_coef + p.bias
        return out


def train_multiclass(
    X,
    labels: Sequence,
    C: float,
    kernel: KernelSpec,
    tol: float = 1e-3,
    max_iter: int | None = None,
    stats: NormStats | None = None,
    transform: dict | None = None,
) -> TrainedModel:
    """One-vs-one training; pair ``(a, b)`` uses +1 for class ``a`` (``a < b``)."""
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    labels = np.asarray(labels)
    if X.shape[0] != labels.size:
        raise ValueError(f"{X.shape[0]} samples but {labels.size} labels")
    classes, codes = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least 2 classes")

    K = gram(X, kernel)
    raw = []
    for a in range(classes.size):
        for b in range(a + 1, classes.size):
            idx = np.flatnonzero((codes == a) | (codes == b))
            y = np.where(codes[idx] == a, 1.0, -1.0)
            sol = solve_dual(K[np.ix_(idx, idx)], y, C, tol, max_iter)
            sv = np.flatnonzero(sol.alpha > 0)
            raw.append((a, b, idx[sv], sol.alpha[sv] * y[sv], sol.bias))

    pool = np.unique(np.concatenate([r[2] for r in raw])) if raw else np.empty(0, dtype=np.int64)
    where = {int(g): k for k, g in enumerate(pool)}
    pairs = [
        PairModel(a, b, np.array([where[int(g)] for g in gidx], dtype=np.int64), coef, bias)
        for a, b, gidx, coef, bias in raw
    ]
    return TrainedModel(
        classes=[c.item() if hasattr(c, "item") else c for c in classes],
        kernel=kernel,
        C=float(C),
        support_vectors=X[pool].copy(),
        pairs=pairs,
        stats=stats,
        transform=dict(transform or {}),
        tol=float(tol),
        train_index=pool,
    )


def vote(model: TrainedModel, margins: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and vote counts from pairwise margins.

    Ties on votes go to the larger summed |margin| of won contests, then to
    the lowest class index.
    """
    n, k = margins.shape[0], len(model.classes)
    votes = np.zeros((n, k), dtype=np.int64)
    strength = np.zeros((n, k))
    rows = np.arange(n)
    for col, p in enumerate(model.pairs):
        m = margins[:, col]
        winner = np.where(m > 0, p.first, p.second)
        votes[rows, winner] += 1
        strength[rows, winner] += np.abs(m)
    best = np.empty(n, dtype=np.int64)
    for r in range(n):
        top = np.flatnonzero(votes[r] == votes[r].max())
        if top.size > 1:
            s = strength[r, top]
            top = top[s == s.max()]
        best[r] = top[0]
    return best, votes


def predict_multiclass(model: TrainedModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    best, _ = vote(model, model.pair_margins(X))
    return np.asarray(model.classes, dtype=object if _mixed(model.classes) else None)[best]


def _mixed(classes: list) -> bool:
    return len({type(c) for c in classes}) > 1


# -- model file ------------------------------------------------------------
#
# layout (all integers little-endian):
#   magic "BSVM" | u16 version | u16 reserved | u32 header length
#   header: UTF-8 JSON (classes, kernel, C, tol, transform fingerprint,
#           pair table, array directory)
#   payload: raw arrays listed in the directory, "<f8" or "<i8", C order
#   trailer: SHA-256 of every preceding byte


def _arrays_for(model: TrainedModel) -> list[tuple[str, np.ndarray]]:
    arrays = [("support_vectors", model.support_vectors)]
    for k, p in enumerate(model.pairs):
        arrays.append((f"pair{k}.sv_index", p.sv_index))
        arrays.append((f"pair{k}.dual_coef", p.dual_coef))
    if model.stats is not None:
        arrays.append(("stats.total", model.stats.total))
        arrays.append(("stats.std", model.stats.std))
    return arrays


def model_to_bytes(model: TrainedModel) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in _arrays_for(model):
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        directory.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "classes": model.classes,
        "kernel": model.kernel.to_dict(),
        "C": model.C,
        "tol": model.tol,
        "transform": model.transform,
        "pairs": [{"first": p.first, "second": p.second, "bias": p.bias} for p in model.pairs],
        "stats": None
        if model.stats is None
        else {"count": model.stats.count, "shape": list(model.stats.shape)},
        "arrays": directory,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEAD.pack(MODEL_MAGIC, MODEL_VERSION, 0, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def model_from_bytes(blob: bytes) -> TrainedModel:
    if len(blob) < _HEAD.size + 32:
        raise ModelFormatError("model file is truncated")
    magic, version, _, head_len = _HEAD.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("model file is corrupt or truncated (checksum mismatch)")
    start = _HEAD.size + head_len
    try:
        header = json.loads(body[_HEAD.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable model header: {exc}") from None
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        lo = start + entry["offset"]
        hi = lo + count * dtype.itemsize
        if hi > len(body):
            raise ModelFormatError(f"array {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(body[lo:hi], dtype=dtype).reshape(entry["shape"]).copy()
    pairs = [
        PairModel(p["first"], p["second"], arrays[f"pair{k}.sv_index"], arrays[f"pair{k}.dual_coef"], p["bias"])
        for k, p in enumerate(header["pairs"])
    ]
    stats = None
    if header["stats"] is not None:
        stats = NormStats(
            count=header["stats"]["count"],
            total=arrays["stats.total"],
            std=arrays["stats.std"],
            shape=tuple(header["stats"]["shape"]),
        )
    return TrainedModel(
        classes=header["classes"],
        kernel=KernelSpec.from_dict(header["kernel"]),
        C=header["C"],
        support_vectors=arrays["support_vectors"],
        pairs=pairs,
        stats=stats,
        transform=header["transform"],
        tol=header["tol"],
    )


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> TrainedModel:
    return model_from_bytes(Path(path).read_bytes())
