"""Train-on-transformed / evaluate with and without key, plus invariant checks."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import LabeledDataset, SplitSpec, load_directory, split, synth_faces
from .kernels import KernelSpec, gram
from .keymat import SecretKey, derive_subkeys, gen_flip_mask
from .svm import predict_multiclass, train_multiclass
from .transform import (
    STEP_NAMES,
    TransformConfig,
    flip_bits,
    scramble,
    transform_dataset,
    zscore_apply,
    zscore_fit,
)

log = logging.getLogger(__name__)

NO_KEY_MODES = ("baseline-stats", "raw")
BASELINE_MODES = ("zscore", "raw")


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synth"  # "synth" or a directory of class subdirectories
    synth_classes: int = 10
    synth_height: int = 20
    synth_width: int = 20
    synth_noise: float = 12.0
    image_size: tuple[int, int] | None = None
    channels: int = 1
    seed: int = 0
    split_seed: int | None = None
    train_per_class: int = 30
    test_per_class: int = 10
    block_sizes: tuple[int, ...] = (2, 5)
    steps: tuple[str, ...] = STEP_NAMES
    kernel: str = "rbf"
    gamma: float = 1e-4
    degree: int = 2
    coef0: float = 1.0
    C: float = 512.0
    tol: float = 1e-3
    no_key_normalization: str = "baseline-stats"
    baseline_normalization: str = "zscore"
    strict: bool = True

    def __post_init__(self) -> None:
        if self.no_key_normalization not in NO_KEY_MODES:
            raise ExperimentError(f"no_key_normalization must be one of {NO_KEY_MODES}")
        if self.baseline_normalization not in BASELINE_MODES:
            raise ExperimentError(f"baseline_normalization must be one of {BASELINE_MODES}")
        unknown = set(self.steps) - set(STEP_NAMES)
        if unknown:
            raise ExperimentError(f"unknown steps {sorted(unknown)}")

    @property
    def kernel_spec(self) -> KernelSpec:
        if self.kernel == "rbf":
            return KernelSpec.rbf(self.gamma)
        if self.kernel == "poly":
            return KernelSpec.poly(self.gamma, self.degree, self.coef0)
        if self.kernel == "linear":
            return KernelSpec.linear()
        raise ExperimentError(f"unknown kernel {self.kernel!r}")

    # plain-text form: one "name = value" per line, '#' comments, lists comma-separated

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ExperimentError(f"config line {lineno}: expected 'name = value'")
            name, raw = (s.strip() for s in line.split("=", 1))
            if name not in kinds:
                raise ExperimentError(f"config line {lineno}: unknown setting {name!r}")
            values[name] = _parse_value(name, raw, kinds[name])
        return cls(**values)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def _parse_value(name: str, raw: str, kind: str):
    if raw.lower() == "none":
        return None
    if name in ("image_size",):
        h, w = raw.lower().replace("x", ",").split(",")
        return int(h), int(w)
    if name == "block_sizes":
        return tuple(int(v) for v in raw.split(","))
    if name == "steps":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if "bool" in kind:
        return raw.lower() in ("1", "true", "yes", "on")
    if "float" in kind:
        return float(raw)
    if "int" in kind:
        return int(raw)
    return raw


@dataclass
class ReportRow:
    transform: str
    with_key: float
    without_key: float
    identical_to_baseline: bool = False


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)
    baseline: float | None = None
    metadata: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)  # kept in memory only
    test_labels: np.ndarray | None = None


def load_data(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if config.dataset == "synth":
        data = synth_faces(
            config.synth_classes,
            config.train_per_class + config.test_per_class,
            config.synth_height,
            config.synth_width,
            config.seed,
            config.synth_noise,
        )
    else:
        data = load_directory(config.dataset, config.channels, config.image_size, config.strict)
    return split(data, SplitSpec(config.train_per_class, config.test_per_class, config.split_seed))


def accuracy(predicted, truth) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    return float(np.mean(predicted == truth)) if truth.size else 0.0


def no_key_inputs(test_images, mode: str, plain_stats) -> np.ndarray:
    """What a user without the key feeds the model: untransformed images."""
    if mode == "raw":
        return np.asarray(test_images, dtype=np.float64)
    return zscore_apply(test_images, plain_stats)


def run_protocol(config: ExperimentConfig, key: SecretKey, jobs: int = 1) -> Report:
    """Baseline plus one protected run per block size; ``jobs > 1`` runs those in threads."""
    train, test = load_data(config)
    spec = config.kernel_spec
    n_classes = len(train.classes)
    log.info("train %d / test %d images, %d classes", len(train), len(test), n_classes)

    plain_stats = zscore_fit(train.images)
    if config.baseline_normalization == "zscore":
        base_train = zscore_apply(train.images, plain_stats)
        base_test = zscore_apply(test.images, plain_stats)
    else:
        base_train = train.images.astype(np.float64)
        base_test = test.images.astype(np.float64)
    try:
        base_model = train_multiclass(base_train, train.labels, config.C, spec, config.tol)
    except Exception as exc:
        raise ExperimentError(f"baseline training failed: {exc}") from exc
    base_pred = predict_multiclass(base_model, base_test)

    report = Report(
        baseline=accuracy(base_pred, test.labels),
        metadata={
            "version": __version__,
            "config": config.fingerprint(),
            "kernel": spec.to_dict(),
            "C": config.C,
            "classes": n_classes,
            "train": len(train),
            "test": len(test),
            "chance": 1.0 / n_classes,
        },
        test_labels=test.labels,
    )
    report.predictions["baseline"] = base_pred

    def protected(m: int):
        tcfg = TransformConfig.from_steps(m, key, config.steps)
        name = f"proposed(M={m})"
        train_t, stats = transform_dataset(train.images, tcfg)
        try:
            model = train_multiclass(
                train_t, train.labels, config.C, spec, config.tol, stats=stats, transform=tcfg.fingerprint()
            )
        except Exception as exc:
            raise ExperimentError(f"training {name} failed: {exc}") from exc
        test_t, _ = transform_dataset(test.images, tcfg, stats)
        with_key = predict_multiclass(model, test_t)
        mode = config.no_key_normalization if tcfg.zscore else "raw"
        without_key = predict_multiclass(model, no_key_inputs(test.images, mode, plain_stats))
        return name, with_key, without_key

    if jobs > 1 and len(config.block_sizes) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(protected, config.block_sizes))
    else:
        outcomes = [protected(m) for m in config.block_sizes]

    # rows are assembled in block-size order whatever the scheduling was
    for name, with_key, without_key in outcomes:
        report.predictions[f"{name}/with_key"] = with_key
        report.predictions[f"{name}/without_key"] = without_key
        report.rows.append(
            ReportRow(
                name,
                accuracy(with_key, test.labels),
                accuracy(without_key, test.labels),
                bool(np.array_equal(with_key, base_pred)),
            )
        )
        log.info("%s: with key %.4f, without key %.4f", name, report.rows[-1].with_key, report.rows[-1].without_key)
    return report


def render_text(report: Report) -> str:
    out = io.StringIO()
    for k in sorted(report.metadata):
        out.write(f"# {k}: {json.dumps(report.metadata[k], sort_keys=True)}\n")
    out.write(f"{'transform':<16}{'with key':>10}{'without key':>13}\n")
    for row in report.rows:
        out.write(f"{row.transform:<16}{row.with_key:>10.4f}{row.without_key:>13.4f}\n")
    if report.baseline is not None:
        out.write(f"{'baseline':<16}{report.baseline:>10.4f}{report.baseline:>13.4f}\n")
    return out.getvalue()


def render_csv(report: Report) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    writer.writerow(["transform", "with_key", "without_key"])
    for row in report.rows:
        writer.writerow([row.transform, f"{row.with_key:.4f}", f"{row.without_key:.4f}"])
    if report.baseline is not None:
        writer.writerow(["baseline", f"{report.baseline:.4f}", f"{report.baseline:.4f}"])
    return out.getvalue()


def emit_report(report: Report, path, fmt: str = "text") -> None:
    if fmt not in ("text", "csv"):
        raise ExperimentError(f"unknown report format {fmt!r}")
    content = render_text(report) if fmt == "text" else render_csv(report)
    try:
        Path(path).write_text(content, encoding="utf-8", newline="")
    except OSError as exc:
        raise ExperimentError(f"cannot write report to {path}: {exc}") from exc


# -- invariant verification -------------------------------------------------


@dataclass
class InvariantResult:
    name: str
    passed: bool
    deviation: float
    detail: str = ""


def _random_key(rng: np.random.Generator) -> SecretKey:
    return SecretKey(rng.integers(0, 256, size=16, dtype=np.uint8).tobytes())


def verify_invariants(
    seed: int = 0,
    pairs: int = 100,
    sizes: tuple[int, ...] = (20, 50),
    block_sizes: tuple[int, ...] = (2, 5),
    dataset_size: int = 60,
    fault_injection: bool = False,
) -> list[InvariantResult]:
    """Check the distance / inner-product / sign / Gram properties on random data.

    With ``fault_injection`` the two images of each bit-flip pair get
    different masks, which must make the flip distance check fail.
    """
    rng = np.random.default_rng(seed)
    results = []

    dist_dev = ip_dev = flip_dist_dev = 0
    flip_ip_differs = 0
    for t in range(pairs):
        size = sizes[t % len(sizes)]
        m = block_sizes[(t // len(sizes)) % len(block_sizes)]
        key = _random_key(rng)
        a, b = rng.integers(0, 256, size=(2, size, size, 1), dtype=np.uint8)
        cfg = TransformConfig(m, key, bit_flip=False, zscore=False)
        sa, sb = scramble(np.stack([a, b]), cfg).astype(np.int64)
        a64, b64 = a.astype(np.int64), b.astype(np.int64)
        dist_dev = max(dist_dev, abs(int(((sa - sb) ** 2).sum()) - int(((a64 - b64) ** 2).sum())))
        ip_dev = max(ip_dev, abs(int((sa * sb).sum()) - int((a64 * b64).sum())))

        _, _, k3 = derive_subkeys(key)
        mask = gen_flip_mask(k3, a.size)
        other = gen_flip_mask(k3, a.size, nonce=1) if fault_injection else mask
        fa = flip_bits(a.reshape(-1), mask).astype(np.int64)
        fb = flip_bits(b.reshape(-1), other).astype(np.int64)
        flat_a, flat_b = a64.reshape(-1), b64.reshape(-1)
        flip_dist_dev = max(flip_dist_dev, abs(int(((fa - fb) ** 2).sum()) - int(((flat_a - flat_b) ** 2).sum())))
        flip_ip_differs += int((fa * fb).sum()) != int((flat_a * flat_b).sum())

    results.append(InvariantResult("distance conservation (permutation + shuffle)", dist_dev == 0, float(dist_dev)))
    results.append(InvariantResult("inner-product conservation (permutation + shuffle)", ip_dev == 0, float(ip_dev)))
    results.append(InvariantResult("distance conservation (bit flip)", flip_dist_dev == 0, float(flip_dist_dev)))
    frac = flip_ip_differs / pairs
    results.append(
        InvariantResult(
            "inner product changed by bit flip", frac >= 0.95, frac, f"{flip_ip_differs}/{pairs} pairs differ"
        )
    )

    data = synth_faces(5, max(2, dataset_size // 5), sizes[0], sizes[0], seed=seed).images
    for m in block_sizes:
        key = _random_key(rng)
        sign_dev, std_dev = sign_relation(data, key, m)
        results.append(InvariantResult(f"z-score sign relation (M={m})", sign_dev < 1e-9, sign_dev))
        results.append(InvariantResult(f"std unchanged by bit flip (M={m})", std_dev < 1e-9, std_dev))
        for spec in (KernelSpec.rbf(1e-4), KernelSpec.rbf(1e-2), KernelSpec.poly(1e-3, 2, 1.0)):
            dev = gram_deviation(data, key, m, spec)
            results.append(InvariantResult(f"Gram equivalence {spec.kind} gamma={spec.gamma} (M={m})", dev < 1e-9, dev))
    return results


def sign_relation(images, key: SecretKey, block_size: int) -> tuple[float, float]:
    """Max |z* - s*z| and max |std* - std| where s is -1 on flipped positions.

    Statistics are compared position by position after block permutation and
    pixel shuffling, so only the flip differs between the two datasets.
    """
    perm_only = TransformConfig(block_size, key, bit_flip=False, zscore=False)
    full = TransformConfig(block_size, key, zscore=False)
    plain = scramble(images, perm_only)
    flipped = scramble(images, full)
    s_plain, s_flip = zscore_fit(plain), zscore_fit(flipped)
    z = zscore_apply(plain, s_plain).reshape(len(plain), -1)
    z_star = zscore_apply(flipped, s_flip).reshape(len(plain), -1)
    sign = np.where(_flipped_positions(images, key, block_size), -1.0, 1.0)
    return float(np.max(np.abs(z_star - sign * z))), float(np.max(np.abs(s_flip.std - s_plain.std)))


def _flipped_positions(images, key: SecretKey, block_size: int) -> np.ndarray:
    """Positions (in the scrambled image) that the flip mask negates."""
    probe = np.zeros_like(np.asarray(images)[:1])
    cfg = TransformConfig(block_size, key, block_permutation=False, pixel_shuffle=False, zscore=False)
    return (scramble(probe, cfg) != 0).reshape(-1)


def gram_deviation(images, key: SecretKey, block_size: int, spec: KernelSpec) -> float:
    """Max relative difference between transformed and baseline Gram matrices."""
    base = zscore_apply(images, zscore_fit(images))
    full, _ = transform_dataset(images, TransformConfig(block_size, key))
    g0 = gram(base.reshape(len(base), -1), spec)
    g1 = gram(full.reshape(len(full), -1), spec)
    scale = np.maximum(np.abs(g0), 1e-300)
    return float(np.max(np.abs(g1 - g0) / scale))
