"""Synthetic domain-shift data, label corruption and the dataset file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ConfigError
from .model import stream

HEADER_PREFIX = "# couda-dataset v1"
SPLITS = ("source", "target", "target_test")


class DatasetParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class ShiftSpec:
    """Gaussian class clusters on a circle; the target is a rotated, scaled, shifted copy."""

    n_classes: int = 3
    dim: int = 2
    per_class: int = 200
    rotation: float = math.radians(30.0)
    translation: tuple[float, ...] = ()
    scale: float = 1.0
    spread: float = 0.5
    separation: float = 2.0
    test_per_class: int | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"ShiftSpec: need at least 2 classes, got {self.n_classes}")
        if self.dim < 2:
            raise ConfigError(f"ShiftSpec: dim must be >= 2, got {self.dim}")
        if self.spread <= 0:
            raise ConfigError(f"ShiftSpec: spread must be positive, got {self.spread}")
        if self.per_class < 1:
            raise ConfigError(f"ShiftSpec: per_class must be >= 1, got {self.per_class}")
        if self.scale <= 0:
            raise ConfigError(f"ShiftSpec: scale must be positive, got {self.scale}")
        if self.translation and len(self.translation) != self.dim:
            raise ConfigError(f"ShiftSpec: translation needs {self.dim} entries")


@dataclass
class DatasetBundle:
    source_x: np.ndarray
    source_z: np.ndarray
    source_y_clean: np.ndarray
    target_x: np.ndarray
    target_test_x: np.ndarray
    target_test_y: np.ndarray
    true_Q: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.true_Q.shape[0]

    @property
    def dim(self) -> int:
        return self.source_x.shape[1]

    def equals(self, other: "DatasetBundle") -> bool:
        names = ("source_x", "source_z", "source_y_clean", "target_x", "target_test_x", "target_test_y", "true_Q")
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in names
        )


def class_means(spec: ShiftSpec) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes + np.pi / 2
    means = np.zeros((spec.n_classes, spec.dim))
    means[:, 0] = spec.separation * np.cos(angles)
    means[:, 1] = spec.separation * np.sin(angles)
    return means


def shift_map(spec: ShiftSpec, x: np.ndarray) -> np.ndarray:
    """Rotate the first two coordinates, then scale, then translate."""
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    out = x.copy()
    out[:, 0] = c * x[:, 0] - s * x[:, 1]
    out[:, 1] = s * x[:, 0] + c * x[:, 1]
    out *= spec.scale
    if spec.translation:
        out += np.asarray(spec.translation, dtype=np.float64)
    return out


def _draw(spec: ShiftSpec, rng: np.random.Generator, per_class: int) -> tuple[np.ndarray, np.ndarray]:
    means = class_means(spec)
    y = np.repeat(np.arange(spec.n_classes), per_class)
    x = means[y] + spec.spread * rng.standard_normal((y.shape[0], spec.dim))
    return x, y


def gen_shifted_gaussians(spec: ShiftSpec, seed: int) -> DatasetBundle:
    """Clean bundle: source clusters, and target drawn from the same clusters then shifted."""
    rng = stream(seed, "data")
    test_per_class = spec.test_per_class or spec.per_class
    sx, sy = _draw(spec, rng, spec.per_class)
    tx, _ = _draw(spec, rng, spec.per_class)
    ex, ey = _draw(spec, rng, test_per_class)
    return DatasetBundle(
        source_x=sx,
        source_z=sy.copy(),
        source_y_clean=sy,
        target_x=shift_map(spec, tx),
        target_test_x=shift_map(spec, ex),
        target_test_y=ey,
        true_Q=np.eye(spec.n_classes),
        seed=seed,
    )


_GRID = 2.0**-52


def uniform_noise_matrix(rho: float, k: int) -> np.ndarray:
    """(1 - rho) on the diagonal, rho / (K - 1) elsewhere; rows sum to exactly 1.0.

    Off-diagonal entries are snapped to multiples of 2**-52, which makes every
    partial row sum representable and the diagonal exact.
    """
    off = round(rho / (k - 1) / _GRID) * _GRID
    q = np.full((k, k), off)
    np.fill_diagonal(q, 1.0 - (k - 1) * off)
    return q


def inject_label_noise(labels, rho: float, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Flip each label with probability ``rho`` to a uniformly chosen other class."""
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"noise rate must lie in [0, 1), got {rho}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels out of range for K={k}")
    rng = stream(seed, "label-noise")
    flip = rng.random(labels.shape[0]) < rho
    offset = rng.integers(1, k, size=labels.shape[0])
    noisy = np.where(flip, (labels + offset) % k, labels)
    return noisy, uniform_noise_matrix(rho, k)


def imbalance_subsample(bundle: DatasetBundle, p_class: float, seed: int) -> DatasetBundle:
    """Halve (rounding up) the source samples of each class picked with probability ``p_class``."""
    if not 0.0 <= p_class <= 1.0:
        raise ConfigError(f"p_class must lie in [0, 1], got {p_class}")
    rng = stream(seed, "imbalance")
    k = bundle.n_classes
    selected = rng.random(k) < p_class
    keep = np.ones(bundle.source_x.shape[0], dtype=bool)
    for c in range(k):
        idx = np.flatnonzero(bundle.source_y_clean == c)
        if idx.size == 0:
            raise ValueError(f"imbalance_subsample: class {c} has no source samples")
        if selected[c]:
            kept = rng.choice(idx, size=math.ceil(idx.size / 2), replace=False)
            drop = np.setdiff1d(idx, kept)
            keep[drop] = False
    meta = dict(bundle.meta, imbalanced_classes=[int(c) for c in np.flatnonzero(selected)])
    return replace(
        bundle,
        source_x=bundle.source_x[keep],
        source_z=bundle.source_z[keep],
        source_y_clean=bundle.source_y_clean[keep],
        meta=meta,
    )


def make_bundle(spec: ShiftSpec, noise: float, p_class: float, seed: int) -> DatasetBundle:
    """Generate, subsample for imbalance, then corrupt source labels."""
    bundle = gen_shifted_gaussians(spec, seed)
    if p_class > 0:
        bundle = imbalance_subsample(bundle, p_class, seed)
    noisy, q = inject_label_noise(bundle.source_y_clean, noise, spec.n_classes, seed)
    return replace(bundle, source_z=noisy, true_Q=q)


def _fmt(v: float) -> str:
    return repr(float(v))


def save_bundle(bundle: DatasetBundle, path) -> None:
    k, d = bundle.n_classes, bundle.dim
    lines = [f"{HEADER_PREFIX}, K={k}, dim={d}", f"# seed {bundle.seed}"]

    def rows(split, domain, xs, noisy, clean):
        for i in range(xs.shape[0]):
            vals = ",".join(_fmt(v) for v in xs[i])
            lines.append(f"{split},{domain},{int(noisy[i])},{int(clean[i])},{vals}")

    n_t = bundle.target_x.shape[0]
    rows("source", 0, bundle.source_x, bundle.source_z, bundle.source_y_clean)
    rows("target", 1, bundle.target_x, np.full(n_t, -1), np.full(n_t, -1))
    n_e = bundle.target_test_x.shape[0]
    rows("target_test", 1, bundle.target_test_x, np.full(n_e, -1), bundle.target_test_y)
    for i in range(k):
        lines.append(f"# Q {i} " + ",".join(_fmt(v) for v in bundle.true_Q[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int]:
    if not line.startswith(HEADER_PREFIX):
        raise DatasetParseError(1, f"missing header {HEADER_PREFIX!r}")
    fields = {}
    for part in line[len(HEADER_PREFIX):].split(","):
        part = part.strip()
        if not part:
            continue
        key, _, value = part.partition("=")
        fields[key.strip()] = value.strip()
    try:
        return int(fields["K"]), int(fields["dim"])
    except (KeyError, ValueError):
        raise DatasetParseError(1, "header must declare K=<int> and dim=<int>") from None


def load_bundle(path) -> DatasetBundle:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(1, "empty file")
    k, d = _parse_header(lines[0])
    seed = 0
    parts: dict[str, list] = {s: [] for s in SPLITS}
    q_rows: dict[int, list[float]] = {}
    for no, line in enumerate(lines[1:], start=2):
        if line.startswith("# seed "):
            try:
                seed = int(line[len("# seed "):])
            except ValueError:
                raise DatasetParseError(no, "bad seed line") from None
            continue
        if line.startswith("# Q "):
            bits = line[4:].split(" ", 1)
            try:
                row = int(bits[0])
                vals = [float(v) for v in bits[1].split(",")]
            except (ValueError, IndexError):
                raise DatasetParseError(no, "bad Q row") from None
            if len(vals) != k or not 0 <= row < k:
                raise DatasetParseError(no, f"Q row must hold {k} values with index < {k}")
            q_rows[row] = vals
            continue
        if line.startswith("#"):
            continue
        cells = line.split(",")
        if len(cells) != 4 + d:
            raise DatasetParseError(no, f"expected {4 + d} fields, got {len(cells)}")
        split = cells[0]
        if split not in parts:
            raise DatasetParseError(no, f"unknown split {split!r}")
        try:
            domain, noisy, clean = int(cells[1]), int(cells[2]), int(cells[3])
            x = [float(v) for v in cells[4:]]
        except ValueError:
            raise DatasetParseError(no, "non-numeric field") from None
        if domain != (0 if split == "source" else 1):
            raise DatasetParseError(no, f"domain {domain} inconsistent with split {split}")
        for label in (noisy, clean):
            if not -1 <= label < k:
                raise DatasetParseError(no, f"label {label} out of range for K={k}")
        if split == "source" and (noisy < 0 or clean < 0):
            raise DatasetParseError(no, "source rows need noisy and clean labels")
        if split == "target_test" and clean < 0:
            raise DatasetParseError(no, "target_test rows need a clean label")
        parts[split].append((noisy, clean, x))
    if sorted(q_rows) != list(range(k)):
        raise DatasetParseError(len(lines), f"expected {k} Q rows, found {len(q_rows)}")

    def arrays(split):
        rows = parts[split]
        xs = np.array([r[2] for r in rows], dtype=np.float64).reshape(len(rows), d)
        noisy = np.array([r[0] for r in rows], dtype=np.int64)
        clean = np.array([r[1] for r in rows], dtype=np.int64)
        return xs, noisy, clean

    sx, sz, sy = arrays("source")
    tx, _, _ = arrays("target")
    ex, _, ey = arrays("target_test")
    q = np.array([q_rows[i] for i in range(k)], dtype=np.float64)
    return DatasetBundle(sx, sz, sy, tx, ex, ey, q, seed)
