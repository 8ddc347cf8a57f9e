"""Classification metrics and noise-matrix recovery diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    """Counts indexed (true, predicted)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"confusion_matrix: length mismatch {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("confusion_matrix: no samples")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"{name} has labels outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: np.ndarray
    q_error_maxabs: float = 0.0
    q_error_frobenius: float = 0.0
    q_estimated: np.ndarray | None = field(default=None, repr=False)
    q_true: np.ndarray | None = field(default=None, repr=False)

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
        ]
        for name in ("precision", "recall", "f1"):
            out.extend((f"{name}_{k}", v) for k, v in enumerate(getattr(self, name)))
        out.append(("q_error_maxabs", self.q_error_maxabs))
        out.append(("q_error_frobenius", self.q_error_frobenius))
        return out


def compute_metrics(y_true, y_pred, k: int) -> MetricsReport:
    cm = confusion_matrix(y_true, y_pred, k)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return MetricsReport(
        accuracy=float(tp.sum() / cm.sum()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=cm,
    )


def estimated_Q(model, source_x) -> np.ndarray:
    """Noise-layer transition averaged over a feature sample and both peers."""
    x = np.asarray(source_x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("estimated_Q: need a non-empty 2-D sample")
    k = model.n_classes
    acc = np.zeros((k, k))
    with ad.no_grad():
        for peer in model.peers:
            t = model.noise_layer.transitions(peer.extractor(x)).data
            acc += t.reshape(-1, k, k).mean(axis=0)
    return acc / len(model.peers)


def q_error(q_est, q_true) -> tuple[float, float]:
    a = np.asarray(q_est, dtype=np.float64)
    b = np.asarray(q_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"q_error: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.abs(diff).max()), float(np.sqrt((diff**2).sum()))


def write_report(report: MetricsReport, path) -> None:
    lines = [f"{name},{value!r}" for name, value in report.rows()]
    for tag, q in (("Q_est", report.q_estimated), ("Q_true", report.q_true)):
        if q is None:
            continue
        for i, row in enumerate(q):
            lines.append(f"{tag},{i}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> dict:
    """Scalar metrics plus ``Q_est`` / ``Q_true`` matrices when present."""
    out: dict = {}
    blocks: dict[str, dict[int, list[float]]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        cells = line.split(",")
        if cells[0] in ("Q_est", "Q_true"):
            blocks.setdefault(cells[0], {})[int(cells[1])] = [float(v) for v in cells[2:]]
        else:
            out[cells[0]] = float(cells[1])
    for tag, rows in blocks.items():
        out[tag] = np.array([rows[i] for i in sorted(rows)])
    return out
