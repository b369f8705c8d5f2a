"""F1-frame metrics, per-class threshold tuning and label statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass
class ClassReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    tau: float


@dataclass
class EvalReport:
    classes: list
    macro_f1: float
    cardinality: float = float("nan")
    density: float = float("nan")
    correlation: Optional[np.ndarray] = None
    names: list = field(default_factory=list)

    def f1s(self) -> np.ndarray:
        return np.array([c.f1 for c in self.classes])

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"name": n, **{k: (float(v) if isinstance(v, float) else int(v)) for k, v in vars(c).items()}}
                for n, c in zip(self.names, self.classes)
            ],
            "macro_f1": float(self.macro_f1),
            "cardinality": float(self.cardinality),
            "density": float(self.density),
            "correlation": None if self.correlation is None else self.correlation.tolist(),
        }

    def to_tsv(self) -> str:
        lines = ["class\ttau\ttp\tfp\tfn\ttn\tprecision\trecall\tf1"]
        for n, c in zip(self.names, self.classes):
            lines.append(
                f"{n}\t{c.tau:.2f}\t{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}\t{c.precision:.6f}\t{c.recall:.6f}\t{c.f1:.6f}"
            )
        lines.append(f"macro\t\t\t\t\t\t\t\t{self.macro_f1:.6f}")
        return "\n".join(lines) + "\n"


def prf(tp: int, fp: int, fn: int) -> tuple:
    """Precision, recall, F1 with zero-division guards returning 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def confusion(scores: np.ndarray, labels: np.ndarray, tau) -> tuple:
    """Per-class (tp, fp, fn, tn) under the rule score >= tau."""
    pred = scores >= np.asarray(tau)
    lab = labels.astype(bool)
    tp = (pred & lab).sum(axis=0)
    fp = (pred & ~lab).sum(axis=0)
    fn = (~pred & lab).sum(axis=0)
    tn = (~pred & ~lab).sum(axis=0)
    return tp, fp, fn, tn


def f1_frame(scores, labels, tau=0.5, names: Optional[Sequence[str]] = None) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal (M, N) matrices")
    N = scores.shape[1]
    taus = np.broadcast_to(np.asarray(tau, dtype=np.float64), (N,))
    tp, fp, fn, tn = confusion(scores, labels, taus)
    classes = []
    for j in range(N):
        p, r, f = prf(int(tp[j]), int(fp[j]), int(fn[j]))
        classes.append(ClassReport(int(tp[j]), int(fp[j]), int(fn[j]), int(tn[j]), p, r, f, float(taus[j])))
    macro = float(np.mean([c.f1 for c in classes])) if classes else 0.0
    card, dens = label_stats(labels) if len(labels) else (float("nan"), float("nan"))
    return EvalReport(
        classes=classes,
        macro_f1=macro,
        cardinality=card,
        density=dens,
        names=list(names) if names else [f"AU{j}" for j in range(N)],
    )


def f1_sweep(scores, labels, grid: Sequence[float] = DEFAULT_GRID) -> np.ndarray:
    """(len(grid), N) F1 of every class at every threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    out = np.zeros((len(grid), scores.shape[1]))
    for g, tau in enumerate(grid):
        tp, fp, fn, _ = confusion(scores, labels, tau)
        out[g] = [prf(int(a), int(b), int(c))[2] for a, b, c in zip(tp, fp, fn)]
    return out


def tune_thresholds(scores_val, labels_val, grid: Sequence[float] = DEFAULT_GRID) -> np.ndarray:
    """Smallest grid value maximising validation F1, per class."""
    grid = [float(g) for g in grid]
    if not grid or any(not 0 < g < 1 for g in grid):
        raise ValueError("threshold grid must be non-empty and inside (0, 1)")
    grid = sorted(grid)
    sweep = f1_sweep(scores_val, labels_val, grid)
    # argmax returns the first (smallest) maximiser
    return np.array([grid[k] for k in sweep.argmax(axis=0)])


def au_correlation_matrix(labels) -> np.ndarray:
    """Pearson correlation between label columns; constant columns get 0 off-diagonal."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or len(y) < 2:
        raise ValueError("need at least two samples")
    centered = y - y.mean(axis=0)
    sd = np.sqrt((centered**2).sum(axis=0))
    cov = centered.T @ centered
    denom = np.outer(sd, sd)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(denom > 0, cov / denom, 0.0)
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def constant_columns(labels) -> list:
    y = np.asarray(labels)
    return [j for j in range(y.shape[1]) if np.all(y[:, j] == y[0, j])]


def label_stats(labels) -> tuple:
    """(cardinality, density): mean active labels per sample, and that over N."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or len(y) < 1:
        raise ValueError("need a non-empty (M, N) label matrix")
    card = float(y.sum(axis=1).mean())
    return card, card / y.shape[1]
