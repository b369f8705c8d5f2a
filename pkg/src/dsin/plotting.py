"""Static figures from the plot-data files written by ``train`` and ``eval``.

Every figure has a tab-separated data file behind it, so a missing
matplotlib only costs the images.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:  # pragma: no cover - exercised only without matplotlib
    plt = None

# PNG metadata that would otherwise embed the library version
_META = {"Software": None}


def available() -> bool:
    return plt is not None


def read_tsv(path) -> tuple:
    """(header, rows) with numeric cells parsed as floats and the rest kept as text."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        cells = []
        for c in ln.split("\t"):
            try:
                cells.append(float(c))
            except ValueError:
                cells.append(c)
        rows.append(cells)
    return header, rows


def _save(fig, path: Path, fmt: str) -> None:
    fig.savefig(path, format=fmt, dpi=100, metadata=_META if fmt == "png" else None)
    plt.close(fig)


def plot_sweep(src: Path, dst: Path, fmt: str = "png") -> None:
    header, rows = read_tsv(src)
    data = np.array(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, name in enumerate(header[1:], 1):
        ax.plot(data[:, 0], data[:, k], marker=".", label=name)
    ax.plot(data[:, 0], data[:, 1:].mean(axis=1), color="black", lw=2, label="macro")
    ax.set_xlabel("threshold")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, ncol=2)
    ax.set_title(src.stem)
    _save(fig, dst, fmt)


def plot_correlation(src: Path, dst: Path, fmt: str = "png") -> None:
    header, rows = read_tsv(src)
    names = header[1:]
    mat = np.array([r[1:] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(mat, vmin=-1, vmax=1, cmap="RdBu_r")
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    fig.colorbar(im, ax=ax)
    ax.set_title(src.stem)
    fig.tight_layout()
    _save(fig, dst, fmt)


def plot_history(src: Path, dst: Path, fmt: str = "png") -> None:
    """Loss curves, plus chi mean and spread when the stage records them."""
    header, rows = read_tsv(src)
    data = np.array(rows, dtype=float)
    col = {h: k for k, h in enumerate(header)}
    has_chi = np.isfinite(data[:, col["chi_mean"]]).any() and np.nanmax(data[:, col["chi_std"]]) >= 0
    fig, axes = plt.subplots(1, 2 if has_chi else 1, figsize=(9 if has_chi else 5, 3.5), squeeze=False)
    ax = axes[0, 0]
    ep = data[:, col["epoch"]]
    ax.plot(ep, data[:, col["train_loss"]], label="train")
    ax.plot(ep, data[:, col["val_loss"]], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("stage loss")
    ax.legend()
    ax.set_title(src.stem)
    if has_chi:
        ax = axes[0, 1]
        m, s = data[:, col["chi_mean"]], data[:, col["chi_std"]]
        ax.plot(ep, m, color="tab:red")
        ax.fill_between(ep, m - s, m + s, color="tab:red", alpha=0.25)
        ax.set_ylim(0, 1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("correction factor")
    fig.tight_layout()
    _save(fig, dst, fmt)


def plot_trace(src: Path, dst: Path, fmt: str = "png") -> None:
    header, rows = read_tsv(src)
    data = np.array(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, name in enumerate(header):
        if name.startswith("chi_") and name not in ("chi_mean", "chi_std"):
            ax.plot(data[:, 0], data[:, k], marker=".", label=name[4:])
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean correction factor")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, ncol=2)
    _save(fig, dst, fmt)


_KINDS = (
    ("sweep", "sweep_*.tsv", plot_sweep),
    ("correlation", "correlation_*.tsv", plot_correlation),
    ("history", "history_stage*.tsv", plot_history),
    ("trace", "trace.tsv", plot_trace),
)


def render_run(run: Path, out: Path, fmt: str = "png") -> list:
    """Render every recognised data file under ``run``; returns (kind, source, image) triples.

    Without matplotlib the image column is empty.
    """
    run, out = Path(run), Path(out)
    written = []
    for kind, pattern, fn in _KINDS:
        for src in sorted(run.rglob(pattern)):
            if out in src.parents:
                continue
            rel = src.relative_to(run)
            name = "__".join(rel.with_suffix("").parts) + f".{fmt}"
            if plt is None:
                written.append((kind, rel.as_posix(), ""))
                continue
            fn(src, out / name, fmt)
            written.append((kind, rel.as_posix(), name))
    return written
