"""Datasets of (patch streams, binary labels, subject) and how to make them.

The synthetic generator draws label vectors from a fitted pairwise binary
MRF and renders one glyph per active label into a fixed face region, so each
local crop carries evidence for only a few labels while the label
correlations carry the rest.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .mrf import GenerationError, fit_pairwise_mrf, gibbs_sample
from .tensor import read_tensor, write_tensor

MANIFEST_VERSION = 1
INDEX_NAME = "index.tsv"

# (row, col) of the five local crops as fractions of the face side.
DEFAULT_ANCHOR_FRACTIONS = (
    (0.30, 0.30),
    (0.22, 0.58),
    (0.50, 0.44),
    (0.74, 0.34),
    (0.74, 0.64),
)


class ManifestError(ValueError):
    pass


class BoundsError(IndexError):
    pass


@dataclass
class Sample:
    id: str
    subject: str
    patches: list
    labels: np.ndarray


@dataclass
class Dataset:
    """Column-major store: one (M, h, w, c) array per stream."""

    ids: list
    subjects: list
    labels: np.ndarray  # (M, N) uint8
    streams: list  # P arrays (M, h, w, c)
    stream_names: list = field(default_factory=list)
    n_labels: Optional[int] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.n_labels is None:
            self.n_labels = self.labels.shape[1] if self.labels.ndim == 2 else 0
        if self.labels.ndim != 2:
            self.labels = self.labels.reshape(len(self.ids), self.n_labels)
        if not self.stream_names:
            self.stream_names = [f"stream{i}" for i in range(len(self.streams))]
        for s in self.streams:
            if len(s) != len(self.ids):
                raise ValueError("every stream needs one patch per sample")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.ids[i], self.subjects[i], [s[i] for s in self.streams], self.labels[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    @property
    def geometry(self) -> list:
        return [tuple(s.shape[1:]) for s in self.streams]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            subjects=[self.subjects[i] for i in idx],
            labels=self.labels[idx],
            streams=[s[idx] for s in self.streams],
            stream_names=list(self.stream_names),
            n_labels=self.n_labels,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.ids == other.ids
            and self.subjects == other.subjects
            and self.n_labels == other.n_labels
            and np.array_equal(self.labels, other.labels)
            and len(self.streams) == len(other.streams)
            and all(np.array_equal(a, b) for a, b in zip(self.streams, other.streams))
        )


# synthetic generation ------------------------------------------------------
@dataclass
class SyntheticSpec:
    n_labels: int
    correlations: np.ndarray
    positive_ratios: np.ndarray
    glyph_noise: float = 0.1
    glyph_contrast: float = 0.3
    subjects: int = 6
    samples_per_subject: int = 100
    face_size: int = 224
    patch_size: int = 56
    channels: int = 3
    include_face: bool = True
    burn_in: int = 100
    seed: int = 0

    def __post_init__(self):
        self.correlations = np.asarray(self.correlations, dtype=np.float64)
        self.positive_ratios = np.asarray(self.positive_ratios, dtype=np.float64).reshape(-1)
        N = self.n_labels
        if N < 1:
            raise GenerationError("n_labels must be positive")
        if self.positive_ratios.size == 1:
            self.positive_ratios = np.full(N, float(self.positive_ratios[0]))
        if self.positive_ratios.shape != (N,):
            raise GenerationError(f"expected {N} positive ratios, got {self.positive_ratios.size}")
        if self.correlations.shape != (N, N):
            raise GenerationError(f"correlation matrix must be {N}x{N}, got {self.correlations.shape}")
        c = self.correlations
        if not np.allclose(c, c.T) or not np.allclose(np.diag(c), 1.0) or np.abs(c).max() > 1.0:
            raise GenerationError("correlation matrix must be symmetric, unit-diagonal and inside [-1, 1]")
        if np.any(self.positive_ratios <= 0) or np.any(self.positive_ratios >= 1):
            raise GenerationError("positive ratios must lie strictly inside (0, 1)")
        if self.burn_in < 100:
            raise GenerationError("Gibbs burn-in must be at least 100 sweeps")
        if self.subjects < 1 or self.samples_per_subject < 1:
            raise GenerationError("need at least one subject and one sample per subject")
        if self.patch_size < 4 or self.patch_size > self.face_size:
            raise GenerationError("patch_size must be in [4, face_size]")
        if self.glyph_noise < 0:
            raise GenerationError("glyph_noise must be non-negative")

    @classmethod
    def from_pairs(cls, n_labels: int, pairs: dict, positive_ratios, **kwargs) -> "SyntheticSpec":
        corr = np.eye(n_labels)
        for (i, j), v in pairs.items():
            corr[i, j] = corr[j, i] = v
        return cls(n_labels=n_labels, correlations=corr, positive_ratios=positive_ratios, **kwargs)


@dataclass
class CropSpec:
    anchors: list
    patch_size: int = 56
    face_size: int = 224

    def __post_init__(self):
        half = self.patch_size // 2
        for r, c in self.anchors:
            if r - half < 0 or c - half < 0 or r - half + self.patch_size > self.face_size or c - half + self.patch_size > self.face_size:
                raise BoundsError(f"crop window of size {self.patch_size} at anchor ({r}, {c}) leaves the face")

    @classmethod
    def default(cls, face_size: int = 224, patch_size: int = 56) -> "CropSpec":
        half = patch_size // 2
        anchors = []
        for fr, fc in DEFAULT_ANCHOR_FRACTIONS:
            r = min(max(int(round(fr * face_size)), half), face_size - patch_size + half)
            c = min(max(int(round(fc * face_size)), half), face_size - patch_size + half)
            anchors.append((r, c))
        return cls(anchors=anchors, patch_size=patch_size, face_size=face_size)


def crop_patches(face: np.ndarray, crop: CropSpec) -> list:
    """Copy one ``patch_size`` window per anchor; center (r, c) spans rows [r - size/2, r + size/2)."""
    H, W = face.shape[:2]
    half = crop.patch_size // 2
    out = []
    for r, c in crop.anchors:
        r0, c0 = r - half, c - half
        if r0 < 0 or c0 < 0 or r0 + crop.patch_size > H or c0 + crop.patch_size > W:
            raise BoundsError(f"crop window at anchor ({r}, {c}) with size {crop.patch_size} exceeds image {face.shape[:2]}")
        out.append(face[r0 : r0 + crop.patch_size, c0 : c0 + crop.patch_size].copy())
    return out


def _seq(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _glyph_layout(spec: SyntheticSpec, crop: CropSpec) -> list:
    """(row, col, size) of each label's glyph slot in face coordinates."""
    n_regions = len(crop.anchors)
    half = crop.patch_size // 2
    slot = crop.patch_size // 2
    size = max(2, slot - 2 * max(1, slot // 8))
    layout = []
    for j in range(spec.n_labels):
        region = j % n_regions
        k = (j // n_regions) % 4
        r, c = crop.anchors[region]
        r0 = r - half + (k // 2) * slot + (slot - size) // 2
        c0 = c - half + (k % 2) * slot + (slot - size) // 2
        layout.append((r0, c0, size))
    return layout


def _subject_background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    F = spec.face_size
    rows, cols = np.meshgrid(np.arange(F) / F, np.arange(F) / F, indexing="ij")
    base = 0.5 + rng.uniform(-0.04, 0.04)
    fr, fc, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * math.pi)
    texture = 0.05 * np.sin(2 * math.pi * (fr * rows + fc * cols) + ph)
    return base + texture


def render_face(
    spec: SyntheticSpec,
    labels: np.ndarray,
    background: np.ndarray,
    glyphs: list,
    layout: list,
    contrast: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    F = spec.face_size
    face = background.copy()
    jitter = max(1, layout[0][2] // 6) if layout else 1
    shifts = rng.integers(-jitter, jitter + 1, size=(spec.n_labels, 2))
    for j, (r0, c0, size) in enumerate(layout):
        if labels[j]:
            r = min(max(r0 + shifts[j, 0], 0), F - size)
            c = min(max(c0 + shifts[j, 1], 0), F - size)
            face[r : r + size, c : c + size] += contrast[j] * glyphs[j]
    face = np.repeat(face[:, :, None], spec.channels, axis=2)
    face += rng.normal(0.0, spec.glyph_noise, size=face.shape) if spec.glyph_noise > 0 else 0.0
    return np.clip(face, 0.0, 1.0)


def generate_synthetic_dataset(spec: SyntheticSpec, crop: Optional[CropSpec] = None) -> Dataset:
    """Deterministic correlated-label dataset; each sample owns an RNG keyed by (seed, index)."""
    crop = crop or CropSpec.default(spec.face_size, spec.patch_size)
    model = fit_pairwise_mrf(spec.positive_ratios, spec.correlations)
    R = len(model.bias)
    M = spec.subjects * spec.samples_per_subject
    sample_rngs = [_seq(spec.seed, 0, i) for i in range(M)]
    uniforms = np.stack([g.random((spec.burn_in + 1, R)) for g in sample_rngs])
    labels = gibbs_sample(model, uniforms)

    layout = _glyph_layout(spec, crop)
    glyphs = []
    for j, (_, _, size) in enumerate(layout):
        # bright blob with a label-specific binary texture
        g = 0.5 + 0.5 * _seq(spec.seed, 2, j).integers(0, 2, size=(size, size))
        glyphs.append(g)

    n_local = len(crop.anchors)
    P = n_local + (1 if spec.include_face else 0)
    streams = [np.empty((M, spec.patch_size, spec.patch_size, spec.channels)) for _ in range(n_local)]
    if spec.include_face:
        streams.append(np.empty((M, spec.face_size, spec.face_size, spec.channels)))
    ids, subjects = [], []
    width = len(str(M - 1))
    for s in range(spec.subjects):
        srng = _seq(spec.seed, 1, s)
        background = _subject_background(spec, srng)
        contrast = spec.glyph_contrast * srng.uniform(0.85, 1.15, size=spec.n_labels)
        for k in range(spec.samples_per_subject):
            i = s * spec.samples_per_subject + k
            face = render_face(spec, labels[i], background, glyphs, layout, contrast, sample_rngs[i])
            for p, patch in enumerate(crop_patches(face, crop)):
                streams[p][i] = patch
            if spec.include_face:
                streams[P - 1][i] = face
            ids.append(f"s{i:0{width}d}")
            subjects.append(f"subj{s:02d}")
    names = [f"patch{p}" for p in range(n_local)] + (["face"] if spec.include_face else [])
    return Dataset(ids=ids, subjects=subjects, labels=labels, streams=streams, stream_names=names, n_labels=spec.n_labels)


# statistics and folds ------------------------------------------------------
@dataclass
class ClassStats:
    ratio: np.ndarray
    w_pos: np.ndarray


def compute_class_stats(labels, balancing: bool = True) -> ClassStats:
    """Positive ratio per class and the positive-term weight (1 - rho) / rho."""
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or len(labels) == 0:
        raise ValueError("class statistics need a non-empty (M, N) label matrix")
    ratio = labels.mean(axis=0)
    if not balancing:
        return ClassStats(ratio=ratio, w_pos=np.ones_like(ratio))
    missing = np.flatnonzero(ratio == 0)
    if missing.size:
        raise ValueError(
            f"classes {missing.tolist()} have no positives; drop or merge them before enabling class balancing"
        )
    return ClassStats(ratio=ratio, w_pos=(1.0 - ratio) / ratio)


@dataclass
class Fold:
    subjects: list
    indices: np.ndarray


def make_folds(dataset, k: int, seed: int = 0) -> list:
    """Split samples into ``k`` subject-exclusive folds of near-equal subject count."""
    subjects = dataset.subjects if isinstance(dataset, Dataset) else list(dataset)
    unique = sorted(set(subjects))
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(unique):
        raise ValueError(f"cannot make {k} subject-exclusive folds from {len(unique)} subjects")
    order = np.random.default_rng(seed).permutation(len(unique))
    assign = {unique[s]: pos % k for pos, s in enumerate(order)}
    folds = []
    subj_arr = np.asarray(subjects)
    for f in range(k):
        members = sorted(s for s, a in assign.items() if a == f)
        idx = np.flatnonzero(np.isin(subj_arr, members))
        folds.append(Fold(subjects=members, indices=idx))
    return folds


def split_by_subjects(dataset: Dataset, subjects: Sequence[str]) -> tuple:
    """(samples of ``subjects``, remaining samples)."""
    mask = np.isin(np.asarray(dataset.subjects), list(subjects))
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))


# manifest ------------------------------------------------------------------
def _geom_str(g) -> str:
    return "x".join(str(int(v)) for v in g)


def save_manifest(dataset: Dataset, path) -> None:
    root = Path(path)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    N, P = dataset.n_labels, dataset.n_streams
    header = [
        "#dsin-manifest",
        f"version={MANIFEST_VERSION}",
        f"N={N}",
        f"P={P}",
        "geometry=" + ",".join(_geom_str(g) for g in dataset.geometry),
        "streams=" + ",".join(dataset.stream_names),
    ]
    lines = ["\t".join(header)]
    for i, sid in enumerate(dataset.ids):
        if any(ch in sid for ch in "\t\n/") or any(ch in dataset.subjects[i] for ch in "\t\n"):
            raise ManifestError(f"sample id/subject {sid!r} contains a tab, newline or slash")
        bits = "".join(str(int(b)) for b in dataset.labels[i])
        files = []
        for p in range(P):
            rel = f"patches/{sid}_{p}.bin"
            with open(root / rel, "wb") as fh:
                write_tensor(fh, dataset.streams[p][i])
            files.append(rel)
        lines.append("\t".join([sid, dataset.subjects[i], bits, *files]))
    tmp = root / (INDEX_NAME + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, root / INDEX_NAME)


def _parse_header(line: str) -> dict:
    parts = line.rstrip("\n").split("\t")
    if not parts or parts[0] != "#dsin-manifest":
        raise ManifestError("missing '#dsin-manifest' header line")
    out = {}
    for part in parts[1:]:
        key, _, value = part.partition("=")
        out[key] = value
    return out


def load_manifest(path) -> Dataset:
    root = Path(path)
    index = root / INDEX_NAME if root.is_dir() else root
    root = index.parent
    if not index.exists():
        raise FileNotFoundError(f"manifest index not found: {index}")
    lines = index.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{index} is empty (no header)")
    head = _parse_header(lines[0])
    try:
        version = int(head["version"])
        N, P = int(head["N"]), int(head["P"])
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"malformed manifest header: {lines[0]!r}") from exc
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest schema version {version} (supported: {MANIFEST_VERSION})")
    geometry = [tuple(int(v) for v in g.split("x")) for g in head.get("geometry", "").split(",") if g]
    if len(geometry) != P:
        raise ManifestError(f"header declares P={P} but {len(geometry)} stream geometries")
    names = [n for n in head.get("streams", "").split(",") if n] or [f"stream{p}" for p in range(P)]

    rows = [ln for ln in lines[1:] if ln.strip()]
    ids, subjects, labels = [], [], np.zeros((len(rows), N), dtype=np.uint8)
    streams = [np.empty((len(rows), *g)) for g in geometry]
    for r, line in enumerate(rows):
        lineno = r + 2
        fields = line.split("\t")
        if len(fields) != 3 + P:
            raise ManifestError(f"row {lineno}: expected {3 + P} fields, found {len(fields)}")
        sid, subject, bits = fields[:3]
        if len(bits) != N or set(bits) - {"0", "1"}:
            raise ManifestError(f"row {lineno} ({sid}): label string {bits!r} does not have {N} binary labels")
        labels[r] = [int(b) for b in bits]
        for p, rel in enumerate(fields[3:]):
            fpath = root / rel
            if not fpath.exists():
                raise ManifestError(f"row {lineno} ({sid}): missing patch file {rel}")
            with open(fpath, "rb") as fh:
                arr = read_tensor(fh)
            if arr.shape != geometry[p]:
                raise ManifestError(f"row {lineno} ({sid}): patch {rel} has shape {arr.shape}, expected {geometry[p]}")
            streams[p][r] = arr
        ids.append(sid)
        subjects.append(subject)
    return Dataset(ids=ids, subjects=subjects, labels=labels, streams=streams, stream_names=names, n_labels=N)
