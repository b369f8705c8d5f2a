"""Per-AU fusion of the stream predictions and the BCE loss used on f and ŷ."""

from __future__ import annotations

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    clip,
    grouped_affine,
    log,
    mean_reduce,
    reshape,
    sigmoid,
    stack,
)
from .patchnet import INIT_SCALE

DEFAULT_FUSION_HIDDEN = 64
BCE_CLAMP = 1e-12


def gather_au_scores(p, j: int) -> np.ndarray:
    """Column ``j`` of a (P, N) prediction matrix: AU j as seen by every stream."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p)
    if not 0 <= j < p.shape[1]:
        raise IndexError(f"class index {j} out of range for {p.shape[1]} classes")
    return p[:, j].copy()


class FusionBank:
    """N independent two-layer sigmoid MLPs, stored stacked along the class axis.

    Unit j owns ``w1[j]`` (P, H), ``b1[j]``, ``w2[j]`` (H, 1), ``b2[j]``.
    """

    def __init__(self, n_streams: int, n_labels: int, rng: np.random.Generator, hidden: int = DEFAULT_FUSION_HIDDEN):
        self.n_streams = n_streams
        self.n_labels = n_labels
        self.hidden = hidden
        u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        self.params = {
            "w1": Tensor(u(n_labels, n_streams, hidden), True, "fusion.w1"),
            "b1": Tensor(u(n_labels, hidden), True, "fusion.b1"),
            "w2": Tensor(u(n_labels, hidden, 1), True, "fusion.w2"),
            "b2": Tensor(u(n_labels, 1), True, "fusion.b2"),
        }

    def named_tensors(self) -> dict:
        return dict(self.params)

    def forward_scores(self, s: Tensor) -> Tensor:
        """``s`` is (B, N, P); returns f of shape (B, N)."""
        if s.ndim != 3 or s.shape[1:] != (self.n_labels, self.n_streams):
            raise DimensionError(f"fusion expects (B, {self.n_labels}, {self.n_streams}) scores, got {s.shape}")
        h = sigmoid(grouped_affine(s, self.params["w1"], self.params["b1"]))
        out = sigmoid(grouped_affine(h, self.params["w2"], self.params["b2"]))
        return reshape(out, (s.shape[0], self.n_labels))

    def forward(self, stream_probs) -> Tensor:
        """Fuse a list of P (B, N) stream predictions."""
        if len(stream_probs) != self.n_streams:
            raise DimensionError(f"fusion expects {self.n_streams} streams, got {len(stream_probs)}")
        return self.forward_scores(stack(list(stream_probs), axis=2))


def fusion_unit(s_j, w1, b1, w2, b2) -> float:
    """Scalar evaluation of one fusion unit; s_j has length P."""
    h = 1.0 / (1.0 + np.exp(-(np.asarray(s_j) @ np.asarray(w1) + np.asarray(b1))))
    z = float(h @ np.asarray(w2).reshape(-1) + np.asarray(b2).reshape(-1)[0])
    return 1.0 / (1.0 + np.exp(-z))


def bce_loss(f: Tensor, y) -> Tensor:
    """Batch- and class-averaged binary cross-entropy with a defensive clamp."""
    y = np.asarray(y, dtype=np.float64).reshape(f.shape)
    fc = clip(f, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -mean_reduce(log(fc) * y + log(1.0 - fc) * (1.0 - y))
