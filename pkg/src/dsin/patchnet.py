"""Per-stream patch CNNs and the class-balanced weighted L2 loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import (
    BatchNormState,
    DimensionError,
    Tensor,
    affine,
    batch_norm,
    conv2d,
    conv_output_size,
    mean_reduce,
    relu,
    reshape,
    sigmoid,
)

DEFAULT_CHANNELS = (32, 64, 96, 128)
DEFAULT_EXTRA_CHANNELS = (16, 24)
DEFAULT_HIDDEN = 256
INIT_SCALE = 0.05


class ConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv" or "fc"
    n_in: int
    n_out: int
    kernel: int = 0
    stride: int = 1
    activation: str = "relu"
    out_side: int = 0


def build_topology(
    geometry: Sequence[int],
    n_labels: int,
    channels: Sequence[int] = DEFAULT_CHANNELS,
    hidden: int = DEFAULT_HIDDEN,
    base_side: Optional[int] = None,
    extra_channels: Sequence[int] = DEFAULT_EXTRA_CHANNELS,
    kernel: int = 3,
) -> list:
    """Layer plan: stride-2 conv/BN/ReLU blocks, then FC(hidden) and FC(n_labels).

    Inputs wider than ``base_side`` get extra leading blocks until they reach
    it, so every stream ends on the same spatial tail.
    """
    H, W, C = geometry
    if H != W:
        raise ConstructionError(f"patch geometry must be square, got {H}x{W}")
    if H < 2 ** len(channels):
        raise ConstructionError(f"side {H} cannot take {len(channels)} stride-2 halvings")
    base = H if base_side is None else base_side
    side = H
    widths = []
    extra = list(extra_channels) or [channels[0]]
    while side > base:
        widths.append(extra[min(len(widths), len(extra) - 1)])
        side = conv_output_size(side, kernel, 2, "same")
    if side != base:
        raise ConstructionError(f"side {H} does not halve onto the base side {base}")
    widths.extend(channels)
    plan = []
    side, prev = H, C
    for w in widths:
        side = conv_output_size(side, kernel, 2, "same")
        plan.append(Layer("conv", prev, w, kernel=kernel, stride=2, out_side=side))
        prev = w
    flat = side * side * prev
    plan.append(Layer("fc", flat, hidden, activation="relu"))
    plan.append(Layer("fc", hidden, n_labels, activation="sigmoid"))
    return plan


def spatial_trace(plan: Sequence[Layer], side: int) -> list:
    return [side] + [layer.out_side for layer in plan if layer.kind == "conv"]


class PatchNet:
    """One independent CNN mapping a patch batch (B, h, w, c) to (B, N) probabilities."""

    def __init__(self, geometry, n_labels: int, rng: np.random.Generator, name: str = "stream", **plan_kwargs):
        self.geometry = tuple(int(v) for v in geometry)
        self.n_labels = n_labels
        self.name = name
        self.plan = build_topology(self.geometry, n_labels, **plan_kwargs)
        self.params: dict = {}
        self.bn: list = []
        for k, layer in enumerate(self.plan):
            if layer.kind == "conv":
                shape = (layer.kernel, layer.kernel, layer.n_in, layer.n_out)
                self._add(f"conv{k}.filters", rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))
                self._add(f"conv{k}.gamma", np.ones(layer.n_out))
                self._add(f"conv{k}.beta", np.zeros(layer.n_out))
                self.bn.append(BatchNormState(layer.n_out))
            else:
                self._add(f"fc{k}.weight", rng.uniform(-INIT_SCALE, INIT_SCALE, size=(layer.n_in, layer.n_out)))
                self._add(f"fc{k}.bias", rng.uniform(-INIT_SCALE, INIT_SCALE, size=layer.n_out))

    def _add(self, key: str, value: np.ndarray) -> None:
        self.params[key] = Tensor(value, requires_grad=True, name=f"{self.name}.{key}")

    def named_tensors(self) -> dict:
        """Trainable tensors plus batch-norm running statistics."""
        out = dict(self.params)
        for k, state in enumerate(self.bn):
            out[f"bn{k}.running_mean"] = state.mean
            out[f"bn{k}.running_var"] = state.var
        return out

    def bn_initialized(self) -> bool:
        return all(s.initialized for s in self.bn)

    def mark_bn_initialized(self, flag: bool = True) -> None:
        for s in self.bn:
            s.initialized = flag

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, x, mode: str = "train") -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = reshape(x, (1, *x.shape))
        if tuple(x.shape[1:]) != self.geometry:
            raise DimensionError(f"{self.name}: patch shape {tuple(x.shape[1:])} does not match topology {self.geometry}")
        h = x
        bn_i = 0
        for k, layer in enumerate(self.plan):
            if layer.kind == "conv":
                h = conv2d(h, self.params[f"conv{k}.filters"], stride=layer.stride, padding="same")
                # "batch" normalises with batch statistics but leaves running statistics untouched
                state = None if mode == "batch" else self.bn[bn_i]
                bn_mode = "train" if mode == "batch" else mode
                h = batch_norm(h, self.params[f"conv{k}.gamma"], self.params[f"conv{k}.beta"], state, bn_mode)
                h = relu(h)
                bn_i += 1
            else:
                if h.ndim != 2:
                    h = reshape(h, (h.shape[0], -1))
                h = affine(h, self.params[f"fc{k}.weight"], self.params[f"fc{k}.bias"])
                h = relu(h) if layer.activation == "relu" else sigmoid(h)
        return h


def weighted_l2_loss(p: Tensor, y, w_pos) -> Tensor:
    """Mean of c_j(y) (p - y)^2 with c_j(1) = w_pos_j and c_j(0) = 1."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w_pos, dtype=np.float64)
    if y.size != p.size:
        raise DimensionError(f"prediction {p.shape} and labels {y.shape} differ")
    y = y.reshape(p.shape)
    if w.shape[-1] != p.shape[-1]:
        raise DimensionError(f"class weights {w.shape} do not match {p.shape[-1]} classes")
    c = y * w + (1.0 - y)
    diff = p - y
    return mean_reduce(diff * diff * c)
