"""The assembled network: P patch CNNs -> N fusion units -> structure inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fusion import DEFAULT_FUSION_HIDDEN, FusionBank
from .patchnet import DEFAULT_CHANNELS, DEFAULT_EXTRA_CHANNELS, DEFAULT_HIDDEN, PatchNet
from .structure import DEFAULT_T, SIParams, si_unroll
from .tensor import Tensor, no_grad

BLOCKS = ("pi", "phi", "omega")


@dataclass
class ModelConfig:
    n_labels: int
    geometry: list  # one (h, w, c) per stream
    channels: tuple = DEFAULT_CHANNELS
    hidden: int = DEFAULT_HIDDEN
    extra_channels: tuple = DEFAULT_EXTRA_CHANNELS
    fusion_hidden: int = DEFAULT_FUSION_HIDDEN
    T: int = DEFAULT_T
    correction: bool = True
    include_self: bool = True
    seed: int = 0

    def __post_init__(self):
        self.geometry = [tuple(int(v) for v in g) for g in self.geometry]
        self.channels = tuple(int(c) for c in self.channels)
        self.extra_channels = tuple(int(c) for c in self.extra_channels)

    @property
    def n_streams(self) -> int:
        return len(self.geometry)

    @property
    def base_side(self) -> int:
        return min(g[0] for g in self.geometry)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = [list(g) for g in self.geometry]
        d["channels"] = list(self.channels)
        d["extra_channels"] = list(self.extra_channels)
        return d


@dataclass
class Outputs:
    p: list  # P tensors (B, N)
    f: Tensor
    y_hat: Tensor
    trace: object = None


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class DSINModel:
    """Parameters Θ = π ∪ φ ∪ ω plus the forward pass through all three heads."""

    def __init__(self, config: ModelConfig):
        self.config = config
        N = config.n_labels
        self.streams = [
            PatchNet(
                g,
                N,
                _rng(config.seed, 10, i),
                name=f"pi{i}",
                channels=config.channels,
                hidden=config.hidden,
                base_side=config.base_side,
                extra_channels=config.extra_channels,
            )
            for i, g in enumerate(config.geometry)
        ]
        self.fusion = FusionBank(config.n_streams, N, _rng(config.seed, 11), hidden=config.fusion_hidden)
        self.si = SIParams(N, _rng(config.seed, 12))
        self.trained_blocks: set = set()

    @property
    def n_labels(self) -> int:
        return self.config.n_labels

    @property
    def n_streams(self) -> int:
        return self.config.n_streams

    # parameter access -------------------------------------------------------
    def block_tensors(self, block: str, trainable_only: bool = False) -> dict:
        """Named tensors of one block; running statistics included unless ``trainable_only``."""
        out = {}
        if block == "pi":
            for i, s in enumerate(self.streams):
                src = s.params if trainable_only else s.named_tensors()
                out.update({f"pi.{i}.{k}": t for k, t in src.items()})
        elif block == "phi":
            out.update({f"phi.{k}": t for k, t in self.fusion.named_tensors().items()})
        elif block == "omega":
            out.update({f"omega.{k}": t for k, t in self.si.named_tensors().items()})
        else:
            raise KeyError(block)
        return out

    def stream_tensors(self, i: int, trainable_only: bool = False) -> dict:
        s = self.streams[i]
        src = s.params if trainable_only else s.named_tensors()
        return {f"pi.{i}.{k}": t for k, t in src.items()}

    def named_tensors(self) -> dict:
        out = {}
        for b in BLOCKS:
            out.update(self.block_tensors(b))
        return out

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def restore(self, snap: dict) -> None:
        for k, t in self.named_tensors().items():
            if k in snap:
                t.data = snap[k].copy()

    # forward ----------------------------------------------------------------
    def stream_forward(self, i: int, x, mode: str) -> Tensor:
        return self.streams[i].forward(x, mode)

    def forward(
        self,
        inputs: Sequence[np.ndarray],
        modes,
        T: Optional[int] = None,
        correction: Optional[bool] = None,
    ) -> Outputs:
        """``inputs`` holds one (B, h, w, c) array per stream; ``modes`` one BN mode per stream (or a single str)."""
        cfg = self.config
        if isinstance(modes, str):
            modes = [modes] * self.n_streams
        p = [s.forward(x, m) for s, x, m in zip(self.streams, inputs, modes)]
        f = self.fusion.forward(p)
        y_hat, trace = si_unroll(
            f,
            self.si,
            cfg.T if T is None else T,
            cfg.correction if correction is None else correction,
            cfg.include_self,
        )
        return Outputs(p=p, f=f, y_hat=y_hat, trace=trace)

    def head_from_fusion(self, f, T: Optional[int] = None) -> tuple:
        cfg = self.config
        return si_unroll(f, self.si, cfg.T if T is None else T, cfg.correction, cfg.include_self)

    def infer_mode(self) -> list:
        return ["infer" if s.bn_initialized() else "batch" for s in self.streams]

    def predict(self, streams: Sequence[np.ndarray], batch_size: int = 256, T: Optional[int] = None) -> dict:
        """Inference over a full dataset.

        Returns p (P, M, N), f and y_hat (M, N), and the per-step trace arrays
        m, chi, y_steps and m_bar (each (T, M, N)). m_bar is the gated message
        a node sends, averaged over its receivers.
        """
        M = len(streams[0])
        modes = self.infer_mode()
        ps, fs, ys = [], [], []
        steps = {"m": [], "chi": [], "y_steps": [], "m_bar": []}
        with no_grad():
            for start in range(0, M, batch_size):
                sl = slice(start, start + batch_size)
                out = self.forward([s[sl] for s in streams], modes, T=T)
                ps.append(np.stack([t.data for t in out.p]))
                fs.append(out.f.data)
                ys.append(out.y_hat.data)
                if out.trace.steps:
                    steps["m"].append(np.stack([st.m.data for st in out.trace.steps]))
                    steps["chi"].append(np.stack([st.chi.data for st in out.trace.steps]))
                    steps["y_steps"].append(np.stack([st.y_hat.data for st in out.trace.steps]))
                    steps["m_bar"].append(np.stack([st.m_bar.data.mean(axis=2) for st in out.trace.steps]))
        N = self.n_labels
        res = {
            "p": np.concatenate(ps, axis=1) if ps else np.zeros((self.n_streams, 0, N)),
            "f": np.concatenate(fs) if fs else np.zeros((0, N)),
            "y_hat": np.concatenate(ys) if ys else np.zeros((0, N)),
        }
        for k, v in steps.items():
            res[k] = np.concatenate(v, axis=1) if v else np.zeros((0, M, N))
        return res


def model_config_for(dataset, **overrides) -> ModelConfig:
    return ModelConfig(n_labels=dataset.n_labels, geometry=dataset.geometry, **overrides)
