"""Staged optimisation: patch nets, fusion, joint, structure inference, all.

Stages
  1  each stream on its weighted L2 loss, one after the other
  2  fusion on BCE, streams frozen
  3  streams + fusion on L2 + BCE
  4  structure inference on BCE + χ penalty, streams and fusion frozen
  5  everything on the weighted compound loss
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import ClassStats, Dataset, compute_class_stats
from .fusion import bce_loss
from .model import BLOCKS, DSINModel, ModelConfig
from .patchnet import weighted_l2_loss
from .structure import chi_regularizer, chi_summary
from .tensor import Tensor, backward, no_grad, read_tensor, stack, write_tensor

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

STAGE_BLOCKS = {1: ("pi",), 2: ("phi",), 3: ("pi", "phi"), 4: ("omega",), 5: ("pi", "phi", "omega")}
STAGE_PREREQUISITES = {1: (), 2: ("pi",), 3: ("pi", "phi"), 4: ("pi", "phi"), 5: ("pi", "phi", "omega")}

CHECKPOINT_MAGIC = b"DSINCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stages: tuple = (1, 2, 3, 4, 5)
    w1: float = 0.25
    w2: float = 0.25
    w3: float = 0.5
    r: float = 5e-3
    T: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    stage_epochs: dict = field(default_factory=dict)  # stage -> max epochs override
    patience: int = 10
    min_delta: float = 1e-5
    seed: int = 0
    balancing: bool = True
    freeze_conv: bool = False
    correction: bool = True

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.stage_epochs = {int(k): int(v) for k, v in dict(self.stage_epochs).items()}
        if any(s not in STAGE_BLOCKS for s in self.stages):
            raise ConfigError(f"stages must be drawn from 1..5, got {self.stages}")
        if list(self.stages) != sorted(set(self.stages)):
            raise ConfigError(f"stages must be strictly increasing, got {self.stages}")
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.r < 0 or self.T < 0 or self.lr <= 0 or self.batch_size < 2 or self.patience < 1:
            raise ConfigError("invalid r / T / lr / batch_size / patience")

    def epochs_for(self, stage: int) -> int:
        return self.stage_epochs.get(stage, self.max_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        d["stage_epochs"] = {str(k): v for k, v in sorted(self.stage_epochs.items())}
        return d


def config_hash(*dicts: dict) -> str:
    blob = json.dumps(list(dicts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# optimiser -----------------------------------------------------------------
class Adam:
    """Bias-corrected Adam over a dict of named tensors."""

    def __init__(self, lr: float = 1e-3, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: dict, frozen: Sequence[str] = ()) -> None:
        frozen = set(frozen)
        for name, p in params.items():
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
        for name, p in params.items():
            if name in frozen:
                continue
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def named_state(self) -> dict:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out


def adam_step(params: dict, state: Adam, frozen: Sequence[str] = ()) -> None:
    state.step(params, frozen)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


# losses --------------------------------------------------------------------
def compound_loss(l_pp, l_f, l_si, w=(0.25, 0.25, 0.5), reg=0.0):
    """w1 L_pp + w2 L_f + w3 (L_si + reg); works on floats or tensors."""
    w1, w2, w3 = w
    if min(w) < 0:
        raise ConfigError("loss weights must be non-negative")
    return l_pp * w1 + l_f * w2 + (l_si + reg) * w3


def patch_loss(p: Sequence[Tensor], y, stats: ClassStats) -> Tensor:
    """Weighted L2 averaged over streams."""
    losses = [weighted_l2_loss(pi, y, stats.w_pos) for pi in p]
    return losses[0] if len(losses) == 1 else stack(losses).mean()


@dataclass
class HeadLosses:
    pp: float
    f: float
    si: float
    reg: float
    chi_mean: float
    chi_std: float

    def compound(self, cfg: TrainConfig) -> float:
        return float(compound_loss(self.pp, self.f, self.si, (cfg.w1, cfg.w2, cfg.w3), self.reg))


def evaluate_losses(model: DSINModel, dataset: Dataset, stats: ClassStats, cfg: TrainConfig) -> HeadLosses:
    """Per-head losses over a whole dataset in inference mode."""
    pred = model.predict(dataset.streams, T=cfg.T)
    y = dataset.labels.astype(np.float64)
    with no_grad():
        pp = float(np.mean([weighted_l2_loss(Tensor(p), y, stats.w_pos).item() for p in pred["p"]]))
        f = bce_loss(Tensor(pred["f"]), y).item()
        si = bce_loss(Tensor(pred["y_hat"]), y).item()
    chi = pred["chi"]
    chi_mean = float(chi.mean()) if chi.size else float("nan")
    reg = cfg.r * chi_mean if chi.size else 0.0
    return HeadLosses(pp, f, si, reg, chi_mean, float(chi.std()) if chi.size else float("nan"))


# early stopping ------------------------------------------------------------
class EarlyStopper:
    """Tracks the best validation loss; stop after ``patience`` epochs without a > min_delta gain."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-5):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = -1
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float, state_fn: Optional[Callable[[], object]] = None) -> bool:
        """Record one epoch; returns True to continue, False to stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            if state_fn is not None:
                self.best_state = state_fn()
        else:
            self.bad_epochs += 1
        return self.bad_epochs < self.patience


def early_stopper(history: Sequence[float], patience: int, min_delta: float = 1e-5) -> tuple:
    """Replay a validation-loss history: ("continue"|"stop", best epoch index)."""
    if not history:
        raise ValueError("history must be non-empty")
    es = EarlyStopper(patience, min_delta)
    for epoch, loss in enumerate(history):
        if not es.update(epoch, loss):
            return "stop", es.best_epoch
    return "continue", es.best_epoch


# staged training -------------------------------------------------------------
@dataclass
class StageHistory:
    stage: int
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stream: Optional[int] = None  # stage 1 keeps one history per stream

    @property
    def label(self) -> str:
        return f"stage{self.stage}" if self.stream is None else f"stage{self.stage}_stream{self.stream}"

    columns = ("epoch", "train_loss", "val_loss", "loss_pp", "loss_f", "loss_si", "chi_mean", "chi_std")

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(_fmt(row[c]) for c in self.columns))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class TrainResult:
    model: DSINModel
    history: list
    stats: ClassStats
    optimizer: Optional[Adam] = None
    snapshots: dict = field(default_factory=dict)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _stage_loss_value(stage: int, h: HeadLosses, cfg: TrainConfig, stream: Optional[int] = None, per_stream=None) -> float:
    if stage == 1:
        return per_stream[stream]
    if stage == 2:
        return h.f
    if stage == 3:
        return h.pp + h.f
    if stage == 4:
        return h.si + h.reg
    return h.compound(cfg)


def _stream_val_loss(model: DSINModel, i: int, data: Dataset, stats: ClassStats, mode: str) -> float:
    y = data.labels.astype(np.float64)
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(data), 256):
            sl = slice(start, start + 256)
            p = model.stream_forward(i, data.streams[i][sl], mode)
            total += weighted_l2_loss(p, y[sl], stats.w_pos).item() * len(y[sl])
            count += len(y[sl])
    return total / max(count, 1)


class StagedTrainer:
    def __init__(self, model: DSINModel, cfg: TrainConfig, train: Dataset, val: Dataset, stats: Optional[ClassStats] = None):
        if len(train) == 0 or len(val) == 0:
            raise ConfigError("training and validation sets must be non-empty")
        self.model = model
        self.cfg = cfg
        self.train = train
        self.val = val
        self.stats = stats or compute_class_stats(train.labels, cfg.balancing)
        self.history: list = []
        self.optimizer: Optional[Adam] = None
        self.snapshots: dict = {}
        self.model.config.T = cfg.T
        self.model.config.correction = cfg.correction

    def _frozen_conv(self, names: dict) -> list:
        if not self.cfg.freeze_conv:
            return []
        return [k for k in names if k.startswith("pi.") and ".conv" in k]

    def _rng(self, stage: int, extra: int = 0) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.cfg.seed, spawn_key=(100 + stage, extra)))

    def run(self) -> TrainResult:
        for stage in self.cfg.stages:
            missing = [b for b in STAGE_PREREQUISITES[stage] if b not in self.model.trained_blocks]
            if missing:
                raise ConfigError(f"stage {stage} needs trained blocks {missing}; run the earlier stages or load a checkpoint")
            logger.info("stage %d", stage)
            if stage == 1:
                for i in range(self.model.n_streams):
                    self._run_stream(i)
            else:
                self._run_stage(stage)
            self.model.trained_blocks.update(STAGE_BLOCKS[stage])
            self.snapshots[stage] = self.model.snapshot()
        return TrainResult(self.model, self.history, self.stats, self.optimizer, self.snapshots)

    # stage 1 ----------------------------------------------------------------
    def _run_stream(self, i: int) -> None:
        cfg, model = self.cfg, self.model
        params = model.stream_tensors(i, trainable_only=True)
        frozen = self._frozen_conv(params)
        opt = Adam(cfg.lr)
        stream = model.streams[i]
        hist = StageHistory(stage=1, stream=i)
        y = self.train.labels.astype(np.float64)
        es = EarlyStopper(cfg.patience, cfg.min_delta)
        init_mode = "infer" if stream.bn_initialized() else "batch"
        v0 = _stream_val_loss(model, i, self.val, self.stats, init_mode)
        t0 = _stream_val_loss(model, i, self.train, self.stats, init_mode)
        hist.rows.append(self._row(0, t0, v0, pp=v0))
        es.update(0, v0, lambda: model.snapshot())
        rng = self._rng(1, i)
        for epoch in range(1, cfg.epochs_for(1) + 1):
            losses = []
            for idx in _batches(len(self.train), cfg.batch_size, rng):
                zero_grads(params)
                p = stream.forward(self.train.streams[i][idx], "train")
                loss = weighted_l2_loss(p, y[idx], self.stats.w_pos)
                backward(loss)
                opt.step(params, frozen)
                losses.append(loss.item())
            v = _stream_val_loss(model, i, self.val, self.stats, "infer")
            hist.rows.append(self._row(epoch, float(np.mean(losses)), v, pp=v))
            if not es.update(epoch, v, lambda: model.snapshot()):
                break
        model.restore(es.best_state)
        if es.best_epoch == 0 and init_mode == "batch":
            stream.mark_bn_initialized(False)
        hist.best_epoch = es.best_epoch
        self.history.append(hist)
        self.optimizer = opt

    # stages 2-5 -------------------------------------------------------------
    def _run_stage(self, stage: int) -> None:
        cfg, model = self.cfg, self.model
        params = {}
        for b in STAGE_BLOCKS[stage]:
            params.update(model.block_tensors(b, trainable_only=True))
        frozen = self._frozen_conv(params)
        opt = Adam(cfg.lr)
        hist = StageHistory(stage=stage)
        es = EarlyStopper(cfg.patience, cfg.min_delta)
        y_all = self.train.labels.astype(np.float64)

        cache = None
        if stage in (2, 4):
            # frozen upstream blocks: compute their outputs once in inference mode
            pred = model.predict(self.train.streams, T=0)
            cache = pred["p"] if stage == 2 else pred["f"]

        def val_value():
            h = evaluate_losses(model, self.val, self.stats, cfg)
            return h, _stage_loss_value(stage, h, cfg)

        h0, v0 = val_value()
        th = evaluate_losses(model, self.train, self.stats, cfg)
        hist.rows.append(self._row(0, _stage_loss_value(stage, th, cfg), v0, h0))
        es.update(0, v0, lambda: model.snapshot())
        rng = self._rng(stage)
        for epoch in range(1, cfg.epochs_for(stage) + 1):
            losses = []
            for idx in _batches(len(self.train), cfg.batch_size, rng):
                zero_grads(params)
                y = y_all[idx]
                if stage == 2:
                    f = model.fusion.forward([Tensor(p[idx]) for p in cache])
                    loss = bce_loss(f, y)
                elif stage == 4:
                    y_hat, trace = model.head_from_fusion(Tensor(cache[idx]), T=cfg.T)
                    loss = bce_loss(y_hat, y) + chi_regularizer(trace, cfg.r)
                else:
                    out = model.forward([s[idx] for s in self.train.streams], "train", T=cfg.T if stage == 5 else 0)
                    l_pp = patch_loss(out.p, y, self.stats)
                    l_f = bce_loss(out.f, y)
                    if stage == 3:
                        loss = l_pp + l_f
                    else:
                        reg = chi_regularizer(out.trace, cfg.r)
                        loss = compound_loss(l_pp, l_f, bce_loss(out.y_hat, y), (cfg.w1, cfg.w2, cfg.w3), reg)
                backward(loss)
                opt.step(params, frozen)
                losses.append(loss.item())
            h, v = val_value()
            hist.rows.append(self._row(epoch, float(np.mean(losses)), v, h))
            if not es.update(epoch, v, lambda: model.snapshot()):
                break
        model.restore(es.best_state)
        hist.best_epoch = es.best_epoch
        self.history.append(hist)
        self.optimizer = opt

    @staticmethod
    def _row(epoch, train_loss, val_loss, h: Optional[HeadLosses] = None, pp=float("nan")) -> dict:
        return {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "loss_pp": h.pp if h else pp,
            "loss_f": h.f if h else float("nan"),
            "loss_si": h.si if h else float("nan"),
            "chi_mean": h.chi_mean if h else float("nan"),
            "chi_std": h.chi_std if h else float("nan"),
        }


def staged_train(
    model: DSINModel,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    stats: Optional[ClassStats] = None,
) -> TrainResult:
    return StagedTrainer(model, cfg, train, val, stats).run()


# checkpoints ---------------------------------------------------------------
def save_checkpoint(
    path,
    model: DSINModel,
    optimizer: Optional[Adam] = None,
    train_config: Optional[TrainConfig] = None,
    stage: int = 0,
    meta: Optional[dict] = None,
) -> None:
    tensors = {k: t.data for k, t in model.named_tensors().items()}
    if optimizer is not None:
        tensors.update(optimizer.named_state())
    mcfg = model.config.to_dict()
    tcfg = train_config.to_dict() if train_config else {}
    header = {
        "schema": CHECKPOINT_VERSION,
        "config_hash": config_hash(mcfg, tcfg),
        "stage": stage,
        "n_labels": model.n_labels,
        "n_streams": model.n_streams,
        "model_config": mcfg,
        "train_config": tcfg,
        "trained_blocks": sorted(model.trained_blocks),
        "bn_initialized": [s.bn_initialized() for s in model.streams],
        "adam_steps": dict(sorted(optimizer.t.items())) if optimizer else {},
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        write_tensor(buf, tensors[name])
    body = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


@dataclass
class Checkpoint:
    model: DSINModel
    optimizer: Adam
    header: dict


def load_checkpoint(path, expected_n_labels: Optional[int] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 40 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    buf = io.BytesIO(body)
    buf.read(len(CHECKPOINT_MAGIC))
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen).decode())
    if expected_n_labels is not None and header["n_labels"] != expected_n_labels:
        raise CheckpointError(f"{path}: checkpoint has N={header['n_labels']} labels, expected N={expected_n_labels}")
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack("<I", buf.read(4))
            name = buf.read(nlen).decode()
            tensors[name] = read_tensor(buf)
    except (EOFError, struct.error) as exc:
        raise CheckpointError(f"{path}: truncated tensor section") from exc
    mc = dict(header["model_config"])
    model = DSINModel(ModelConfig(**mc))
    named = model.named_tensors()
    for name, t in named.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {t.shape}")
    for name, t in named.items():
        t.data = tensors[name].copy()
    for s, flag in zip(model.streams, header["bn_initialized"]):
        s.mark_bn_initialized(flag)
    model.trained_blocks = set(header["trained_blocks"])
    opt = Adam(header.get("train_config", {}).get("lr", 1e-3))
    for name, steps in header.get("adam_steps", {}).items():
        opt.m[name] = tensors[f"adam.m.{name}"].copy()
        opt.v[name] = tensors[f"adam.v.{name}"].copy()
        opt.t[name] = int(steps)
    return Checkpoint(model=model, optimizer=opt, header=header)
