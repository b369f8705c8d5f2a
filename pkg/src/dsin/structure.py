"""Recurrent structure inference: N units exchanging gated messages for T steps.

Every unit j holds message, gate and prediction parameters shared over all
iterations.  Per step, with ``mean`` taken over all N units (self included):

    m_j   = σ(wm_j · [mean(m_prev), f_j, ŷ_prev_j] + bm_j)
    χ_j   = σ(wg_j · [mean(m), f_j, ŷ_prev_j] + bg_j)
    m̄_ij  = ((χ_i + χ_j) / 2) · m_i                 (sender i, recipient j)
    ŷ_j   = σ(wy_j · [mean_i(m̄_ij), f_j] + by_j)

The recurrence starts from m = ŷ = f.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor, mean_reduce, reshape, sigmoid, stack, sum_reduce
from .patchnet import INIT_SCALE

DEFAULT_T = 10
DEFAULT_R = 5e-3


class SIParams:
    def __init__(self, n_labels: int, rng: Optional[np.random.Generator] = None):
        self.n_labels = n_labels
        if rng is None:
            u = lambda *shape: np.zeros(shape)
        else:
            u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        self.params = {
            "wm": Tensor(u(n_labels, 3), True, "si.wm"),
            "bm": Tensor(u(n_labels), True, "si.bm"),
            "wg": Tensor(u(n_labels, 3), True, "si.wg"),
            "bg": Tensor(u(n_labels), True, "si.bg"),
            "wy": Tensor(u(n_labels, 2), True, "si.wy"),
            "by": Tensor(u(n_labels), True, "si.by"),
        }

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def named_tensors(self) -> dict:
        return dict(self.params)

    @classmethod
    def from_arrays(cls, **arrays) -> "SIParams":
        n = len(np.asarray(arrays["bm"]).reshape(-1))
        out = cls(n)
        for k, v in arrays.items():
            out.params[k].data = np.array(v, dtype=np.float64).reshape(out.params[k].shape)
        return out


@dataclass
class SIState:
    t: int
    f: Tensor
    m: Tensor
    y_hat: Tensor
    chi: Optional[Tensor] = None
    m_bar: Optional[Tensor] = None


@dataclass
class SITrace:
    steps: list = field(default_factory=list)

    @property
    def chis(self) -> list:
        return [s.chi for s in self.steps]


def _as_batch(f) -> Tensor:
    f = f if isinstance(f, Tensor) else Tensor(f)
    return reshape(f, (1, f.shape[0])) if f.ndim == 1 else f


def si_init(f) -> SIState:
    f = _as_batch(f)
    return SIState(t=0, f=f, m=f, y_hat=f)


def _unit(w: Tensor, b: Tensor, columns) -> Tensor:
    """σ(Σ_k w[:, k] * columns[k] + b), vectorised over batch and units."""
    z = b
    for k, col in enumerate(columns):
        z = z + w[:, k] * col
    return sigmoid(z)


def compute_messages(state: SIState, params: SIParams) -> Tensor:
    mu = mean_reduce(state.m, axis=1, keepdims=True)
    return _unit(params["wm"], params["bm"], (mu, state.f, state.y_hat))


def compute_correction_factors(m: Tensor, f: Tensor, y_prev: Tensor, params: SIParams) -> Tensor:
    mu = mean_reduce(m, axis=1, keepdims=True)
    return _unit(params["wg"], params["bg"], (mu, f, y_prev))


def gate_messages(m: Tensor, chi: Optional[Tensor], correction: bool = True) -> Tensor:
    """(B, N_sender, N_recipient) gated messages."""
    B, N = m.shape
    sender = reshape(m, (B, N, 1))
    if not correction or chi is None:
        return sender * Tensor(np.ones((1, 1, N)))
    gate = (reshape(chi, (B, N, 1)) + reshape(chi, (B, 1, N))) * 0.5
    return gate * sender


def incoming_mean(m_bar: Tensor, include_self: bool = True) -> Tensor:
    B, N, _ = m_bar.shape
    if include_self or N == 1:
        return mean_reduce(m_bar, axis=1)
    off = Tensor(1.0 - np.eye(N))
    return sum_reduce(m_bar * off, axis=1) * (1.0 / (N - 1))


def compute_predictions(m_bar: Tensor, f: Tensor, params: SIParams, include_self: bool = True) -> Tensor:
    return _unit(params["wy"], params["by"], (incoming_mean(m_bar, include_self), f))


def si_step(state: SIState, params: SIParams, correction: bool = True, include_self: bool = True) -> SIState:
    m = compute_messages(state, params)
    chi = compute_correction_factors(m, state.f, state.y_hat, params)
    m_bar = gate_messages(m, chi, correction)
    y_hat = compute_predictions(m_bar, state.f, params, include_self)
    return SIState(t=state.t + 1, f=state.f, m=m, y_hat=y_hat, chi=chi, m_bar=m_bar)


def si_unroll(
    f,
    params: SIParams,
    T: int = DEFAULT_T,
    correction: bool = True,
    include_self: bool = True,
) -> tuple:
    """Run T message-passing steps; returns (ŷ^T, trace).  T=0 returns f."""
    if T < 0:
        raise ValueError("T must be non-negative")
    state = si_init(f)
    trace = SITrace()
    for _ in range(T):
        state = si_step(state, params, correction, include_self)
        trace.steps.append(state)
    return state.y_hat, trace


def chi_regularizer(trace: SITrace, r: float = DEFAULT_R) -> Tensor:
    """r times the mean correction factor over every step, unit and sample."""
    if r < 0:
        raise ValueError("r must be non-negative")
    if not trace.steps or r == 0:
        return Tensor(0.0)
    return mean_reduce(stack(trace.chis, axis=0)) * r


def chi_summary(trace: SITrace) -> tuple:
    if not trace.steps:
        return float("nan"), float("nan")
    chis = np.stack([c.data for c in trace.chis])
    return float(chis.mean()), float(chis.std())
