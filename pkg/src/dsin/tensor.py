"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records its inputs
and a local gradient rule.  ``backward`` linearises the recorded graph into a
tape (topological order) and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "StateError",
    "ContractError",
    "Tensor",
    "BatchNormState",
    "tensor",
    "affine",
    "matmul",
    "grouped_affine",
    "conv2d",
    "conv_output_size",
    "batch_norm",
    "activation",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "mean_reduce",
    "sum_reduce",
    "reshape",
    "stack",
    "transpose",
    "build_tape",
    "no_grad",
    "backward",
    "write_tensor",
    "read_tensor",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Largest double below one; keeps sigmoid strictly inside (0, 1).
_ONE_MINUS = float(np.nextafter(1.0, 0.0))
_TINY = float(np.finfo(np.float64).tiny)


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Skip recording while inside the block (inference passes)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._grad_fn: Optional[GradFn] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other)))

    def __rsub__(self, other):
        return _add(_lift(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return _mul(self, _pow(other, -1.0))

    def __rtruediv__(self, other):
        return _mul(_lift(other), _pow(self, -1.0))

    def __neg__(self):
        return _neg(self)

    def __pow__(self, exponent: float):
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_reduce(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_reduce(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out._op = op
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------
def _add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return _record(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def _neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return _record(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def _pow(a: Tensor, exponent: float) -> Tensor:
    data = a.data**exponent
    return _record(data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    np.clip(out, _TINY, _ONE_MINUS, out=out)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


# shape ---------------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _getitem(x: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), grad_fn, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(data, tensors, grad_fn, "stack")


# reductions ----------------------------------------------------------------
def _norm_axes(ndim: int, axis) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def sum_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(x.ndim, axis)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(data, dtype=np.float64), (x,), grad_fn, "sum")


def mean_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(x.ndim, axis)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ValueError(f"mean over empty extent: shape {x.shape}, axis {axis}")
    data = x.data.sum(axis=axes, keepdims=keepdims) / count

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(np.asarray(data, dtype=np.float64), (x,), grad_fn, "mean")


# linear maps ---------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (B, I), ``W`` (I, O) and ``b`` (O,)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} incompatible with weight {W.shape}")
    data = x.data @ W.data + b.data

    def grad_fn(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(data, (x, W, b), grad_fn, "affine")


def grouped_affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Independent affine maps, one per group.

    ``x`` is (B, G, I), ``W`` is (G, I, O), ``b`` is (G, O); group ``g`` of the
    output only ever sees ``W[g]`` and ``b[g]``.
    """
    if x.ndim != 3 or W.ndim != 3 or x.shape[1:] != W.shape[:2]:
        raise DimensionError(f"grouped_affine: input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (W.shape[0], W.shape[2]):
        raise DimensionError(f"grouped_affine: bias {b.shape} incompatible with weight {W.shape}")
    data = np.einsum("bgi,gio->bgo", x.data, W.data) + b.data

    def grad_fn(g):
        return (
            np.einsum("bgo,gio->bgi", g, W.data),
            np.einsum("bgi,bgo->gio", x.data, g),
            g.sum(axis=0),
        )

    return _record(data, (x, W, b), grad_fn, "grouped_affine")


# convolution ---------------------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _same_pads(size: int, kernel: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of NHWC input with a (K, K, C, F) filter bank."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or filters.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and KKCF filters, got {x.shape}, {filters.shape}")
    B, H, W, C = x.shape
    KH, KW, FC, F = filters.shape
    if FC != C:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match filters {filters.shape}")
    if padding == "same":
        pads_h, pads_w = _same_pads(H, KH, stride), _same_pads(W, KW, stride)
    elif padding == "valid":
        pads_h, pads_w = (0, 0), (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + sum(pads_h), W + sum(pads_w)
    if KH > Hp or KW > Wp:
        raise DimensionError(f"conv2d: kernel {filters.shape} larger than padded input {(B, Hp, Wp, C)}")
    xp = np.pad(x.data, ((0, 0), pads_h, pads_w, (0, 0))) if Hp != H or Wp != W else x.data
    Ho = (Hp - KH) // stride + 1
    Wo = (Wp - KW) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(1, 2))
    # windows: (B, Hp-KH+1, Wp-KW+1, C, KH, KW)
    windows = windows[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, KH * KW * C)
    wmat = filters.data.reshape(KH * KW * C, F)
    out = (cols @ wmat).reshape(B, Ho, Wo, F)

    def grad_fn(g):
        g2 = g.reshape(B * Ho * Wo, F)
        dW = (cols.T @ g2).reshape(filters.shape)
        dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, KH, KW, C)
        dxp = np.zeros((B, Hp, Wp, C))
        for i in range(KH):
            for j in range(KW):
                dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pads_h[0] : pads_h[0] + H, pads_w[0] : pads_w[0] + W, :]
        return dx, dW

    return _record(out, (x, filters), grad_fn, "conv2d")


# batch normalisation -------------------------------------------------------
class BatchNormState:
    """Running per-channel statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.momentum = momentum
        self.mean = Tensor(np.zeros(channels))
        self.var = Tensor(np.ones(channels))
        self.initialized = False

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if not self.initialized:
            self.mean.data[...] = mean
            self.var.data[...] = var
            self.initialized = True
        else:
            m = self.momentum
            self.mean.data[...] = m * self.mean.data + (1.0 - m) * mean
            self.var.data[...] = m * self.var.data + (1.0 - m) * var


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: Optional[BatchNormState] = None,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over every axis but the last."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} do not match channels of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            state.update(mean, var)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv
        out = gamma.data * xhat + beta.data
        count = x.data.size // C

        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data
            dx = inv / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return dx, dgamma, dbeta

        return _record(out, (x, gamma, beta), grad_fn, "batch_norm")
    if mode == "infer":
        if state is None or not state.initialized:
            raise StateError("batch_norm in infer mode needs initialised running statistics")
        inv = 1.0 / np.sqrt(state.var.data + eps)
        xhat = (x.data - state.mean.data) * inv
        out = gamma.data * xhat + beta.data

        def grad_fn(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _record(out, (x, gamma, beta), grad_fn, "batch_norm")
    raise ValueError(f"unknown batch_norm mode {mode!r}")


# differentiation -----------------------------------------------------------
def build_tape(output: Tensor) -> list:
    """Topologically ordered list of recorded tensors reachable from ``output``."""
    order: list = []
    state: dict = {}  # id -> 1 visiting, 2 done
    stack_: list = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise ContractError("cycle detected while building the tape")
        state[key] = 1
        stack_.append((node, True))
        for parent in reversed(node._parents):
            pmark = state.get(id(parent))
            if pmark == 1:
                raise ContractError("cycle detected while building the tape")
            if pmark is None and parent.requires_grad:
                stack_.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    tape = build_tape(output)
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# serialisation -------------------------------------------------------------
def write_tensor(stream: BinaryIO, t) -> None:
    """Little-endian block: uint32 rank, uint64 dims, float64 values."""
    data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    stream.write(struct.pack("<I", data.ndim))
    stream.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    stream.write(data.tobytes(order="C"))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    head = stream.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor block (rank)")
    (rank,) = struct.unpack("<I", head)
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    raw = stream.read(8 * rank)
    if len(raw) != 8 * rank:
        raise EOFError("truncated tensor block (dims)")
    dims = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(dims)) if rank else 1
    body = stream.read(8 * count)
    if len(body) != 8 * count:
        raise EOFError("truncated tensor block (values)")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(dims)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
