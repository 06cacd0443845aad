"""A small reverse-mode autodiff engine over 2-D numpy arrays.

Only what the early-exit networks need is here: affine maps, ReLU,
column slicing/concatenation, broadcasting add/mul and a few fused
losses (softmax cross-entropy, soft-target distillation, sigmoid BCE).
Every tensor is 2-D; scalars are 1x1.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(ax for ax in range(2) if shape[ax] == 1 and grad.shape[ax] != 1)
    return grad.sum(axis=axes, keepdims=True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a 1x1 tensor")
        return float(self.data[0, 0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    @staticmethod
    def _result(data, parents, backward, op):
        _check_finite(data, op)
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- elementwise / structural ops -------------------------------------

    def __matmul__(self, other: Tensor) -> Tensor:
        if self.cols != other.rows:
            raise DimensionError(f"matmul shape mismatch {self.shape} @ {other.shape}")
        a, b = self.data, other.data

        def backward(g):
            if self.requires_grad:
                self._accum(g @ b.T)
            if other.requires_grad:
                other._accum(a.T @ g)

        return Tensor._result(a @ b, (self, other), backward, "matmul")

    def __add__(self, other) -> Tensor:
        other = _as_tensor(other, self.data.dtype)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor._result(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * b, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * a, other.shape))

        return Tensor._result(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return self * -1.0

    def __sub__(self, other) -> Tensor:
        return self + (-_as_tensor(other, self.data.dtype))

    def relu(self) -> Tensor:
        mask = self.data > 0
        out = np.where(mask, self.data, 0).astype(self.data.dtype, copy=False)

        def backward(g):
            self._accum(g * mask)

        return Tensor._result(out, (self,), backward, "relu")

    def cols_slice(self, start: int, stop: int) -> Tensor:
        def backward(g):
            full = np.zeros_like(self.data)
            full[:, start:stop] = g
            self._accum(full)

        return Tensor._result(self.data[:, start:stop], (self,), backward, "slice")

    def sum(self) -> Tensor:
        def backward(g):
            self._accum(np.broadcast_to(g, self.shape))

        total = self.data.sum(dtype=self.data.dtype).reshape(1, 1)
        return Tensor._result(total, (self,), backward, "sum")

    def mean(self) -> Tensor:
        return self.sum() * (1.0 / self.data.size)

    # -- autodiff ----------------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this 1x1 loss into every leaf with requires_grad."""
        if self.data.size != 1:
            raise DimensionError("backward() needs a scalar (1x1) loss")
        if not self.requires_grad or (self._backward is None and not self._parents):
            raise StateError("backward() called on a tensor with no recorded forward pass")
        order = _topological(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row mismatch: {sorted(rows)}")
    widths = [p.cols for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accum(g[:, lo:hi])

    data = np.concatenate([p.data for p in parts], axis=1)
    return Tensor._result(data, tuple(parts), backward, "concat")


def forward_linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """x @ weights + bias, with bias broadcast over rows."""
    if x.cols != weights.rows:
        raise DimensionError(f"input has {x.cols} columns, weights expect {weights.rows}")
    if bias.shape != (1, weights.cols):
        raise DimensionError(f"bias shape {bias.shape} != (1, {weights.cols})")
    return x @ weights + bias


# ---------------------------------------------------------------------------
# numerics shared by losses and inference


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = z / temperature if temperature != 1.0 else z
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer class targets."""
    z = logits.data
    n = z.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} != ({n},)")
    logp = log_softmax(z)
    loss = -logp[np.arange(n), targets].mean(dtype=z.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        logits._accum(grad * (g[0, 0] / n))

    return Tensor._result(np.asarray(loss, dtype=z.dtype).reshape(1, 1), (logits,), backward, "cross_entropy")


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean over rows of -sum_c p_c log softmax(logits / T)_c."""
    z = logits.data
    n = z.shape[0]
    if target_probs.shape != z.shape:
        raise DimensionError(f"target shape {target_probs.shape} != logits {z.shape}")
    logq = log_softmax(z / temperature)
    loss = -(target_probs * logq).sum(dtype=z.dtype) / n

    def backward(g):
        q = np.exp(logq)
        grad = (q * target_probs.sum(axis=1, keepdims=True) - target_probs) / temperature
        logits._accum(grad * (g[0, 0] / n))

    return Tensor._result(np.asarray(loss, dtype=z.dtype).reshape(1, 1), (logits,), backward, "soft_cross_entropy")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean elementwise binary cross-entropy of sigmoid(logits) against targets in [0, 1]."""
    z = logits.data
    if targets.shape != z.shape:
        raise DimensionError(f"target shape {targets.shape} != logits {z.shape}")
    # max(z, 0) - z*y + log(1 + exp(-|z|))
    elem = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    loss = elem.mean(dtype=z.dtype)

    def backward(g):
        logits._accum((sigmoid(z) - targets) * (g[0, 0] / z.size))

    return Tensor._result(np.asarray(loss, dtype=z.dtype).reshape(1, 1), (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# parameters, optimizer, schedule


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class ParamStore:
    """Named trainable tensors, each with a same-shape gradient and momentum buffer."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=True, name=name)
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def momentum(self, name: str) -> np.ndarray:
        return self._momentum[name]

    def gradient(self, name: str) -> np.ndarray:
        p = self._params[name]
        return p.grad if p.grad is not None else np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def reset_momentum(self) -> None:
        for buf in self._momentum.values():
            buf.fill(0)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.9, clear: bool = True) -> None:
    """v <- momentum*v + g;  p <- p - lr*v."""
    for name, p in params.items():
        if p.grad is None:
            continue
        v = params.momentum(name)
        v *= momentum
        v += p.grad
        p.data -= np.asarray(lr, dtype=p.data.dtype) * v
        _check_finite(p.data, f"sgd_step({name})")
        if clear:
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.1
    milestones: tuple[int, ...] = field(default=(60, 120, 160))
    decay: float = 0.1

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        object.__setattr__(self, "milestones", ms)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.decay**passed
