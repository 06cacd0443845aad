"""Continual-learning strategies replicated across every classifier.

Each strategy is a :class:`~eecl.network.TrainingHooks` subclass that
decides what the training pool looks like, how batches are drawn and
which loss every classifier receives.  All classifiers always see the
same batch within a step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ProtocolError
from .network import EarlyExitNetwork, TrainingHooks, forward_all
from .tensor import (
    DTYPE,
    Tensor,
    bce_with_logits,
    concat_cols,
    cross_entropy,
    no_grad,
    sgd_step,
    sigmoid,
    soft_cross_entropy,
    softmax,
    ParamStore,
)

log = logging.getLogger(__name__)

METHODS = ("ft", "ft-e", "er", "lwf", "bic", "icarl")


# ---------------------------------------------------------------------------
# exemplar memory


def herding_select(features: np.ndarray, m: int) -> np.ndarray:
    """Greedy herding: repeatedly add the sample that keeps the running mean closest to the class mean."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise DataError("herding needs a non-empty (samples, dims) feature matrix")
    if not 0 <= m <= len(F):
        raise ValueError(f"cannot select {m} of {len(F)} samples")
    target = F.mean(axis=0)
    running = np.zeros_like(target)
    taken = np.zeros(len(F), dtype=bool)
    order = []
    for k in range(m):
        dist = np.linalg.norm(target - (running + F) / (k + 1), axis=1)
        dist[taken] = np.inf
        pick = int(np.argmin(dist))
        order.append(pick)
        taken[pick] = True
        running += F[pick]
    return np.asarray(order, dtype=np.int64)


def class_quotas(capacity: int, class_ids) -> dict[int, int]:
    """Equal per-class share of the capacity; the remainder goes to the earliest classes."""
    class_ids = sorted(class_ids)
    if not class_ids:
        return {}
    base, extra = divmod(capacity, len(class_ids))
    return {c: base + (1 if k < extra else 0) for k, c in enumerate(class_ids)}


@dataclass
class Exemplar:
    class_id: int
    task_index: int
    sample_index: int
    rank: int


@dataclass
class ExemplarMemory:
    capacity: int
    exemplars: dict[int, list[Exemplar]] = field(default_factory=dict)
    _rows: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def data(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.exemplars:
            return np.zeros((0, 0), dtype=DTYPE), np.zeros(0, dtype=np.int64)
        xs, ys = [], []
        for c in self.classes:
            xs.append(self._rows[c][: len(self.exemplars[c])])
            ys.append(np.full(len(self.exemplars[c]), c, dtype=np.int64))
        return np.concatenate(xs).astype(DTYPE, copy=False), np.concatenate(ys)

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "exemplars": [
                [e.class_id, e.task_index, e.sample_index, e.rank] for c in self.classes for e in self.exemplars[c]
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, train_sets: dict[int, np.ndarray]) -> "ExemplarMemory":
        """Rebuild from a snapshot; ``train_sets`` maps task index to that task's training inputs."""
        mem = cls(int(d["capacity"]))
        for class_id, task_index, sample_index, rank in d["exemplars"]:
            mem.exemplars.setdefault(class_id, []).append(Exemplar(class_id, task_index, sample_index, rank))
        for c, ex in mem.exemplars.items():
            ex.sort(key=lambda e: e.rank)
            mem._rows[c] = np.stack([train_sets[e.task_index][e.sample_index] for e in ex]).astype(DTYPE)
        return mem


def memory_update(memory: ExemplarMemory, net: EarlyExitNetwork, X: np.ndarray, y: np.ndarray, task_index: int) -> None:
    """Shrink old classes to the new quota by herding rank and herd the new classes in."""
    new_classes = sorted(set(int(c) for c in np.unique(y)) - set(memory.exemplars))
    quotas = class_quotas(memory.capacity, memory.classes + new_classes)
    for c in memory.classes:
        memory.exemplars[c] = memory.exemplars[c][: quotas[c]]
        memory._rows[c] = memory._rows[c][: quotas[c]]
    for c in new_classes:
        idx = np.flatnonzero(y == c)
        take = min(quotas[c], len(idx))
        if take == 0:
            memory.exemplars[c], memory._rows[c] = [], np.zeros((0, X.shape[1]), dtype=DTYPE)
            continue
        order = herding_select(net.features(X[idx]), take)
        chosen = idx[order]
        memory.exemplars[c] = [Exemplar(c, task_index, int(s), r) for r, s in enumerate(chosen)]
        memory._rows[c] = np.asarray(X[chosen], dtype=DTYPE)
    assert len(memory) <= memory.capacity


# ---------------------------------------------------------------------------
# replay strategies


class FinetuneExemplars(TrainingHooks):
    """Memory is mixed into the task data before the epoch shuffle."""

    name = "ft-e"

    def __init__(self, memory: ExemplarMemory):
        self.memory = memory

    def training_pool(self, X, y):
        if len(self.memory) == 0:
            return X, y
        mx, my = self.memory.data()
        return np.concatenate([X, mx]), np.concatenate([y, my])


class ExperienceReplay(TrainingHooks):
    """Every batch is half new-task samples and half memory samples."""

    name = "er"

    def __init__(self, memory: ExemplarMemory):
        self.memory = memory

    def batches(self, X, y, batch_size, rng):
        if len(self.memory) == 0:
            yield from super().batches(X, y, batch_size, rng)
            return
        mx, my = self.memory.data()
        half = max(batch_size // 2, 1)
        order = rng.permutation(len(X))
        for lo in range(0, len(X), half):
            idx = order[lo:lo + half]
            k = len(idx)
            mem_idx = rng.choice(len(mx), size=k, replace=len(mx) < k)
            yield np.concatenate([X[idx], mx[mem_idx]]), np.concatenate([y[idx], my[mem_idx]])


def ft_hooks() -> TrainingHooks:
    return TrainingHooks()


def fte_hooks(memory: ExemplarMemory) -> FinetuneExemplars:
    return FinetuneExemplars(memory)


def er_hooks(memory: ExemplarMemory) -> ExperienceReplay:
    return ExperienceReplay(memory)


# ---------------------------------------------------------------------------
# distillation strategies


def _teacher_logits(previous: EarlyExitNetwork, xb: np.ndarray) -> list[np.ndarray]:
    with no_grad():
        return [z.data for z in previous.forward(Tensor(xb))]


class LearningWithoutForgetting(TrainingHooks):
    """Cross-entropy plus the same temperature-softened distillation term at every classifier."""

    name = "lwf"

    def __init__(self, previous: EarlyExitNetwork | None, lam: float = 1.0, temperature: float = 2.0):
        self.previous = previous
        self.lam = lam
        self.temperature = temperature

    def prepare(self, net: EarlyExitNetwork) -> None:
        if net.num_tasks >= 2 and self.previous is None:
            raise ProtocolError(f"{self.name} needs the previous network from task {net.num_tasks - 1}")

    def distillation(self, z: Tensor, teacher: np.ndarray) -> Tensor:
        n_old = teacher.shape[1]
        target = softmax(teacher.astype(z.data.dtype), self.temperature)
        return soft_cross_entropy(z.cols_slice(0, n_old), target, self.temperature)

    def classifier_losses(self, logits, xb, yb):
        losses = [cross_entropy(z, yb) for z in logits]
        if self.previous is None or self.lam == 0:
            return losses
        teachers = _teacher_logits(self.previous, xb)
        return [ce + self.distillation(z, t) * self.lam for ce, z, t in zip(losses, logits, teachers)]


def lwf_hooks(previous_net: EarlyExitNetwork | None, lam: float = 1.0, temperature: float = 2.0):
    return LearningWithoutForgetting(previous_net, lam, temperature)


class ICaRL(TrainingHooks):
    """Sigmoid BCE per classifier: one-hot targets on new classes, old network's sigmoids on old classes."""

    name = "icarl"

    def __init__(self, previous: EarlyExitNetwork | None, memory: ExemplarMemory):
        self.previous = previous
        self.memory = memory

    def prepare(self, net):
        if net.num_tasks >= 2 and self.previous is None:
            raise ProtocolError("icarl needs the previous network")

    def training_pool(self, X, y):
        if len(self.memory) == 0:
            return X, y
        mx, my = self.memory.data()
        return np.concatenate([X, mx]), np.concatenate([y, my])

    def targets(self, z: Tensor, yb: np.ndarray, teacher: np.ndarray | None) -> np.ndarray:
        tgt = np.zeros_like(z.data)
        tgt[np.arange(len(yb)), yb] = 1.0
        if teacher is not None:
            n_old = teacher.shape[1]
            tgt[:, :n_old] = sigmoid(teacher.astype(z.data.dtype))
        return tgt

    def classifier_losses(self, logits, xb, yb):
        teachers = _teacher_logits(self.previous, xb) if self.previous is not None else [None] * len(logits)
        return [bce_with_logits(z, self.targets(z, yb, t)) for z, t in zip(logits, teachers)]


def icarl_hooks(previous_net: EarlyExitNetwork | None, memory: ExemplarMemory) -> ICaRL:
    return ICaRL(previous_net, memory)


# ---------------------------------------------------------------------------
# bias correction


class BicLayer:
    """Per-classifier, per-task affine rectification ``alpha * logits + beta`` of a task's slice."""

    def __init__(self):
        self.pairs: dict[int, dict[int, tuple[float, float]]] = {}
        self.slices: dict[int, tuple[int, int]] = {}

    def set(self, classifier: int, task: int, class_slice: tuple[int, int], alpha: float, beta: float) -> None:
        self.pairs.setdefault(classifier, {})[task] = (float(alpha), float(beta))
        self.slices[task] = tuple(class_slice)

    def get(self, classifier: int, task: int) -> tuple[float, float]:
        return self.pairs.get(classifier, {}).get(task, (1.0, 0.0))

    def apply(self, classifier: int, z: Tensor) -> Tensor:
        active = {
            t: ab for t, ab in self.pairs.get(classifier, {}).items() if ab != (1.0, 0.0) and self.slices[t][0] < z.cols
        }
        if not active:
            return z
        parts, cursor = [], 0
        for t in sorted(active):
            lo, hi = self.slices[t]
            if lo > cursor:
                parts.append(z.cols_slice(cursor, lo))
            alpha, beta = active[t]
            parts.append(z.cols_slice(lo, hi) * alpha + beta)
            cursor = hi
        if cursor < z.cols:
            parts.append(z.cols_slice(cursor, z.cols))
        return concat_cols(parts)

    def to_dict(self) -> dict:
        return {
            "slices": {str(t): list(s) for t, s in self.slices.items()},
            "pairs": {str(i): {str(t): list(ab) for t, ab in d.items()} for i, d in self.pairs.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BicLayer":
        layer = cls()
        layer.slices = {int(t): tuple(s) for t, s in d["slices"].items()}
        layer.pairs = {int(i): {int(t): tuple(ab) for t, ab in v.items()} for i, v in d["pairs"].items()}
        return layer


def balanced_split(y: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced held-out split: (train indices, validation indices)."""
    classes = np.unique(y)
    per_class = int(fraction * len(y) / max(len(classes), 1))
    counts = {int(c): int((y == c).sum()) for c in classes}
    per_class = min([per_class] + list(counts.values()))
    if per_class < 1:
        starved = [c for c, n in counts.items() if n <= per_class] or list(counts)
        raise DataError(f"balanced validation split impossible: class {starved[0]} gets 0 validation samples")
    val = []
    for c in classes:
        idx = np.flatnonzero(y == c)
        val.append(rng.choice(idx, size=per_class, replace=False))
    val = np.sort(np.concatenate(val))
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


class BiasCorrection(LearningWithoutForgetting):
    """Stage one of BiC: replay pool minus a balanced validation split, with distillation."""

    name = "bic"

    def __init__(self, previous, memory: ExemplarMemory, lam=1.0, temperature=2.0, val_fraction=0.1, rng=None):
        super().__init__(previous, lam, temperature)
        self.memory = memory
        self.val_fraction = val_fraction
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.val_X = self.val_y = None

    def training_pool(self, X, y):
        if len(self.memory) == 0:
            return X, y
        mx, my = self.memory.data()
        PX, Py = np.concatenate([X, mx]), np.concatenate([y, my])
        train, val = balanced_split(Py, self.val_fraction, self.rng)
        self.val_X, self.val_y = PX[val], Py[val]
        return PX[train], Py[train]


def bic_hooks(previous_net, memory, lam=1.0, temperature=2.0, val_fraction=0.1, rng=None) -> BiasCorrection:
    return BiasCorrection(previous_net, memory, lam, temperature, val_fraction, rng)


def fit_rectification(
    logits: np.ndarray,
    labels: np.ndarray,
    class_slice: tuple[int, int],
    *,
    epochs: int = 100,
    lr: float = 0.001,
    momentum: float = 0.9,
    batch_size: int = 128,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Fit (alpha, beta) on one classifier's logits, rectifying only ``class_slice``, by minimising cross-entropy."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = class_slice
    store = ParamStore()
    alpha = store.add("alpha", np.ones((1, 1), dtype=DTYPE))
    beta = store.add("beta", np.zeros((1, 1), dtype=DTYPE))
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            z = logits[idx]
            parts = []
            if lo > 0:
                parts.append(Tensor(z[:, :lo]))
            parts.append(Tensor(z[:, lo:hi]) * alpha + beta)
            if hi < z.shape[1]:
                parts.append(Tensor(z[:, hi:]))
            loss = cross_entropy(concat_cols(parts), labels[idx])
            loss.backward()
            sgd_step(store, lr, momentum)
    return alpha.item(), beta.item()


def bic_fit(
    net: EarlyExitNetwork,
    val_X: np.ndarray,
    val_y: np.ndarray,
    task_index: int,
    *,
    epochs: int = 100,
    lr: float = 0.001,
    rng: np.random.Generator | None = None,
) -> BicLayer:
    """Stage two of BiC: with the network frozen, fit a rectification of the newest task's slice at every classifier."""
    if val_X is None or len(val_y) == 0:
        raise DataError("BiC needs a non-empty balanced validation split")
    seen = set(int(c) for c in np.unique(val_y))
    missing = [c for c in range(net.num_classes) if c not in seen]
    if missing:
        raise DataError(f"balanced split impossible: class {missing[0]} has 0 validation samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    layer = net.rectifier if net.rectifier is not None else BicLayer()
    net.rectifier = layer
    bundle = forward_all(net, val_X)
    class_slice = bundle.task_slices[task_index - 1]
    for i in range(net.num_classifiers):
        a, b = fit_rectification(bundle.logits[:, i, :], val_y, class_slice, epochs=epochs, lr=lr, rng=rng)
        layer.set(i + 1, task_index, class_slice, a, b)
        log.debug("bic classifier %d task %d: alpha=%.4f beta=%.4f", i + 1, task_index, a, b)
    return layer
