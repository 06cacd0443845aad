"""Early-exit network: a staged dense backbone with internal classifiers.

Every classifier (the M internal ones and the final one) owns a feature
reducer and a growing list of per-task linear heads.  Logits of a
classifier are the concatenation of its heads, in task order, so the
class dimension always equals the number of classes seen so far.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ProtocolError
from .tensor import (
    DTYPE,
    LrSchedule,
    ParamStore,
    Tensor,
    concat_cols,
    cross_entropy,
    forward_linear,
    glorot_uniform,
    lr_at,
    no_grad,
    sgd_step,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_IC_TARGETS = (0.15, 0.30, 0.45, 0.60, 0.75, 0.90)


@dataclass(frozen=True)
class Stage:
    index: int  # 1-based
    in_dim: int
    out_dim: int

    @property
    def flops(self) -> int:
        return self.in_dim * self.out_dim


@dataclass
class Backbone:
    """Equal-role affine+ReLU stages; cost fractions come from multiply-add counts."""

    stages: list[Stage]

    @classmethod
    def dense(cls, input_dim: int, width: int = 64, num_stages: int = 7) -> "Backbone":
        if num_stages < 1:
            raise ConfigError("backbone needs at least one stage")
        dims = [input_dim] + [width] * num_stages
        return cls([Stage(s + 1, dims[s], dims[s + 1]) for s in range(num_stages)])

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.stages)

    def cumulative_fractions(self) -> list[float]:
        total = self.total_flops
        acc, out = 0, []
        for s in self.stages:
            acc += s.flops
            out.append(acc / total)
        out[-1] = 1.0
        return out


def place_ics(stage_fractions: Sequence[float], targets: Sequence[float]) -> list[int]:
    """Map each target cost fraction to the 1-based stage an IC is attached after.

    Each target goes to the non-final stage whose cumulative fraction is
    nearest; an exact tie goes to the stage at or after the target.
    """
    targets = list(targets)
    if any(not 0.0 < t < 1.0 for t in targets):
        raise ConfigError(f"IC target fractions must lie in (0, 1): {targets}")
    if any(b <= a for a, b in zip(targets, targets[1:])):
        raise ConfigError(f"IC target fractions must be strictly increasing: {targets}")
    candidates = list(stage_fractions)[:-1]
    if len(candidates) < len(targets):
        raise ConfigError(
            f"{len(targets)} ICs requested but the backbone offers only {len(candidates)} non-final stages"
        )
    placed = []
    for t in targets:
        best = min(
            range(len(candidates)),
            key=lambda s: (abs(candidates[s] - t), 0 if candidates[s] >= t else 1),
        )
        placed.append(best + 1)
    if len(set(placed)) != len(placed):
        raise ConfigError(f"IC targets {targets} collide on stages {placed}; use fewer ICs or more stages")
    return placed


class Reducer:
    """Fixed (untrained) map from stage features to the classifier input width."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        self.in_dim, self.out_dim = in_dim, out_dim
        if in_dim == out_dim:
            self.kind, self.matrix = "identity", None
        elif in_dim % out_dim == 0:
            group = in_dim // out_dim
            m = np.zeros((in_dim, out_dim), dtype=DTYPE)
            for c in range(out_dim):
                m[c * group:(c + 1) * group, c] = 1.0 / group
            self.kind, self.matrix = "meanpool", m
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            m = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
            self.kind, self.matrix = "projection", m.astype(DTYPE)

    @property
    def flops(self) -> int:
        return 0 if self.matrix is None else self.in_dim * self.out_dim

    def __call__(self, h: Tensor) -> Tensor:
        if self.matrix is None:
            return h
        return h @ Tensor(self.matrix)


@dataclass
class TaskHead:
    task_index: int  # 1-based
    class_start: int
    class_stop: int
    weight: str
    bias: str

    @property
    def num_classes(self) -> int:
        return self.class_stop - self.class_start


@dataclass
class Classifier:
    index: int  # 1-based; the last one is the final classifier
    stage: int  # 1-based stage whose output it reads
    reducer: Reducer
    heads: list[TaskHead] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.heads[-1].class_stop if self.heads else 0

    def head_flops(self) -> int:
        return sum(self.reducer.out_dim * h.num_classes for h in self.heads)


class EarlyExitNetwork:
    def __init__(self, backbone: Backbone, ic_stages: Sequence[int], ic_width: int | None = None, seed: int = 0):
        self.backbone = backbone
        self.input_dim = backbone.stages[0].in_dim
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.params = ParamStore()
        for st in backbone.stages:
            self.params.add(f"stage{st.index}.W", glorot_uniform(self._rng, st.in_dim, st.out_dim))
            self.params.add(f"stage{st.index}.b", np.zeros((1, st.out_dim), dtype=DTYPE))
        self.stage_fractions = backbone.cumulative_fractions()
        self.classifiers: list[Classifier] = []
        for i, s in enumerate(list(ic_stages) + [len(backbone.stages)], start=1):
            feat = backbone.stages[s - 1].out_dim
            is_final = i == len(ic_stages) + 1
            width = feat if (ic_width is None or is_final) else ic_width
            self.classifiers.append(Classifier(i, s, Reducer(feat, width, self._rng)))
        self.rectifier = None  # optional per-task logit rectification (BiC)
        self.stage_runs = 0

    # -- structure ---------------------------------------------------------

    @property
    def num_classifiers(self) -> int:
        return len(self.classifiers)

    @property
    def num_ics(self) -> int:
        return len(self.classifiers) - 1

    @property
    def num_tasks(self) -> int:
        return len(self.classifiers[0].heads)

    @property
    def num_classes(self) -> int:
        return self.classifiers[0].num_classes

    @property
    def ic_fractions(self) -> list[float]:
        """Cumulative backbone fraction at which each classifier reads features."""
        return [self.stage_fractions[c.stage - 1] for c in self.classifiers]

    def task_slices(self) -> list[tuple[int, int]]:
        return [(h.class_start, h.class_stop) for h in self.classifiers[0].heads]

    def add_task_head(self, task_index: int, num_classes: int) -> None:
        if task_index != self.num_tasks + 1:
            raise ProtocolError(f"expected task {self.num_tasks + 1}, got task {task_index}")
        if num_classes < 1:
            raise ConfigError("a task needs at least one class")
        start = self.num_classes
        for clf in self.classifiers:
            w = f"clf{clf.index}.head{task_index}.W"
            b = f"clf{clf.index}.head{task_index}.b"
            self.params.add(w, glorot_uniform(self._rng, clf.reducer.out_dim, num_classes))
            self.params.add(b, np.zeros((1, num_classes), dtype=DTYPE))
            clf.heads.append(TaskHead(task_index, start, start + num_classes, w, b))

    # -- forward -----------------------------------------------------------

    def run_stage(self, s: int, h: Tensor) -> Tensor:
        self.stage_runs += 1
        return forward_linear(h, self.params[f"stage{s}.W"], self.params[f"stage{s}.b"]).relu()

    def classify(self, clf: Classifier, h: Tensor) -> Tensor:
        if not clf.heads:
            raise ProtocolError("no task heads yet; call add_task_head first")
        r = clf.reducer(h)
        parts = [forward_linear(r, self.params[hd.weight], self.params[hd.bias]) for hd in clf.heads]
        z = concat_cols(parts)
        if self.rectifier is not None:
            z = self.rectifier.apply(clf.index, z)
        return z

    def forward(self, x: Tensor, return_features: bool = False):
        """Logits of every classifier; each stage runs exactly once."""
        if x.cols != self.input_dim:
            raise DimensionError(f"input has {x.cols} features, network expects {self.input_dim}")
        by_stage: dict[int, list[Classifier]] = {}
        for clf in self.classifiers:
            by_stage.setdefault(clf.stage, []).append(clf)
        h = x
        logits: list[Tensor] = []
        for st in self.backbone.stages:
            h = self.run_stage(st.index, h)
            for clf in by_stage.get(st.index, ()):
                logits.append(self.classify(clf, h))
        if return_features:
            return logits, self.classifiers[-1].reducer(h)
        return logits

    def iter_exits(self, x: np.ndarray) -> Iterator[tuple[int, np.ndarray]]:
        """Lazily yield (classifier index, logits) running only the stages needed so far."""
        with no_grad():
            h = Tensor(np.asarray(x, dtype=DTYPE).reshape(-1, self.input_dim))
            done = 0
            for clf in self.classifiers:
                while done < clf.stage:
                    done += 1
                    h = self.run_stage(done, h)
                yield clf.index, self.classify(clf, h).data

    def logits_at(self, index: int, x: np.ndarray) -> np.ndarray:
        """Recompute classifier ``index`` (1-based) from the raw input alone."""
        clf = self.classifiers[index - 1]
        with no_grad():
            h = Tensor(np.asarray(x, dtype=DTYPE))
            for s in range(1, clf.stage + 1):
                h = self.run_stage(s, h)
            return self.classify(clf, h).data

    def features(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Final classifier's pre-head representation."""
        out = []
        with no_grad():
            for lo in range(0, len(X), batch_size):
                h = Tensor(np.asarray(X[lo:lo + batch_size], dtype=DTYPE))
                for st in self.backbone.stages:
                    h = self.run_stage(st.index, h)
                out.append(self.classifiers[-1].reducer(h).data)
        if not out:
            return np.zeros((0, self.classifiers[-1].reducer.out_dim), dtype=DTYPE)
        return np.concatenate(out, axis=0)

    # -- persistence -------------------------------------------------------

    def clone(self) -> "EarlyExitNetwork":
        import copy

        twin = copy.deepcopy(self)
        twin.params.zero_grad()
        return twin

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "stages": [[s.in_dim, s.out_dim] for s in self.backbone.stages],
            "stage_fractions": self.stage_fractions,
            "ic_stages": [c.stage for c in self.classifiers[:-1]],
            "reducers": [[c.reducer.kind, c.reducer.in_dim, c.reducer.out_dim] for c in self.classifiers],
            "heads": [[h.task_index, h.class_start, h.class_stop] for h in self.classifiers[0].heads],
            "param_names": self.params.names(),
            "rectifier": None if self.rectifier is None else self.rectifier.to_dict(),
        }
        arrays = {f"p{k}": p.data for k, (_, p) in enumerate(self.params.items())}
        for c in self.classifiers:
            if c.reducer.matrix is not None:
                arrays[f"reducer{c.index}"] = c.reducer.matrix
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "EarlyExitNetwork":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
            stages = [Stage(i + 1, a, b) for i, (a, b) in enumerate(meta["stages"])]
            ic_width = meta["reducers"][0][2] if len(meta["reducers"]) > 1 else None
            net = cls(Backbone(stages), meta["ic_stages"], ic_width=ic_width, seed=meta["seed"])
            net.stage_fractions = list(meta["stage_fractions"])
            for task_index, start, stop in meta["heads"]:
                net.add_task_head(task_index, stop - start)
            if net.params.names() != meta["param_names"]:
                raise ConfigError("checkpoint parameter layout does not match the rebuilt network")
            for k, (_, p) in enumerate(net.params.items()):
                p.data = z[f"p{k}"].copy()
            for c in net.classifiers:
                if f"reducer{c.index}" in z:
                    c.reducer.matrix = z[f"reducer{c.index}"].copy()
            if meta["rectifier"] is not None:
                from .methods import BicLayer

                net.rectifier = BicLayer.from_dict(meta["rectifier"])
        return net


def attach_ics(
    backbone: Backbone,
    target_fractions: Sequence[float] = DEFAULT_IC_TARGETS,
    ic_width: int | None = None,
    seed: int = 0,
) -> EarlyExitNetwork:
    stages = place_ics(backbone.cumulative_fractions(), target_fractions)
    return EarlyExitNetwork(backbone, stages, ic_width=ic_width, seed=seed)


# ---------------------------------------------------------------------------
# logits as plain arrays


@dataclass
class LogitBundle:
    """Raw logits, shape (samples, classifiers, classes), plus per-task class slices."""

    logits: np.ndarray
    task_slices: list[tuple[int, int]]

    @property
    def num_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classifiers(self) -> int:
        return self.logits.shape[1]

    @property
    def num_tasks(self) -> int:
        return len(self.task_slices)

    def task(self, t: int) -> np.ndarray:
        """Logits of task ``t`` (1-based), shape (samples, classifiers, |task t|)."""
        lo, hi = self.task_slices[t - 1]
        return self.logits[:, :, lo:hi]

    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=-1)

    def subset(self, idx) -> "LogitBundle":
        return LogitBundle(self.logits[idx], list(self.task_slices))


def forward_all(net: EarlyExitNetwork, X: np.ndarray, batch_size: int = 512) -> LogitBundle:
    """Evaluate every classifier on every row of X without recording a graph."""
    chunks = []
    with no_grad():
        for lo in range(0, len(X), batch_size):
            out = net.forward(Tensor(np.asarray(X[lo:lo + batch_size], dtype=DTYPE)))
            chunks.append(np.stack([z.data for z in out], axis=1))
    if chunks:
        logits = np.concatenate(chunks, axis=0)
    else:
        logits = np.zeros((0, net.num_classifiers, net.num_classes), dtype=DTYPE)
    return LogitBundle(logits, net.task_slices())


# ---------------------------------------------------------------------------
# training


def ic_loss_weights(epoch: int, total_epochs: int, actual_fractions: Sequence[float]) -> list[float]:
    """Linear ramp from 0.01 to each IC's cost fraction; the final classifier stays at 1."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    progress = epoch / (total_epochs - 1) if total_epochs > 1 else 1.0
    ic = [0.01 + progress * (f - 0.01) for f in actual_fractions[:-1]]
    return ic + [1.0]


@dataclass
class LossSpec:
    """Per-classifier loss weights: the ramp by default, or a fixed vector."""

    fixed_weights: Sequence[float] | None = None

    def weights(self, epoch: int, total_epochs: int, fractions: Sequence[float]) -> list[float]:
        if self.fixed_weights is not None:
            w = list(self.fixed_weights)
            if len(w) != len(fractions):
                raise ConfigError(f"{len(w)} loss weights for {len(fractions)} classifiers")
            if any(v < 0 for v in w) or w[-1] != 1.0:
                raise ConfigError("loss weights must be non-negative with the final weight pinned at 1")
            return w
        return ic_loss_weights(epoch, total_epochs, fractions)


class TrainingHooks:
    """Plain finetuning: the task data alone, shuffled batches, cross-entropy everywhere."""

    name = "ft"

    def prepare(self, net: "EarlyExitNetwork") -> None:
        """Validate protocol preconditions before the first epoch."""

    def training_pool(self, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return X, y

    def batches(self, X, y, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(len(X))
        for lo in range(0, len(X), batch_size):
            idx = order[lo:lo + batch_size]
            yield X[idx], y[idx]

    def classifier_losses(self, logits: list[Tensor], xb: np.ndarray, yb: np.ndarray) -> list[Tensor]:
        return [cross_entropy(z, yb) for z in logits]


def combine_losses(losses: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    total = None
    for w, loss in zip(weights, losses):
        term = loss * float(w)
        total = term if total is None else total + term
    return total


@dataclass
class TrainStats:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    samples: int = 0


def train_task(
    net: EarlyExitNetwork,
    X: np.ndarray,
    y: np.ndarray,
    loss_spec: LossSpec | None = None,
    schedule: LrSchedule | None = None,
    hooks: TrainingHooks | None = None,
    *,
    epochs: int,
    batch_size: int = 128,
    momentum: float = 0.9,
    rng: np.random.Generator,
) -> TrainStats:
    """Minimise the weighted sum of per-classifier losses over the task's pool."""
    loss_spec = loss_spec or LossSpec()
    schedule = schedule or LrSchedule()
    hooks = hooks or TrainingHooks()
    if net.num_tasks == 0:
        raise ProtocolError("add the task head before training")
    hooks.prepare(net)
    Xp, yp = hooks.training_pool(np.asarray(X, dtype=DTYPE), np.asarray(y, dtype=np.int64))
    if len(Xp) == 0:
        raise ConfigError("empty task data")
    stats = TrainStats(samples=len(Xp))
    net.params.reset_momentum()
    fractions = net.ic_fractions
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        weights = loss_spec.weights(epoch, epochs, fractions)
        total, seen = 0.0, 0
        for xb, yb in hooks.batches(Xp, yp, batch_size, rng):
            logits = net.forward(Tensor(xb))
            loss = combine_losses(hooks.classifier_losses(logits, xb, yb), weights)
            loss.backward()
            sgd_step(net.params, lr, momentum)
            total += loss.item() * len(xb)
            seen += len(xb)
            stats.steps += 1
        stats.epoch_losses.append(total / max(seen, 1))
        log.debug("epoch %d lr=%.4g loss=%.4f", epoch, lr, stats.epoch_losses[-1])
    return stats
