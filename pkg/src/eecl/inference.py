"""Confidence-threshold early exits, cost accounting and evaluation metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import EarlyExitNetwork, LogitBundle, forward_all
from .tlc import TlcParams, apply_tlc, class_offsets

log = logging.getLogger(__name__)

NEVER_EXIT = 2.0  # any tau > 1 disables exits; max softmax never exceeds 1


class BudgetInfeasibleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ExitPolicy:
    tau: float
    use_tlc: bool = False
    tlc: TlcParams | None = None

    def __post_init__(self):
        if self.tau < 0 or (1.0 < self.tau and self.tau != NEVER_EXIT):
            raise ValueError(f"tau must lie in [0, 1] or equal the never-exit sentinel, got {self.tau}")
        if self.use_tlc and self.tlc is None:
            raise ValueError("use_tlc needs fitted TlcParams")

    def with_tau(self, tau: float) -> "ExitPolicy":
        return ExitPolicy(tau, self.use_tlc, self.tlc)


@dataclass(frozen=True)
class CostModel:
    """Cost of exiting at each classifier as a fraction of the backbone's multiply-adds.

    ``exit_costs[i]`` is the cumulative backbone fraction read by classifier i
    plus the feature-reduction and head cost of every IC evaluated up to and
    including i.  The final classifier's own head is part of the base cost.
    """

    stage_fractions: tuple[float, ...]
    classifier_stages: tuple[int, ...]
    ic_overheads: tuple[float, ...]

    @classmethod
    def from_network(cls, net: EarlyExitNetwork) -> "CostModel":
        total = net.backbone.total_flops
        overheads = tuple(
            (c.reducer.flops + c.head_flops()) / total for c in net.classifiers[:-1]
        )
        return cls(tuple(net.stage_fractions), tuple(c.stage for c in net.classifiers), overheads)

    @property
    def exit_costs(self) -> np.ndarray:
        fr = np.array([self.stage_fractions[s - 1] for s in self.classifier_stages])
        over = np.concatenate([np.cumsum(self.ic_overheads), [sum(self.ic_overheads)]]) if self.ic_overheads else np.zeros(1)
        costs = fr + over
        costs[-1] = 1.0 + sum(self.ic_overheads)
        return costs

    @property
    def full_cost(self) -> float:
        return 1.0 + sum(self.ic_overheads)


def confidences(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max softmax probability and argmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.max(axis=-1), z.argmax(axis=-1)


@dataclass(frozen=True)
class DynamicPrediction:
    label: int
    exit_index: int  # 1-based classifier index
    cost: float
    stages_run: int


def predict_dynamic(net: EarlyExitNetwork, x: np.ndarray, policy: ExitPolicy, cost_model: CostModel) -> DynamicPrediction:
    """Run classifiers in order and stop at the first whose confidence exceeds tau.

    When none does, the most confident classifier's prediction is returned
    at the cost of the full network.
    """
    offsets = class_offsets(net.task_slices(), policy.tlc) if policy.use_tlc else None
    costs = cost_model.exit_costs
    before = net.stage_runs
    best_conf, best = -1.0, None
    for index, z in net.iter_exits(x):
        row = z[0].astype(np.float64)
        if offsets is not None:
            row = (z[0] + offsets.astype(z.dtype)).astype(np.float64)
        conf, label = confidences(row[None, :])
        conf, label = float(conf[0]), int(label[0])
        if conf > policy.tau:
            return DynamicPrediction(label, index, float(costs[index - 1]), net.stage_runs - before)
        if conf > best_conf:
            best_conf, best = conf, (label, index)
    return DynamicPrediction(best[0], best[1], float(cost_model.full_cost), net.stage_runs - before)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class CachedExits:
    """Per-sample confidence and prediction at every classifier, shape (samples, classifiers)."""

    conf: np.ndarray
    pred: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_bundle(cls, bundle: LogitBundle, labels: np.ndarray, tlc: TlcParams | None = None) -> "CachedExits":
        if tlc is not None:
            bundle = apply_tlc(bundle, tlc)
        conf, pred = confidences(bundle.logits)
        return cls(conf, pred, np.asarray(labels))


def replay_exits(cache: CachedExits, tau: float, cost_model: CostModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exit index (0-based), predicted label and cost per sample at threshold tau."""
    over = cache.conf > tau
    exited = over.any(axis=1)
    first = over.argmax(axis=1)
    fallback = cache.conf.argmax(axis=1)
    idx = np.where(exited, first, fallback)
    costs = np.where(exited, cost_model.exit_costs[first], cost_model.full_cost)
    labels = cache.pred[np.arange(len(idx)), idx]
    return idx, labels, costs


@dataclass
class BudgetCurve:
    points: list[tuple[float, float, float]]  # (tau, avg_cost_fraction, accuracy)
    budgets: dict[float, dict] = field(default_factory=dict)

    @property
    def taus(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def costs(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([p[2] for p in self.points])

    def point(self, tau: float) -> tuple[float, float, float]:
        for p in self.points:
            if p[0] == tau:
                return p
        raise KeyError(tau)

    def area(self) -> float:
        """Area under accuracy vs average cost, trapezoidal over the tau-ordered points."""
        c, a = self.costs, self.accuracies
        return float(np.sum(np.diff(c) * (a[1:] + a[:-1]) / 2.0)) if len(c) > 1 else 0.0

    def to_csv(self) -> str:
        lines = ["tau,avg_cost_fraction,accuracy"]
        lines += [f"{t!r},{c!r},{a!r}" for t, c, a in self.points]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "points": [list(p) for p in self.points],
            "budgets": {repr(b): v for b, v in self.budgets.items()},
        }


def tau_grid(points: int = 41, sentinel: bool = True) -> list[float]:
    grid = [float(v) for v in np.linspace(0.0, 1.0, points)] if points > 0 else []
    if sentinel:
        grid.append(NEVER_EXIT)
    return sorted(set(grid))


def sweep_cached(cache: CachedExits, grid: Sequence[float], cost_model: CostModel) -> BudgetCurve:
    points = []
    for tau in sorted(set(float(t) for t in grid)):
        _, labels, costs = replay_exits(cache, tau, cost_model)
        acc = float(np.mean(labels == cache.labels)) if len(labels) else 0.0
        avg = float(np.mean(costs)) if len(costs) else 0.0
        points.append((tau, avg, acc))
    return BudgetCurve(points)


def sweep_thresholds(
    net: EarlyExitNetwork,
    X: np.ndarray,
    y: np.ndarray,
    policy_base: ExitPolicy,
    grid: Sequence[float],
    cost_model: CostModel | None = None,
) -> BudgetCurve:
    """One forward pass, then replay the exit rule for every tau in the grid."""
    cost_model = cost_model or CostModel.from_network(net)
    bundle = forward_all(net, X)
    cache = CachedExits.from_bundle(bundle, y, policy_base.tlc if policy_base.use_tlc else None)
    return sweep_cached(cache, grid, cost_model)


def threshold_for_budget(curve: BudgetCurve, budget: float) -> float:
    """Largest tau whose average cost fits the budget; 0 when nothing fits."""
    if not 0 < budget:
        raise ValueError("budget must be positive")
    if not curve.points:
        raise ValueError("empty curve")
    fitting = [t for t, c, _ in curve.points if c <= budget]
    if not fitting:
        warnings.warn(f"budget {budget} is below the cheapest exit; using tau=0", BudgetInfeasibleWarning, stacklevel=2)
        return 0.0
    return max(fitting)


def annotate_budgets(curve: BudgetCurve, budgets: Sequence[float], select_from: BudgetCurve | None = None) -> None:
    """Record the chosen tau and the resulting point of ``curve`` per budget.

    ``select_from`` picks tau on a different (validation) curve.
    """
    source = select_from if select_from is not None else curve
    for b in budgets:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            tau = threshold_for_budget(source, b)
        feasible = not any(issubclass(w.category, BudgetInfeasibleWarning) for w in caught)
        _, cost, acc = curve.point(tau)
        curve.budgets[float(b)] = {"tau": tau, "avg_cost_fraction": cost, "accuracy": acc, "feasible": feasible}


# ---------------------------------------------------------------------------
# analysis metrics


def classifier_accuracies(bundle: LogitBundle, labels: np.ndarray) -> np.ndarray:
    if bundle.num_samples == 0:
        return np.zeros(bundle.num_classifiers)
    return (bundle.predictions() == np.asarray(labels)[:, None]).mean(axis=0)


@dataclass
class Overthinking:
    oracle_acc: float
    final_acc: float
    gap: float
    per_classifier: list[float]

    def to_dict(self) -> dict:
        return {"oracle_acc": self.oracle_acc, "final_acc": self.final_acc, "gap": self.gap, "per_classifier": self.per_classifier}


def overthinking_from_bundle(bundle: LogitBundle, labels: np.ndarray) -> Overthinking:
    correct = bundle.predictions() == np.asarray(labels)[:, None]
    oracle = float(correct.any(axis=1).mean()) if len(labels) else 0.0
    final = float(correct[:, -1].mean()) if len(labels) else 0.0
    return Overthinking(oracle, final, oracle - final, [float(v) for v in correct.mean(axis=0)] if len(labels) else [])


def overthinking(net: EarlyExitNetwork, X: np.ndarray, y: np.ndarray) -> Overthinking:
    return overthinking_from_bundle(forward_all(net, X), y)


def forgetting_matrix(net: EarlyExitNetwork, task_tests: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Class-incremental accuracy [classifier][task] over each task's test split."""
    cols = [classifier_accuracies(forward_all(net, X), y) for X, y in task_tests]
    return np.stack(cols, axis=1)


def confidence_by_task(net: EarlyExitNetwork, task_tests: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[float | None]:
    """Mean max-softmax of the final classifier over its correct predictions, per task."""
    out: list[float | None] = []
    for X, y in task_tests:
        conf, pred = confidences(forward_all(net, X).logits[:, -1, :])
        ok = pred == y
        out.append(float(conf[ok].mean()) if ok.any() else None)
    return out


def task_aware_eval(net: EarlyExitNetwork, task_tests: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Accuracy [classifier][task] when the argmax is restricted to the known task's slice."""
    slices = net.task_slices()
    cols = []
    for t, (X, y) in enumerate(task_tests):
        lo, hi = slices[t]
        z = forward_all(net, X).logits[:, :, lo:hi]
        pred = z.argmax(axis=-1) + lo
        cols.append((pred == np.asarray(y)[:, None]).mean(axis=0) if len(y) else np.zeros(net.num_classifiers))
    return np.stack(cols, axis=1)
