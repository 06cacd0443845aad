"""Train every task in sequence, fit TLC, sweep thresholds and persist the run."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import LabeledSet, Scenario, load_dataset, split_tasks
from .errors import DegenerateTaskError, EeclError, SchemaVersionError
from .inference import (
    BudgetCurve,
    CachedExits,
    CostModel,
    annotate_budgets,
    confidences,
    overthinking_from_bundle,
    sweep_cached,
    tau_grid,
)
from .methods import (
    ExemplarMemory,
    bic_fit,
    bic_hooks,
    er_hooks,
    fte_hooks,
    ft_hooks,
    icarl_hooks,
    lwf_hooks,
    memory_update,
)
from .network import Backbone, EarlyExitNetwork, LogitBundle, LossSpec, attach_ics, forward_all, train_task
from .tensor import LrSchedule
from .tlc import TlcFitReport, apply_tlc, fit_tlc_bundle, warm_up

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MEMORY_METHODS = ("ft-e", "er", "bic", "icarl")
TEACHER_METHODS = ("lwf", "bic", "icarl")
EXPORT_HEADER = "method,tlc,seed,tau,avg_cost_fraction,accuracy"


def _task_rng(seed: int, task: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, task, purpose]))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def build_network(cfg: ExperimentConfig, input_dim: int) -> EarlyExitNetwork:
    backbone = Backbone.dense(input_dim, cfg.width, cfg.stages)
    return attach_ics(backbone, cfg.ic_targets, cfg.ic_width, seed=cfg.seed)


def make_hooks(cfg: ExperimentConfig, memory, previous, rng):
    m = cfg.method
    if m == "ft":
        return ft_hooks()
    if m == "ft-e":
        return fte_hooks(memory)
    if m == "er":
        return er_hooks(memory)
    if m == "lwf":
        return lwf_hooks(previous, cfg.lwf_lambda, cfg.lwf_temperature)
    if m == "bic":
        return bic_hooks(previous, memory, cfg.lwf_lambda, cfg.lwf_temperature, cfg.bic_val_fraction, rng)
    if m == "icarl":
        return icarl_hooks(previous, memory)
    raise ValueError(m)


def _holdout(ls: LabeledSet, fraction: float, rng: np.random.Generator) -> tuple[LabeledSet, LabeledSet]:
    """Per-class random holdout; every class keeps at least one training sample."""
    train_idx, val_idx = [], []
    for c in np.unique(ls.y):
        idx = np.flatnonzero(ls.y == c)
        idx = idx[rng.permutation(len(idx))]
        cut = min(int(round(len(idx) * fraction)), len(idx) - 1)
        val_idx.append(idx[:cut])
        train_idx.append(idx[cut:])
    tr, va = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))
    return LabeledSet(ls.X[tr], ls.y[tr]), LabeledSet(ls.X[va], ls.y[va])


def _task_accuracy_rows(net: EarlyExitNetwork, scenario: Scenario, upto: int) -> list[list[float]]:
    """[classifier][task] accuracy over the tasks seen so far."""
    cols = []
    for task in scenario.tasks[:upto]:
        b = forward_all(net, task.test.X)
        acc = (b.predictions() == task.test.y[:, None]).mean(axis=0) if len(task.test) else np.zeros(net.num_classifiers)
        cols.append(acc)
    return np.stack(cols, axis=1).tolist()


@dataclass
class RunResult:
    manifest: dict
    net: EarlyExitNetwork
    scenario: Scenario
    curve: BudgetCurve
    curve_tlc: BudgetCurve | None
    tlc: TlcFitReport | None
    timings: dict
    test_bundle: LogitBundle
    output_dir: Path | None = None
    files: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, output_dir=None, *, write: bool = True, figures: bool = True) -> RunResult:
    """Full protocol; on failure a partial manifest is flushed before re-raising."""
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    manifest: dict = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "status": "running",
        "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
        "tasks": [],
    }
    try:
        result = _run(cfg, manifest, out if write else None, figures)
    except (EeclError, ValueError, ArithmeticError, OSError) as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        if write:
            out.mkdir(parents=True, exist_ok=True)
            (out / "manifest.json").write_text(canonical_json(_jsonable(manifest)), encoding="utf-8")
        raise
    return result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def load_scenario(cfg: ExperimentConfig) -> Scenario:
    """Load the configured data and split it into tasks, checking TLC's two-class requirement."""
    dataset = load_dataset(
        cfg.dataset,
        cfg.data_path,
        labels_path=cfg.labels_path,
        test_path=cfg.test_data_path,
        test_labels_path=cfg.test_labels_path,
        blobs={"num_classes": cfg.blob_classes, "dim": cfg.blob_dim, "per_class": cfg.blob_per_class, "noise": cfg.blob_noise},
        seed=cfg.seed,
    )
    scenario = split_tasks(dataset, cfg.num_tasks, cfg.seed, cfg.test_fraction)
    if cfg.tlc and scenario.num_tasks >= 2:
        single = [t.index for t in scenario.tasks if t.num_classes < 2]
        if single:
            raise DegenerateTaskError(f"TLC needs at least two classes per task; task {single[0]} has one")
    return scenario


def _run(cfg: ExperimentConfig, manifest: dict, out: Path | None, figures: bool) -> RunResult:
    timings: dict = {"train_seconds": [], "bic_seconds": [], "memory_seconds": []}
    scenario = load_scenario(cfg)
    manifest["scenario"] = {
        "class_order": scenario.class_order,
        "tasks": [
            {"index": t.index, "classes": list(t.class_range), "train": len(t.train), "test": len(t.test)}
            for t in scenario.tasks
        ],
    }

    net = build_network(cfg, scenario.tasks[0].train.X.shape[1])
    manifest["network"] = {
        "stages": cfg.stages,
        "width": cfg.width,
        "classifier_stages": [c.stage for c in net.classifiers],
        "classifier_fractions": net.ic_fractions,
    }
    memory = ExemplarMemory(cfg.memory) if cfg.method in MEMORY_METHODS else None
    schedule = LrSchedule(cfg.lr, cfg.lr_milestones, cfg.lr_decay)
    loss_spec = LossSpec(cfg.loss_weights or None)
    previous = None
    validation: list[LabeledSet] = []

    for task in scenario.tasks:
        t = task.index
        net.add_task_head(t, task.num_classes)
        train = task.train
        if cfg.budget_mode == "validation":
            train, val = _holdout(train, cfg.validation_fraction, _task_rng(cfg.seed, t, 3))
            validation.append(val)
        hooks = make_hooks(cfg, memory, previous, _task_rng(cfg.seed, t, 1))
        start = time.perf_counter()
        stats = train_task(
            net, train.X, train.y, loss_spec, schedule, hooks,
            epochs=cfg.epochs, batch_size=cfg.batch_size, momentum=cfg.momentum, rng=_task_rng(cfg.seed, t, 0),
        )
        timings["train_seconds"].append(time.perf_counter() - start)
        record = {
            "task": t,
            "classes": list(task.class_range),
            "samples": stats.samples,
            "steps": stats.steps,
            "epoch_losses": stats.epoch_losses,
        }
        if cfg.method == "bic" and t >= 2:
            start = time.perf_counter()
            layer = bic_fit(net, hooks.val_X, hooks.val_y, t, epochs=cfg.bic_epochs, lr=cfg.bic_lr, rng=_task_rng(cfg.seed, t, 2))
            timings["bic_seconds"].append(time.perf_counter() - start)
            record["bic"] = [list(layer.get(i + 1, t)) for i in range(net.num_classifiers)]
        if memory is not None:
            start = time.perf_counter()
            memory_update(memory, net, train.X, train.y, t)
            timings["memory_seconds"].append(time.perf_counter() - start)
            record["memory_size"] = len(memory)
        record["accuracy"] = _task_accuracy_rows(net, scenario, t)
        manifest["tasks"].append(record)
        if cfg.method in TEACHER_METHODS and t < scenario.num_tasks:
            previous = net.clone()
        log.info("task %d/%d trained: final loss %.4f", t, scenario.num_tasks, stats.epoch_losses[-1])

    # -- after the last task -------------------------------------------------
    cost_model = CostModel.from_network(net)  # head costs depend on the final class count
    test = scenario.test_union()
    test_bundle = forward_all(net, test.X)
    tlc_report = None
    if cfg.tlc and scenario.num_tasks >= 2:
        last = scenario.tasks[-1].train
        start = time.perf_counter()
        fit_bundle = forward_all(net, last.X)
        timings["tlc_logits_seconds"] = time.perf_counter() - start
        warm_up()
        start = time.perf_counter()
        tlc_report = fit_tlc_bundle(fit_bundle)
        timings["tlc_fit_seconds"] = time.perf_counter() - start

    grid = tau_grid(cfg.tau_points)
    curve = sweep_cached(CachedExits.from_bundle(test_bundle, test.y), grid, cost_model)
    curve_tlc = None
    if tlc_report is not None:
        curve_tlc = sweep_cached(CachedExits.from_bundle(test_bundle, test.y, tlc_report.params), grid, cost_model)

    val_curves = (None, None)
    if cfg.budget_mode == "validation":
        vX = np.concatenate([v.X for v in validation])
        vy = np.concatenate([v.y for v in validation])
        vb = forward_all(net, vX)
        val_curves = (
            sweep_cached(CachedExits.from_bundle(vb, vy), grid, cost_model),
            sweep_cached(CachedExits.from_bundle(vb, vy, tlc_report.params), grid, cost_model) if tlc_report else None,
        )
    annotate_budgets(curve, cfg.budgets, val_curves[0])
    if curve_tlc is not None:
        annotate_budgets(curve_tlc, cfg.budgets, val_curves[1])

    metrics = _metrics(net, scenario, test_bundle, test, curve, curve_tlc, tlc_report, cost_model)
    manifest["tlc"] = tlc_report.to_dict() if tlc_report else None
    manifest["cost_model"] = {
        "exit_costs": cost_model.exit_costs.tolist(),
        "ic_overheads": list(cost_model.ic_overheads),
        "full_cost": cost_model.full_cost,
    }
    manifest["curves"] = {"base": curve.to_dict(), "tlc": curve_tlc.to_dict() if curve_tlc else None}
    manifest["metrics"] = metrics
    manifest["parameter_checksum"] = net.params.checksum()
    manifest["status"] = "complete"

    result = RunResult(manifest, net, scenario, curve, curve_tlc, tlc_report, timings, test_bundle)
    if out is not None:
        _persist(result, out, memory, figures)
    return result


def _metrics(net, scenario, test_bundle, test, curve, curve_tlc, tlc_report, cost_model) -> dict:
    task_tests = [(t.test.X, t.test.y) for t in scenario.tasks]
    bundles = [forward_all(net, X) for X, _ in task_tests]
    forgetting = [
        (b.predictions() == y[:, None]).mean(axis=0) if len(y) else np.zeros(net.num_classifiers)
        for b, (_, y) in zip(bundles, task_tests)
    ]
    conf_by_task = []
    for b, (_, y) in zip(bundles, task_tests):
        conf, pred = confidences(b.logits[:, -1, :])
        ok = pred == y
        conf_by_task.append(float(conf[ok].mean()) if ok.any() else None)
    slices = net.task_slices()
    aware = []
    for t, (b, (_, y)) in enumerate(zip(bundles, task_tests)):
        lo, hi = slices[t]
        pred = b.logits[:, :, lo:hi].argmax(axis=-1) + lo
        aware.append((pred == y[:, None]).mean(axis=0) if len(y) else np.zeros(net.num_classifiers))
    over = overthinking_from_bundle(test_bundle, test.y)
    metrics = {
        "classifier_accuracy": over.per_classifier,
        "overthinking": over.to_dict(),
        "forgetting_matrix": np.stack(forgetting, axis=1).tolist(),
        "task_aware_matrix": np.stack(aware, axis=1).tolist(),
        "confidence_by_task": conf_by_task,
        "auc": curve.area(),
    }
    if curve_tlc is not None:
        metrics["auc_tlc"] = curve_tlc.area()
        corrected = apply_tlc(test_bundle, tlc_report.params)
        over_tlc = overthinking_from_bundle(corrected, test.y)
        metrics["classifier_accuracy_tlc"] = over_tlc.per_classifier
        metrics["overthinking_tlc"] = over_tlc.to_dict()
        by_task = []
        for b, (_, y) in zip(bundles, task_tests):
            conf, pred = confidences(apply_tlc(b, tlc_report.params).logits[:, -1, :])
            ok = pred == y
            by_task.append(float(conf[ok].mean()) if ok.any() else None)
        metrics["confidence_by_task_tlc"] = by_task
    return metrics


def _persist(result: RunResult, out: Path, memory, figures: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    files["curves.csv"] = result.curve.to_csv()
    if result.curve_tlc is not None:
        files["curves_tlc.csv"] = result.curve_tlc.to_csv()
    files["metrics.json"] = canonical_json(_jsonable(result.manifest["metrics"]))
    if memory is not None:
        files["memory.json"] = canonical_json(memory.to_dict())
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    result.net.save(out / "checkpoint.npz")
    result.manifest["artifacts"] = {name: sha256_bytes(text.encode("utf-8")) for name, text in sorted(files.items())}
    manifest_text = canonical_json(_jsonable(result.manifest))
    (out / "manifest.json").write_text(manifest_text, encoding="utf-8")
    result.manifest["digest"] = sha256_bytes(manifest_text.encode("utf-8"))
    (out / "timings.json").write_text(canonical_json(_jsonable(result.timings)), encoding="utf-8")
    if figures:
        from .plots import render_run_figures

        render_run_figures(result, out / "figures")
    result.output_dir = out
    result.files = files


def manifest_digest(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# export


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        from .errors import DataError

        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: manifest schema {version}, this tool reads {SCHEMA_VERSION}")
    return manifest


def export_rows(manifests) -> list[tuple]:
    rows = []
    for m in manifests:
        if m.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionError(f"manifest schema {m.get('schema_version')}, this tool reads {SCHEMA_VERSION}")
        method, seed = m["config"]["method"], m["config"]["seed"]
        for label, key in (("off", "base"), ("on", "tlc")):
            curve = (m.get("curves") or {}).get(key)
            if curve is None:
                continue
            for tau, cost, acc in curve["points"]:
                rows.append((method, label, seed, tau, cost, acc))
    return rows


def export_plot_data(manifests) -> str:
    """Long-format CSV over the budget curves of several runs."""
    lines = [EXPORT_HEADER]
    lines += [f"{m},{t},{s},{tau!r},{c!r},{a!r}" for m, t, s, tau, c, a in export_rows(manifests)]
    return "\n".join(lines) + "\n"
