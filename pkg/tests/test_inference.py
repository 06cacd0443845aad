import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_net
from eecl.inference import (
    NEVER_EXIT,
    BudgetCurve,
    BudgetInfeasibleWarning,
    CachedExits,
    CostModel,
    ExitPolicy,
    annotate_budgets,
    confidence_by_task,
    forgetting_matrix,
    overthinking,
    overthinking_from_bundle,
    predict_dynamic,
    replay_exits,
    sweep_cached,
    sweep_thresholds,
    task_aware_eval,
    tau_grid,
    threshold_for_budget,
)
from eecl.network import LogitBundle, forward_all
from eecl.tlc import TlcParams


def logits_for(conf, classes=4, label=0):
    """Logits whose softmax maximum is exactly ``conf`` at ``label``."""
    z = np.zeros(classes)
    z[label] = np.log(conf * (classes - 1) / (1 - conf))
    return z


class StubNet:
    def __init__(self, rows, stages):
        self.rows, self.stages, self.stage_runs = rows, stages, 0

    def task_slices(self):
        return [(0, len(self.rows[0]))]

    def iter_exits(self, x):
        done = 0
        for i, (row, s) in enumerate(zip(self.rows, self.stages), start=1):
            self.stage_runs += s - done
            done = s
            yield i, np.asarray(row)[None, :]


COSTS = CostModel((0.25, 0.5, 0.75, 1.0), (1, 2, 4), (0.01, 0.02))


def test_cost_model_exit_costs():
    np.testing.assert_allclose(COSTS.exit_costs, [0.26, 0.53, 1.03])
    assert COSTS.full_cost == pytest.approx(1.03)


def test_first_crossing_exit():
    net = StubNet([logits_for(0.3), logits_for(0.6, label=1), logits_for(0.9, label=2)], [1, 2, 4])
    out = predict_dynamic(net, np.zeros(1), ExitPolicy(0.5), COSTS)
    assert (out.label, out.exit_index, out.stages_run) == (1, 2, 2)
    assert out.cost == pytest.approx(0.53)


def test_sentinel_falls_back_to_most_confident():
    net = StubNet([logits_for(0.3), logits_for(0.9, label=3), logits_for(0.6, label=2)], [1, 2, 4])
    out = predict_dynamic(net, np.zeros(1), ExitPolicy(NEVER_EXIT), COSTS)
    assert (out.label, out.exit_index) == (3, 2)
    assert out.cost == COSTS.full_cost
    assert out.stages_run == 4


def test_tau_zero_exits_at_first_classifier():
    net = StubNet([logits_for(0.3), logits_for(0.9)], [1, 4])
    out = predict_dynamic(net, np.zeros(1), ExitPolicy(0.0), CostModel((0.25, 0.5, 0.75, 1.0), (1, 4), (0.01,)))
    assert out.exit_index == 1 and out.cost == pytest.approx(0.26)


def test_exit_policy_validation():
    with pytest.raises(ValueError):
        ExitPolicy(1.5)
    with pytest.raises(ValueError):
        ExitPolicy(0.5, use_tlc=True)


def test_predict_dynamic_with_tlc_shifts_old_task():
    net = make_net(heads=(2, 2))
    x = np.random.default_rng(0).standard_normal(6)
    cm = CostModel.from_network(net)
    params = TlcParams(0.0, 50.0)
    out = predict_dynamic(net, x, ExitPolicy(NEVER_EXIT, True, params), cm)
    assert out.label in (0, 1)


def test_sweep_endpoints(rng):
    net = make_net(stages=5, targets=(0.2, 0.6))
    X, y = rng.standard_normal((30, 6)), rng.integers(0, 5, 30)
    curve = sweep_thresholds(net, X, y, ExitPolicy(0.0), [0.0, NEVER_EXIT])
    cm = CostModel.from_network(net)
    bundle = forward_all(net, X)
    (t0, c0, a0), (t1, c1, a1) = curve.points
    assert (t0, t1) == (0.0, NEVER_EXIT)
    assert c0 == cm.exit_costs[0]
    assert a0 == float(np.mean(bundle.predictions()[:, 0] == y))
    assert c1 == pytest.approx(cm.full_cost)
    cache = CachedExits.from_bundle(bundle, y)
    fallback = cache.pred[np.arange(30), cache.conf.argmax(axis=1)]
    assert a1 == float(np.mean(fallback == y))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_cost_is_monotone_in_tau(seed, taus):
    r = np.random.default_rng(seed)
    z = r.standard_normal((40, 3, 5)) * 3
    cache = CachedExits.from_bundle(LogitBundle(z, [(0, 5)]), r.integers(0, 5, 40))
    curve = sweep_cached(cache, taus + [NEVER_EXIT], COSTS)
    assert np.all(np.diff(curve.costs) >= 0)


def test_replay_exit_indices():
    conf = np.array([[0.4, 0.7, 0.9], [0.2, 0.3, 0.25]])
    cache = CachedExits(conf, np.array([[0, 1, 2], [3, 4, 5]]), np.array([1, 4]))
    idx, labels, costs = replay_exits(cache, 0.5, COSTS)
    assert idx.tolist() == [1, 1]
    assert labels.tolist() == [1, 4]
    np.testing.assert_allclose(costs, [0.53, 1.03])


def test_tau_grid():
    grid = tau_grid(41)
    assert len(grid) == 42 and grid[0] == 0.0 and grid[-2] == 1.0 and grid[-1] == NEVER_EXIT
    assert tau_grid(0) == [NEVER_EXIT]


def test_threshold_for_budget():
    curve = BudgetCurve([(0.2, 0.3, 0.5), (0.5, 0.45, 0.6), (0.8, 0.6, 0.7), (NEVER_EXIT, 1.03, 0.7)])
    assert threshold_for_budget(curve, 0.5) == 0.5
    assert threshold_for_budget(curve, 1.0) == 0.8
    with pytest.warns(BudgetInfeasibleWarning):
        assert threshold_for_budget(curve, 0.1) == 0.0
    with pytest.raises(ValueError):
        threshold_for_budget(curve, 0.0)


def test_annotate_budgets_records_feasibility():
    curve = BudgetCurve([(0.0, 0.3, 0.5), (0.5, 0.45, 0.6), (NEVER_EXIT, 1.03, 0.7)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        annotate_budgets(curve, [0.5, 0.1])
    assert curve.budgets[0.5] == {"tau": 0.5, "avg_cost_fraction": 0.45, "accuracy": 0.6, "feasible": True}
    assert curve.budgets[0.1]["feasible"] is False


def test_curve_area_and_csv():
    curve = BudgetCurve([(0.0, 0.2, 0.5), (1.0, 0.6, 0.7)])
    assert curve.area() == pytest.approx(0.4 * 0.6)
    assert curve.to_csv().splitlines() == ["tau,avg_cost_fraction,accuracy", "0.0,0.2,0.5", "1.0,0.6,0.7"]


def test_overthinking_identical_classifiers():
    z = np.random.default_rng(0).standard_normal((10, 1, 4))
    over = overthinking_from_bundle(LogitBundle(np.repeat(z, 3, axis=1), [(0, 4)]), np.arange(10) % 4)
    assert over.gap == 0.0


def test_overthinking_gap_construction():
    y = np.zeros(10, dtype=int)
    z = np.zeros((10, 2, 2))
    z[:, :, 0] = 1.0  # both classifiers right
    z[:2, 1] = [0.0, 1.0]  # final wrong on two samples, the IC right on both
    over = overthinking_from_bundle(LogitBundle(z, [(0, 2)]), y)
    assert (over.oracle_acc, over.final_acc) == (1.0, 0.8)
    assert over.gap == pytest.approx(0.2)


def test_overthinking_union_bound(rng):
    net = make_net()
    over = overthinking(net, rng.standard_normal((50, 6)), rng.integers(0, 5, 50))
    assert over.gap >= 0 and over.oracle_acc >= max(over.per_classifier)


def test_single_task_metrics(rng):
    net = make_net(heads=(3,))
    X, y = rng.standard_normal((20, 6)), rng.integers(0, 3, 20)
    acc = (forward_all(net, X).predictions() == y[:, None]).mean(axis=0)
    np.testing.assert_allclose(forgetting_matrix(net, [(X, y)])[:, 0], acc)
    np.testing.assert_allclose(task_aware_eval(net, [(X, y)])[:, 0], acc)
    conf = confidence_by_task(net, [(X, y)])
    z = forward_all(net, X).logits[:, -1]
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    ok = z.argmax(axis=1) == y
    assert conf[0] == pytest.approx(p.max(axis=1)[ok].mean())


def test_uniform_logits_confidence():
    net = make_net(heads=(2, 3))
    for _, p in net.params.items():
        p.data[...] = 0.0
    conf = confidence_by_task(net, [(np.zeros((4, 6)), np.zeros(4, dtype=int)), (np.zeros((3, 6)), np.full(3, 3))])
    assert conf[0] == pytest.approx(1 / 5)
    assert conf[1] is None  # no correct predictions


def test_task_aware_fixes_cross_task_confusion():
    net = make_net(heads=(2, 2))
    for name, p in net.params.items():
        p.data[...] = 0.0
        if name.endswith("head1.b"):
            p.data[...] = [1.0, 0.0]
        if name.endswith("head2.b"):
            p.data[...] = [10.0, 9.0]
    tests = [(np.zeros((3, 6)), np.zeros(3, dtype=int)), (np.zeros((3, 6)), np.full(3, 2))]
    aware = task_aware_eval(net, tests)
    plain = forgetting_matrix(net, tests)
    assert np.all(aware == 1.0)
    assert np.all(plain[:, 0] == 0.0)
    assert np.all(aware >= plain)


def test_exit_costs_strictly_increase():
    net = make_net(stages=6, targets=(0.2, 0.4, 0.6, 0.8))
    costs = CostModel.from_network(net).exit_costs
    assert np.all(np.diff(costs) > 0)
    assert costs[-1] == pytest.approx(1.0 + sum(CostModel.from_network(net).ic_overheads))


def test_curve_taus_sorted_and_unique(rng):
    cache = CachedExits.from_bundle(LogitBundle(rng.standard_normal((10, 2, 3)), [(0, 3)]), rng.integers(0, 3, 10))
    curve = sweep_cached(cache, [0.5, 0.1, 0.5, NEVER_EXIT, 0.1], COSTS)
    assert curve.taus.tolist() == [0.1, 0.5, NEVER_EXIT]
