import numpy as np
import pytest

from conftest import make_net, to_float64
from eecl.errors import ConfigError, DimensionError, ProtocolError
from eecl.network import (
    Backbone,
    EarlyExitNetwork,
    LossSpec,
    Stage,
    TrainingHooks,
    attach_ics,
    combine_losses,
    forward_all,
    ic_loss_weights,
    place_ics,
    train_task,
)
from eecl.tensor import LrSchedule, Tensor, bce_with_logits, cross_entropy, soft_cross_entropy, softmax


def test_attach_ics_nearest_stage():
    # cost 6, 9, 15 multiply-adds: cumulative fractions 0.2, 0.5, 1.0
    bb = Backbone([Stage(1, 2, 3), Stage(2, 3, 3), Stage(3, 3, 5)])
    np.testing.assert_allclose(bb.cumulative_fractions(), [0.2, 0.5, 1.0])
    net = attach_ics(bb, [0.15, 0.45])
    assert [c.stage for c in net.classifiers] == [1, 2, 3]
    np.testing.assert_allclose(net.ic_fractions[:-1], [0.2, 0.5])


def test_attach_ics_seven_equal_stages():
    bb = Backbone([Stage(s + 1, 4, 4) for s in range(7)])
    net = attach_ics(bb, [0.15, 0.3, 0.45, 0.6, 0.75, 0.9])
    assert net.num_ics == 6
    assert [c.stage for c in net.classifiers[:-1]] == [1, 2, 3, 4, 5, 6]


def test_attach_ics_two_stages():
    net = attach_ics(Backbone([Stage(1, 4, 4), Stage(2, 4, 4)]), [0.5])
    assert net.classifiers[0].stage == 1
    assert net.ic_fractions[0] == pytest.approx(0.5)


def test_place_ics_ties_go_forward():
    # 0.5 sits exactly between 0.25 and 0.75
    assert place_ics([0.25, 0.75, 1.0], [0.5]) == [2]


def test_place_ics_errors():
    with pytest.raises(ConfigError):
        place_ics([0.5, 1.0], [0.2, 0.6])  # one non-final stage for two ICs
    with pytest.raises(ConfigError):
        place_ics([0.25, 0.5, 0.75, 1.0], [0.3, 0.31])  # collide on one stage
    with pytest.raises(ConfigError):
        place_ics([0.5, 1.0], [1.2])


def test_add_task_head_widths():
    net = make_net(heads=(2,))
    z = forward_all(net, np.zeros((1, 6)))
    assert z.logits.shape == (1, net.num_classifiers, 2)
    net.add_task_head(2, 3)
    assert forward_all(net, np.zeros((1, 6))).logits.shape[-1] == 5
    assert net.task_slices() == [(0, 2), (2, 5)]


def test_add_task_head_out_of_order():
    net = make_net(heads=(2,))
    with pytest.raises(ProtocolError):
        net.add_task_head(3, 2)


def test_forward_without_heads_is_protocol_error():
    net = attach_ics(Backbone.dense(4, 4, 3), [0.4])
    with pytest.raises(ProtocolError):
        net.forward(Tensor(np.zeros((1, 4))))


def test_forward_all_shape_and_input_check():
    net = attach_ics(Backbone.dense(3, 4, 2), [0.5])
    net.add_task_head(1, 2)
    bundle = forward_all(net, np.ones((1, 3)))
    assert bundle.logits[0].shape == (2, 2)
    with pytest.raises(DimensionError):
        forward_all(net, np.ones((1, 4)))


def test_zero_network_gives_uniform_softmax():
    net = make_net()
    for _, p in net.params.items():
        p.data[...] = 0.0
    z = forward_all(net, np.random.default_rng(0).standard_normal((5, 6))).logits
    assert np.all(z == 0.0)
    np.testing.assert_allclose(softmax(z), 1.0 / 5)


def test_cached_stages_match_recomputation(rng):
    net = make_net(stages=5, targets=(0.2, 0.4, 0.8), ic_width=4)
    X = rng.standard_normal((7, 6)).astype(np.float32)
    bundle = forward_all(net, X)
    for i in range(1, net.num_classifiers + 1):
        np.testing.assert_array_equal(bundle.logits[:, i - 1], net.logits_at(i, X))


def test_each_stage_runs_once_per_forward():
    net = make_net(stages=5, targets=(0.2, 0.4, 0.8))
    before = net.stage_runs
    forward_all(net, np.zeros((3, 6)))
    assert net.stage_runs - before == 5


def test_iter_exits_is_lazy():
    net = make_net(stages=5, targets=(0.2, 0.4, 0.8))
    before = net.stage_runs
    it = net.iter_exits(np.zeros(6))
    next(it)
    assert net.stage_runs - before == net.classifiers[0].stage


def _small_network_loss(net, X, y, probs, bits):
    logits = net.forward(Tensor(X))
    losses = []
    for z in logits:
        losses.append(cross_entropy(z, y) + soft_cross_entropy(z.cols_slice(0, 2), probs, 2.0) + bce_with_logits(z, bits))
    return combine_losses(losses, [0.3] * (len(losses) - 1) + [1.0])


def test_network_gradients_match_finite_differences():
    # the full criterion runs in the acceptance suite; this is one network
    r = np.random.default_rng(5)
    net = to_float64(make_net(input_dim=4, width=6, stages=3, targets=(0.4,), ic_width=3, seed=5))
    for _, p in net.params.items():
        p.data += r.normal(0, 0.3, p.data.shape)
    X = r.standard_normal((3, 4))
    y = r.integers(0, 5, 3)
    probs = softmax(r.standard_normal((3, 2)))
    bits = r.uniform(size=(3, 5))
    net.params.zero_grad()
    _small_network_loss(net, X, y, probs, bits).backward()
    h = 1e-4
    for name, p in net.params.items():
        g = net.params.gradient(name).copy()
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = _small_network_loss(net, X, y, probs, bits).item()
            p.data[idx] = orig - h
            down = _small_network_loss(net, X, y, probs, bits).item()
            p.data[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(g[idx] - fd) <= 1e-4 * max(abs(g[idx]), abs(fd), 1e-3), (name, idx)


def test_ic_loss_weights_ramp():
    assert ic_loss_weights(0, 10, [0.15, 0.5, 1.0]) == [0.01, 0.01, 1.0]
    np.testing.assert_allclose(ic_loss_weights(9, 10, [0.15, 0.5, 1.0]), [0.15, 0.5, 1.0])
    assert ic_loss_weights(1, 3, [0.9, 1.0])[0] == pytest.approx(0.455)
    assert ic_loss_weights(0, 1, [0.3, 1.0]) == [0.3, 1.0]
    with pytest.raises(ValueError):
        ic_loss_weights(3, 3, [0.3, 1.0])


def test_fixed_loss_weights_are_checked():
    with pytest.raises(ConfigError):
        LossSpec([0.5, 0.5]).weights(0, 2, [0.3, 1.0])
    with pytest.raises(ConfigError):
        LossSpec([0.5]).weights(0, 2, [0.3, 1.0])
    assert LossSpec([0.2, 1.0]).weights(0, 2, [0.3, 1.0]) == [0.2, 1.0]


def _separable(r, n=100):
    y = np.repeat([0, 1], n // 2)
    X = np.where(y[:, None] == 0, -2.0, 2.0) + 0.3 * r.standard_normal((n, 2))
    return X.astype(np.float32), y


def test_train_task_separable_toy():
    r = np.random.default_rng(0)
    X, y = _separable(r)
    net = attach_ics(Backbone.dense(2, 16, 3), [0.4], seed=1)
    net.add_task_head(1, 2)
    stats = train_task(net, X, y, LossSpec(), LrSchedule(0.05, ()), epochs=20, batch_size=10, rng=r)
    assert stats.steps == 200
    acc = (forward_all(net, X).predictions() == y[:, None]).mean(axis=0)
    assert np.all(acc >= 0.99)
    assert stats.epoch_losses[-1] <= stats.epoch_losses[0]


def test_train_task_zero_epochs_leaves_parameters():
    r = np.random.default_rng(0)
    X, y = _separable(r)
    net = attach_ics(Backbone.dense(2, 8, 3), [0.4])
    net.add_task_head(1, 2)
    before = net.params.checksum()
    stats = train_task(net, X, y, epochs=0, rng=r)
    assert net.params.checksum() == before
    assert stats.steps == 0


def test_train_task_errors():
    r = np.random.default_rng(0)
    net = attach_ics(Backbone.dense(2, 8, 3), [0.4])
    with pytest.raises(ProtocolError):
        train_task(net, np.zeros((4, 2)), np.zeros(4, dtype=int), epochs=1, rng=r)
    net.add_task_head(1, 2)
    with pytest.raises(ConfigError):
        train_task(net, np.zeros((0, 2)), np.zeros(0, dtype=int), epochs=1, rng=r)


def test_batches_cover_pool_once():
    r = np.random.default_rng(0)
    X = np.arange(10, dtype=np.float32)[:, None]
    seen = np.concatenate([xb[:, 0] for xb, _ in TrainingHooks().batches(X, np.zeros(10), 3, r)])
    assert sorted(seen) == list(range(10))


def test_save_load_roundtrip(tmp_path, rng):
    net = make_net(ic_width=4)
    X = rng.standard_normal((4, 6))
    net.save(tmp_path / "net.npz")
    twin = EarlyExitNetwork.load(tmp_path / "net.npz")
    np.testing.assert_array_equal(forward_all(net, X).logits, forward_all(twin, X).logits)
    assert twin.params.checksum() == net.params.checksum()


def test_clone_is_independent():
    net = make_net()
    twin = net.clone()
    next(iter(twin.params.items()))[1].data[...] = 0.0
    assert twin.params.checksum() != net.params.checksum()


def test_zero_ic_weights_leave_ic_heads_at_init():
    r = np.random.default_rng(0)
    X, y = _separable(r)
    net = attach_ics(Backbone.dense(2, 8, 3), [0.4], seed=2)
    net.add_task_head(1, 2)
    before = {n: p.data.copy() for n, p in net.params.items()}
    train_task(net, X, y, LossSpec([0.0, 1.0]), LrSchedule(0.05, ()), epochs=2, batch_size=10, rng=r)
    for name, p in net.params.items():
        if name.startswith("clf1."):
            np.testing.assert_array_equal(p.data, before[name])
    assert not np.array_equal(net.params["clf2.head1.W"].data, before["clf2.head1.W"])


def test_positive_scaling_keeps_predictions(rng):
    net = make_net()
    X = rng.standard_normal((20, 6))
    before = forward_all(net, X).predictions()
    for name, p in net.params.items():
        if ".head" in name:
            p.data *= 2.0
    np.testing.assert_array_equal(forward_all(net, X).predictions(), before)
