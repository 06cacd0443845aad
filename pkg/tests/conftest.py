import numpy as np
import pytest

from eecl.network import Backbone, EarlyExitNetwork, attach_ics


def make_net(input_dim=6, width=8, stages=4, targets=(0.3, 0.6), heads=(2, 3), ic_width=None, seed=0) -> EarlyExitNetwork:
    net = attach_ics(Backbone.dense(input_dim, width, stages), targets, ic_width=ic_width, seed=seed)
    for t, n in enumerate(heads, start=1):
        net.add_task_head(t, n)
    return net


def to_float64(net: EarlyExitNetwork) -> EarlyExitNetwork:
    for _, p in net.params.items():
        p.data = p.data.astype(np.float64)
    for clf in net.classifiers:
        if clf.reducer.matrix is not None:
            clf.reducer.matrix = clf.reducer.matrix.astype(np.float64)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
