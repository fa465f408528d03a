import numpy as np
import pytest

from ftacl import _kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    prev = _kernels.USE_NUMBA
    _kernels.set_backend(request.param == "numba")
    yield request.param
    _kernels.USE_NUMBA = prev


_RUNS: dict = {}


def reference_run(mode: str):
    """Train the committed reference sequence once per mode and cache the outcome.

    Returns (run, tasks, snapshots, logs, seconds) where snapshots[k] maps task
    id to its test-set logits right after the k-th task finished training.
    """
    import time

    from ftacl import ticl

    if mode not in _RUNS:
        t0 = time.perf_counter()
        cfg = ticl.reference_config(mode)
        run = ticl.TiclRun(cfg)
        tasks = ticl.tasks_for(cfg)
        snaps, logs = [], []
        for spec in tasks:
            run.register(spec)
            logs.append(run.train_task(spec.task_id, spec.train_x, spec.train_y))
            run.evaluate_stage()
            snaps.append({t.task_id: run.route_and_predict(t.test_x, t.task_id) for t in tasks[: len(snaps) + 1]})
        _RUNS[mode] = (run, tasks, snaps, logs, time.perf_counter() - t0)
    return _RUNS[mode]


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
