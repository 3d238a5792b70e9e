"""Shared fixtures: one desk-scale backward solve per session.

Set ``FHTCTRL_TEST_RUN`` to a directory holding a finished ``gl1d-desk``
solve to reuse it instead of solving again.
"""

import os
import time
from pathlib import Path

import pytest

from fhtctrl.config import load_config
from fhtctrl.workflow import ControlProblem, SolvedStack, backward_solve, init_terminal

ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_problem():
    cfg = load_config(preset="gl1d-desk")
    return cfg, ControlProblem.from_config(cfg)


@pytest.fixture(scope="session")
def desk_run(desk_problem, tmp_path_factory):
    """``(stack, seconds)`` for the desk preset."""
    cfg, problem = desk_problem
    reuse = os.environ.get("FHTCTRL_TEST_RUN")
    if reuse and (Path(reuse) / "meta.json").exists():
        stack = SolvedStack.load(reuse)
        if stack.complete() and stack.meta["config"] == cfg.to_dict() | {"output": stack.meta["config"]["output"]}:
            return stack, float(sum(stack.meta["timings"].values()))
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    stack = backward_solve(problem, out, cfg)
    return stack, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_init(desk_problem):
    """``(Q_init, v_init, operator, seconds)`` at the last step."""
    _, problem = desk_problem
    t0 = time.perf_counter()
    Q0, v0, P = init_terminal(problem)
    return Q0, v0, P, time.perf_counter() - t0
