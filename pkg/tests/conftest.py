import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from robustrl.envs import perturb, random_mdp
from robustrl.mdp import make_rng
from robustrl.uncertainty import L2Ball

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def five_state(seed: int = 0):
    """5 states, 2 actions, discount 0.5, rows mixed with uniform so every
    entry is at least 0.1 and an l2 ball of radius 0.1 sits inside the simplex."""
    return perturb(random_mdp(5, 2, 5, seed, discount=0.5), 0.5), L2Ball(0.1)


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def fixture5():
    return five_state(0)


def load_json(name: str):
    return json.loads((DATA / name).read_text())


def assert_close(a, b, tol):
    a, b = np.asarray(a, float), np.asarray(b, float)
    assert a.shape == b.shape
    assert np.abs(a - b).max() <= tol, np.abs(a - b).max()


# -- acceptance summary ---------------------------------------------------------------------


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    # a failing setup or call marks the criterion red; keep the call duration
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        item.config._criteria[mark.args[0]] = (mark.args[1], rep.passed, rep.duration)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, duration = results[number]
        terminalreporter.write_line(f"criterion {number:>2}  {'PASS' if passed else 'FAIL'}  {title}  ({duration:.1f} s)")
