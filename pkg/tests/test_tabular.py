import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import five_state
from robustrl.envs import random_mdp
from robustrl.mdp import DeterministicPolicy, MdpError, StepSchedule, StoppingRule, make_rng
from robustrl.robust_dp import robust_policy_evaluation, robust_q_from_value, robust_value_iteration
from robustrl.tabular import (
    EligibilityTraces,
    TabularLearnerConfig,
    robust_q_learning,
    robust_q_update,
    robust_sarsa,
    robust_sarsa_update,
    robust_td_error,
    robust_td_lambda,
    trace_sums,
    trace_update,
)
from robustrl.uncertainty import L2Ball


# -- single updates ------------------------------------------------------------------


def test_q_update_examples():
    q = np.array([[1.0, 2.0], [0.0, 3.0]])
    # radius 0, gamma 1: classical full backup
    out = robust_q_update(q, 0, 1, 1, 1.0, 1.0, None, 0.5)
    assert out[0, 1] == pytest.approx(1.0 + 0.5 * 0.0)
    # sigma of the zero vector vanishes
    out = robust_q_update(np.zeros((2, 2)), 0, 0, 1, 1.0, 0.5, L2Ball(0.7), 0.9)
    assert out[0, 0] == pytest.approx(0.5)
    # v = (1, 0), sigma = 0.2 / sqrt 2
    out = robust_q_update(q, 0, 1, 1, 1.0, 0.1, L2Ball(0.2), 0.5)
    assert out[0, 1] == pytest.approx(0.9 * 2 + 0.1 * (1 + 0.5 * 0.2 / math.sqrt(2)), abs=1e-12)
    assert out[0, 1] == pytest.approx(1.9070711, abs=1e-7)
    assert np.array_equal(np.delete(out.ravel(), 1), np.delete(q.ravel(), 1))
    with pytest.raises(MdpError):
        robust_q_update(q, 0, 1, 1, 1.0, 0.0, None, 0.5)


def test_sarsa_update():
    q = np.array([[1.0, 2.0], [0.0, 3.0]])
    greedy = int(np.argmin(q[1]))
    assert np.array_equal(robust_sarsa_update(q, 0, 1, 1, greedy, 1.0, 0.1, L2Ball(0.2), 0.5),
                          robust_q_update(q, 0, 1, 1, 1.0, 0.1, L2Ball(0.2), 0.5))
    out = robust_sarsa_update(q, 0, 1, 1, 1, 1.0, 0.1, L2Ball(0.2), 0.5)
    assert out[0, 1] == pytest.approx(0.9 * 2 + 0.1 * (1 + 0.5 * 0.2 / math.sqrt(2) + 0.5 * 3.0), abs=1e-12)


def test_td_error_examples():
    assert robust_td_error(np.zeros(3), 0, 1, 0.0, 0.9, L2Ball(1)) == 0.0
    v = np.array([1.0, 0.0, -1.0])
    assert robust_td_error(v, 0, 2, 1.0, 0.5, None) == pytest.approx(1 - 0.5 - 1)
    assert robust_td_error(v, 0, 2, 1.0, 0.5, L2Ball(0.3)) == pytest.approx(-0.5 + 0.15 * math.sqrt(2), abs=1e-12)
    assert robust_td_error(v, 0, 2, 1.0, 0.5, L2Ball(0.3)) == pytest.approx(-0.2878680, abs=1e-7)


# -- traces -------------------------------------------------------------------------


def test_trace_examples():
    for variant in ("every-visit", "restart"):
        tr = EligibilityTraces.fresh(3, variant, 0.9, 0.5)
        assert np.all(tr.z == 0)
        tr = trace_update(tr, 1)
        assert tr.z[1] == 1.0
        tr = trace_update(tr, 1)
        assert tr.z[1] == pytest.approx(0.45 + 1 if variant == "every-visit" else 1.0)
    with pytest.raises(MdpError):
        EligibilityTraces.fresh(3, "replacing", 0.9, 0.5)


visits = st.lists(st.integers(0, 4), min_size=0, max_size=40)


@given(visits, st.sampled_from(["every-visit", "restart"]), st.floats(0, 1), st.floats(0.01, 0.99))
def test_trace_invariants_and_backward_pass(seq, variant, lam, discount):
    tr = EligibilityTraces.fresh(5, variant, discount, lam)
    values = [math.sin(k + 1.0) for k in range(len(seq))]
    acc = np.zeros(5)
    for s, d in zip(seq, values):
        prev = tr.z
        tr = trace_update(tr, s)
        others = np.arange(5) != s
        assert np.all(tr.z >= 0)
        assert np.all(tr.z[others] <= discount * prev[others] + 1e-15)
        acc += tr.z * d
    assert np.allclose(trace_sums(seq, values, discount * lam, variant, 5), acc, atol=1e-10)


# -- drivers ------------------------------------------------------------------------


def test_tiny_radius_tracks_classical_step_for_step():
    mdp = random_mdp(4, 2, 3, 0, discount=0.8)
    base = TabularLearnerConfig(steps=5000)
    a = robust_q_learning(mdp, base, make_rng(5)).table
    b = robust_q_learning(mdp, TabularLearnerConfig(steps=5000, region=L2Ball(1e-300)), make_rng(5)).table
    assert np.abs(a - b).max() <= 1e-12


def test_sarsa_uniform_exploration():
    mdp = random_mdp(4, 3, 3, 1, discount=0.8)
    res = robust_sarsa(mdp, TabularLearnerConfig(steps=60_000, exploration=1.0), make_rng(0))
    freq = res.extras["visit_counts"].sum(axis=0) / 60_000
    assert np.abs(freq - 1 / 3).max() <= 0.01


def test_q_learning_short_run_improves():
    mdp, reg = five_state()
    oracle = robust_value_iteration(mdp, reg, constrained=True, tol=1e-12).q
    res = robust_q_learning(mdp, TabularLearnerConfig(steps=100_000, region=reg, schedule=StepSchedule(1, 1, 0.8),
                                                      exploration=0.3, checkpoint_every=20_000),
                            make_rng(0), oracle_q=oracle)
    d = [c["distance_to_oracle"] for c in res.checkpoints]
    assert d[-1] < 0.05 * np.abs(oracle).max() and d[-1] < d[0]


def test_td0_classical():
    mdp, reg = five_state()
    pol = robust_value_iteration(mdp, reg).policy
    acts, rows = np.array(pol.actions), np.arange(5)
    v_pi = np.linalg.solve(np.eye(5) - 0.5 * mdp.transitions[acts, rows], mdp.cost[rows, acts])
    cfg = TabularLearnerConfig(lam=0.0, episodes=5000, schedule=StepSchedule(1, 1, 1.0))
    res = robust_td_lambda(mdp, pol, cfg, make_rng(0), oracle_v=v_pi)
    assert res.distance <= 0.02 * np.abs(v_pi).max()


@pytest.mark.parametrize("trace", ["every-visit", "restart"])
@pytest.mark.parametrize("online", [False, True])
def test_td_lambda_robust_short(trace, online):
    mdp, reg = five_state()
    pol = robust_value_iteration(mdp, reg).policy
    oracle = robust_policy_evaluation(mdp, reg, pol, constrained=True, tol=1e-12)
    cfg = TabularLearnerConfig(region=reg, lam=0.5, trace=trace, online=online, episodes=5000,
                               schedule=StepSchedule(1, 1, 1.0))
    res = robust_td_lambda(mdp, pol, cfg, make_rng(1), oracle_v=oracle)
    assert res.distance <= 0.03 * np.abs(oracle).max()
    assert res.extras["longest_episode"] <= 50


def test_td_lambda_stopping_rule():
    mdp, _ = five_state()
    pol = DeterministicPolicy((0,) * 5)
    cfg = TabularLearnerConfig(episodes=200, stop=StoppingRule("horizon", 7))
    assert robust_td_lambda(mdp, pol, cfg, make_rng(0)).extras["longest_episode"] == 7


def test_precondition_warning_recorded():
    mdp = random_mdp(4, 2, 1, 0, discount=0.9)  # point-mass rows: the box binds hard
    cfg = TabularLearnerConfig(steps=10, region=L2Ball(1.0), beta_samples=8)
    with pytest.warns(RuntimeWarning, match="beta_hat"):
        res = robust_q_learning(mdp, cfg, make_rng(0))
    assert res.warnings


def test_config_validation():
    with pytest.raises(MdpError):
        TabularLearnerConfig(schedule=StepSchedule(1, 1, 0.5))
    with pytest.raises(MdpError):
        TabularLearnerConfig(exploration=1.5)


def test_robust_q_oracle_helper_consistent():
    mdp, reg = five_state()
    res = robust_value_iteration(mdp, reg, constrained=True, tol=1e-12)
    assert np.allclose(robust_q_from_value(mdp, reg, res.value, constrained=True), res.q)
