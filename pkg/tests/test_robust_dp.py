import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import assert_close, five_state, load_json
from robustrl.envs import random_mdp
from robustrl.mdp import DeterministicPolicy, MdpError, TabularMdp, make_rng
from robustrl.robust_dp import (
    robust_policy_evaluation,
    robust_q_from_value,
    robust_q_operator,
    robust_value_iteration,
)
from robustrl.uncertainty import Ellipsoid, L1Ball, L2Ball, region_from_dict


def classical_policy_iteration(mdp):
    n, rows = mdp.n_states, np.arange(mdp.n_states)
    pol = np.zeros(n, dtype=int)
    while True:
        v = np.linalg.solve(np.eye(n) - mdp.discount * mdp.transitions[pol, rows], mdp.cost[rows, pol])
        q = mdp.cost + mdp.discount * np.einsum("aij,j->ia", mdp.transitions, v)
        if np.all(q[rows, q.argmin(1)] >= q[rows, pol] - 1e-13):
            return v
        pol = q.argmin(1)


@pytest.mark.parametrize("seed", range(5))
def test_tiny_radius_is_classical(seed):
    mdp = random_mdp(5, 3, 3, seed, discount=0.9)
    v = robust_value_iteration(mdp, L2Ball(1e-15), tol=1e-12).value
    assert_close(v, classical_policy_iteration(mdp), 1e-8)
    assert_close(robust_value_iteration(mdp, None, tol=1e-12).value, classical_policy_iteration(mdp), 1e-8)


def test_single_state():
    mdp = TabularMdp([[2.0]], [[[1.0]]], 0.8)
    for reg in (L2Ball(0.5), L1Ball(0.3), Ellipsoid([[2.0]])):
        assert robust_value_iteration(mdp, reg, tol=1e-12).value[0] == pytest.approx(10.0, abs=1e-9)


def test_two_state_golden():
    doc = load_json("two_state_mdp.json")
    mdp, reg = TabularMdp.from_dict(doc), region_from_dict(doc["region"])
    gold = load_json("two_state_oracle.json")
    for constrained in (False, True):
        res = robust_value_iteration(mdp, reg, constrained=constrained, tol=1e-12)
        assert_close(res.value, gold["value"], 1e-9)
        assert_close(res.q, gold["q"], 1e-9)
        assert list(res.policy.actions) == gold["policy"]


def test_policy_evaluation_classical():
    mdp = random_mdp(5, 2, 3, 4, discount=0.9)
    pol = DeterministicPolicy((0, 1, 1, 0, 1))
    rows = np.arange(5)
    acts = np.array(pol.actions)
    exact = np.linalg.solve(np.eye(5) - 0.9 * mdp.transitions[acts, rows], mdp.cost[rows, acts])
    assert_close(robust_policy_evaluation(mdp, None, pol, tol=1e-12), exact, 1e-8)
    with pytest.raises(MdpError):
        robust_policy_evaluation(mdp, None, DeterministicPolicy((0, 1)))


def test_q_consistency_and_export():
    mdp, reg = five_state()
    res = robust_value_iteration(mdp, reg, constrained=True, tol=1e-12)
    assert_close(res.q.min(axis=1), res.value, 1e-8)
    assert_close(robust_q_from_value(mdp, reg, res.value, constrained=True), res.q, 1e-12)
    doc = json.loads(res.to_json())
    assert set(doc) == {"value", "q", "policy", "iterations"}


def test_terminal_rows_are_zero():
    P = np.array([[[0.5, 0.5], [0.0, 1.0]]])
    mdp = TabularMdp([[1.0], [5.0]], P, 0.9, terminal=(1,))
    res = robust_value_iteration(mdp, L2Ball(0.1), tol=1e-12)
    assert res.value[1] == 0.0 and np.all(res.q[1] == 0.0)


def test_constrained_at_most_proxy():
    mdp = random_mdp(5, 2, 2, 1, discount=0.8)  # sparse rows: the box binds
    reg = L2Ball(0.3)
    proxy = robust_value_iteration(mdp, reg, tol=1e-10).value
    exact = robust_value_iteration(mdp, reg, constrained=True, tol=1e-10).value
    nominal = robust_value_iteration(mdp, None, tol=1e-10).value
    assert np.all(nominal <= exact + 1e-9) and np.all(exact <= proxy + 1e-9)
    assert np.any(exact < proxy - 1e-6)


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_value_monotone_in_radius(r1, r2):
    mdp = random_mdp(4, 2, 4, 2, discount=0.7)
    lo, hi = sorted((r1, r2))
    v = [robust_value_iteration(mdp, L2Ball(r) if r > 0 else None, tol=1e-11).value for r in (lo, hi)]
    assert np.all(v[0] <= v[1] + 1e-9)


@given(st.integers(0, 2**32 - 1))
def test_operator_contracts_when_included(seed):
    mdp, reg = five_state()
    rng = make_rng(seed)
    q1, q2 = rng.standard_normal((2, 5, 2)) * rng.uniform(0.1, 10)
    num = np.abs(robust_q_operator(mdp, reg, q1) - robust_q_operator(mdp, reg, q2)).max()
    assert num <= mdp.discount * np.abs(q1 - q2).max() + 1e-9
