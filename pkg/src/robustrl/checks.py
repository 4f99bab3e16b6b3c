"""Fast invariant suite behind ``robustrl check``.

Each check returns ``(name, passed, detail)``; details are formatted to fixed
precision so repeated runs print identical text.
"""

from __future__ import annotations

import json
import math
import tempfile
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .envs import GridWorldSpec, make_gridworld, perturb, random_mdp
from .fa_linear import LinearValueModel, make_problem, msrpbe_neg_half_gradient, msrpbe_value
from .mdp import TabularMdp, make_rng, steady_state_distribution
from .robust_dp import robust_policy_evaluation, robust_q_operator, robust_value_iteration
from .tabular import EligibilityTraces, trace_sums, trace_update
from .uncertainty import (
    Ellipsoid,
    L1Ball,
    L2Ball,
    Parallelepiped,
    dykstra,
    region_from_dict,
)

CheckResult = tuple[str, bool, str]


def project_zero_sum(y: np.ndarray) -> np.ndarray:
    return y - y.mean()


def ascent_support(region, v: np.ndarray, iters: int = 20_000) -> float:
    """Projected-gradient ascent of ``v.x`` over a smooth zero-sum region."""
    if isinstance(region, L2Ball):
        r = region.radius

        def proj(z):
            nz = np.linalg.norm(z)
            return z if nz <= r else z * (r / nz)
    else:
        proj = region.project
    x = np.zeros_like(v)
    eta = 1.0 / max(np.linalg.norm(v), 1e-300)
    for _ in range(iters):
        nxt = dykstra(x + eta * v, [proj, project_zero_sum], tol=1e-14)
        if np.linalg.norm(nxt - x) <= 1e-13:
            x = nxt
            break
        x = nxt
    return float(v @ x)


def vertex_support(region, v: np.ndarray) -> float:
    return float((region.vertices(len(v)) @ v).max())


def random_region(kind: str, n: int, rng: np.random.Generator):
    if kind == "l2":
        return L2Ball(rng.uniform(0.05, 2.0))
    if kind == "l1":
        return L1Ball(rng.uniform(0.05, 2.0))
    if kind == "ellipsoid":
        M = rng.standard_normal((n, n))
        return Ellipsoid(M @ M.T + 0.5 * np.eye(n))
    M = rng.standard_normal((n, n)) + 3.0 * np.eye(n)
    return Parallelepiped(M)


def support_oracle(region, v) -> float:
    if isinstance(region, (L1Ball, Parallelepiped)):
        return vertex_support(region, v)
    return ascent_support(region, v)


def check_support(rng, trials: int = 12) -> CheckResult:
    worst = 0.0
    for k in range(trials):
        kind = ("l2", "l1", "ellipsoid", "parallelepiped")[k % 4]
        n = int(rng.integers(2, 8))
        reg = random_region(kind, n, rng)
        v = rng.standard_normal(n)
        got, want = reg.support(v).value, support_oracle(reg, v)
        worst = max(worst, abs(got - want) / max(abs(want), 1e-12))
    return "support closed forms vs oracles", worst <= 1e-6, f"max rel err {worst:.1e}"


def check_homogeneity(rng) -> CheckResult:
    ok = True
    for kind in ("l2", "l1", "ellipsoid", "parallelepiped"):
        reg = random_region(kind, 5, rng)
        v, w = rng.standard_normal((2, 5))
        c = float(rng.uniform(0.1, 10))
        s = reg.support(v).value
        ok &= abs(reg.support(c * v).value - c * s) <= 1e-12 * max(abs(c * s), 1.0)
        ok &= reg.support(v + w).value <= s + reg.support(w).value + 1e-9
    return "support homogeneity and subadditivity", bool(ok), ""


def _classical_vi(mdp: TabularMdp) -> np.ndarray:
    # policy iteration with exact linear solves
    n = mdp.n_states
    pol = np.zeros(n, dtype=int)
    while True:
        P = mdp.transitions[pol, np.arange(n)]
        c = mdp.cost[np.arange(n), pol]
        v = np.linalg.solve(np.eye(n) - mdp.discount * P, c)
        q = mdp.cost + mdp.discount * np.einsum("aij,j->ia", mdp.transitions, v)
        new = q.argmin(axis=1)
        if np.all(q[np.arange(n), new] >= q[np.arange(n), pol] - 1e-13):
            return v
        pol = new


def check_dp_nominal(rng) -> CheckResult:
    worst = 0.0
    for seed in range(5):
        mdp = random_mdp(6, 3, 4, seed, discount=0.9)
        v = robust_value_iteration(mdp, L2Ball(1e-14), tol=1e-12).value
        worst = max(worst, float(np.abs(v - _classical_vi(mdp)).max()))
    return "robust DP at radius ~0 vs policy iteration", worst <= 1e-8, f"sup err {worst:.1e}"


def two_state_fixture() -> tuple[TabularMdp, L2Ball]:
    doc = json.loads(resources.files("robustrl.data").joinpath("two_state.json").read_text())
    return TabularMdp.from_dict(doc), region_from_dict(doc["region"])


def two_state_closed_form() -> np.ndarray:
    """Hand solve of ``v = c + 0.5 (p.v + sigma)`` with identical uniform rows."""
    # both rows share p.v + sigma, so v0 - v1 = c0 - c1
    D = 1.0
    # centred v is (D/2, -D/2), so sigma = 0.1 |D| / sqrt(2)
    sigma = 0.1 * abs(D) / math.sqrt(2.0)
    # v0 + v1 = 1 + (v0 + v1) / 2 + sigma  =>  S = 2 (1 + sigma)
    S = 2.0 * (1.0 + sigma)
    return np.array([(S + D) / 2.0, (S - D) / 2.0])


def check_two_state(rng) -> CheckResult:
    mdp, reg = two_state_fixture()
    v = robust_value_iteration(mdp, reg, constrained=True, tol=1e-13).value
    err = float(np.abs(v - two_state_closed_form()).max())
    return "two-state robust fixed point", err <= 1e-9, f"sup err {err:.1e}"


def check_contraction(rng) -> CheckResult:
    mdp = perturb(random_mdp(5, 2, 5, 0, discount=0.5), 0.5)
    reg = L2Ball(0.1)
    worst = 0.0
    for _ in range(50):
        q1, q2 = rng.standard_normal((2, 5, 2)) * 3
        num = np.abs(robust_q_operator(mdp, reg, q1) - robust_q_operator(mdp, reg, q2)).max()
        worst = max(worst, num / np.abs(q1 - q2).max())
    return "robust Q operator contraction (beta = 0)", bool(worst <= mdp.discount + 1e-9), f"max ratio {worst:.6f}"


def check_policy_evaluation(rng) -> CheckResult:
    mdp = random_mdp(5, 2, 3, 1, discount=0.8)
    pol = robust_value_iteration(mdp, None).policy
    nominal = robust_policy_evaluation(mdp, None, pol)
    robust = robust_policy_evaluation(mdp, L2Ball(0.2), pol)
    return "robust value dominates nominal value", bool(np.all(robust >= nominal - 1e-12)), ""


def check_traces(rng) -> CheckResult:
    ok = True
    for variant in ("every-visit", "restart"):
        visits = rng.integers(0, 6, 40).tolist()
        values = rng.standard_normal(40).tolist()
        tr = EligibilityTraces.fresh(6, variant, 0.9, 0.7)
        acc = np.zeros(6)
        for s, d in zip(visits, values):
            prev = tr.z
            tr = trace_update(tr, s)
            other = np.arange(6) != s
            ok &= bool(np.all(tr.z >= 0)) and bool(np.all(tr.z[other] <= 0.9 * prev[other] + 1e-15))
            acc += tr.z * d
        ok &= np.allclose(acc, trace_sums(visits, values, 0.63, variant, 6), atol=1e-12)
    return "eligibility traces", bool(ok), ""


def check_gradient(rng) -> CheckResult:
    mdp = perturb(random_mdp(5, 2, 5, 0, discount=0.5), 0.5)
    reg = L2Ball(0.1)
    pol = robust_value_iteration(mdp, reg).policy
    xi = steady_state_distribution(mdp.policy_matrix(pol))
    phi = rng.uniform(0, 1, (5, 3))
    prob, model = make_problem(mdp, xi, pol, reg), LinearValueModel(phi)
    worst = 0.0
    for _ in range(5):
        th = rng.standard_normal(3)
        g = -2.0 * msrpbe_neg_half_gradient(prob, model, th)
        fd = np.array([(msrpbe_value(prob, model, th + 1e-5 * e) - msrpbe_value(prob, model, th - 1e-5 * e)) / 2e-5
                       for e in np.eye(3)])
        worst = max(worst, float(np.abs(g - fd).max() / np.abs(fd).max()))
    return "MSRPBE gradient vs finite differences", worst <= 1e-4, f"max rel err {worst:.1e}"


def check_steady_state(rng) -> CheckResult:
    P = np.array([[0.9, 0.1], [0.5, 0.5]])
    xi = steady_state_distribution(P)
    ok = abs(xi[0] - 5 / 6) <= 1e-9 and np.abs(xi @ P - xi).sum() <= 1e-10
    return "steady-state distribution", bool(ok), ""


def check_gridworld(rng) -> CheckResult:
    mdp = make_gridworld(GridWorldSpec.named("frozenlake_4x4"))
    ok = np.allclose(mdp.transitions.sum(axis=2), 1.0, atol=1e-12, rtol=0)
    return "gridworld rows stochastic", bool(ok), ""


def check_determinism(rng) -> CheckResult:
    from .harness import load_config, run_experiment

    cfg = load_config({
        "env": {"kind": "random", "n_states": 5, "n_actions": 2, "branching": 5, "seed": 0,
                "discount": 0.5, "mix": 0.5},
        "algorithm": "robust-q",
        "region": {"family": "l2", "radius": 0.1},
        "learner": {"steps": 2000},
        "seeds": [0, 1],
        "eval_episodes": 10,
        "eval_horizon": 20,
    })
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for k in range(2):
            d = Path(tmp) / str(k)
            run_experiment(cfg, d)
            outs.append(((d / "report.json").read_bytes(), (d / "episodes.csv").read_bytes()))
    return "experiment outputs byte-identical across runs", outs[0] == outs[1], ""


CHECKS: list[Callable] = [
    check_support,
    check_homogeneity,
    check_dp_nominal,
    check_two_state,
    check_contraction,
    check_policy_evaluation,
    check_traces,
    check_gradient,
    check_steady_state,
    check_gridworld,
    check_determinism,
]


def run_checks(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed)
    out = []
    for fn in CHECKS:
        try:
            out.append(fn(rng))
        except Exception as exc:  # a crashing check is a failing check
            out.append((fn.__name__, False, f"{type(exc).__name__}: {exc}"))
    return out
