"""Robust gradient-TD with linear value functions ``v = Phi @ theta``.

The exact evaluators enumerate ``i ~ xi``, ``a = pi(i)``, ``i' ~ p^a_i`` and
are written against a small value-model protocol (values, Jacobian,
Hessian-vector product) so the nonlinear module reuses them unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import DeterministicPolicy, MdpError, Policy, StepSchedule, TabularMdp, check_two_timescale, make_rng
from .robust_dp import RegionTable, region_at
from .uncertainty import ConfidenceRegion, L2Ball


class RankError(MdpError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    matrix: np.ndarray

    def __post_init__(self):
        phi = np.array(self.matrix, dtype=float)
        if phi.ndim != 2:
            raise MdpError("feature matrix must be n x d")
        zero = np.flatnonzero(~phi.any(axis=1))
        if len(zero):
            raise MdpError(f"feature row {zero[0]} is all zero")
        phi.setflags(write=False)
        object.__setattr__(self, "matrix", phi)

    @property
    def shape(self):
        return self.matrix.shape

    def gram(self, xi: np.ndarray) -> np.ndarray:
        return self.matrix.T @ (xi[:, None] * self.matrix)

    def full_rank(self, xi: np.ndarray, tol: float = 1e-10) -> bool:
        return float(np.linalg.eigvalsh(self.gram(xi)).min()) > tol


@dataclass
class LinearModel:
    theta: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.w))):
            raise MdpError("model parameters must be finite")


def feature_array(features) -> np.ndarray:
    return features.matrix if isinstance(features, FeatureMap) else np.asarray(features, dtype=float)


class LinearValueModel:
    """``v_theta = Phi theta``; gradient rows are the features, Hessian zero."""

    def __init__(self, features):
        self.phi = feature_array(features)
        self.n, self.d = self.phi.shape

    def values(self, theta):
        return self.phi @ theta

    def jacobian(self, theta):
        return self.phi

    def hess_vec(self, theta, u):
        return np.zeros_like(self.phi)


@dataclass(frozen=True)
class Sample:
    phi: np.ndarray
    phi_next: np.ndarray
    cost: float


# ---------------------------------------------------------------------------
# support value and mu


def support_and_mu(region: ConfidenceRegion | None, values: np.ndarray, jac: np.ndarray) -> tuple[float, np.ndarray]:
    """``sigma(v)`` and its gradient ``jac.T @ y*`` (zero at the kink)."""
    if region is None:
        return 0.0, np.zeros(jac.shape[1])
    res = region.support(values)
    return res.value, jac.T @ res.maximizer


class _SharedSupport:
    """Fast ``(sigma, mu)`` for a shared zero-sum l2 ball and fixed features."""

    def __init__(self, region: ConfidenceRegion | None, phi: np.ndarray):
        self.region = region
        self.phi = phi
        self.fast = isinstance(region, L2Ball) and region.zero_sum
        if self.fast:
            centered = phi - phi.mean(axis=0)
            self.G = centered.T @ centered
            self.r = region.radius

    def __call__(self, theta):
        if self.region is None:
            return 0.0, np.zeros(self.phi.shape[1])
        if not self.fast:
            return support_and_mu(self.region, self.phi @ theta, self.phi)
        Gt = self.G @ theta
        q = float(theta @ Gt)
        if q <= 0.0:
            return 0.0, np.zeros_like(theta)
        s = math.sqrt(q)
        return self.r * s, (self.r / s) * Gt


# ---------------------------------------------------------------------------
# exact evaluators


@dataclass(frozen=True, eq=False)
class EvalProblem:
    """Quantities fixed by ``(mdp, xi, pi, region, discount)``."""

    mdp: TabularMdp
    xi: np.ndarray
    policy: DeterministicPolicy
    region: ConfidenceRegion | None
    discount: float
    P: np.ndarray = field(init=False)
    c: np.ndarray = field(init=False)

    def __post_init__(self):
        acts = np.asarray(self.policy.actions)
        n = self.mdp.n_states
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (n,) or np.any(xi < 0) or abs(xi.sum() - 1.0) > 1e-9:
            raise MdpError("xi must be a distribution over states")
        if acts.shape != (n,):
            raise MdpError("policy length does not match the number of states")
        if self.region is not None and not isinstance(self.region, ConfidenceRegion):
            raise MdpError("function approximation uses one region shared by all pairs")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "P", self.mdp.transitions[acts, np.arange(n)])
        object.__setattr__(self, "c", self.mdp.cost[np.arange(n), acts])


def make_problem(mdp, xi, policy, region, discount=None) -> EvalProblem:
    return EvalProblem(mdp, xi, policy, region, mdp.discount if discount is None else discount)


def robust_td_errors(prob: EvalProblem, values: np.ndarray, sigma: float) -> np.ndarray:
    """Expected robust TD error per state: ``c + th P v - v + th sigma``."""
    return prob.c + prob.discount * (prob.P @ values) - values + prob.discount * sigma


def _solve_gram(C: np.ndarray, b: np.ndarray) -> np.ndarray:
    lam, vec = np.linalg.eigh(C)
    if lam[0] <= 1e-12 * max(lam[-1], 1.0):
        direction = np.array2string(vec[:, 0], precision=4)
        raise RankError(f"E[phi phi^T] is singular; near-null direction {direction}")
    return np.linalg.solve(C, b)


def msrpbe_terms(prob: EvalProblem, model, theta) -> dict:
    """Pieces shared by the exact loss and gradient."""
    theta = np.asarray(theta, dtype=float)
    v = model.values(theta)
    J = model.jacobian(theta)
    sigma, mu = support_and_mu(prob.region, v, J)
    d = robust_td_errors(prob, v, sigma)
    xi = prob.xi
    b = J.T @ (xi * d)
    C = J.T @ (xi[:, None] * J)
    w = _solve_gram(C, b)
    return {"v": v, "J": J, "sigma": sigma, "mu": mu, "d": d, "b": b, "C": C, "w": w}


def msrpbe_value(prob: EvalProblem, model, theta) -> float:
    t = msrpbe_terms(prob, model, theta)
    return float(t["b"] @ t["w"])


def msrpbe_neg_half_gradient(prob: EvalProblem, model, theta) -> np.ndarray:
    """``E[(phi - th phi' - th mu) phi^T] w + h(theta, w)``."""
    t = msrpbe_terms(prob, model, theta)
    J, w, xi, th = t["J"], t["w"], prob.xi, prob.discount
    proj = J @ w
    next_feat = prob.P @ J
    lin = (J - th * next_feat - th * t["mu"]).T @ (xi * proj)
    H = model.hess_vec(np.asarray(theta, dtype=float), w)
    h = -H.T @ (xi * (t["d"] - proj))
    return lin + h


def msrpbe_exact(theta, mdp: TabularMdp, xi, policy, features, region, discount=None) -> float:
    return msrpbe_value(make_problem(mdp, xi, policy, region, discount), LinearValueModel(features), theta)


def msrpbe_gradient_exact(theta, mdp: TabularMdp, xi, policy, features, region, discount=None) -> np.ndarray:
    prob = make_problem(mdp, xi, policy, region, discount)
    return -2.0 * msrpbe_neg_half_gradient(prob, LinearValueModel(features), theta)


def robust_linear_td_error(theta, features, i: int, j: int, cost: float, discount: float,
                           region: ConfidenceRegion | None) -> float:
    phi = feature_array(features)
    theta = np.asarray(theta, dtype=float)
    if phi.shape[1] != theta.shape[0]:
        raise MdpError("feature and parameter dimensions disagree")
    v = phi @ theta
    sigma = 0.0 if region is None else region.value(v)
    return float(cost + discount * v[j] + discount * sigma - v[i])


def solve_projected_fixed_point(prob: EvalProblem, features, damping: float = 1.0,
                                tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Damped iteration ``theta <- (1-eta) theta + eta C^-1 Phi^T Xi T(Phi theta)``."""
    phi = feature_array(features)
    xi = prob.xi
    C = phi.T @ (xi[:, None] * phi)
    theta = np.zeros(phi.shape[1])
    for _ in range(max_iter):
        v = phi @ theta
        sigma = 0.0 if prob.region is None else prob.region.value(v)
        target = prob.c + prob.discount * (prob.P @ v + sigma)
        nxt = (1 - damping) * theta + damping * _solve_gram(C, phi.T @ (xi * target))
        if np.abs(nxt - theta).max() <= tol:
            return nxt
        theta = nxt
    raise MdpError("projected fixed-point iteration did not converge")


# ---------------------------------------------------------------------------
# single-sample updates


def robust_gtd2_step(model: LinearModel, sample: Sample, alpha: float, beta: float,
                     region: ConfidenceRegion | None, features, discount: float) -> LinearModel:
    phi_mat = feature_array(features)
    sigma, mu = support_and_mu(region, phi_mat @ model.theta, phi_mat)
    return _gtd2(model, sample, alpha, beta, sigma, mu, discount)


def robust_tdc_step(model: LinearModel, sample: Sample, alpha: float, beta: float,
                    region: ConfidenceRegion | None, features, discount: float) -> LinearModel:
    phi_mat = feature_array(features)
    sigma, mu = support_and_mu(region, phi_mat @ model.theta, phi_mat)
    return _tdc(model, sample, alpha, beta, sigma, mu, discount)


def _gtd2(model, s: Sample, alpha, beta, sigma, mu, th):
    theta, w = model.theta, model.w
    d = s.cost + th * (s.phi_next @ theta) + th * sigma - s.phi @ theta
    proj = s.phi @ w
    w_new = w + beta * (d - proj) * s.phi
    theta_new = theta + alpha * (s.phi - th * mu - th * s.phi_next) * proj
    return LinearModel(theta_new, w_new)


def _tdc(model, s: Sample, alpha, beta, sigma, mu, th):
    theta, w = model.theta, model.w
    d = s.cost + th * (s.phi_next @ theta) + th * sigma - s.phi @ theta
    proj = s.phi @ w
    w_new = w + beta * (d - proj) * s.phi
    theta_new = theta + alpha * d * s.phi - th * alpha * (s.phi_next + mu) * proj
    return LinearModel(theta_new, w_new)


# ---------------------------------------------------------------------------
# learner driver


@dataclass(frozen=True)
class GtdConfig:
    slow: StepSchedule = StepSchedule(1.0, 1.0, 0.9)
    fast: StepSchedule = StepSchedule(1.0, 1.0, 0.6)
    steps: int = 100_000
    checkpoint_every: int = 10_000
    # end the run at the first checkpoint whose exact MSRPBE is below this
    stop_below: float | None = None

    def __post_init__(self):
        ok, msg = check_two_timescale(self.slow, self.fast)
        if not ok:
            raise MdpError(f"invalid two-timescale schedules: {msg}")


@dataclass
class GtdResult:
    model: LinearModel
    curve: list[dict]

    def curve_csv(self) -> str:
        keys = list(self.curve[0]) if self.curve else ["step", "msrpbe_exact", "theta_norm", "w_norm"]
        lines = [",".join(keys)]
        for row in self.curve:
            lines.append(",".join(repr(row[k]) for k in keys))
        return "\n".join(lines) + "\n"


def draw_samples(prob: EvalProblem, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
    """``count`` pairs ``(i, i')`` with ``i ~ xi`` and ``i' ~ P_pi(i, .)``."""
    n = prob.mdp.n_states
    states = np.minimum(np.searchsorted(np.cumsum(prob.xi), rng.random(count), side="right"), n - 1)
    cum = np.cumsum(prob.P, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(count)
    nexts = np.array([np.searchsorted(cum[i], x, side="right") for i, x in zip(states, u)])
    return states, np.minimum(nexts, n - 1)


def run_linear_gtd(prob: EvalProblem, features, algorithm: str, cfg: GtdConfig,
                   rng: np.random.Generator, theta0=None) -> GtdResult:
    """Robust GTD2 (``algorithm="gtd2"``) or TDC (``"tdc"``) on i.i.d. samples."""
    if algorithm not in ("gtd2", "tdc"):
        raise MdpError(f"unknown algorithm {algorithm!r}")
    phi = feature_array(features)
    d = phi.shape[1]
    model = LinearModel(np.zeros(d) if theta0 is None else np.array(theta0, dtype=float), np.zeros(d))
    lin = LinearValueModel(phi)
    support = _SharedSupport(prob.region, phi)
    tdc = algorithm == "tdc"
    states, nexts = draw_samples(prob, rng, cfg.steps)
    costs = prob.c
    curve = []
    th = prob.discount
    theta, w = model.theta.copy(), model.w.copy()
    for k in range(cfg.steps):
        i, j = states[k], nexts[k]
        f, fn = phi[i], phi[j]
        sigma, mu = support(theta)
        d_err = costs[i] + th * (fn @ theta) + th * sigma - f @ theta
        proj = f @ w
        a_k = cfg.slow(k)
        w += cfg.fast(k) * (d_err - proj) * f
        if tdc:
            theta += a_k * d_err * f - th * a_k * proj * (fn + mu)
        else:
            theta += a_k * proj * (f - th * mu - th * fn)
        if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            curve.append({
                "step": k + 1,
                "msrpbe_exact": msrpbe_value(prob, lin, theta),
                "theta_norm": float(np.linalg.norm(theta)),
                "w_norm": float(np.linalg.norm(w)),
            })
            if cfg.stop_below is not None and curve[-1]["msrpbe_exact"] < cfg.stop_below:
                break
    model = LinearModel(theta, w)
    return GtdResult(model, curve)


# ---------------------------------------------------------------------------
# contraction diagnostics


@dataclass(frozen=True)
class AssumptionReport:
    passed: bool
    alpha: float
    offending: tuple[int, int, int] | None
    message: str


def check_assumption_contraction(mdp: TabularMdp, regions: RegionTable, behavior: Policy,
                                 discount: float | None = None,
                                 target: DeterministicPolicy | None = None) -> AssumptionReport:
    """Smallest ``alpha`` with ``discount * p_j <= alpha * Pb(i, j)`` over every
    perturbed row ``p`` of every pair, ``Pb`` being the behavior chain.

    With ``target`` only the pairs ``(i, target(i))`` are checked, which is
    all the projected-contraction bound for that policy relies on.
    """
    th = mdp.discount if discount is None else discount
    Pb = mdp.policy_matrix(behavior)
    n, m = mdp.n_states, mdp.n_actions
    eye = np.eye(n)
    alpha, worst = 0.0, None
    for i in range(n):
        for a in range(m) if target is None else (target.actions[i],):
            reg = region_at(regions, i, a)
            for j in range(n):
                up = 0.0 if reg is None else reg.value(eye[j])
                pmax = min(max(mdp.transitions[a, i, j] + up, 0.0), 1.0)
                if pmax <= 0.0:
                    continue
                if Pb[i, j] <= 0.0:
                    return AssumptionReport(False, math.inf, (i, a, j),
                                            f"p({j}|{i},{a}) can be positive where the behavior chain has none")
                ratio = th * pmax / Pb[i, j]
                if ratio > alpha:
                    alpha, worst = ratio, (i, a, j)
    if alpha >= 1.0:
        return AssumptionReport(False, alpha, worst, f"alpha = {alpha:.6f} >= 1 at {worst}")
    return AssumptionReport(True, alpha, worst, f"alpha = {alpha:.6f}")


def xi_norm(x: np.ndarray, xi: np.ndarray) -> float:
    return math.sqrt(float(xi @ (x * x)))


@dataclass(frozen=True)
class ContractionReport:
    max_ratio: float
    bound: float
    contraction: bool
    trials: int


def robust_bellman_image(prob: EvalProblem, v: np.ndarray) -> np.ndarray:
    sigma = 0.0 if prob.region is None else prob.region.value(v)
    return prob.c + prob.discount * (prob.P @ v + sigma)


def projected_contraction_check(mdp: TabularMdp, features, xi, policy, region, discount=None,
                                trials: int = 100, rng: np.random.Generator | None = None,
                                alpha: float | None = None, beta: float = 0.0) -> ContractionReport:
    """Largest ``|T(Phi t) - T(Phi t')|_xi / |Phi t - Phi t'|_xi`` over random pairs.

    The bound is ``alpha`` when ``beta == 0`` and ``sqrt(2 (alpha^2 + th^2 beta^2))``
    otherwise; ``alpha`` defaults to the transition-domination constant with ``policy``
    as both behavior and target, which matches ``xi`` being its steady state.
    """
    prob = make_problem(mdp, xi, policy, region, discount)
    phi = feature_array(features)
    if alpha is None:
        alpha = check_assumption_contraction(mdp, region, policy, prob.discount, target=policy).alpha
    th = prob.discount
    bound = alpha if beta == 0.0 else math.sqrt(2.0 * (alpha ** 2 + th ** 2 * beta ** 2))
    rng = make_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(trials):
        t1, t2 = rng.standard_normal((2, phi.shape[1])) * rng.uniform(0.1, 10.0)
        v1, v2 = phi @ t1, phi @ t2
        den = xi_norm(v1 - v2, prob.xi)
        if den == 0.0:
            continue
        num = xi_norm(robust_bellman_image(prob, v1) - robust_bellman_image(prob, v2), prob.xi)
        worst = max(worst, num / den)
    return ContractionReport(worst, bound, worst < 1.0, trials)
