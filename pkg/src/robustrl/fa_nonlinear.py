"""Robust gradient-TD for smooth nonlinear value functions.

A value model exposes, over all states at once:

* ``values(theta)``        shape (n,)
* ``jacobian(theta)``      shape (n, d), row i is the gradient of v_theta(i)
* ``hess_vec(theta, u)``   shape (n, d), row i is Hess v_theta(i) @ u

Derivatives are written out by hand; tests compare them with finite
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fa_linear import (
    EvalProblem,
    GtdConfig,
    draw_samples,
    make_problem,
    msrpbe_neg_half_gradient,
    msrpbe_value,
)
from .mdp import MdpError
from .uncertainty import ConfidenceRegion


class QuadraticFeatureModel:
    """``v(i) = phi_i . theta + (kappa / 2) (psi_i . theta)^2``."""

    def __init__(self, phi, psi, kappa: float = 1.0):
        self.phi = np.asarray(phi, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        if self.phi.shape != self.psi.shape:
            raise MdpError("phi and psi must have the same shape")
        self.kappa = float(kappa)
        self.n, self.d = self.phi.shape

    def values(self, theta):
        s = self.psi @ theta
        return self.phi @ theta + 0.5 * self.kappa * s * s

    def jacobian(self, theta):
        return self.phi + self.kappa * (self.psi @ theta)[:, None] * self.psi

    def hess_vec(self, theta, u):
        return self.kappa * (self.psi @ u)[:, None] * self.psi


class TanhNetwork:
    """One hidden layer: ``v(i) = c . tanh(W x_i + b)``.

    ``theta`` packs ``W`` (row-major, width x inputs), then ``b``, then ``c``.
    """

    def __init__(self, inputs, width: int):
        self.x = np.asarray(inputs, dtype=float)
        self.n, self.p = self.x.shape
        self.h = int(width)
        self.d = self.h * self.p + 2 * self.h

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.d,):
            raise MdpError(f"parameter vector must have length {self.d}")
        hp = self.h * self.p
        return theta[:hp].reshape(self.h, self.p), theta[hp:hp + self.h], theta[hp + self.h:]

    def init_params(self, rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
        return scale * rng.standard_normal(self.d)

    def _hidden(self, theta):
        W, b, c = self.unpack(theta)
        t = np.tanh(self.x @ W.T + b)
        return W, b, c, t

    def values(self, theta):
        _, _, c, t = self._hidden(theta)
        return t @ c

    def jacobian(self, theta):
        _, _, c, t = self._hidden(theta)
        g = c * (1.0 - t * t)  # (n, h)
        dW = g[:, :, None] * self.x[:, None, :]
        return np.hstack([dW.reshape(self.n, -1), g, t])

    def hess_vec(self, theta, u):
        _, _, c, t = self._hidden(theta)
        dW, db, dc = self.unpack(u)
        s = 1.0 - t * t
        dt = s * (self.x @ dW.T + db)  # directional derivative of the hidden units
        ds = -2.0 * t * dt
        gdot = dc * s + c * ds
        HW = gdot[:, :, None] * self.x[:, None, :]
        return np.hstack([HW.reshape(self.n, -1), gdot, dt])


@dataclass(frozen=True)
class CompactSet:
    """Euclidean ball ``|theta| <= radius`` centred at the origin."""

    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise MdpError("radius must be positive")

    @classmethod
    def around(cls, theta0) -> "CompactSet":
        return cls(10.0 * float(np.linalg.norm(theta0)) + 10.0)


def gamma_projection(theta, C: CompactSet) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    nrm = float(np.linalg.norm(theta))
    if nrm <= C.radius:
        return theta.copy()
    return theta * (C.radius / nrm)


def h_term(d: float, phi: np.ndarray, w: np.ndarray, hess_vec: np.ndarray) -> np.ndarray:
    """Per-sample curvature correction ``(d - phi.w) * (Hess v) w``."""
    return (d - float(phi @ w)) * np.asarray(hess_vec, dtype=float)


def _sample_terms(model, theta, w, i, j, cost, region, th):
    v = model.values(theta)
    J = model.jacobian(theta)
    if region is None:
        sigma, mu = 0.0, np.zeros_like(theta)
    else:
        res = region.support(v)
        sigma, mu = res.value, J.T @ res.maximizer
    phi, phi_next = J[i], J[j]
    d = cost + th * v[j] + th * sigma - v[i]
    hk = h_term(d, phi, w, model.hess_vec(theta, w)[i])
    return phi, phi_next, mu, d, hk


def robust_nonlinear_gtd2_step(model, theta, w, sample: tuple[int, int, float], alpha: float,
                               beta: float, region: ConfidenceRegion | None, C: CompactSet,
                               discount: float) -> tuple[np.ndarray, np.ndarray]:
    """One update from a transition ``sample = (i, i', cost)``."""
    theta, w = np.asarray(theta, dtype=float), np.asarray(w, dtype=float)
    i, j, cost = sample
    phi, phi_next, mu, d, hk = _sample_terms(model, theta, w, i, j, cost, region, discount)
    proj = float(phi @ w)
    w_new = w + beta * (d - proj) * phi
    theta_new = gamma_projection(theta + alpha * ((phi - discount * phi_next - discount * mu) * proj - hk), C)
    return theta_new, w_new


def robust_nonlinear_tdc_step(model, theta, w, sample: tuple[int, int, float], alpha: float,
                              beta: float, region: ConfidenceRegion | None, C: CompactSet,
                              discount: float) -> tuple[np.ndarray, np.ndarray]:
    theta, w = np.asarray(theta, dtype=float), np.asarray(w, dtype=float)
    i, j, cost = sample
    phi, phi_next, mu, d, hk = _sample_terms(model, theta, w, i, j, cost, region, discount)
    proj = float(phi @ w)
    w_new = w + beta * (d - proj) * phi
    step = d * phi - discount * phi_next * proj - discount * mu * proj - hk
    theta_new = gamma_projection(theta + alpha * step, C)
    return theta_new, w_new


def msrpbe_nonlinear_exact(theta, mdp, xi, policy, model, region, discount=None) -> float:
    return msrpbe_value(make_problem(mdp, xi, policy, region, discount), model, theta)


def msrpbe_nonlinear_gradient(theta, mdp, xi, policy, model, region, discount=None) -> np.ndarray:
    prob = make_problem(mdp, xi, policy, region, discount)
    return -2.0 * msrpbe_neg_half_gradient(prob, model, theta)


@dataclass
class NonlinearResult:
    theta: np.ndarray
    w: np.ndarray
    curve: list[dict]
    gamma_active_total: float


def run_nonlinear_gtd(prob: EvalProblem, model, algorithm: str, cfg: GtdConfig,
                      rng: np.random.Generator, theta0=None, C: CompactSet | None = None) -> NonlinearResult:
    """Robust nonlinear GTD2 or TDC on i.i.d. samples, with Gamma-projection."""
    if algorithm not in ("gtd2", "tdc"):
        raise MdpError(f"unknown algorithm {algorithm!r}")
    theta = np.zeros(model.d) if theta0 is None else np.array(theta0, dtype=float)
    w = np.zeros(model.d)
    C = CompactSet.around(theta) if C is None else C
    R = C.radius
    th = prob.discount
    region = prob.region
    states, nexts = draw_samples(prob, rng, cfg.steps)
    costs = prob.c
    tdc = algorithm == "tdc"
    curve = []
    active = window_active = 0
    k = -1
    for k in range(cfg.steps):
        i, j = states[k], nexts[k]
        phi, phi_next, mu, d, hk = _sample_terms(model, theta, w, i, j, costs[i], region, th)
        proj = float(phi @ w)
        a_k = cfg.slow(k)
        w = w + cfg.fast(k) * (d - proj) * phi
        if tdc:
            theta = theta + a_k * (d * phi - th * (phi_next + mu) * proj - hk)
        else:
            theta = theta + a_k * ((phi - th * phi_next - th * mu) * proj - hk)
        nrm = math.sqrt(float(theta @ theta))
        if nrm > R:
            theta *= R / nrm
            active += 1
            window_active += 1
        if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            curve.append({
                "step": k + 1,
                "msrpbe_exact": msrpbe_value(prob, model, theta),
                "theta_norm": float(np.linalg.norm(theta)),
                "w_norm": float(np.linalg.norm(w)),
                "gamma_active": window_active / cfg.checkpoint_every,
            })
            window_active = 0
            if cfg.stop_below is not None and curve[-1]["msrpbe_exact"] < cfg.stop_below:
                break
    return NonlinearResult(theta, w, curve, active / max(k + 1, 1))
