"""Model-based robust dynamic programming: the ground truth for the learners."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .mdp import DeterministicPolicy, MdpError, TabularMdp, greedy_actions
from .uncertainty import ConfidenceRegion, box_inclusion, support_simplex_constrained

# A region table is None (nominal model), one region shared by every
# state-action pair, or an indexable regions[i][a] whose entries may be None.
RegionTable = Any


def region_at(regions: RegionTable, i: int, a: int) -> ConfidenceRegion | None:
    if regions is None or isinstance(regions, ConfidenceRegion):
        return regions
    return regions[i][a]


def is_shared(regions: RegionTable) -> bool:
    return regions is None or isinstance(regions, ConfidenceRegion)


class RobustBackup:
    """Worst-case expected next value ``S_{i,a}(v)`` for every pair.

    ``constrained=False`` uses the proxy ``p.v + sigma(v)``; ``True`` keeps
    perturbed rows inside the simplex.  Box-inclusion certificates are
    computed once since they do not depend on ``v``.
    """

    def __init__(self, mdp: TabularMdp, regions: RegionTable, constrained: bool = False):
        self.mdp = mdp
        self.regions = regions
        self.constrained = constrained
        n, m = mdp.n_states, mdp.n_actions
        self._inside = None
        if constrained and regions is not None:
            self._inside = np.zeros((n, m), dtype=bool)
            for i in range(n):
                for a in range(m):
                    reg = region_at(regions, i, a)
                    self._inside[i, a] = reg is None or box_inclusion(reg, mdp.transitions[a, i])

    def __call__(self, v: np.ndarray) -> np.ndarray:
        mdp, regions = self.mdp, self.regions
        expect = np.einsum("aij,j->ia", mdp.transitions, v)
        if regions is None:
            return expect
        if is_shared(regions) and (not self.constrained or self._inside.all()):
            return expect + regions.value(v)
        out = expect.copy()
        for i in range(mdp.n_states):
            for a in range(mdp.n_actions):
                reg = region_at(regions, i, a)
                if reg is None:
                    continue
                if self.constrained and not self._inside[i, a]:
                    out[i, a] = support_simplex_constrained(reg, mdp.transitions[a, i], v,
                                                            assume_inside=False)
                else:
                    out[i, a] += reg.value(v)
        return out


def q_from_value(mdp: TabularMdp, backup: RobustBackup, v: np.ndarray) -> np.ndarray:
    q = mdp.cost + mdp.discount * backup(v)
    q[list(mdp.terminal), :] = 0.0
    return q


def robust_q_from_value(mdp: TabularMdp, regions: RegionTable, v, constrained: bool = False) -> np.ndarray:
    """``Q(i, a) = c(i, a) + discount * S_{i,a}(v)``; terminal rows are zero."""
    return q_from_value(mdp, RobustBackup(mdp, regions, constrained), np.asarray(v, dtype=float))


def robust_q_operator(mdp: TabularMdp, regions: RegionTable, q: np.ndarray,
                      constrained: bool = False) -> np.ndarray:
    """One robust Q-iteration with exact expectations: ``Q -> c + discount * S(min_a Q)``."""
    v = np.asarray(q, dtype=float).min(axis=1)
    v[list(mdp.terminal)] = 0.0
    return robust_q_from_value(mdp, regions, v, constrained)


@dataclass(frozen=True)
class DpResult:
    value: np.ndarray
    q: np.ndarray
    policy: DeterministicPolicy
    iterations: int

    def to_dict(self) -> dict:
        return {
            "value": self.value.tolist(),
            "q": self.q.tolist(),
            "policy": list(self.policy.actions),
            "iterations": self.iterations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check(mdp: TabularMdp, tol: float) -> None:
    if not tol > 0:
        raise MdpError("tolerance must be positive")


def robust_value_iteration(mdp: TabularMdp, regions: RegionTable = None, constrained: bool = False,
                           tol: float = 1e-10, max_iter: int = 1_000_000) -> DpResult:
    """Iterate ``v <- min_a Q(v)`` until the sup-norm change is at most
    ``tol * (1 - discount) / discount``, which bounds the distance to the
    fixed point by ``tol`` whenever the operator is a discount-contraction.
    """
    _check(mdp, tol)
    backup = RobustBackup(mdp, regions, constrained)
    stop = tol * (1.0 - mdp.discount) / mdp.discount
    v = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        q = q_from_value(mdp, backup, v)
        nxt = q.min(axis=1)
        delta = np.abs(nxt - v).max()
        v = nxt
        if delta <= stop:
            break
    else:
        raise MdpError("value iteration did not converge")
    q = q_from_value(mdp, backup, v)
    return DpResult(v, q, DeterministicPolicy(tuple(greedy_actions(q))), it)


def robust_policy_evaluation(mdp: TabularMdp, regions: RegionTable, policy: DeterministicPolicy,
                             constrained: bool = False, tol: float = 1e-10,
                             max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of ``v(i) = c(i, pi(i)) + discount * S_{i, pi(i)}(v)``."""
    _check(mdp, tol)
    backup = RobustBackup(mdp, regions, constrained)
    acts = np.asarray(policy.actions)
    if acts.shape != (mdp.n_states,):
        raise MdpError("policy length does not match the number of states")
    rows = np.arange(mdp.n_states)
    stop = tol * (1.0 - mdp.discount) / mdp.discount
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        nxt = q_from_value(mdp, backup, v)[rows, acts]
        delta = np.abs(nxt - v).max()
        v = nxt
        if delta <= stop:
            return v
    raise MdpError("policy evaluation did not converge")
