"""Finite MDPs, policies, trajectories and step-size schedules.

Costs are minimized throughout.  Transition tensors are stored dense as
``transitions[a, i, j]``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_TOL = 1e-9


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based (Philox) generator; every stochastic routine takes one explicitly."""
    return np.random.Generator(np.random.Philox(seed))


def split_rng(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child generators derived from one integer seed."""
    return [make_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


class MdpError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Explicit finite MDP.

    ``terminal`` lists absorbing states whose value is pinned to zero; episodes
    end on reaching them.  ``start`` is the default initial state.
    """

    cost: np.ndarray
    transitions: np.ndarray
    discount: float
    terminal: tuple[int, ...] = ()
    start: int = 0

    def __post_init__(self):
        cost = np.array(self.cost, dtype=float)
        trans = np.array(self.transitions, dtype=float)
        if trans.ndim != 3 or trans.shape[1] != trans.shape[2]:
            raise MdpError(f"transitions must have shape (m, n, n), got {trans.shape}")
        m, n, _ = trans.shape
        if cost.shape != (n, m):
            raise MdpError(f"cost must have shape ({n}, {m}), got {cost.shape}")
        if not np.all(np.isfinite(cost)):
            raise MdpError("costs must be finite")
        if not 0.0 < self.discount < 1.0:
            raise MdpError(f"discount must lie in (0, 1), got {self.discount}")
        if np.any(trans < 0.0) or np.any(trans > 1.0):
            raise MdpError("transition probabilities must lie in [0, 1]")
        rowsum = trans.sum(axis=2)
        bad = np.argwhere(np.abs(rowsum - 1.0) > ROW_TOL)
        if len(bad):
            a, i = bad[0]
            raise MdpError(f"row p[{a}][{i}] sums to {rowsum[a, i]!r}, not 1")
        terminal = tuple(sorted(int(s) for s in self.terminal))
        if any(not 0 <= s < n for s in terminal):
            raise MdpError("terminal state out of range")
        if not 0 <= self.start < n:
            raise MdpError("start state out of range")
        cost.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "terminal", terminal)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def nonterminal(self) -> np.ndarray:
        mask = np.ones(self.n_states, dtype=bool)
        mask[list(self.terminal)] = False
        return mask

    def policy_matrix(self, policy: "Policy") -> np.ndarray:
        """State-to-state matrix induced by ``policy`` (stochastic policies averaged)."""
        probs = policy.action_probabilities(self.n_states, self.n_actions)
        return np.einsum("ia,aij->ij", probs, self.transitions)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "cost": self.cost.ravel().tolist(),
            "transitions": self.transitions.ravel().tolist(),
            "terminal": list(self.terminal),
            "start": self.start,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        try:
            n, m = int(doc["n_states"]), int(doc["n_actions"])
            cost = np.asarray(doc["cost"], dtype=float).reshape(n, m)
            trans = np.asarray(doc["transitions"], dtype=float).reshape(m, n, n)
            discount = float(doc["discount"])
        except KeyError as exc:
            raise MdpError(f"missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise MdpError(str(exc)) from None
        return cls(cost, trans, discount, tuple(doc.get("terminal", ())), int(doc.get("start", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Policy:
    def action(self, state: int, rng: np.random.Generator | None = None) -> int:
        raise NotImplementedError

    def action_probabilities(self, n_states: int, n_actions: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class DeterministicPolicy(Policy):
    actions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))

    def action(self, state, rng=None):
        return self.actions[state]

    def action_probabilities(self, n_states, n_actions):
        if len(self.actions) != n_states or max(self.actions) >= n_actions or min(self.actions) < 0:
            raise MdpError("policy does not match the MDP's state/action counts")
        probs = np.zeros((n_states, n_actions))
        probs[np.arange(n_states), self.actions] = 1.0
        return probs


def greedy_actions(q: np.ndarray) -> np.ndarray:
    # np.argmin breaks ties at the lowest index
    return np.argmin(q, axis=1)


@dataclass(frozen=True, eq=False)
class EpsilonGreedyPolicy(Policy):
    """With probability ``delta`` a uniform action, otherwise the cost-greedy one."""

    q: np.ndarray
    delta: float

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise MdpError("exploration probability must lie in [0, 1]")

    def action(self, state, rng=None):
        m = self.q.shape[1]
        if self.delta > 0.0 and rng.random() < self.delta:
            return int(rng.integers(m))
        return int(np.argmin(self.q[state]))

    def action_probabilities(self, n_states, n_actions):
        probs = np.full((n_states, n_actions), self.delta / n_actions)
        probs[np.arange(n_states), greedy_actions(self.q)] += 1.0 - self.delta
        return probs


@dataclass(frozen=True)
class UniformPolicy(Policy):
    n_actions: int

    def action(self, state, rng=None):
        return int(rng.integers(self.n_actions))

    def action_probabilities(self, n_states, n_actions):
        return np.full((n_states, n_actions), 1.0 / n_actions)


@dataclass(frozen=True)
class Step:
    state: int
    action: int
    cost: float
    next_state: int


@dataclass
class Trajectory:
    steps: list[Step] = field(default_factory=list)
    terminal: bool = False

    def __len__(self):
        return len(self.steps)

    def states(self) -> list[int]:
        return [s.state for s in self.steps]

    def is_chained(self) -> bool:
        return all(a.next_state == b.state for a, b in zip(self.steps, self.steps[1:]))


@dataclass(frozen=True)
class StoppingRule:
    """How a rollout ends: fixed ``horizon``, an absorbing-state hit, or a
    geometric coin with stop probability ``stop_prob`` after every step.

    Absorbing and geometric rules may carry a ``horizon`` cap too.
    """

    kind: str = "horizon"
    horizon: int | None = None
    stop_prob: float | None = None

    def __post_init__(self):
        if self.kind not in ("horizon", "absorbing", "geometric"):
            raise MdpError(f"unknown stopping rule {self.kind!r}")
        if self.kind == "horizon" and (self.horizon is None or self.horizon < 0):
            raise MdpError("horizon rule needs a non-negative horizon")
        if self.kind == "geometric" and not (self.stop_prob is not None and 0.0 < self.stop_prob < 1.0):
            raise MdpError("geometric rule needs stop_prob in (0, 1)")

    def check(self, mdp: TabularMdp) -> None:
        if self.kind == "absorbing" and not mdp.terminal and self.horizon is None:
            raise MdpError("absorbing-state rule on an MDP without terminal states never stops; add a horizon")


class TransitionSampler:
    """Inverse-CDF sampler over the rows of a transition tensor.

    Equivalent in law to :func:`sample_transition`; kept as plain Python lists
    because the learners call it millions of times.
    """

    def __init__(self, transitions: np.ndarray):
        cum = np.cumsum(transitions, axis=2)
        cum[:, :, -1] = 1.0
        self.cum = cum.tolist()

    def __call__(self, i: int, a: int, u: float) -> int:
        return bisect.bisect_right(self.cum[a][i], u)


def sample_transition(mdp: TabularMdp, i: int, a: int, rng: np.random.Generator) -> int:
    if not (0 <= i < mdp.n_states and 0 <= a < mdp.n_actions):
        raise IndexError(f"state/action ({i}, {a}) out of range")
    cum = np.cumsum(mdp.transitions[a, i])
    cum[-1] = 1.0
    return int(np.searchsorted(cum, rng.random(), side="right"))


def rollout(mdp: TabularMdp, policy: Policy, start: int, stop: StoppingRule,
            rng: np.random.Generator) -> Trajectory:
    stop.check(mdp)
    terminal = set(mdp.terminal)
    traj = Trajectory()
    state = start
    while True:
        if stop.horizon is not None and len(traj) >= stop.horizon:
            break
        if stop.kind == "absorbing" and state in terminal:
            traj.terminal = True
            break
        action = policy.action(state, rng)
        nxt = sample_transition(mdp, state, action, rng)
        traj.steps.append(Step(state, action, float(mdp.cost[state, action]), nxt))
        state = nxt
        if stop.kind == "geometric" and rng.random() < stop.stop_prob:
            break
    return traj


def _strongly_connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    for graph in (adj, adj.T):
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            k = frontier.pop()
            for j in np.flatnonzero(graph[k] & ~seen):
                seen[j] = True
                frontier.append(j)
        if not seen.all():
            return False
    return True


def _aperiodic(adj: np.ndarray) -> bool:
    # period = gcd of (level[i] + 1 - level[j]) over edges, with BFS levels from state 0
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    order = [0]
    for k in order:
        for j in np.flatnonzero(adj[k]):
            if level[j] < 0:
                level[j] = level[k] + 1
                order.append(j)
    period = 0
    for i, j in zip(*np.nonzero(adj)):
        period = math.gcd(period, int(abs(level[i] + 1 - level[j])))
    return period == 1


def steady_state_distribution(matrix: np.ndarray, tol: float = 1e-10,
                              max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution of an irreducible aperiodic chain by power iteration.

    Stops when the l1 residual ``|xi P - xi|_1`` is at most ``tol``.
    """
    P = np.asarray(matrix, dtype=float)
    n = P.shape[0]
    if P.shape != (n, n) or np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > ROW_TOL):
        raise MdpError("matrix is not row-stochastic")
    adj = P > 0
    if not _strongly_connected(adj):
        raise MdpError("chain is reducible (not strongly connected)")
    if not _aperiodic(adj):
        raise MdpError("chain is periodic")
    xi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = xi @ P
        nxt /= nxt.sum()
        if np.abs(nxt - xi).sum() <= tol * 0.1:
            xi = nxt
            break
        xi = nxt
    if np.abs(xi @ P - xi).sum() > tol:
        raise MdpError("power iteration did not reach the residual tolerance")
    return xi


@dataclass(frozen=True)
class StepSchedule:
    """Power-law step sizes ``a / (b + t) ** e``."""

    a: float = 1.0
    b: float = 1.0
    e: float = 1.0

    def __call__(self, t: int | np.ndarray) -> float:
        return self.a / (self.b + t) ** self.e


def validate_schedule(s: StepSchedule) -> tuple[bool, str]:
    if not s.a > 0:
        return False, f"scale a={s.a} must be positive"
    if s.b < 1:
        return False, f"offset b={s.b} must be at least 1"
    if s.e <= 0.5:
        return False, f"exponent e={s.e} <= 0.5: sum of squared steps diverges"
    if s.e > 1.0:
        return False, f"exponent e={s.e} > 1: sum of steps is finite"
    return True, "ok"


def check_two_timescale(slow: StepSchedule, fast: StepSchedule) -> tuple[bool, str]:
    """``slow/fast -> 0`` holds iff the slow exponent is strictly larger."""
    for name, s in (("slow", slow), ("fast", fast)):
        ok, msg = validate_schedule(s)
        if not ok:
            return False, f"{name}: {msg}"
    if slow.e <= fast.e:
        return False, f"slow exponent {slow.e} must exceed fast exponent {fast.e}"
    return True, "ok"


def policy_from_actions(actions: Sequence[int]) -> DeterministicPolicy:
    return DeterministicPolicy(tuple(int(a) for a in actions))
