"""Small benchmark environments built as explicit tabular MDPs."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Literal

import numpy as np

from .mdp import MdpError, TabularMdp, make_rng

# action order: left, down, right, up
MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
CELL_KINDS = set("SFHG")


def load_layout(name: str) -> list[str]:
    """Read a shipped map such as ``"frozenlake_4x4"``; ``#`` lines are comments."""
    text = resources.files("robustrl.data").joinpath(f"{name}.txt").read_text()
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@dataclass(frozen=True)
class GridWorldSpec:
    layout: tuple[str, ...]
    slip: Literal["deterministic", "slippery"] = "slippery"
    step_cost: float = 0.0
    hole_cost: float = 0.0
    goal_reward: float = 1.0
    discount: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(self.layout))
        if not self.layout:
            raise MdpError("empty map")
        width = len(self.layout[0])
        starts = 0
        goals = 0
        for r, row in enumerate(self.layout):
            if len(row) != width:
                raise MdpError(f"map row {r} has length {len(row)}, expected {width}")
            for c, ch in enumerate(row):
                if ch not in CELL_KINDS:
                    raise MdpError(f"unknown cell {ch!r} at row {r}, col {c}")
                starts += ch == "S"
                goals += ch == "G"
        if starts != 1:
            raise MdpError(f"map needs exactly one S, found {starts}")
        if goals < 1:
            raise MdpError("map needs at least one G")
        if self.slip not in ("deterministic", "slippery"):
            raise MdpError(f"unknown slip model {self.slip!r}")

    @classmethod
    def named(cls, name: str, **kw) -> "GridWorldSpec":
        return cls(tuple(load_layout(name)), **kw)


def make_gridworld(spec: GridWorldSpec) -> TabularMdp:
    """Grid cells in row-major order plus one absorbing state at the end.

    Moves off the grid leave the agent in place.  Any action taken on a hole
    or goal cell leads to the absorbing state and pays ``hole_cost`` or
    ``-goal_reward``; every other action pays ``step_cost``.
    """
    rows, cols = len(spec.layout), len(spec.layout[0])
    n = rows * cols + 1
    sink = n - 1
    P = np.zeros((4, n, n))
    cost = np.zeros((n, 4))
    P[:, sink, sink] = 1.0
    start = 0
    for r in range(rows):
        for c in range(cols):
            s = r * cols + c
            ch = spec.layout[r][c]
            if ch == "S":
                start = s
            if ch in "HG":
                P[:, s, sink] = 1.0
                cost[s, :] = spec.hole_cost if ch == "H" else -spec.goal_reward
                continue
            cost[s, :] = spec.step_cost
            for a in range(4):
                outcomes = (a,) if spec.slip == "deterministic" else ((a - 1) % 4, a, (a + 1) % 4)
                for b in outcomes:
                    dr, dc = MOVES[b]
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < rows and 0 <= cc < cols):
                        rr, cc = r, c
                    P[a, s, rr * cols + cc] += 1.0 / len(outcomes)
    return TabularMdp(cost, P, spec.discount, terminal=(sink,), start=start)


@dataclass(frozen=True)
class ChainSpec:
    length: int = 5
    slip: float = 0.2
    forward_reward: float = 10.0
    backward_reward: float = 2.0
    discount: float = 0.95

    def __post_init__(self):
        if self.length < 2:
            raise MdpError("chain length must be at least 2")
        if not 0.0 <= self.slip <= 1.0:
            raise MdpError("slip must lie in [0, 1]")


def make_nchain(spec: ChainSpec) -> TabularMdp:
    """Action 0 moves forward (paying ``forward_reward`` only at the last
    state, where it stays), action 1 returns to state 0 with
    ``backward_reward``.  With probability ``slip`` the other action happens.
    Costs are negated expected rewards.
    """
    n = spec.length
    P = np.zeros((2, n, n))
    reward = np.zeros((n, 2))
    for i in range(n):
        fwd = min(i + 1, n - 1)
        r_fwd = spec.forward_reward if i == n - 1 else 0.0
        for a in range(2):
            p_fwd = 1.0 - spec.slip if a == 0 else spec.slip
            P[a, i, fwd] += p_fwd
            P[a, i, 0] += 1.0 - p_fwd
            reward[i, a] = p_fwd * r_fwd + (1.0 - p_fwd) * spec.backward_reward
    return TabularMdp(-reward, P, spec.discount)


def perturb(mdp: TabularMdp, p: float) -> TabularMdp:
    """Blend every row with the uniform distribution: ``(1 - p) P + p / n``."""
    if not 0.0 <= p <= 1.0:
        raise MdpError("perturbation probability must lie in [0, 1]")
    if p == 0.0:
        trans = mdp.transitions
    else:
        trans = (1.0 - p) * mdp.transitions + p / mdp.n_states
    return TabularMdp(mdp.cost, trans, mdp.discount, mdp.terminal, mdp.start)


@dataclass
class PerturbedSampler:
    """Sampling-time version of :func:`perturb`: with probability ``p`` the
    next state is uniform, otherwise it follows the nominal row."""

    mdp: TabularMdp
    p: float
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._cum = np.cumsum(self.mdp.transitions, axis=2)
        self._cum[:, :, -1] = 1.0

    def __call__(self, i: int, a: int, rng: np.random.Generator) -> int:
        if rng.random() < self.p:
            return int(rng.integers(self.mdp.n_states))
        return int(np.searchsorted(self._cum[a, i], rng.random(), side="right"))


def random_mdp(n: int, m: int, branching: int, seed: int, discount: float = 0.9) -> TabularMdp:
    """Random MDP whose rows have ``branching`` nonzero entries with
    Dirichlet(1) weights; costs uniform on [0, 1]."""
    if not 1 <= branching <= n:
        raise MdpError("branching must lie in [1, n]")
    rng = make_rng(seed)
    P = np.zeros((m, n, n))
    for a in range(m):
        for i in range(n):
            succ = rng.choice(n, size=branching, replace=False)
            w = rng.gamma(1.0, size=branching)
            P[a, i, succ] = w / w.sum()
    cost = rng.random((n, m))
    return TabularMdp(cost, P, discount)
