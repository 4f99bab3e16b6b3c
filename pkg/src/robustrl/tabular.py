"""Sample-based robust learners: Q-learning, SARSA and TD(lambda).

Each learner has a small reference update (``robust_q_update`` and friends,
numpy in, numpy out) and a fast driver loop over plain Python lists.  Tests
check that the two agree.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .mdp import (
    DeterministicPolicy,
    MdpError,
    StepSchedule,
    StoppingRule,
    TabularMdp,
    TransitionSampler,
    validate_schedule,
)
from .robust_dp import RegionTable, is_shared, region_at
from .uncertainty import ConfidenceRegion, Ellipsoid, L1Ball, L2Ball, beta_table

TraceVariant = Literal["every-visit", "restart"]

# ---------------------------------------------------------------------------
# reference updates


def _sigma(region: ConfidenceRegion | None, v: np.ndarray) -> float:
    return 0.0 if region is None else region.value(np.asarray(v, dtype=float))


def robust_q_update(q: np.ndarray, i: int, a: int, j: int, cost: float, gamma: float,
                    region: ConfidenceRegion | None, discount: float) -> np.ndarray:
    """``q(i,a) <- (1-gamma) q(i,a) + gamma (cost + discount sigma(v) + discount min q(j,.))``."""
    if not 0.0 < gamma <= 1.0:
        raise MdpError("step size must lie in (0, 1]")
    out = np.array(q, dtype=float)
    v = out.min(axis=1)
    target = cost + discount * _sigma(region, v) + discount * v[j]
    out[i, a] = (1.0 - gamma) * out[i, a] + gamma * target
    return out


def robust_sarsa_update(q: np.ndarray, i: int, a: int, j: int, a_next: int, cost: float,
                        gamma: float, region: ConfidenceRegion | None, discount: float) -> np.ndarray:
    """Like :func:`robust_q_update` but bootstraps from ``q(j, a_next)``."""
    if not 0.0 < gamma <= 1.0:
        raise MdpError("step size must lie in (0, 1]")
    out = np.array(q, dtype=float)
    v = out.min(axis=1)
    target = cost + discount * _sigma(region, v) + discount * out[j, a_next]
    out[i, a] = (1.0 - gamma) * out[i, a] + gamma * target
    return out


def robust_td_error(v: np.ndarray, i: int, j: int, cost: float, discount: float,
                    region: ConfidenceRegion | None) -> float:
    v = np.asarray(v, dtype=float)
    return float(cost + discount * v[j] + discount * _sigma(region, v) - v[i])


@dataclass(frozen=True)
class EligibilityTraces:
    z: np.ndarray
    variant: TraceVariant
    discount: float
    lam: float

    @classmethod
    def fresh(cls, n: int, variant: TraceVariant, discount: float, lam: float) -> "EligibilityTraces":
        if variant not in ("every-visit", "restart"):
            raise MdpError(f"unknown trace variant {variant!r}")
        if not 0.0 <= lam <= 1.0:
            raise MdpError("lambda must lie in [0, 1]")
        return cls(np.zeros(n), variant, discount, lam)


def trace_update(tr: EligibilityTraces, visited: int) -> EligibilityTraces:
    z = tr.discount * tr.lam * tr.z
    if tr.variant == "every-visit":
        z[visited] += 1.0
    else:
        z[visited] = 1.0
    return EligibilityTraces(z, tr.variant, tr.discount, tr.lam)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TabularLearnerConfig:
    schedule: StepSchedule = StepSchedule(1.0, 1.0, 0.7)
    exploration: float = 0.2
    region: RegionTable = None
    trace: TraceVariant = "every-visit"
    lam: float = 0.5
    steps: int = 100_000
    episodes: int = 10_000
    stop: StoppingRule | None = None
    episode_cap_factor: int = 10
    exploring_starts: bool = True
    online: bool = False
    checkpoint_every: int = 0
    discount: float | None = None
    beta_samples: int = 0

    def __post_init__(self):
        ok, msg = validate_schedule(self.schedule)
        if not ok:
            raise MdpError(f"invalid step schedule: {msg}")
        if not 0.0 <= self.exploration <= 1.0:
            raise MdpError("exploration must lie in [0, 1]")
        if self.trace not in ("every-visit", "restart"):
            raise MdpError(f"unknown trace variant {self.trace!r}")


@dataclass
class LearnerResult:
    table: np.ndarray
    checkpoints: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def distance(self) -> float | None:
        return self.checkpoints[-1]["distance_to_oracle"] if self.checkpoints else None


def _precondition_warnings(mdp: TabularMdp, cfg: TabularLearnerConfig, discount: float,
                           rng: np.random.Generator) -> list[str]:
    if cfg.region is None or cfg.beta_samples <= 0:
        return []
    beta = beta_table(mdp, cfg.region, cfg.beta_samples, rng)
    if discount * (1.0 + beta) >= 1.0:
        msg = f"discount*(1+beta_hat) = {discount * (1 + beta):.4f} >= 1 (beta_hat = {beta:.4f})"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return [msg]
    return []


# ---------------------------------------------------------------------------
# fast support-value tracking


class _SigmaTracker:
    """``sigma_{i,a}(v)`` kept current while ``v`` changes one entry at a time."""

    RESYNC = 1 << 16

    def __init__(self, regions: RegionTable, n: int, m: int, v: list[float]):
        self.n, self.m = n, m
        self.regions = regions
        self.v = v
        self.mode = "none"
        self.dirty = True
        self.cached = 0.0
        self.updates = 0
        if regions is None:
            return
        if isinstance(regions, L2Ball) and regions.zero_sum:
            self.mode = "l2"
            self.r = regions.radius
            self._resync()
        elif isinstance(regions, L1Ball) and regions.zero_sum:
            self.mode = "l1"
            self.r = regions.radius
        elif is_shared(regions):
            self.mode = "shared"
        elif self._diag_table(regions):
            self.mode = "diag"
            self._resync()
        else:
            self.mode = "table"

    def _diag_table(self, regions) -> bool:
        w = np.zeros((self.n, self.m, self.n))
        for i in range(self.n):
            for a in range(self.m):
                reg = region_at(regions, i, a)
                if reg is None:
                    continue
                if isinstance(reg, L2Ball) and reg.zero_sum:
                    w[i, a] = reg.radius ** 2
                elif (isinstance(reg, Ellipsoid) and reg.zero_sum
                      and np.count_nonzero(reg.matrix - np.diag(np.diag(reg.matrix))) == 0):
                    w[i, a] = 1.0 / np.diag(reg.matrix)
                else:
                    return False
        # sigma^2 = sum w v^2 - (sum w v)^2 / sum w  for diagonal ellipsoids
        self.w = w
        self.wsum = w.sum(axis=2)
        self.wsum[self.wsum == 0] = 1.0
        return True

    def _resync(self):
        v = self.v
        if self.mode == "l2":
            self.s1 = math.fsum(v)
            self.s2 = math.fsum(x * x for x in v)
        elif self.mode == "diag":
            va = np.asarray(v)
            self.S1 = self.w @ va
            self.S2 = self.w @ (va * va)
        self.updates = 0

    def changed(self, k: int, old: float, new: float) -> None:
        self.dirty = True
        if self.mode == "l2":
            self.s1 += new - old
            self.s2 += new * new - old * old
        elif self.mode == "diag":
            col = self.w[:, :, k]
            self.S1 += col * (new - old)
            self.S2 += col * (new * new - old * old)
        else:
            return
        self.updates += 1
        if self.updates >= self.RESYNC:
            self._resync()

    def value(self, i: int, a: int) -> float:
        mode = self.mode
        if mode == "none":
            return 0.0
        if mode == "l2":
            var = self.s2 - self.s1 * self.s1 / self.n
            return self.r * math.sqrt(var) if var > 0.0 else 0.0
        if mode == "diag":
            s1 = self.S1[i, a]
            var = self.S2[i, a] - s1 * s1 / self.wsum[i, a]
            return math.sqrt(var) if var > 0.0 else 0.0
        if mode == "table":
            reg = region_at(self.regions, i, a)
            return 0.0 if reg is None else reg.value(np.asarray(self.v))
        if self.dirty:
            if mode == "l1":
                self.cached = self.r / 2 * (max(self.v) - min(self.v))
            else:
                self.cached = self.regions.value(np.asarray(self.v))
            self.dirty = False
        return self.cached


class _Uniforms:
    """Uniform draws pulled from ``rng`` in blocks."""

    def __init__(self, rng: np.random.Generator, block: int = 1 << 15):
        self.rng, self.block = rng, block
        self.buf: list[float] = []
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= len(self.buf):
            self.buf = self.rng.random(self.block).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


def _argmin(row: list[float]) -> int:
    best, k = row[0], 0
    for idx in range(1, len(row)):
        if row[idx] < best:
            best, k = row[idx], idx
    return k


def _distance(table, oracle) -> float:
    return float(np.abs(np.asarray(table) - oracle).max())


# ---------------------------------------------------------------------------
# Q-learning and SARSA


def _q_driver(mdp: TabularMdp, cfg: TabularLearnerConfig, rng: np.random.Generator,
              oracle_q: np.ndarray | None, sarsa: bool) -> LearnerResult:
    n, m = mdp.n_states, mdp.n_actions
    discount = mdp.discount if cfg.discount is None else cfg.discount
    warns = _precondition_warnings(mdp, cfg, discount, rng)
    cost = mdp.cost.tolist()
    terminal = [False] * n
    for s in mdp.terminal:
        terminal[s] = True
    starts = [s for s in range(n) if not terminal[s]]
    if not starts:
        raise MdpError("every state is terminal")
    sample = TransitionSampler(mdp.transitions)
    uni = _Uniforms(rng)
    q = [[0.0] * m for _ in range(n)]
    v = [0.0] * n
    counts = [[0] * m for _ in range(n)]
    sig = _SigmaTracker(cfg.region, n, m, v)
    sa, sb, se = cfg.schedule.a, cfg.schedule.b, cfg.schedule.e
    delta = cfg.exploration
    cap = cfg.episode_cap_factor * n
    checkpoints: list[dict] = []
    every = cfg.checkpoint_every

    def choose(state):
        if delta > 0.0 and uni() < delta:
            return min(int(uni() * m), m - 1)
        return _argmin(q[state])

    def new_start():
        if cfg.exploring_starts:
            return starts[min(int(uni() * len(starts)), len(starts) - 1)]
        return mdp.start

    state = new_start()
    action = choose(state)
    ep_len = 0
    for t in range(1, cfg.steps + 1):
        i, a = state, action
        j = sample(i, a, uni())
        counts[i][a] += 1
        gamma = sa / (sb + counts[i][a] - 1) ** se
        if gamma > 1.0:
            gamma = 1.0
        robust = discount * sig.value(i, a)
        ep_len += 1
        end = terminal[j] or ep_len >= cap
        if sarsa:
            a_next = choose(j)
            boot = q[j][a_next]
        else:
            boot = v[j]
        row = q[i]
        row[a] = (1.0 - gamma) * row[a] + gamma * (cost[i][a] + robust + discount * boot)
        old = v[i]
        new = min(row)
        if new != old:
            v[i] = new
            sig.changed(i, old, new)
        if every and t % every == 0:
            cp = {"step": t}
            if oracle_q is not None:
                cp["distance_to_oracle"] = _distance(q, oracle_q)
            checkpoints.append(cp)
        if end:
            state = new_start()
            action = choose(state)
            ep_len = 0
        else:
            state = j
            action = a_next if sarsa else choose(j)
    table = np.array(q)
    if oracle_q is not None and (not checkpoints or checkpoints[-1]["step"] != cfg.steps):
        checkpoints.append({"step": cfg.steps, "distance_to_oracle": _distance(table, oracle_q)})
    return LearnerResult(table, checkpoints, warns, {"visit_counts": np.array(counts)})


def robust_q_learning(mdp: TabularMdp, cfg: TabularLearnerConfig, rng: np.random.Generator,
                      oracle_q: np.ndarray | None = None) -> LearnerResult:
    """Delta-greedy robust Q-learning with per-pair visit-count step sizes.

    ``cfg.region=None`` gives classical Q-learning on the same random stream.
    """
    return _q_driver(mdp, cfg, rng, oracle_q, sarsa=False)


def robust_sarsa(mdp: TabularMdp, cfg: TabularLearnerConfig, rng: np.random.Generator,
                 oracle_q: np.ndarray | None = None) -> LearnerResult:
    return _q_driver(mdp, cfg, rng, oracle_q, sarsa=True)


# ---------------------------------------------------------------------------
# TD(lambda)


def _simulate(start, policy_actions, sample, uni, terminal, cap, stop: StoppingRule | None):
    states, nexts = [], []
    i = start
    while True:
        if stop is not None and stop.horizon is not None and len(states) >= stop.horizon:
            break
        if terminal[i] or (stop is None and len(states) >= cap):
            break
        a = policy_actions[i]
        j = sample(i, a, uni())
        states.append(i)
        nexts.append(j)
        i = j
        if stop is not None and stop.kind == "geometric" and uni() < stop.stop_prob:
            break
    return states, nexts


def trace_sums(states: list[int], values: list[float], decay: float, variant: TraceVariant,
               n: int) -> list[float]:
    """``sum_m z_m(i) * values[m]`` for every state ``i`` in one backward pass.

    Equivalent to running :func:`trace_update` along ``states`` and
    accumulating, but linear in the trajectory length.
    """
    out = [0.0] * n
    N = len(states)
    if N == 0:
        return out
    # G[k] = sum_{m >= k} decay^(m-k) values[m]
    G = [0.0] * (N + 1)
    acc = 0.0
    for k in range(N - 1, -1, -1):
        acc = values[k] + decay * acc
        G[k] = acc
    if variant == "every-visit":
        for k in range(N):
            out[states[k]] += G[k]
        return out
    nxt = {}
    for k in range(N - 1, -1, -1):
        s = states[k]
        stop = nxt.get(s)
        if stop is None:
            out[s] += G[k]
        else:
            out[s] += G[k] - decay ** (stop - k) * G[stop]
        nxt[s] = k
    return out


def robust_td_lambda(mdp: TabularMdp, policy: DeterministicPolicy, cfg: TabularLearnerConfig,
                     rng: np.random.Generator, oracle_v: np.ndarray | None = None) -> LearnerResult:
    """Robust TD(lambda) evaluation of a deterministic policy.

    One update per simulated episode: ``v += gamma_t * sum_m z_m * d_m`` with
    every TD error ``d_m`` computed from the value table frozen at the
    start of the episode.  ``cfg.online=True`` updates after every step.
    """
    n = mdp.n_states
    discount = mdp.discount if cfg.discount is None else cfg.discount
    warns = _precondition_warnings(mdp, cfg, discount, rng)
    acts = list(policy.actions)
    if len(acts) != n:
        raise MdpError("policy length does not match the number of states")
    cost = [float(mdp.cost[i, acts[i]]) for i in range(n)]
    terminal = [False] * n
    for s in mdp.terminal:
        terminal[s] = True
    starts = [s for s in range(n) if not terminal[s]]
    sample = TransitionSampler(mdp.transitions)
    uni = _Uniforms(rng)
    cap = cfg.episode_cap_factor * n
    stop = cfg.stop
    if stop is not None:
        stop.check(mdp)
    decay = discount * cfg.lam
    v = np.zeros(n)
    checkpoints: list[dict] = []
    every = cfg.checkpoint_every
    trace_mass_max = 0.0
    longest = 0
    for t in range(cfg.episodes):
        gamma = min(cfg.schedule(t), 1.0)
        start = starts[min(int(uni() * len(starts)), len(starts) - 1)] if cfg.exploring_starts else mdp.start
        states, nexts = _simulate(start, acts, sample, uni, terminal, cap, stop)
        if cfg.online:
            _online_episode(v, states, nexts, cost, acts, gamma, discount, cfg)
        elif states:
            vl = v.tolist()
            robust = discount * _sigma(region_at(cfg.region, 0, 0), v) if is_shared(cfg.region) else None
            d = []
            for i, j in zip(states, nexts):
                s = robust if robust is not None else discount * _sigma(region_at(cfg.region, i, acts[i]), v)
                d.append(cost[i] + discount * vl[j] - vl[i] + s)
            upd = trace_sums(states, d, decay, cfg.trace, n)
            v += gamma * np.asarray(upd)
            mass = max(trace_sums(states, [1.0] * len(states), decay, cfg.trace, n))
            if mass > trace_mass_max:
                trace_mass_max = mass
        longest = max(longest, len(states))
        if every and (t + 1) % every == 0:
            cp = {"step": t + 1}
            if oracle_v is not None:
                cp["distance_to_oracle"] = _distance(v, oracle_v)
            checkpoints.append(cp)
    if oracle_v is not None and (not checkpoints or checkpoints[-1]["step"] != cfg.episodes):
        checkpoints.append({"step": cfg.episodes, "distance_to_oracle": _distance(v, oracle_v)})
    return LearnerResult(v, checkpoints, warns,
                         {"trace_mass_max": trace_mass_max, "longest_episode": longest})


def _online_episode(v, states, nexts, cost, acts, gamma, discount, cfg):
    tr = EligibilityTraces.fresh(len(v), cfg.trace, discount, cfg.lam)
    for i, j in zip(states, nexts):
        tr = trace_update(tr, i)
        reg = region_at(cfg.region, i, acts[i])
        d = cost[i] + discount * v[j] - v[i] + discount * _sigma(reg, v)
        v += gamma * d * tr.z
