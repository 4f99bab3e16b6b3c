"""Experiment orchestration: train on a perturbed model, evaluate on the true one.

Everything here is deterministic given the config and seed list; reports
carry no timestamps and are written with sorted keys.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .envs import ChainSpec, GridWorldSpec, load_layout, make_gridworld, make_nchain, perturb, random_mdp
from .fa_linear import GtdConfig, make_problem, run_linear_gtd
from .fa_nonlinear import QuadraticFeatureModel, run_nonlinear_gtd
from .mdp import (
    DeterministicPolicy,
    MdpError,
    StepSchedule,
    TabularMdp,
    TransitionSampler,
    greedy_actions,
    make_rng,
    steady_state_distribution,
)
from .robust_dp import RegionTable, RobustBackup, robust_value_iteration
from .tabular import TabularLearnerConfig, robust_q_learning, robust_sarsa, robust_td_lambda
from .uncertainty import Ellipsoid, L1Ball, L2Ball, Parallelepiped

SCHEMA_VERSION = 1

ALGORITHMS = (
    "robust-q", "nominal-q", "robust-sarsa", "nominal-sarsa", "robust-td", "nominal-td",
    "robust-gtd2", "robust-tdc", "robust-nl-gtd2", "robust-nl-tdc",
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridEnv(_Strict):
    kind: Literal["gridworld"]
    layout: Union[str, list[str]] = "frozenlake_4x4"
    slip: Literal["deterministic", "slippery"] = "slippery"
    step_cost: float = 0.0
    hole_cost: float = 0.0
    goal_reward: float = 1.0
    discount: float = 0.95


class ChainEnv(_Strict):
    kind: Literal["nchain"]
    length: int = 5
    slip: float = 0.2
    forward_reward: float = 10.0
    backward_reward: float = 2.0
    discount: float = 0.95


class RandomEnv(_Strict):
    kind: Literal["random"]
    n_states: int = 5
    n_actions: int = 2
    branching: int = 5
    seed: int = 0
    discount: float = 0.9
    mix: float = Field(0.0, ge=0.0, le=1.0, description="uniform blend baked into the instance")


class FileEnv(_Strict):
    kind: Literal["file"]
    path: str


EnvSpec = Annotated[Union[GridEnv, ChainEnv, RandomEnv, FileEnv], Field(discriminator="kind")]


class RegionSpec(_Strict):
    """``l2``/``l1``: shared balls of the given radius.  ``ellipsoid`` and
    ``parallelepiped`` scale a shape matrix (``A / r^2`` and ``B / r``).
    ``chi2``: per-pair diagonal ellipsoids ``sum_j x_j^2 / p_j <= r^2`` built
    from the training model's rows."""

    family: Literal["l2", "l1", "ellipsoid", "parallelepiped", "chi2"] = "l2"
    radius: float | None = Field(None, ge=0.0)
    radius_grid: list[float] | None = None
    matrix: list[list[float]] | None = None

    @field_validator("radius_grid")
    @classmethod
    def _grid_increasing(cls, grid):
        if grid is not None:
            if any(r < 0 for r in grid):
                raise ValueError("radii must be non-negative")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("radius grid must be strictly increasing")
        return grid

    @model_validator(mode="after")
    def _matrix_needed(self):
        if self.family in ("ellipsoid", "parallelepiped") and self.matrix is None:
            raise ValueError(f"{self.family} family needs a shape matrix")
        return self


class ScheduleSpec(_Strict):
    a: float = 1.0
    b: float = 1.0
    e: float = 0.7

    def build(self) -> StepSchedule:
        return StepSchedule(self.a, self.b, self.e)


class LearnerSpec(_Strict):
    steps: int = Field(100_000, ge=1)
    episodes: int = Field(5_000, ge=1)
    exploration: float = Field(0.2, ge=0.0, le=1.0)
    schedule: ScheduleSpec = ScheduleSpec()
    lam: float = Field(0.5, ge=0.0, le=1.0)
    trace: Literal["every-visit", "restart"] = "every-visit"
    slow: ScheduleSpec = ScheduleSpec(a=10.0, e=0.9)
    fast: ScheduleSpec = ScheduleSpec(a=2.0, e=0.6)
    features: int = Field(4, ge=1)
    kappa: float = 0.5
    beta_samples: int = Field(0, ge=0)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    env: EnvSpec
    perturbation: float = Field(0.1, ge=0.0, le=1.0)
    algorithm: Literal[ALGORITHMS]  # type: ignore[valid-type]
    region: RegionSpec = RegionSpec()
    learner: LearnerSpec = LearnerSpec()
    seeds: list[int] = Field(min_length=1)
    cv_seeds: list[int] | None = None
    cv_folds: int = Field(10, ge=2)
    eval_episodes: int = Field(100, ge=1)
    eval_horizon: int = Field(100, ge=1)
    transient_fraction: float = Field(0.2, ge=0.0, le=1.0)
    output_dir: str | None = None

    @property
    def robust(self) -> bool:
        return self.algorithm.startswith("robust-")


class ConfigError(ValueError):
    """Raised for malformed configs; ``path`` is the JSON location."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def load_config(source: str | Path | dict) -> ExperimentConfig:
    if isinstance(source, dict):
        doc = source
    else:
        try:
            doc = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from None
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err["loc"])
        raise ConfigError(path, err["msg"]) from None


# ---------------------------------------------------------------------------
# building blocks


def build_env(spec) -> TabularMdp:
    if isinstance(spec, GridEnv):
        layout = load_layout(spec.layout) if isinstance(spec.layout, str) else spec.layout
        return make_gridworld(GridWorldSpec(tuple(layout), spec.slip, spec.step_cost, spec.hole_cost,
                                            spec.goal_reward, spec.discount))
    if isinstance(spec, ChainEnv):
        return make_nchain(ChainSpec(spec.length, spec.slip, spec.forward_reward,
                                     spec.backward_reward, spec.discount))
    if isinstance(spec, RandomEnv):
        mdp = random_mdp(spec.n_states, spec.n_actions, spec.branching, spec.seed, spec.discount)
        return perturb(mdp, spec.mix) if spec.mix else mdp
    return TabularMdp.load(spec.path)


def build_regions(spec: RegionSpec, radius: float, mdp: TabularMdp) -> RegionTable:
    if radius == 0.0:
        return None
    if spec.family == "l2":
        return L2Ball(radius)
    if spec.family == "l1":
        return L1Ball(radius)
    if spec.family == "ellipsoid":
        return Ellipsoid(np.asarray(spec.matrix) / radius ** 2)
    if spec.family == "parallelepiped":
        return Parallelepiped(np.asarray(spec.matrix) / radius)
    rows = np.maximum(mdp.transitions, 1e-9)
    return [[Ellipsoid(np.diag(1.0 / (radius ** 2 * rows[a, i]))) for a in range(mdp.n_actions)]
            for i in range(mdp.n_states)]


def tail_distribution(rewards, thresholds=None) -> list[tuple[float, float]]:
    """Empirical ``P(R >= a)`` at each threshold (default: the distinct rewards)."""
    r = np.sort(np.asarray(rewards, dtype=float))
    if r.size == 0:
        raise ValueError("no rewards")
    th = np.unique(r) if thresholds is None else np.asarray(sorted(thresholds), dtype=float)
    counts = r.size - np.searchsorted(r, th, side="left")
    return [(float(a), float(c) / r.size) for a, c in zip(th, counts)]


def lookahead_policy(mdp: TabularMdp, v: np.ndarray, regions: RegionTable) -> DeterministicPolicy:
    q = mdp.cost + mdp.discount * RobustBackup(mdp, regions)(np.asarray(v, dtype=float))
    return DeterministicPolicy(tuple(int(a) for a in greedy_actions(q)))


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    train_ss, eval_ss = np.random.SeedSequence(seed).spawn(2)
    return make_rng(train_ss), make_rng(eval_ss)


def _random_features(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    phi = rng.uniform(0.0, 1.0, (n, d))
    phi[:, 0] = 1.0
    return phi


@dataclass
class TrainedAgent:
    seed: int
    radius: float
    policy: DeterministicPolicy
    table: np.ndarray
    warnings: list[str] = field(default_factory=list)


def train_agent(cfg: ExperimentConfig, seed: int, radius: float) -> TrainedAgent:
    """Train one agent on the perturbed model and extract a greedy policy."""
    true_env = build_env(cfg.env)
    train_env = perturb(true_env, cfg.perturbation)
    regions = build_regions(cfg.region, radius, train_env) if cfg.robust else None
    rng, _ = _seed_streams(seed)
    ls = cfg.learner
    family = cfg.algorithm.split("-", 1)[1]
    tab = TabularLearnerConfig(schedule=ls.schedule.build(), exploration=ls.exploration, region=regions,
                               trace=ls.trace, lam=ls.lam, steps=ls.steps, episodes=ls.episodes,
                               beta_samples=ls.beta_samples)
    if family in ("q", "sarsa"):
        learner = robust_q_learning if family == "q" else robust_sarsa
        res = learner(train_env, tab, rng)
        policy = DeterministicPolicy(tuple(int(a) for a in greedy_actions(res.table)))
        return TrainedAgent(seed, radius, policy, res.table, res.warnings)
    # value learners evaluate the nominal DP policy of the training model and
    # act by one-step lookahead on the learned values
    base = robust_value_iteration(train_env, None).policy
    if family == "td":
        res = robust_td_lambda(train_env, base, tab, rng)
        v, warns = res.table, res.warnings
    else:
        if regions is not None and not isinstance(regions, (L2Ball, L1Ball, Ellipsoid, Parallelepiped)):
            raise ConfigError("$.region.family", "function approximation needs one shared region")
        try:
            xi = steady_state_distribution(train_env.policy_matrix(base))
        except MdpError:
            xi = np.full(train_env.n_states, 1.0 / train_env.n_states)
        prob = make_problem(train_env, xi, base, regions)
        gcfg = GtdConfig(ls.slow.build(), ls.fast.build(), steps=ls.steps, checkpoint_every=0)
        phi = _random_features(rng, train_env.n_states, ls.features)
        algo = family.rsplit("-", 1)[-1]
        if family.startswith("nl-"):
            psi = rng.uniform(-1.0, 1.0, phi.shape)
            model = QuadraticFeatureModel(phi, psi, ls.kappa)
            out = run_nonlinear_gtd(prob, model, algo, gcfg, rng)
            v = model.values(out.theta)
        else:
            out = run_linear_gtd(prob, phi, algo, gcfg, rng)
            v = phi @ out.model.theta
        warns = []
    v = np.asarray(v, dtype=float)
    v[list(train_env.terminal)] = 0.0
    return TrainedAgent(seed, radius, lookahead_policy(train_env, v, regions), v, warns)


def evaluate_policy(mdp: TabularMdp, policy: DeterministicPolicy, episodes: int, horizon: int,
                    rng: np.random.Generator) -> list[float]:
    """Undiscounted cumulative reward (negated cost) per episode from ``mdp.start``."""
    sample = TransitionSampler(mdp.transitions)
    cost = mdp.cost.tolist()
    acts = list(policy.actions)
    terminal = set(mdp.terminal)
    out = []
    for _ in range(episodes):
        u = rng.random(horizon).tolist()
        s, total = mdp.start, 0.0
        for t in range(horizon):
            if s in terminal:
                break
            a = acts[s]
            total -= cost[s][a]
            s = sample(s, a, u[t])
        out.append(total)
    return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvResult:
    chosen_radius: float
    scores: dict[float, float | None]
    folds: list[list[int]]


def _padded_seeds(seeds: list[int], folds: int) -> list[int]:
    out = list(seeds)
    nxt = max(out) + 1
    while len(out) % folds:
        out.append(nxt)
        nxt += 1
    return out


def cv_line_search(cfg: ExperimentConfig, cache: dict | None = None) -> CvResult:
    """Pick the radius with the best mean validation reward over seed folds.

    Seeds (``cv_seeds`` if given) are padded to a multiple of ``cv_folds``
    and split into contiguous folds.  Each (seed, radius) agent is trained
    once; a fold scores the agents of the other folds on the true model,
    using the validation seeds' evaluation streams.  Ties go to the smaller
    radius.
    """
    grid = cfg.region.radius_grid
    if not grid:
        raise ConfigError("$.region.radius_grid", "cross-validation needs a non-empty radius grid")
    if len(grid) == 1:
        return CvResult(grid[0], {grid[0]: None}, [])
    seeds = _padded_seeds(cfg.cv_seeds or cfg.seeds, cfg.cv_folds)
    size = len(seeds) // cfg.cv_folds
    folds = [seeds[k * size:(k + 1) * size] for k in range(cfg.cv_folds)]
    true_env = build_env(cfg.env)
    cache = {} if cache is None else cache
    scores: dict[float, float] = {}
    for r in grid:
        agents = {}
        for s in seeds:
            key = (s, r)
            if key not in cache:
                cache[key] = train_agent(cfg, s, r)
            agents[s] = cache[key]
        fold_scores = []
        for k, val in enumerate(folds):
            total, count = 0.0, 0
            for j, fold in enumerate(folds):
                if j == k:
                    continue
                for s in fold:
                    for u in val:
                        _, eval_rng = _seed_streams(u)
                        rewards = evaluate_policy(true_env, agents[s].policy, cfg.eval_episodes,
                                                  cfg.eval_horizon, eval_rng)
                        total += math.fsum(rewards)
                        count += len(rewards)
            fold_scores.append(total / count)
        scores[r] = math.fsum(fold_scores) / len(fold_scores)
    best = grid[0]
    for r in grid[1:]:
        if scores[r] > scores[best]:
            best = r
    return CvResult(best, scores, folds)


# ---------------------------------------------------------------------------
# experiment


class SeedSummary(BaseModel):
    seed: int
    transient_mean: float | None
    stationary_mean: float | None
    transient_episodes: int
    stationary_episodes: int


class EvalReport(BaseModel):
    algorithm: str
    chosen_radius: float | None
    cv_scores: dict[str, float | None] | None
    seeds: list[SeedSummary]
    tail: list[tuple[float, float]]
    warnings: list[str]
    config: dict

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def stationary_means(self) -> np.ndarray:
        return np.array([s.stationary_mean for s in self.seeds])


def split_index(episodes: int, fraction: float) -> int:
    return int(math.floor(fraction * episodes + 0.5))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> EvalReport:
    """Train per seed on the perturbed model, evaluate on the true one.

    Writes ``episodes.csv`` and ``report.json`` when an output directory is
    given (argument or ``cfg.output_dir``).
    """
    warnings: list[str] = []
    radius, cv_scores = None, None
    if cfg.robust:
        if cfg.region.radius_grid:
            cv = cv_line_search(cfg)
            radius = cv.chosen_radius
            cv_scores = {repr(float(r)): s for r, s in cv.scores.items()}
        else:
            radius = cfg.region.radius or 0.0
    true_env = build_env(cfg.env)
    cut = split_index(cfg.eval_episodes, cfg.transient_fraction)
    rows, summaries, all_rewards = [], [], []
    for seed in cfg.seeds:
        agent = train_agent(cfg, seed, radius or 0.0)
        warnings.extend(f"seed {seed}: {w}" for w in agent.warnings)
        _, eval_rng = _seed_streams(seed)
        rewards = evaluate_policy(true_env, agent.policy, cfg.eval_episodes, cfg.eval_horizon, eval_rng)
        trans, stat = rewards[:cut], rewards[cut:]
        summaries.append(SeedSummary(
            seed=seed,
            transient_mean=math.fsum(trans) / len(trans) if trans else None,
            stationary_mean=math.fsum(stat) / len(stat) if stat else None,
            transient_episodes=len(trans),
            stationary_episodes=len(stat),
        ))
        for k, r in enumerate(rewards):
            rows.append((seed, k, "transient" if k < cut else "stationary", r))
        all_rewards.extend(rewards)
    report = EvalReport(
        algorithm=cfg.algorithm,
        chosen_radius=radius,
        cv_scores=cv_scores,
        seeds=summaries,
        tail=tail_distribution(all_rewards),
        warnings=warnings,
        config=cfg.model_dump(mode="json"),
    )
    target = out_dir if out_dir is not None else cfg.output_dir
    if target is not None:
        write_outputs(Path(target), rows, report)
    return report


def episodes_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "episode", "phase", "cumulative_reward"])
    for seed, k, phase, r in rows:
        w.writerow([seed, k, phase, repr(float(r))])
    return buf.getvalue()


def write_outputs(out: Path, rows, report: EvalReport) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "episodes.csv").write_text(episodes_csv(rows))
        (out / "report.json").write_text(report.to_json())
    except OSError as exc:
        raise ConfigError("$.output_dir", f"cannot write outputs: {exc}") from None


def train_all(cfg: ExperimentConfig) -> dict:
    """Train one agent per seed (CV-selected radius when a grid is given)."""
    radius = None
    if cfg.robust:
        radius = cv_line_search(cfg).chosen_radius if cfg.region.radius_grid else (cfg.region.radius or 0.0)
    agents = []
    for seed in cfg.seeds:
        a = train_agent(cfg, seed, radius or 0.0)
        agents.append({"seed": seed, "radius": a.radius, "policy": list(a.policy.actions),
                       "table": np.asarray(a.table).tolist(), "warnings": a.warnings})
    return {"algorithm": cfg.algorithm, "agents": agents}


def sweep(cfg: ExperimentConfig) -> dict:
    cv = cv_line_search(cfg)
    return {
        "algorithm": cfg.algorithm,
        "chosen_radius": cv.chosen_radius,
        "scores": [{"radius": r, "score": s} for r, s in cv.scores.items()],
        "folds": cv.folds,
    }
