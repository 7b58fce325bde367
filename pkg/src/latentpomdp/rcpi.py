"""Rollout classification policy iteration over a representation space.

Each iteration samples episode starts, estimates the return of every first
action by Monte-Carlo rollouts of the current policy, keeps the starts where
one action is strictly best, and fits a fresh linear multiclass hinge
classifier mapping representation -> best action.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .env import (DEFAULT_T_MAX, GOAL_X, N_ACTIONS, Action, EpisodeStart, Mode, RandomPolicy,
                  StartBatch, sample_initial_batch)
from .inference import InferenceStrategy, Kind, make_representer
from .latent_model import LatentModel, decode, dyn
from .rollout import run_batch

log = logging.getLogger(__name__)

ROLLOUT_SPACES = ("real_env", "latent_sim")


class DegenerateRollouts(RuntimeError):
    pass


@dataclass
class LinearPolicy:
    """``weights[a]`` scores action ``a`` on the features ``(z, 1)``."""

    weights: np.ndarray  # (N_ACTIONS, n + 1)
    needs_latent = True

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if self.weights.shape[0] != N_ACTIONS:
            raise ValueError(f"need one weight vector per action, got {self.weights.shape[0]}")

    @property
    def n(self) -> int:
        return self.weights.shape[1] - 1

    def scores(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.n:
            raise ValueError(f"representation has size {z.shape[-1]}, policy expects {self.n}")
        return z @ self.weights[:, :-1].T + self.weights[:, -1]

    def act_batch(self, z, count=None) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest action index
        return np.argmax(self.scores(z), axis=-1)


def policy_action(p: LinearPolicy, z) -> Action:
    return Action(int(p.act_batch(np.asarray(z, dtype=float).reshape(1, -1))[0]))


def save_policy(path, p: LinearPolicy) -> None:
    lines = [f"{p.weights.shape[0]} {p.weights.shape[1]}"]
    lines += [" ".join(format(float(w), ".17g") for w in row) for row in p.weights]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_policy(path) -> LinearPolicy:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    k, f = int(rows[0][0]), int(rows[0][1])
    W = np.array(rows[1:1 + k], dtype=float)
    if W.shape != (k, f):
        raise ValueError(f"policy file declares {k}x{f} weights, found {W.shape}")
    return LinearPolicy(W)


@dataclass
class RolloutConfig:
    states_per_iter: int = 1000
    rollouts_per_state_action: int = 1
    iterations: int = 10
    horizon: int = DEFAULT_T_MAX
    rollout_space: str = "real_env"
    discount: float = 0.99
    eval_episodes: int = 1000
    classifier_epochs: int = 1000
    classifier_step: float = 1.0
    min_label_fraction: float = 0.01
    cost_sensitive: bool = True

    def __post_init__(self):
        for name in ("states_per_iter", "rollouts_per_state_action", "iterations", "horizon",
                     "eval_episodes", "classifier_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.rollout_space not in ROLLOUT_SPACES:
            raise ValueError(f"rollout_space must be one of {ROLLOUT_SPACES}")


class _NoRepresentation:
    """Stand-in used when the rollout policy never looks at the latent."""

    def push(self, actions, obs):
        pass

    def take(self, idx):
        return self


def train_hinge(X, y, epochs: int = 200, step: float = 0.1, n_classes: int = N_ACTIONS,
                costs=None) -> LinearPolicy:
    """Multiclass hinge classifier by full-batch subgradient descent.

    Minimizes the mean over samples of
    ``sum_{k != y} cost[i, k] * max(0, 1 - (s_y - s_k))`` with unit costs by
    default. The subgradient method is not a descent method, so the iterate
    with the lowest objective is returned. Features are standardized
    internally (the representation coordinates differ in scale by orders of
    magnitude, e.g. position vs velocity) and the scaling is folded back into
    the returned weights.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    C = np.ones((len(y), n_classes)) if costs is None else np.asarray(costs, dtype=float)
    mu = X.mean(0)
    sd = X.std(0)
    sd[sd < 1e-12] = 1.0
    F = np.hstack([(X - mu) / sd, np.ones((len(X), 1))])
    W = np.zeros((n_classes, F.shape[1]))
    rows = np.arange(len(y))
    best, best_W = np.inf, W.copy()
    for epoch in range(epochs + 1):
        S = F @ W.T
        slack = 1.0 - (S[rows, y][:, None] - S)
        slack[rows, y] = 0.0
        coef = (slack > 0) * C
        objective = float((coef * slack).sum() / len(y))
        if objective < best:
            best, best_W = objective, W.copy()
        if epoch == epochs:
            break
        coef[rows, y] = -coef.sum(1)
        W = W - step * (coef.T @ F) / len(y)
    W = best_W
    weights = np.empty_like(W)
    weights[:, :-1] = W[:, :-1] / sd
    weights[:, -1] = W[:, -1] - (W[:, :-1] * (mu / sd)).sum(1)
    return LinearPolicy(weights)


def hinge_loss(p: LinearPolicy, X, y) -> float:
    S = p.scores(X)
    rows = np.arange(len(y))
    marg = np.maximum(0.0, 1.0 - (S[rows, y][:, None] - S))
    marg[rows, y] = 0.0
    return float(marg.sum(1).mean())


def discounted(success, lengths, discount: float) -> np.ndarray:
    """``discount ** transitions`` for successful rollouts, 0 otherwise."""
    return np.where(success, discount ** (np.asarray(lengths) - 1.0), 0.0)


def latent_returns(z_start, first_actions, policy, model: LatentModel, horizon: int):
    """Rollouts simulated entirely in latent space: ``(success, lengths)``.

    Transitions use fast inference only; the goal test decodes each latent
    and compares its position coordinate with the goal threshold.
    """
    z = np.array(z_start, dtype=float)
    B = len(z)
    success = np.zeros(B, dtype=bool)
    lengths = np.full(B, horizon)
    active = np.arange(B)
    for t in range(horizon):
        goal = decode(model.decoder, z)[:, 0] >= GOAL_X
        success[active[goal]] = True
        lengths[active[goal]] = t + 1
        if t == horizon - 1 or goal.all():
            break
        keep = ~goal
        active, z = active[keep], z[keep]
        if t == 0 and first_actions is not None:
            a = np.asarray(first_actions)[active]
        else:
            a = policy.act_batch(z, len(z))
        z = dyn(model.dynamics, z, a)
    return success, lengths


def latent_rollout_return(z_start, first_action, p, model: LatentModel, cfg: RolloutConfig) -> float:
    R = cfg.rollouts_per_state_action
    z = np.repeat(np.asarray(z_start, dtype=float).reshape(1, -1), R, axis=0)
    succ, lengths = latent_returns(z, np.full(R, int(first_action)), p, model, cfg.horizon)
    return float(discounted(succ, lengths, cfg.discount).mean())


def estimate_q(starts: StartBatch, start_rep, z0, policy, model, strategy: InferenceStrategy,
               mode: Mode, cfg: RolloutConfig, rng: np.random.Generator) -> np.ndarray:
    """``Q[i, a]``: mean discounted rollout success from start ``i`` with first action ``a``."""
    B, R = len(starts), cfg.rollouts_per_state_action
    idx = np.repeat(np.arange(B), N_ACTIONS * R)
    first = np.tile(np.repeat(np.arange(N_ACTIONS), R), B)
    if cfg.rollout_space == "latent_sim":
        succ, lengths = latent_returns(z0[idx], first, policy, model, cfg.horizon)
    else:
        rep = start_rep.take(idx) if policy.needs_latent else _NoRepresentation()
        res = run_batch(starts.take(idx), policy, rep, mode, cfg.horizon,
                        first_actions=first, started=True)
        succ, lengths = res.success, res.lengths
    return discounted(succ, lengths, cfg.discount).reshape(B, N_ACTIONS, R).mean(-1)


def rollout_return(start: EpisodeStart, first_action, p, cfg: RolloutConfig,
                   strategy: InferenceStrategy, model: LatentModel | None, mode: Mode,
                   rng: np.random.Generator) -> float:
    """Mean discounted success of ``rollouts_per_state_action`` rollouts from one start."""
    starts = StartBatch(start.origin.as_array()[None], start.warmup_actions[None],
                        start.warmup_states[None], start.state.as_array()[None])
    rep = make_representer(strategy, model, mode, rng)
    rep.start(starts)
    z0 = rep.current() if (p.needs_latent or cfg.rollout_space == "latent_sim") else None
    q = estimate_q(starts, rep, z0, p, model, strategy, mode, cfg, rng)
    return float(q[0, int(first_action)])


@dataclass
class IterationStats:
    labeled: int
    sampled: int
    q_mean: float
    training_accuracy: float


def strict_labels(Q: np.ndarray):
    """Indices and labels of rows with a unique maximum."""
    best = Q.max(1)
    unique = (Q == best[:, None]).sum(1) == 1
    return np.flatnonzero(unique), Q.argmax(1)[unique]


def rcpi_iteration(p, model: LatentModel | None, strategy: InferenceStrategy, mode: Mode,
                   cfg: RolloutConfig, rng: np.random.Generator):
    """One policy-iteration step; returns ``(new_policy, IterationStats)``."""
    starts = sample_initial_batch(rng, cfg.states_per_iter)
    rep = make_representer(strategy, model, mode, rng, capacity=cfg.horizon + 8)
    rep.start(starts)
    z0 = np.array(rep.current(), copy=True)
    Q = estimate_q(starts, rep, z0, p, model, strategy, mode, cfg, rng)
    keep, labels = strict_labels(Q)
    if len(keep) == 0 or len(keep) < cfg.min_label_fraction * len(Q):
        raise DegenerateRollouts(
            f"only {len(keep)} of {len(Q)} sampled states have a strictly best action")
    costs = None
    if cfg.cost_sensitive:
        # a margin violation against action k costs what choosing k loses
        costs = Q[keep, labels][:, None] - Q[keep]
        costs /= costs[costs > 0].mean()
    new = train_hinge(z0[keep], labels, cfg.classifier_epochs, cfg.classifier_step, costs=costs)
    acc = float(np.mean(new.act_batch(z0[keep]) == labels))
    return new, IterationStats(len(keep), len(Q), float(Q.mean()), acc)


def evaluate_policy(p, model: LatentModel | None, strategy: InferenceStrategy, mode: Mode,
                    episodes: int, T_max: int, rng: np.random.Generator) -> float:
    """Success rate over ``episodes`` fresh episodes."""
    starts = sample_initial_batch(rng, episodes)
    rep = make_representer(strategy, model, mode, rng, capacity=T_max + 8)
    return float(run_batch(starts, p, rep, mode, T_max).success.mean())


@dataclass
class RCPIResult:
    policy: LinearPolicy
    curve: list  # evaluation success rate after each iteration
    stats: list = field(default_factory=list)


def rcpi_train(model: LatentModel | None, strategy: InferenceStrategy, mode: Mode,
               cfg: RolloutConfig, rng: np.random.Generator) -> RCPIResult:
    """Start from the uniform random policy and run ``cfg.iterations`` iterations."""
    strategy = strategy if isinstance(strategy, InferenceStrategy) else InferenceStrategy(kind=strategy)
    if cfg.rollout_space == "latent_sim" and strategy.kind is Kind.FOBS:
        raise ValueError("latent_sim rollouts need a latent strategy")
    policy = RandomPolicy(rng.spawn(1)[0])
    curve, stats = [], []
    for it in range(cfg.iterations):
        roll_rng, eval_rng = rng.spawn(2)
        policy, st = rcpi_iteration(policy, model, strategy, mode, cfg, roll_rng)
        score = evaluate_policy(policy, model, strategy, mode, cfg.eval_episodes, cfg.horizon, eval_rng)
        log.info("iteration %d: %d/%d labeled, train acc %.3f, eval success %.3f",
                 it + 1, st.labeled, st.sampled, st.training_accuracy, score)
        curve.append(score)
        stats.append(st)
    return RCPIResult(policy, curve, stats)
