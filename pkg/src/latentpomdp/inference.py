"""Latent representations for new episodes.

Two primitives:

* exact inference re-optimizes *every* latent of the history against the
  frozen model each time a new observation arrives;
* fast inference advances the last latent through the dynamics, no
  observation needed.

On top of them sit the four strategies used for control: ``FObs`` (the
observation is the representation), ``FLat`` (exact inference at every
step), ``FDyn`` (exact inference on the 5-step warmup, fast inference
afterwards) and ``FPar`` (a per-step coin flip between FLat and FDyn).

Control code runs many episodes in lockstep, so strategies are implemented
as batch *representers* over episodes whose histories all have the same
length. :func:`next_representation` is the one-episode form.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .descent import DIRECTIONS, LatentDescent
from .env import WARMUP_STEPS, Mode, StartBatch, Trajectory, observe_arrays
from .latent_model import DynamicsParams, LatentModel, batch_loss, dyn


class Kind(str, enum.Enum):
    FOBS = "fobs"
    FLAT = "flat"
    FDYN = "fdyn"
    FPAR = "fpar"


@dataclass
class InferenceStrategy:
    kind: Kind = Kind.FLAT
    mix_probability: float = 0.5
    refine_steps: int = 50  # sweeps for the warmup fit
    online_refine_steps: int | None = None  # sweeps per FLat step; None -> refine_steps
    step_size: float = 0.05
    direction: str = "adam"
    init_scale: float = 0.1
    window: int | None = None  # FLat re-fits only the last `window` latents; None = whole history

    def __post_init__(self):
        self.kind = Kind(str(self.kind).lower() if not isinstance(self.kind, Kind) else self.kind)
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ValueError("mix_probability must lie in [0, 1]")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be >= 0")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def online_steps(self) -> int:
        return self.refine_steps if self.online_refine_steps is None else self.online_refine_steps

    @property
    def needs_model(self) -> bool:
        return self.kind is not Kind.FOBS


def infer_exact_batch(model: LatentModel, obs, actions, mask, Z0, refine_steps: int,
                      step_size: float = 0.05, direction: str = "adam", frozen: int = 0) -> np.ndarray:
    """Latent-only descent from ``Z0``; per-trajectory loss never increases.

    The first ``frozen`` latents are held fixed (used to anchor a window).
    """
    opt = LatentDescent(step_size, direction)
    Z = Z0.copy()
    current = batch_loss(model, obs, actions, mask, Z)
    for _ in range(refine_steps):
        Z, current = opt.sweep(model, obs, actions, mask, Z, current, frozen)
    return Z


def _initial_latents(model: LatentModel, traj: Trajectory, warm_start, rng, init_scale):
    T, n = len(traj), model.n
    if warm_start is None or len(warm_start) == 0:
        if rng is None:
            return np.zeros((T, n))
        return rng.uniform(-init_scale, init_scale, (T, n))
    warm = np.atleast_2d(np.asarray(warm_start, dtype=float))
    if len(warm) != T - 1:
        raise ValueError(f"warm start covers {len(warm)} steps, expected {T - 1}")
    nxt = dyn(model.dynamics, warm[-1], traj.actions[T - 2])
    return np.vstack([warm, nxt])


def infer_exact(model: LatentModel, prefix: Trajectory, warm_start=None, refine_steps: int = 50,
                rng: np.random.Generator | None = None, step_size: float = 0.05,
                direction: str = "adam", init_scale: float = 0.1) -> np.ndarray:
    """Re-fit the whole latent sequence of ``prefix`` with the model frozen.

    ``warm_start`` holds latents for all but the last step; the last one is
    seeded by fast inference. Without a warm start the latents start uniform
    in ``[-init_scale, init_scale]`` (zeros if no ``rng`` is given).
    """
    Z0 = _initial_latents(model, prefix, warm_start, rng, init_scale)
    Z = infer_exact_batch(model, prefix.observations[None], prefix.actions[None],
                          np.ones((1, len(prefix)), bool), Z0[None], refine_steps, step_size, direction)
    return Z[0]


def infer_fast(gamma: DynamicsParams, z_t, a_t) -> np.ndarray:
    return dyn(gamma, z_t, a_t)


def infer_initial(model: LatentModel, warmup: Trajectory, refine_steps: int,
                  rng: np.random.Generator, step_size: float = 0.05, direction: str = "adam",
                  init_scale: float = 0.1) -> np.ndarray:
    """Latents for the 5-step warmup, fitted from a small random start."""
    if len(warmup) != WARMUP_STEPS:
        raise ValueError(f"warmup must have {WARMUP_STEPS} steps, got {len(warmup)}")
    return infer_exact(model, warmup, None, refine_steps, rng, step_size, direction, init_scale)


@dataclass
class History:
    """One episode's history. ``actions[-1]`` is the action taken after the
    last observation (it must be set before asking for the next latent)."""

    observations: np.ndarray  # (t, m)
    actions: np.ndarray  # (t,)
    latents: np.ndarray  # (t, n)

    def trajectory(self) -> Trajectory:
        return Trajectory(self.observations, self.actions)


def next_representation(strategy: InferenceStrategy, model: LatentModel | None, history: History,
                        new_observation, rng: np.random.Generator) -> np.ndarray:
    """Latent for the step after ``history``; updates ``history`` in place.

    FLat may revise all earlier latents in ``history``; FDyn never reads
    ``new_observation``.
    """
    kind = strategy.kind
    if kind is Kind.FPAR:
        kind = Kind.FLAT if rng.random() < strategy.mix_probability else Kind.FDYN
    if kind in (Kind.FOBS, Kind.FLAT) and new_observation is None:
        raise ValueError(f"{kind.value} needs the new observation")
    if kind is Kind.FOBS:
        z = np.asarray(new_observation, dtype=float).reshape(-1)
        obs = z
    else:
        z_next = dyn(model.dynamics, history.latents[-1], history.actions[-1])
        if kind is Kind.FDYN:
            z = z_next
            obs = np.full(history.observations.shape[1], np.nan) if new_observation is None else new_observation
        else:
            obs = np.asarray(new_observation, dtype=float).reshape(-1)
            traj = Trajectory(np.vstack([history.observations, obs]), np.append(history.actions, 0))
            Z = infer_exact(model, traj, history.latents, strategy.online_steps,
                            step_size=strategy.step_size, direction=strategy.direction)
            history.latents = Z[:-1]
            z = Z[-1]
    history.observations = np.vstack([history.observations, np.reshape(obs, (1, -1))])
    history.actions = np.append(history.actions, 0)
    history.latents = np.vstack([history.latents, z]) if history.latents.size else z[None]
    return z


class FObsRepresenter:
    """The observation is the representation."""

    def __init__(self, mode: Mode):
        self.mode = Mode(mode)
        self.dim = self.mode.obs_dim
        self.obs = None

    def start(self, starts: StartBatch) -> None:
        self.obs = observe_arrays(starts.states[:, 0], starts.states[:, 1], self.mode)

    def push(self, actions, obs) -> None:
        self.obs = obs

    def current(self) -> np.ndarray:
        return self.obs

    def take(self, idx) -> "FObsRepresenter":
        out = FObsRepresenter(self.mode)
        out.obs = self.obs[idx]
        return out


@dataclass
class LatentRepresenter:
    """FLat / FDyn / FPar over a lockstep batch of episodes.

    The history buffer starts with the 5 warmup steps followed by the episode
    steps. ``_fresh`` marks that the newest latent has not been computed yet.
    """

    strategy: InferenceStrategy
    model: LatentModel
    mode: Mode
    init_rng: np.random.Generator
    mix_rng: np.random.Generator
    capacity: int = 128
    obs: np.ndarray = field(default=None, repr=False)
    acts: np.ndarray = field(default=None, repr=False)
    Z: np.ndarray = field(default=None, repr=False)
    length: int = 0
    _fresh: bool = False
    exact_steps: int = 0  # episodes-steps that ran exact inference
    fast_steps: int = 0

    @property
    def dim(self) -> int:
        return self.model.n

    def start(self, starts: StartBatch) -> None:
        B = len(starts)
        m, n = Mode(self.mode).obs_dim, self.model.n
        cap = max(self.capacity, WARMUP_STEPS + 1)
        self.obs = np.zeros((B, cap, m))
        self.acts = np.zeros((B, cap), dtype=int)
        self.Z = np.zeros((B, cap, n))
        L = WARMUP_STEPS
        self.obs[:, :L] = starts.warmup_obs(self.mode)
        self.acts[:, :L] = starts.warmup_actions
        mask = np.ones((B, L), bool)
        s = self.strategy
        Z0 = self.init_rng.uniform(-s.init_scale, s.init_scale, (B, L, n))
        self.Z[:, :L] = infer_exact_batch(self.model, self.obs[:, :L], self.acts[:, :L], mask, Z0,
                                          s.refine_steps, s.step_size, s.direction)
        self.length = L
        self.push(None, observe_arrays(starts.states[:, 0], starts.states[:, 1], self.mode))

    def push(self, actions, obs) -> None:
        """Record the action taken at the newest step and the observation it led to."""
        t = self.length
        if actions is not None:
            self.acts[:, t - 1] = actions
        if t >= self.obs.shape[1]:
            grow = lambda a: np.concatenate([a, np.zeros_like(a)], axis=1)
            self.obs, self.acts, self.Z = grow(self.obs), grow(self.acts), grow(self.Z)
        if self.strategy.kind is not Kind.FDYN:
            self.obs[:, t] = obs
        self.length = t + 1
        self._fresh = True

    def current(self) -> np.ndarray:
        t = self.length
        if not self._fresh:
            return self.Z[:, t - 1]
        self.Z[:, t - 1] = dyn(self.model.dynamics, self.Z[:, t - 2], self.acts[:, t - 2])
        B = self.Z.shape[0]
        kind = self.strategy.kind
        if kind is Kind.FLAT:
            exact = np.arange(B)
        elif kind is Kind.FPAR:
            exact = np.flatnonzero(self.mix_rng.random(B) < self.strategy.mix_probability)
        else:
            exact = np.arange(0)
        if len(exact):
            s = self.strategy
            lo, frozen = 0, 0
            if s.window is not None and t > s.window:
                # one frozen latent ahead of the window keeps its dynamics link
                lo, frozen = t - s.window - 1, 1
            mask = np.ones((len(exact), t - lo), bool)
            self.Z[exact, lo:t] = infer_exact_batch(
                self.model, self.obs[exact, lo:t], self.acts[exact, lo:t], mask, self.Z[exact, lo:t],
                s.online_steps, s.step_size, s.direction, frozen)
        self.exact_steps += len(exact)
        self.fast_steps += B - len(exact)
        self._fresh = False
        return self.Z[:, t - 1]

    def take(self, idx) -> "LatentRepresenter":
        out = LatentRepresenter(self.strategy, self.model, self.mode, self.init_rng, self.mix_rng,
                                self.capacity)
        out.obs, out.acts, out.Z = self.obs[idx], self.acts[idx], self.Z[idx]
        out.length, out._fresh = self.length, self._fresh
        return out


def make_representer(strategy: InferenceStrategy, model: LatentModel | None, mode: Mode,
                     rng: np.random.Generator, capacity: int = 128):
    """Fresh representer; FPar mixing draws come from their own generator."""
    strategy = strategy if isinstance(strategy, InferenceStrategy) else InferenceStrategy(kind=strategy)
    if strategy.kind is Kind.FOBS:
        return FObsRepresenter(mode)
    if model is None:
        raise ValueError(f"{strategy.kind.value} needs a trained model")
    init_seed, mix_seed = rng.integers(0, 2**63, 2)
    return LatentRepresenter(strategy, model, Mode(mode), np.random.default_rng(init_seed),
                             np.random.default_rng(mix_seed), capacity)
