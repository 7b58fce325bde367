"""Deterministic mountain car with full/partial observation modes.

The physics are the classic benchmark ones::

    v' = clip(v + 0.001 * thrust - 0.0025 * cos(3 x), -0.07, 0.07)
    x' = clip(x + v', -1.2, 0.6)      (v' reset to 0 when the left wall is hit)

An episode starts from a state drawn uniformly over the valid box and then
pushed through 5 uniformly random actions (the *warmup*). The warmup is kept
so that representation learners can fit an initial latent from it.

Everything that touches many states at once works on numpy arrays; the
scalar helpers (:func:`step`, :func:`observe`) go through the same array code
so both paths agree bit for bit.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

X_MIN, X_MAX = -1.2, 0.6
V_MIN, V_MAX = -0.07, 0.07
GOAL_X = 0.5
THRUST_GAIN = 0.001
GRAVITY = 0.0025
WARMUP_STEPS = 5
DEFAULT_T_MAX = 100
MAX_RESAMPLES = 1000


class Action(enum.IntEnum):
    REVERSE = 0
    NEUTRAL = 1
    FORWARD = 2

    @property
    def thrust(self) -> int:
        return int(self) - 1


N_ACTIONS = len(Action)


class Mode(str, enum.Enum):
    """Observation mode: full (position, velocity) or partial (position)."""

    FO = "FO"
    PO = "PO"

    @property
    def obs_dim(self) -> int:
        return 2 if self is Mode.FO else 1


class ConfigurationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CarState:
    x: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.v])


def step_arrays(x, v, actions):
    """Vectorized transition. Returns ``(x', v', terminal)`` arrays."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    thrust = np.asarray(actions, dtype=int) - 1
    v_new = np.clip(v + THRUST_GAIN * thrust - GRAVITY * np.cos(3.0 * x), V_MIN, V_MAX)
    x_new = x + v_new
    at_wall = x_new <= X_MIN
    v_new = np.where(at_wall & (v_new < 0), 0.0, v_new)
    x_new = np.clip(x_new, X_MIN, X_MAX)
    return x_new, v_new, x_new >= GOAL_X


def step(s: CarState, a: Action | int) -> tuple[CarState, bool]:
    x, v, done = step_arrays(np.array([s.x]), np.array([s.v]), np.array([int(a)]))
    return CarState(float(x[0]), float(v[0])), bool(done[0])


def observe_arrays(x, v, mode: Mode) -> np.ndarray:
    """Stack observations with a trailing axis of size ``mode.obs_dim``."""
    x = np.asarray(x, dtype=float)
    if Mode(mode) is Mode.FO:
        return np.stack([x, np.asarray(v, dtype=float)], axis=-1)
    return x[..., None]


def observe(s: CarState, mode: Mode) -> np.ndarray:
    return observe_arrays(np.array(s.x), np.array(s.v), mode)


@dataclass
class Trajectory:
    """Observation/action stream seen by a learner.

    ``actions[t]`` is the action taken after ``observations[t]``; the last
    action is never applied (the episode ended at that observation), so only
    the first ``len - 1`` actions drive transitions.
    """

    observations: np.ndarray  # (T', m)
    actions: np.ndarray  # (T',) int
    success: bool = False

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        self.actions = np.asarray(self.actions, dtype=int).reshape(-1)
        if len(self.actions) < 1 or len(self.actions) != len(self.observations):
            raise ValueError("trajectory needs >= 1 step and one action per observation")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    def concat(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(
            np.concatenate([self.observations, other.observations]),
            np.concatenate([self.actions, other.actions]),
            other.success,
        )


@dataclass
class EpisodeStart:
    origin: CarState
    warmup_actions: np.ndarray  # (5,) int
    warmup_states: np.ndarray  # (5, 2): origin and the 4 states after it
    state: CarState  # reached after the 5th warmup action

    def warmup(self, mode: Mode) -> Trajectory:
        obs = observe_arrays(self.warmup_states[:, 0], self.warmup_states[:, 1], mode)
        return Trajectory(obs, self.warmup_actions, False)

    def replay(self) -> CarState:
        s = self.origin
        for a in self.warmup_actions:
            s, _ = step(s, int(a))
        return s


@dataclass
class StartBatch:
    """Array form of many :class:`EpisodeStart` objects."""

    origins: np.ndarray  # (B, 2)
    warmup_actions: np.ndarray  # (B, 5)
    warmup_states: np.ndarray  # (B, 5, 2)
    states: np.ndarray  # (B, 2)

    def __len__(self) -> int:
        return len(self.states)

    def take(self, idx) -> "StartBatch":
        return StartBatch(self.origins[idx], self.warmup_actions[idx],
                          self.warmup_states[idx], self.states[idx])

    def warmup_obs(self, mode: Mode) -> np.ndarray:
        return observe_arrays(self.warmup_states[..., 0], self.warmup_states[..., 1], mode)

    def __getitem__(self, i: int) -> EpisodeStart:
        return EpisodeStart(
            origin=CarState(*map(float, self.origins[i])),
            warmup_actions=self.warmup_actions[i].copy(),
            warmup_states=self.warmup_states[i].copy(),
            state=CarState(*map(float, self.states[i])),
        )


def sample_initial_batch(rng: np.random.Generator, count: int) -> StartBatch:
    """Draw ``count`` episode starts; any start whose warmup touches the goal is redrawn."""
    origins = np.empty((count, 2))
    actions = np.empty((count, WARMUP_STEPS), dtype=int)
    wstates = np.empty((count, WARMUP_STEPS, 2))
    states = np.empty((count, 2))
    todo = np.arange(count)
    for _ in range(MAX_RESAMPLES):
        k = len(todo)
        x = rng.uniform(X_MIN, X_MAX, k)
        v = rng.uniform(V_MIN, V_MAX, k)
        acts = rng.integers(0, N_ACTIONS, (k, WARMUP_STEPS))
        origins[todo] = np.stack([x, v], -1)
        actions[todo] = acts
        hit = np.zeros(k, dtype=bool)
        for t in range(WARMUP_STEPS):
            wstates[todo, t] = np.stack([x, v], -1)
            x, v, done = step_arrays(x, v, acts[:, t])
            hit |= done
        states[todo] = np.stack([x, v], -1)
        todo = todo[hit]
        if len(todo) == 0:
            return StartBatch(origins, actions, wstates, states)
    raise ConfigurationError(f"warmup reached the goal {MAX_RESAMPLES} times in a row")


def sample_initial(rng: np.random.Generator) -> EpisodeStart:
    return sample_initial_batch(rng, 1)[0]


@dataclass
class Episode:
    """A finished episode: the learner-visible trajectory plus hidden states.

    ``hidden`` is ground truth (x, v) per step. It is only read by evaluation
    and export code, never by a learner.
    """

    start: EpisodeStart
    trajectory: Trajectory
    hidden: np.ndarray = field(repr=False)

    @property
    def success(self) -> bool:
        return self.trajectory.success


class RandomPolicy:
    """Uniformly random actions; never looks at the representation."""

    needs_latent = False

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def act_batch(self, z: np.ndarray | None, count: int) -> np.ndarray:
        return self.rng.integers(0, N_ACTIONS, count)


def run_episode(policy, representer, mode: Mode, T_max: int, rng: np.random.Generator,
                start: EpisodeStart | None = None) -> tuple[Episode, bool]:
    """Run one episode of at most ``T_max`` observations.

    ``representer`` is a batch representer factory (see
    :mod:`latentpomdp.inference`); the episode is a batch of one.
    """
    from .rollout import run_batch

    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    if start is None:
        start = sample_initial(rng)
    starts = StartBatch(start.origin.as_array()[None], start.warmup_actions[None],
                        start.warmup_states[None], start.state.as_array()[None])
    res = run_batch(starts, policy, representer, mode, T_max, record=True)
    traj = Trajectory(res.observations[0], res.actions[0], bool(res.success[0]))
    return Episode(start, traj, res.states[0]), bool(res.success[0])


def collect_random(Q: int, mode: Mode, T_max: int, rng: np.random.Generator) -> list[Episode]:
    """``Q`` episodes under the uniform random policy, warmups retained."""
    from .inference import FObsRepresenter
    from .rollout import run_batch

    if Q < 1:
        raise ValueError("Q must be >= 1")
    mode = Mode(mode)
    starts = sample_initial_batch(rng, Q)
    res = run_batch(starts, RandomPolicy(rng), FObsRepresenter(mode), mode, T_max, record=True)
    out = []
    for q in range(Q):
        traj = Trajectory(res.observations[q], res.actions[q], bool(res.success[q]))
        out.append(Episode(starts[q], traj, res.states[q]))
    return out


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trajectories(path, episodes: list[Episode], mode: Mode, T_max: int) -> None:
    """Plain-text dataset: header ``Q mode m T_max``, then per trajectory
    ``T' success``, T' step lines ``o_1 .. o_m a``, and 5 ``w``-prefixed warmup lines."""
    mode = Mode(mode)
    m = mode.obs_dim
    lines = [f"{len(episodes)} {mode.value} {m} {T_max}"]
    for ep in episodes:
        tr = ep.trajectory
        lines.append(f"{len(tr)} {int(tr.success)}")
        for o, a in zip(tr.observations, tr.actions):
            lines.append(" ".join(map(_fmt, o)) + f" {int(a)}")
        wu = ep.start.warmup(mode)
        for o, a in zip(wu.observations, wu.actions):
            lines.append("w " + " ".join(map(_fmt, o)) + f" {int(a)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectories(path) -> tuple[list[tuple[Trajectory, Trajectory]], Mode, int]:
    """Inverse of :func:`write_trajectories`: ``[(warmup, trajectory), ...], mode, T_max``."""
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    q, mode, m, t_max = rows[0]
    q, m, t_max, mode = int(q), int(m), int(t_max), Mode(mode)
    if m != mode.obs_dim:
        raise ValueError(f"header says m={m} but mode {mode.value} has m={mode.obs_dim}")
    pos = 1
    out = []
    for _ in range(q):
        n_steps, success = int(rows[pos][0]), bool(int(rows[pos][1]))
        body = rows[pos + 1: pos + 1 + n_steps]
        warm = rows[pos + 1 + n_steps: pos + 1 + n_steps + WARMUP_STEPS]
        if len(warm) != WARMUP_STEPS or any(r[0] != "w" for r in warm):
            raise ValueError(f"malformed warmup block near line {pos + 1}")
        traj = Trajectory([[float(u) for u in r[:m]] for r in body], [int(r[m]) for r in body], success)
        wu = Trajectory([[float(u) for u in r[1:m + 1]] for r in warm], [int(r[m + 1]) for r in warm])
        out.append((wu, traj))
        pos += 1 + n_steps + WARMUP_STEPS
    return out, mode, t_max


def write_states(path, episodes: list[Episode]) -> None:
    """Hidden ground-truth companion file (evaluation/export only)."""
    lines = ["episode,step,x,v"]
    for q, ep in enumerate(episodes):
        for t, (x, v) in enumerate(ep.hidden):
            lines.append(f"{q},{t},{_fmt(x)},{_fmt(v)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_states(path) -> list[np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    eps = data[:, 0].astype(int)
    return [data[eps == q][:, 2:4] for q in range(eps.max() + 1 if len(eps) else 0)]
