"""Lockstep simulation of many episodes in the real environment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import GOAL_X, Mode, StartBatch, observe_arrays, step_arrays


@dataclass
class BatchResult:
    success: np.ndarray  # (B,) bool
    lengths: np.ndarray  # (B,) observations recorded per episode
    observations: list | None = None  # per episode (T', m)
    actions: list | None = None  # per episode (T',)
    states: list | None = None  # per episode (T', 2), hidden ground truth


def run_batch(starts: StartBatch, policy, representer, mode: Mode, T_max: int, *,
              first_actions=None, started: bool = False, record: bool = False) -> BatchResult:
    """Run every start until the goal or ``T_max`` observations.

    The goal is checked when a state is observed, so an episode of length
    ``T'`` has ``T' - 1`` transitions. ``first_actions`` overrides the policy
    at the first step (rollouts of a fixed first action). ``started`` means
    ``representer`` already holds the start representations. With
    ``record`` the policy is also queried at the final observation so every
    recorded step carries an action.
    """
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    mode = Mode(mode)
    B = len(starts)
    x, v = starts.states[:, 0].copy(), starts.states[:, 1].copy()
    if not started:
        representer.start(starts)
    active = np.arange(B)
    success = np.zeros(B, dtype=bool)
    lengths = np.zeros(B, dtype=int)
    if record:
        m = mode.obs_dim
        obs_rec = np.zeros((B, T_max, m))
        act_rec = np.zeros((B, T_max), dtype=int)
        st_rec = np.zeros((B, T_max, 2))
    for t in range(T_max):
        if len(active) == 0:
            break
        goal = x >= GOAL_X
        last = t == T_max - 1
        success[active[goal]] = True
        if record:
            obs_rec[active, t] = observe_arrays(x, v, mode)
            st_rec[active, t, 0], st_rec[active, t, 1] = x, v
            z = representer.current() if policy.needs_latent else None
            a = _choose(policy, z, len(active), first_actions, active, t)
            act_rec[active, t] = a
        done = goal | last
        lengths[active[done]] = t + 1
        if done.all():
            break
        if done.any():
            keep = np.flatnonzero(~done)
            active, x, v = active[keep], x[keep], v[keep]
            representer = representer.take(keep)
            if record:
                a = a[keep]
        if not record:
            z = representer.current() if policy.needs_latent else None
            a = _choose(policy, z, len(active), first_actions, active, t)
        x, v, _ = step_arrays(x, v, a)
        representer.push(a, observe_arrays(x, v, mode))
    res = BatchResult(success, lengths)
    if record:
        res.observations = [obs_rec[i, :lengths[i]] for i in range(B)]
        res.actions = [act_rec[i, :lengths[i]] for i in range(B)]
        res.states = [st_rec[i, :lengths[i]] for i in range(B)]
    return res


def _choose(policy, z, count, first_actions, active, t):
    if t == 0 and first_actions is not None:
        return np.asarray(first_actions)[active]
    return policy.act_batch(z, count)
