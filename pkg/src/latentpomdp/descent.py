"""Monotone first-order steps shared by training and exact inference.

Each step proposes ``x - eta * d`` and halves ``eta`` (up to 20 times) until
the objective does not increase; if no halving works the step is a no-op.
``d`` is either the raw subgradient or a moment-normalized (Adam-style)
direction. The L1 objective has kinks everywhere, and along the raw
subgradient the acceptable step collapses quickly; the normalized direction
keeps making progress (see the README for numbers).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .latent_model import LatentModel, batch_grad, batch_loss

MAX_HALVINGS = 20
DIRECTIONS = ("adam", "gradient")


@dataclass
class Moments:
    """First/second moment estimates for one array-valued variable."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def direction(self, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps)

    def take(self, idx) -> "Moments":
        if self.m is None:
            return Moments(self.beta1, self.beta2, self.eps, t=self.t)
        return Moments(self.beta1, self.beta2, self.eps, self.m[idx], self.v[idx], self.t)


@dataclass
class LatentDescent:
    """Latent-only descent over a padded batch, parameters frozen.

    Each row remembers the step it last accepted and starts its next sweep
    at twice that (capped at ``step_size``), so converged rows do not replay
    the whole halving ladder every sweep.
    """

    step_size: float = 0.05
    direction: str = "adam"
    moments: Moments = field(default_factory=Moments)
    evaluations: int = 0  # row-level loss evaluations, for diagnostics
    eta: np.ndarray | None = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")

    def sweep(self, model: LatentModel, obs, actions, mask, Z, current=None, frozen: int = 0):
        """One descent sweep; returns ``(Z_new, per_trajectory_loss)``.

        ``current`` may hold the per-trajectory loss at ``Z`` to save a pass.
        The first ``frozen`` latents of every row are held fixed.
        """
        if current is None:
            current = batch_loss(model, obs, actions, mask, Z)
        if self.eta is None:
            self.eta = np.full(len(Z), self.step_size)
        g = batch_grad(model, obs, actions, mask, Z, params=False).Z
        d = self.moments.direction(g) if self.direction == "adam" else g
        d = d * mask[..., None]
        d[:, :frozen] = 0.0
        Z_new = Z.copy()
        best = current.copy()
        todo = np.flatnonzero(np.any(d != 0, axis=(1, 2)))
        eta = self.eta.copy()
        for _ in range(MAX_HALVINGS + 1):
            if len(todo) == 0:
                break
            cand = Z[todo] - eta[todo, None, None] * d[todo]
            cl = batch_loss(model, obs[todo], actions[todo], mask[todo], cand)
            self.evaluations += len(todo)
            ok = cl <= current[todo]
            Z_new[todo[ok]] = cand[ok]
            best[todo[ok]] = cl[ok]
            self.eta[todo[ok]] = np.minimum(self.step_size, 2.0 * eta[todo[ok]])
            todo = todo[~ok]
            eta[todo] *= 0.5
        self.eta[todo] = self.step_size  # no acceptable step: retry from the top next sweep
        return Z_new, best


def _pack(model: LatentModel) -> list[np.ndarray]:
    return [model.decoder.W, model.decoder.b, model.dynamics.A, model.dynamics.c]


def _with(model: LatentModel, arrays) -> LatentModel:
    out = model.copy()
    out.decoder.W, out.decoder.b, out.dynamics.A, out.dynamics.c = arrays
    return out


@dataclass
class JointDescent:
    """One step on latents and parameters together.

    Both blocks move along their normalized directions with a shared step
    multiplier, halved until the total loss does not increase. Updating the
    blocks in turn instead stalls on the L1 kinks (latents pinned to the
    dynamics while the decoder is still weak), which is why training moves
    them jointly.
    """

    step_size_latents: float = 0.01
    step_size_params: float = 0.01
    direction: str = "adam"
    latent_moments: Moments = field(default_factory=Moments)
    param_moments: list = field(default_factory=lambda: [Moments() for _ in range(4)])
    rejected: int = 0

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")

    def step(self, model: LatentModel, obs, actions, mask, Z, current: float):
        """Returns ``(model, Z, total_loss)`` after one monotone joint step."""
        g = batch_grad(model, obs, actions, mask, Z, params=True)
        grads = [g.W, g.b, g.A, g.c]
        if self.direction == "adam":
            dz = self.latent_moments.direction(g.Z)
            dirs = [mom.direction(gi) for mom, gi in zip(self.param_moments, grads)]
        else:
            count = max(int(mask.sum()), 1)
            dz = g.Z
            dirs = [gi / count for gi in grads]
        dz = dz * mask[..., None]
        base = _pack(model)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            Zc = Z - scale * self.step_size_latents * dz
            cand = _with(model, [p - scale * self.step_size_params * d for p, d in zip(base, dirs)])
            total = float(batch_loss(cand, obs, actions, mask, Zc).sum())
            if total <= current:
                return cand, Zc, total
            scale *= 0.5
        self.rejected += 1
        return model, Z, current
