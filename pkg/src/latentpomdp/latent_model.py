"""Linear decoder, per-action affine+tanh dynamics, and the reconstruction loss.

For a trajectory ``(o_t, a_t)`` with latents ``z_t`` the loss is::

    sum_t  D(W z_t + b - o_t)
  + sum_{t<T'} D(tanh(A[a_t] z_t + c[a_t]) - z_{t+1})
  + lam * ||W||_F^2

where ``D`` is the L1 norm (default) or the squared L2 norm.

All heavy functions operate on padded batches: ``obs (B, L, m)``,
``actions (B, L)``, ``mask (B, L)`` and ``Z (B, L, n)``. Valid steps form a
prefix of each row. The single-trajectory helpers wrap the batch code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import N_ACTIONS, Trajectory

NORMS = ("l1", "l2")


@dataclass
class DecoderParams:
    W: np.ndarray  # (m, n)
    b: np.ndarray  # (m,)
    lam: float = 0.0

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.b.shape[0] != self.W.shape[0]:
            raise ValueError(f"decoder shapes disagree: W {self.W.shape}, b {self.b.shape}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


@dataclass
class DynamicsParams:
    A: np.ndarray  # (N_ACTIONS, n, n)
    c: np.ndarray  # (N_ACTIONS, n)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        n = self.A.shape[-1]
        if self.A.shape != (N_ACTIONS, n, n) or self.c.shape != (N_ACTIONS, n):
            raise ValueError(f"dynamics shapes disagree: A {self.A.shape}, c {self.c.shape}")


@dataclass
class LatentModel:
    decoder: DecoderParams
    dynamics: DynamicsParams
    norm: str = "l1"

    @property
    def n(self) -> int:
        return self.decoder.W.shape[1]

    @property
    def m(self) -> int:
        return self.decoder.W.shape[0]

    def copy(self) -> "LatentModel":
        d, g = self.decoder, self.dynamics
        return LatentModel(DecoderParams(d.W.copy(), d.b.copy(), d.lam),
                           DynamicsParams(g.A.copy(), g.c.copy()), self.norm)


@dataclass
class Gradients:
    Z: np.ndarray
    W: np.ndarray
    b: np.ndarray
    A: np.ndarray
    c: np.ndarray


def init_model(rng: np.random.Generator, n: int, m: int, lam: float, scale: float,
               norm: str = "l1") -> LatentModel:
    """All parameters uniform in ``[-scale, scale]``."""
    u = lambda *shape: rng.uniform(-scale, scale, shape)
    return LatentModel(DecoderParams(u(m, n), u(m), lam),
                       DynamicsParams(u(N_ACTIONS, n, n), u(N_ACTIONS, n)), norm)


def decode(theta: DecoderParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != theta.W.shape[1]:
        raise ValueError(f"latent has size {z.shape[-1]}, decoder expects {theta.W.shape[1]}")
    return z @ theta.W.T + theta.b


def _affine(gamma: DynamicsParams, z: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", gamma.A[actions], z) + gamma.c[actions]


def dyn(gamma: DynamicsParams, z: np.ndarray, a) -> np.ndarray:
    """``tanh(A[a] z + c[a])``; ``a`` broadcasts against the leading axes of ``z``."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != gamma.A.shape[-1]:
        raise ValueError(f"latent has size {z.shape[-1]}, dynamics expects {gamma.A.shape[-1]}")
    acts = np.broadcast_to(np.asarray(a, dtype=int), z.shape[:-1])
    return np.tanh(_affine(gamma, z, acts))


def _penalty(r: np.ndarray, norm: str) -> np.ndarray:
    return np.abs(r) if norm == "l1" else r * r


def _dpenalty(r: np.ndarray, norm: str) -> np.ndarray:
    # np.sign(0) == 0, the subgradient convention used throughout
    return np.sign(r) if norm == "l1" else 2.0 * r


def _check_norm(norm: str) -> None:
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")


def batch_terms(model: LatentModel, obs, actions, mask, Z):
    """Per-trajectory decoder and dynamics penalty sums, each of shape (B,)."""
    _check_norm(model.norm)
    r = decode(model.decoder, Z) - obs
    dec = (_penalty(r, model.norm).sum(-1) * mask).sum(-1)
    if Z.shape[1] < 2:
        return dec, np.zeros_like(dec)
    h = np.tanh(_affine(model.dynamics, Z[:, :-1], actions[:, :-1]))
    e = h - Z[:, 1:]
    dynl = (_penalty(e, model.norm).sum(-1) * mask[:, 1:]).sum(-1)
    return dec, dynl


def batch_loss(model: LatentModel, obs, actions, mask, Z) -> np.ndarray:
    """Loss of every trajectory in the batch, regularizer included in each."""
    dec, dynl = batch_terms(model, obs, actions, mask, Z)
    return dec + dynl + model.decoder.lam * float(np.sum(model.decoder.W ** 2))


def batch_grad(model: LatentModel, obs, actions, mask, Z, params: bool = True) -> Gradients:
    """Subgradient of ``batch_loss(...).sum()``.

    ``Z`` gradients are per trajectory (each z only appears in its own
    trajectory's loss). Parameter gradients are summed over the batch; the
    regularizer contributes ``2 lam W`` once per trajectory.
    """
    _check_norm(model.norm)
    theta, gamma = model.decoder, model.dynamics
    fmask = mask[..., None].astype(float)
    sr = _dpenalty(decode(theta, Z) - obs, model.norm) * fmask
    gZ = sr @ theta.W
    gA = np.zeros_like(gamma.A)
    gc = np.zeros_like(gamma.c)
    if Z.shape[1] >= 2:
        z_prev, acts = Z[:, :-1], actions[:, :-1]
        h = np.tanh(_affine(gamma, z_prev, acts))
        se = _dpenalty(h - Z[:, 1:], model.norm) * fmask[:, 1:]
        gpre = se * (1.0 - h * h)
        gZ[:, 1:] -= se
        back = np.zeros_like(z_prev)
        for k in range(N_ACTIONS):
            sel = acts == k
            if not sel.any():
                continue
            g_k = gpre[sel]
            back[sel] = g_k @ gamma.A[k]
            if params:
                gA[k] = g_k.T @ z_prev[sel]
                gc[k] = g_k.sum(0)
        gZ[:, :-1] += back
    if not params:
        return Gradients(gZ, np.zeros_like(theta.W), np.zeros_like(theta.b), gA, gc)
    B = Z.shape[0]
    gW = np.einsum("bti,btj->ij", sr, Z) + 2.0 * theta.lam * B * theta.W
    gb = sr.sum((0, 1))
    return Gradients(gZ, gW, gb, gA, gc)


def pad_batch(trajs: list[Trajectory], Zs: list[np.ndarray] | None = None):
    """Stack trajectories of different lengths into padded arrays."""
    L = max(len(t) for t in trajs)
    m = trajs[0].obs_dim
    B = len(trajs)
    obs = np.zeros((B, L, m))
    acts = np.zeros((B, L), dtype=int)
    mask = np.zeros((B, L), dtype=bool)
    for i, t in enumerate(trajs):
        if t.obs_dim != m:
            raise ValueError("all trajectories must share the observation size")
        k = len(t)
        obs[i, :k], acts[i, :k], mask[i, :k] = t.observations, t.actions, True
    if Zs is None:
        return obs, acts, mask
    Z = np.zeros((B, L, Zs[0].shape[-1]))
    for i, z in enumerate(Zs):
        Z[i, :len(z)] = z
    return obs, acts, mask, Z


def _single(traj: Trajectory, zs) -> tuple:
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    if len(zs) != len(traj):
        raise ValueError(f"{len(zs)} latents for a trajectory of length {len(traj)}")
    if not np.all(np.isfinite(zs)):
        raise ValueError("latents must be finite")
    return traj.observations[None], traj.actions[None], np.ones((1, len(traj)), bool), zs[None]


def loss(traj: Trajectory, zs, model: LatentModel) -> float:
    return float(batch_loss(model, *_single(traj, zs))[0])


def loss_terms(traj: Trajectory, zs, model: LatentModel) -> dict:
    """Loss split into its decoder, dynamics and regularizer parts."""
    dec, dynl = batch_terms(model, *_single(traj, zs))
    return {"decoder": float(dec[0]), "dynamics": float(dynl[0]),
            "regularizer": model.decoder.lam * float(np.sum(model.decoder.W ** 2))}


def grad(traj: Trajectory, zs, model: LatentModel) -> Gradients:
    g = batch_grad(model, *_single(traj, zs))
    g.Z = g.Z[0]
    return g


def _fmt_row(row) -> str:
    return " ".join(format(float(u), ".17g") for u in np.ravel(row))


def save_model(path, model: LatentModel) -> None:
    """Text format: ``n m lambda``, W rows, b, then per action A rows and c."""
    n, m = model.n, model.m
    lines = [f"{n} {m} {format(model.decoder.lam, '.17g')}"]
    lines += [_fmt_row(r) for r in model.decoder.W]
    lines.append(_fmt_row(model.decoder.b))
    for k in range(N_ACTIONS):
        lines += [_fmt_row(r) for r in model.dynamics.A[k]]
        lines.append(_fmt_row(model.dynamics.c[k]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path, norm: str = "l1") -> LatentModel:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    n, m, lam = int(rows[0][0]), int(rows[0][1]), float(rows[0][2])
    vals = [np.array(r, dtype=float) for r in rows[1:]]
    if len(vals) != m + 1 + N_ACTIONS * (n + 1):
        raise ValueError(f"model file has {len(vals)} data lines, expected {m + 1 + N_ACTIONS * (n + 1)}")
    W, b = np.stack(vals[:m]), vals[m]
    A, c = [], []
    pos = m + 1
    for _ in range(N_ACTIONS):
        A.append(np.stack(vals[pos:pos + n]))
        c.append(vals[pos + n])
        pos += n + 1
    return LatentModel(DecoderParams(W, b, lam), DynamicsParams(np.stack(A), np.stack(c)), norm)
