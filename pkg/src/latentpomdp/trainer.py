"""Unsupervised fit of decoder, dynamics and every trajectory's latents."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .descent import DIRECTIONS, JointDescent
from .env import Trajectory
from .latent_model import NORMS, LatentModel, batch_loss, init_model, pad_batch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n: int = 2
    epochs: int = 600
    step_size_params: float = 0.01
    step_size_latents: float = 0.01
    lam: float = 1e-3
    init_scale: float = 0.1
    seed: int = 0
    norm: str = "l1"
    direction: str = "adam"
    restarts: int = 1  # independent initializations; the lowest final loss wins

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.epochs < 1 or self.restarts < 1:
            raise ValueError("epochs and restarts must be >= 1")
        if self.step_size_params <= 0 or self.step_size_latents <= 0:
            raise ValueError("step sizes must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be > 0")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")


def parse_config(text: str, cls=TrainConfig, base=None):
    """Parse flat ``key = value`` lines into dataclass ``cls``.

    Unknown keys raise ``ValueError``; ``#`` starts a comment. Values are
    coerced to the type of the field's default. Keys absent from the text
    keep the value from ``base`` (or the class default).
    """
    known = {f.name: f for f in fields(cls)}
    values = {} if base is None else {k: getattr(base, k) for k in known}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        default = getattr(cls(), key) if base is None else getattr(base, key)
        values[key] = _coerce(val, default)
    return cls(**values)


def _coerce(val: str, default):
    if isinstance(default, bool):
        if val.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {val!r}")
        return val.lower() in ("true", "1")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    if isinstance(default, list):
        return [int(v) for v in val.replace(",", " ").split()]
    return val


def format_config(cfg) -> str:
    return "".join(f"{f.name} = {_fmt_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, list):
        return " ".join(map(str, v))
    return str(v)


def load_config(path, cls=TrainConfig):
    with open(path) as fh:
        return parse_config(fh.read(), cls)


@dataclass
class FitResult:
    model: LatentModel
    latents: list = field(repr=False)  # one (T'_q, n) array per trajectory
    loss_curve: list = field(default_factory=list)


def dataset_loss(model: LatentModel, dataset: list[Trajectory], latents) -> float:
    obs, acts, mask, Z = pad_batch(dataset, latents)
    return float(batch_loss(model, obs, acts, mask, Z).sum())


def fit(dataset: list[Trajectory], cfg: TrainConfig) -> FitResult:
    """Minimize the summed loss over ``dataset`` w.r.t. parameters and latents.

    Every epoch takes one joint monotone step (:class:`JointDescent`), so the
    recorded curve never increases. With ``cfg.restarts > 1`` the fit is
    repeated from independent initializations and the run with the lowest
    final loss is returned; the first run uses the same initialization as a
    single fit.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    obs, acts, mask = pad_batch(dataset)
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng(cfg.seed if r == 0 else [cfg.seed, r])
        model, Z, curve = _fit_once(obs, acts, mask, cfg, rng)
        log.info("restart %d: final loss %.6g", r, curve[-1])
        if best is None or curve[-1] < best[2][-1]:
            best = (model, Z, curve)
    model, Z, curve = best
    latents = [Z[q, :len(t)].copy() for q, t in enumerate(dataset)]
    return FitResult(model, latents, curve)


def _fit_once(obs, acts, mask, cfg: TrainConfig, rng: np.random.Generator):
    model = init_model(rng, cfg.n, obs.shape[-1], cfg.lam, cfg.init_scale, cfg.norm)
    Z = rng.uniform(-cfg.init_scale, cfg.init_scale, obs.shape[:2] + (cfg.n,)) * mask[..., None]
    opt = JointDescent(cfg.step_size_latents, cfg.step_size_params, cfg.direction)
    current = float(batch_loss(model, obs, acts, mask, Z).sum())
    curve = []
    for epoch in range(cfg.epochs):
        model, Z, current = opt.step(model, obs, acts, mask, Z, current)
        if not np.isfinite(current):
            raise TrainingError(f"loss became non-finite at epoch {epoch}; reduce the step sizes")
        curve.append(current)
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.6g", epoch, current)
    return model, Z, curve


def train_report(loss_curve) -> str:
    if len(loss_curve) == 0:
        raise ValueError("empty loss curve")
    first, last = float(loss_curve[0]), float(loss_curve[-1])
    improvement = 0.0 if first == 0 else 100.0 * (first - last) / first
    lines = [
        f"epochs: {len(loss_curve)}",
        f"initial loss: {first:.6g}",
        f"final loss: {last:.6g}",
        f"improvement: {improvement:.1f}%",
    ]
    if last > first:
        lines.append("WARNING: diverged (final loss above initial)")
    return "\n".join(lines)
