"""Seeded reproduction of the mountain-car result table and the latent export.

One run of a row is ``collect -> fit (latent rows only) -> rcpi_train``; its
score is the final policy's success rate on fresh episodes. Every random
number in a run comes from a generator keyed by ``(seed, purpose)``, so a row
is a pure function of its configuration and seed, independent of which
other rows run in the same process.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import logging
import math
import shutil
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .env import DEFAULT_T_MAX, Episode, Mode, collect_random
from .inference import InferenceStrategy, Kind, infer_exact_batch
from .latent_model import LatentModel, pad_batch
from .rcpi import DegenerateRollouts, RolloutConfig, rcpi_train
from .trainer import TrainConfig, TrainingError, fit, format_config, parse_config

log = logging.getLogger(__name__)

TABLE_FILE = "table.csv"
LATENT_FILE = "latent.csv"
CONFIG_FILE = "experiment.cfg"
VERSION_FILE = "code_version.txt"
EXPORT_COLUMNS = ("episode", "step", "z1", "z2", "x_true", "v_true")


@dataclass
class ExperimentConfig:
    """Every knob of a reproduction, as one flat ``key = value`` file.

    ``window = 0`` and ``online_refine_steps = -1`` mean "whole history" and
    "same as refine_steps" respectively.
    """

    # seeds and table layout
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    latent_dims: list = field(default_factory=lambda: [2, 3, 5])
    rows: str = "all"  # "all" or a comma list of row labels, e.g. "FO/FObs,PO/FLat/5"
    # data collection
    episodes: int = 200
    t_max: int = DEFAULT_T_MAX
    # representation learning
    epochs: int = 600
    step_size_params: float = 0.01
    step_size_latents: float = 0.01
    lam: float = 1e-3
    init_scale: float = 0.1
    norm: str = "l1"
    train_direction: str = "adam"
    restarts: int = 4
    # inference for new episodes
    refine_steps: int = 50
    online_refine_steps: int = 5
    window: int = 10
    infer_step_size: float = 0.05
    infer_direction: str = "adam"
    mix_probability: float = 0.5
    # policy iteration
    states_per_iter: int = 1000
    rollouts_per_state_action: int = 1
    iterations: int = 10
    rollout_space: str = "real_env"
    discount: float = 0.99
    eval_episodes: int = 1000
    classifier_epochs: int = 1000
    classifier_step: float = 1.0
    min_label_fraction: float = 0.01
    cost_sensitive: bool = True
    # latent export
    export_dim: int = 2
    export_episodes: int = 50
    export_refine_steps: int = 200

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.latent_dims = [int(n) for n in self.latent_dims]
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(n < 1 for n in self.latent_dims):
            raise ValueError("latent_dims must be positive")
        if self.episodes < 1 or self.t_max < 1 or self.export_episodes < 1:
            raise ValueError("episodes, t_max and export_episodes must be positive")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        # build the sub-configs once so their validation runs here
        self.train_config(self.latent_dims[0] if self.latent_dims else 2, 0)
        self.strategy(Kind.FLAT)
        self.rollout_config()

    @property
    def runs(self) -> int:
        return len(self.seeds)

    def train_config(self, n: int, seed: int) -> TrainConfig:
        return TrainConfig(n=n, epochs=self.epochs, step_size_params=self.step_size_params,
                           step_size_latents=self.step_size_latents, lam=self.lam,
                           init_scale=self.init_scale, seed=seed, norm=self.norm,
                           direction=self.train_direction, restarts=self.restarts)

    def strategy(self, kind) -> InferenceStrategy:
        return InferenceStrategy(
            kind=kind, mix_probability=self.mix_probability, refine_steps=self.refine_steps,
            online_refine_steps=None if self.online_refine_steps < 0 else self.online_refine_steps,
            step_size=self.infer_step_size, direction=self.infer_direction,
            init_scale=self.init_scale, window=self.window or None)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(
            states_per_iter=self.states_per_iter, rollouts_per_state_action=self.rollouts_per_state_action,
            iterations=self.iterations, horizon=self.t_max, rollout_space=self.rollout_space,
            discount=self.discount, eval_episodes=self.eval_episodes,
            classifier_epochs=self.classifier_epochs, classifier_step=self.classifier_step,
            min_label_fraction=self.min_label_fraction, cost_sensitive=self.cost_sensitive)


def parse_experiment(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config(text, ExperimentConfig, base)


def load_experiment(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_experiment(fh.read())


@dataclass
class ExperimentSpec:
    """One block of the table: a mode/strategy pair over some latent sizes."""

    observation_mode: Mode
    strategy: InferenceStrategy
    latent_dims: list
    seeds: list
    config: ExperimentConfig

    def __post_init__(self):
        self.observation_mode = Mode(self.observation_mode)
        if self.strategy.kind is Kind.FOBS:
            self.latent_dims = [None]  # ignored for the observation strategy
        elif not self.latent_dims:
            raise ValueError("latent strategies need at least one latent size")

    @property
    def runs(self) -> int:
        return len(self.seeds)


@dataclass
class ResultRow:
    input_mode: str
    model_name: str
    dims: int | None
    per_run: list  # success rate per seed; NaN for an aborted run
    error: str = ""
    curves: list = field(default_factory=list, repr=False)  # per-iteration success, per seed

    @property
    def failed(self) -> bool:
        return bool(self.error)

    @property
    def mean_success(self) -> float:
        return float(np.mean(self.per_run)) if self.per_run else math.nan

    @property
    def label(self) -> str:
        return row_label(self.input_mode, self.model_name, self.dims)


_NAMES = {Kind.FOBS: "FObs", Kind.FLAT: "FLat", Kind.FDYN: "FDyn", Kind.FPAR: "FPar"}


def row_label(mode, model_name: str, dims) -> str:
    base = f"{Mode(mode).value}/{model_name}"
    return base if dims is None else f"{base}/{dims}"


def table_specs(cfg: ExperimentConfig) -> list[ExperimentSpec]:
    """Blocks in table order: FO/FObs, PO/FObs, then FLat, FDyn, FPar on PO."""
    specs = [ExperimentSpec(Mode.FO, cfg.strategy(Kind.FOBS), [], cfg.seeds, cfg),
             ExperimentSpec(Mode.PO, cfg.strategy(Kind.FOBS), [], cfg.seeds, cfg)]
    for kind in (Kind.FLAT, Kind.FDYN, Kind.FPAR):
        specs.append(ExperimentSpec(Mode.PO, cfg.strategy(kind), list(cfg.latent_dims), cfg.seeds, cfg))
    return specs


def _selected(cfg: ExperimentConfig) -> set[str] | None:
    if cfg.rows.strip().lower() == "all":
        return None
    return {r.strip() for r in cfg.rows.split(",") if r.strip()}


def _rng(seed: int, purpose: str) -> np.random.Generator:
    # crc32 keeps the stream key stable across processes (unlike hash())
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode())])


class Pipeline:
    """Memoizes per-seed datasets and models shared between table rows."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._data: dict[tuple[int, Mode], list[Episode]] = {}
        self._models: dict[tuple[int, int], LatentModel] = {}

    def dataset(self, seed: int, mode: Mode) -> list[Episode]:
        key = (seed, Mode(mode))
        if key not in self._data:
            self._data[key] = collect_random(self.cfg.episodes, key[1], self.cfg.t_max,
                                             _rng(seed, f"collect/{key[1].value}"))
        return self._data[key]

    def model(self, seed: int, n: int) -> LatentModel:
        key = (seed, n)
        if key not in self._models:
            eps = self.dataset(seed, Mode.PO)
            data = [e.start.warmup(Mode.PO).concat(e.trajectory) for e in eps]
            res = fit(data, self.cfg.train_config(n, seed))
            log.info("seed %d n=%d: training loss %.4g -> %.4g", seed, n, res.loss_curve[0], res.loss_curve[-1])
            self._models[key] = res.model
        return self._models[key]

    def run(self, mode: Mode, strategy: InferenceStrategy, n: int | None, seed: int) -> list[float]:
        """Per-iteration evaluation curve of one seeded run; the score is its last entry."""
        model = None if strategy.kind is Kind.FOBS else self.model(seed, n)
        label = row_label(mode, _NAMES[strategy.kind], n)
        res = rcpi_train(model, strategy, mode, self.cfg.rollout_config(), _rng(seed, f"rcpi/{label}"))
        return [float(c) for c in res.curve]


def reproduce_table(specs: list[ExperimentSpec], pipeline: Pipeline | None = None,
                    only: set[str] | None = None) -> list[ResultRow]:
    """Run every row of ``specs`` over its seeds.

    An aborted run (degenerate rollouts, divergent training) marks its row
    failed; the remaining rows still run.
    """
    rows = []
    for spec in specs:
        pipe = pipeline or Pipeline(spec.config)
        name = _NAMES[spec.strategy.kind]
        for n in spec.latent_dims:
            label = row_label(spec.observation_mode, name, n)
            if only is not None and label not in only:
                continue
            per_run, curves, errors = [], [], []
            for seed in spec.seeds:
                try:
                    curves.append(pipe.run(spec.observation_mode, spec.strategy, n, seed))
                    per_run.append(curves[-1][-1])
                except (DegenerateRollouts, TrainingError) as exc:
                    curves.append([])
                    per_run.append(math.nan)
                    errors.append(f"seed {seed}: {exc}")
                log.info("%s seed %d: %.3f", label, seed, per_run[-1])
            rows.append(ResultRow(spec.observation_mode.value, name, n, per_run, "; ".join(errors), curves))
    return rows


def format_table(rows: list[ResultRow]) -> str:
    """Aligned plain-text table."""
    head = ("Input", "Model", "Dim", "Mean", "Runs")
    body = []
    for r in rows:
        mean = "FAILED" if r.failed else f"{r.mean_success:.3f}"
        runs = " ".join("nan" if math.isnan(v) else f"{v:.3f}" for v in r.per_run)
        body.append((r.input_mode, r.model_name, "-" if r.dims is None else str(r.dims), mean, runs))
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"


def write_table_csv(path, rows: list[ResultRow]) -> None:
    runs = max((len(r.per_run) for r in rows), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input", "model", "dims", "mean_success", "status"] + [f"run{i + 1}" for i in range(runs)])
        for r in rows:
            w.writerow([r.input_mode, r.model_name, "" if r.dims is None else r.dims,
                        format(r.mean_success, ".17g"), "failed" if r.failed else "ok"]
                       + [format(v, ".17g") for v in r.per_run])


def read_table_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            per_run = [float(rec[k]) for k in rec if k.startswith("run") and rec[k] != ""]
            dims = int(rec["dims"]) if rec["dims"] else None
            rows.append(ResultRow(rec["input"], rec["model"], dims, per_run,
                                  "" if rec["status"] == "ok" else "failed"))
    return rows


def episode_records(episodes: list[Episode], mode: Mode = Mode.PO) -> list[tuple]:
    """``(warmup, trajectory, hidden)`` triples, the input form of :func:`export_latent`."""
    return [(e.start.warmup(mode), e.trajectory, e.hidden) for e in episodes]


def infer_dataset(model: LatentModel, dataset, refine_steps: int = 200, step_size: float = 0.05,
                  direction: str = "adam") -> list[np.ndarray]:
    """Episode-step latents by exact inference from a zero start.

    Each sequence is fitted on its warmup followed by its episode steps; the
    warmup latents are dropped from the result.
    """
    trajs = [w.concat(t) for w, t, _ in dataset]
    obs, acts, mask = pad_batch(trajs)
    Z = infer_exact_batch(model, obs, acts, mask, np.zeros(obs.shape[:2] + (model.n,)),
                          refine_steps, step_size, direction)
    return [Z[i, len(w):len(w) + len(t)] for i, (w, t, _) in enumerate(dataset)]


def export_latent(model: LatentModel, dataset, out_path, refine_steps: int = 200) -> int:
    """Write ``episode,step,z1,z2,x_true,v_true`` lines; returns the line count.

    ``dataset`` holds ``(warmup, trajectory, hidden)`` triples (see
    :func:`episode_records`); ``hidden`` is only copied to the output.
    """
    if model.n != 2:
        raise ValueError(f"latent export needs a 2-dimensional model, got n={model.n}")
    for _, t, h in dataset:
        if len(h) != len(t):
            raise ValueError("hidden states must cover every trajectory step")
    count = 0
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPORT_COLUMNS)
        for q, (Z, (_, _, S)) in enumerate(zip(infer_dataset(model, dataset, refine_steps), dataset)):
            for t in range(len(Z)):
                w.writerow([q, t] + [format(float(v), ".17g") for v in (Z[t, 0], Z[t, 1], S[t, 0], S[t, 1])])
                count += 1
    return count


def r_squared(X, y) -> float:
    """Ordinary least squares (with intercept) coefficient of determination."""
    X = np.column_stack([np.asarray(X, dtype=float).reshape(len(y), -1), np.ones(len(y))])
    y = np.asarray(y, dtype=float)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return float(1.0 - resid @ resid / ((y - y.mean()) @ (y - y.mean())))


def speed_separation(path) -> tuple[float, float]:
    """``(R2 of (z1, z2) -> v, R2 of x -> v)`` from a latent export file."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return r_squared(data[:, 2:4], data[:, 5]), r_squared(data[:, 4], data[:, 5])


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:16]}"


def _fresh_dir(out_dir: Path) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = out_dir / f"run-{stamp}"
    path, k = base, 1
    while path.exists():
        k += 1
        path = Path(f"{base}-{k}")
    path.mkdir(parents=True)
    return path


@dataclass
class RunAllResult:
    directory: Path
    rows: list
    export_r2: tuple
    pipeline: Pipeline | None = field(default=None, repr=False)  # datasets and models of the run

    @property
    def ok(self) -> bool:
        return not any(r.failed for r in self.rows)


def run_all(cfg: ExperimentConfig, out_dir, spec_source=None) -> RunAllResult:
    """Full reproduction into a new timestamped directory under ``out_dir``.

    Writes the experiment configuration (plus ``spec_source`` copied verbatim
    when given), the code version, one result table and one latent export
    for the first seed's ``export_dim`` model.
    """
    out = _fresh_dir(Path(out_dir))
    (out / CONFIG_FILE).write_text(format_config(cfg))
    if spec_source is not None:
        shutil.copyfile(spec_source, out / Path(spec_source).name)
    (out / VERSION_FILE).write_text(code_version() + "\n")
    pipe = Pipeline(cfg)
    rows = reproduce_table(table_specs(cfg), pipe, _selected(cfg))
    write_table_csv(out / TABLE_FILE, rows)
    seed = cfg.seeds[0]
    held_out = collect_random(cfg.export_episodes, Mode.PO, cfg.t_max, _rng(seed, "export"))
    export_latent(pipe.model(seed, cfg.export_dim), episode_records(held_out), out / LATENT_FILE, cfg.export_refine_steps)
    return RunAllResult(out, rows, speed_separation(out / LATENT_FILE), pipe)


def config_keys() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
