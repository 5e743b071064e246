"""Adam, gradient clipping, the restart schedule, and the pretraining loop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import controller as ctl
from . import envgen
from . import gradients as gr
from . import morphospace as ms
from . import physics as ph

ADAM_EPS = 1e-8
METRICS_HEADER = "step,lr,loss,grad_norm,n_diverged"


class DivergenceError(RuntimeError):
    """More than half of a training batch diverged."""


@dataclass(frozen=True)
class ScheduleConfig:
    initial: float = 1e-3
    minimum: float = 1e-5
    cycle: int = 10
    multiplier: int = 2
    decay: float = 0.7
    truncate: int | None = None

    def __post_init__(self):
        if self.cycle < 1 or self.multiplier < 1:
            raise ValueError("cycle and multiplier must be >= 1")
        if not 0 <= self.minimum <= self.initial:
            raise ValueError("need 0 <= minimum <= initial")


PRETRAIN_SCHEDULE = ScheduleConfig()
FEW_SHOT_SCHEDULE = ScheduleConfig(initial=3.5e-4, minimum=3.5e-5, cycle=100, decay=1.0, truncate=60)
SIMULTANEOUS_SCHEDULE = ScheduleConfig(decay=0.65)


def _cycle_length(c, cfg):
    n = cfg.cycle * cfg.multiplier**c
    return min(n, cfg.truncate) if cfg.truncate else n


def cycle_position(step: int, cfg: ScheduleConfig):
    """``(cycle index, step within cycle, cycle length)``.

    A truncated cycle keeps the cosine of the nominal length and simply
    restarts early, so ``p`` runs over ``[0, truncate / nominal)``.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    c, start = 0, 0
    while True:
        n = _cycle_length(c, cfg)
        if step < start + n:
            return c, step - start, cfg.cycle * cfg.multiplier**c
        start += n
        c += 1


def lr_at(step: int, cfg: ScheduleConfig = PRETRAIN_SCHEDULE) -> float:
    c, k, nominal = cycle_position(step, cfg)
    top = cfg.initial * cfg.decay**c
    lo = min(cfg.minimum, top)
    return lo + 0.5 * (top - lo) * (1 + math.cos(math.pi * k / nominal))


def clip_gradient(g: np.ndarray, max_norm=1.0):
    """Returns ``(clipped, norm_before)``; scales only when the norm exceeds ``max_norm``."""
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
    if norm > max_norm:
        g = (g * (max_norm / norm)).astype(g.dtype, copy=False)
    return g, norm


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params))

    def copy(self):
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_step(params, grad, state: AdamState, rate: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new = new.astype(params.dtype, copy=False)
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("non-finite Adam update")
    return new, replace(state, m=m.astype(params.dtype, copy=False), v=v.astype(params.dtype, copy=False), t=t)


# --- pretraining -------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    batch: int = 32
    steps: int = 300
    timesteps: int = 200
    schedule: ScheduleConfig = PRETRAIN_SCHEDULE
    sim: ph.SimConfig = field(default_factory=ph.SimConfig)
    max_norm: float = 1.0
    workers: int = 1
    checkpoint_every: int = 0  # 0: only at completion
    dtype: str = "float32"


DESK_PRETRAIN = PretrainConfig()
PAPER_PRETRAIN = PretrainConfig(batch=8192, steps=1400, timesteps=1000)


class Streams:
    """Independent random streams derived from one run seed.

    Spawn order is fixed (``NAMES``); new purposes are appended at the end,
    so adding a consumer never shifts an existing stream.

    robots   morphology sampling and group draws for training batches
    terrain  height maps
    lights   light positions
    ga       partition, mutation, crossover pairing
    init     controller initialization
    suite    evaluation-suite construction
    """
    NAMES = ("robots", "terrain", "lights", "ga", "init", "suite")

    def __init__(self, seed):
        self.seed = seed
        self.sequences = dict(zip(self.NAMES, np.random.SeedSequence(seed).spawn(len(self.NAMES))))
        for name, seq in self.sequences.items():
            setattr(self, name, np.random.default_rng(seq))


class SampleSource:
    """Draws (morphology, environment) training pairs, never repeating a
    morphology's canonical form within one source."""

    def __init__(self, streams: Streams, seen=None):
        self.streams = streams
        self.seen = set() if seen is None else seen

    def robot(self):
        for _ in range(envgen.MAX_RETRIES):
            g = envgen.sample_robot(self.streams.robots)
            key = ms.canonical_key(g)
            if key not in self.seen:
                self.seen.add(key)
                return g
        raise RuntimeError("could not draw an unseen morphology")

    def environment(self, phenotype):
        terrain = envgen.sample_terrain(self.streams.terrain)
        com = ph.initial_com(phenotype, terrain)
        return ph.Environment(terrain, envgen.sample_light(self.streams.lights, com, terrain))

    def batch(self, n, dtype):
        phenos = [ms.express(self.robot()) for _ in range(n)]
        envs = [self.environment(p) for p in phenos]
        return ph.make_batch(phenos, envs, dtype)


def environments_for(phenotypes, source: SampleSource):
    return [source.environment(p) for p in phenotypes]


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    grad_norm: float
    n_diverged: int
    seconds: float = 0.0

    def row(self):
        return f"{self.step},{self.lr!r},{self.loss!r},{self.grad_norm!r},{self.n_diverged}"


def train_step(params, state, batch, step, schedule, sim, max_norm=1.0, workers=1, cpg_cfg=ctl.CPGConfig()):
    """Rollout, backward, clip, Adam. Returns ``(params, state, StepLog)``."""
    t0 = time.perf_counter()
    grad, losses, diverged = gr.batch_gradient(batch, params, sim, workers=workers, cpg_cfg=cpg_cfg)
    n_div = int(diverged.sum())
    if n_div * 2 > len(batch):
        raise DivergenceError(f"step {step}: {n_div} of {len(batch)} rollouts diverged")
    grad, norm = clip_gradient(grad, max_norm)
    rate = lr_at(step, schedule)
    params, state = adam_step(params, grad, state, rate)
    log = StepLog(step, rate, float(np.mean(losses)), norm, n_div, time.perf_counter() - t0)
    return params, state, log


def write_metrics(logs, path, timings_path=None):
    """``metrics.csv`` is deterministic; wall time goes to a separate file."""
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for log in logs:
            fh.write(log.row() + "\n")
    if timings_path is not None:
        with open(timings_path, "w") as fh:
            fh.write("step,seconds\n")
            for log in logs:
                fh.write(f"{log.step},{log.seconds:.3f}\n")


def read_metrics(path):
    rows = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    return {name: rows[name] for name in rows.dtype.names}


def pretrain(cfg: PretrainConfig, seed, out_dir=None, params=None, progress=None):
    """Morphological pretraining from ``init_params`` (or ``params``).

    Every step draws a fresh batch of unseen morphologies, each on its own
    random terrain with its own light. Returns ``(params, logs)``; when
    ``out_dir`` is set, writes ``metrics.csv``, ``timings.csv`` and
    checkpoints there.
    """
    streams = Streams(seed)
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = ctl.init_params(streams.init, dtype)
    params = params.astype(dtype)
    state = AdamState.zeros_like(params)
    sim = replace(cfg.sim, steps=cfg.timesteps, dtype=cfg.dtype)
    source = SampleSource(streams)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logs = []
    for step in range(cfg.steps):
        batch = source.batch(cfg.batch, dtype)
        try:
            params, state, log = train_step(params, state, batch, step, cfg.schedule, sim, cfg.max_norm, cfg.workers)
        except DivergenceError:
            if out is not None:
                write_metrics(logs, out / "metrics.csv", out / "timings.csv")
            raise
        logs.append(log)
        if progress is not None:
            progress(log)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            ctl.save_checkpoint(out / f"checkpoint_{step + 1:05d}.vxcp", params)
    if out is not None:
        write_metrics(logs, out / "metrics.csv", out / "timings.csv")
        ctl.save_checkpoint(out / "pretrained.vxcp", params)
    return params, logs


def smoothed(values, window=50):
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
