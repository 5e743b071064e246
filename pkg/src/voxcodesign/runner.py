"""Run configuration, run directories, and the pipeline entry points.

A run directory holds everything needed to audit or repeat the run:

  config.txt        resolved configuration, ``key = value`` per line
  metrics.csv       deterministic per-step or per-generation log
  timings.csv       wall time per row (kept apart so metrics stay byte-stable)
  eval_suite.csv    evaluation environments (evolution and eval modes)
  lineage.csv       admitted bodies with parents (evolution modes)
  population.csv    final population (evolution modes)
  *.vxcp            controller checkpoints
  summary.json      machine-readable summary
"""
from __future__ import annotations

import dataclasses
import json
import shutil
import time
from dataclasses import dataclass, fields, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import controller as ctl
from . import envgen
from . import evolution as evo
from . import gradients as gr
from . import morphospace as ms
from . import physics as ph
from . import training as tr

MODES = ("pretrain", "zero-shot", "few-shot", "simultaneous", "eval", "gradcheck")
PROFILES = ("desk", "paper")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3
EXIT_GRADCHECK = 4
EXIT_INCOMPLETE = 5

PROFILE_DEFAULTS = {
    "desk": dict(population=64, batch=32, steps=300, timesteps=200, generations=40),
    "paper": dict(population=8192, batch=8192, steps=1400, timesteps=1000, generations=100),
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


class IncompleteRunError(RuntimeError):
    def __init__(self, run_dir, missing):
        self.missing = list(missing)
        super().__init__(f"{run_dir}: missing {', '.join(self.missing)}")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "pretrain"
    seed: int = 0
    profile: str = "desk"
    population: int | None = None
    batch: int | None = None
    steps: int | None = None
    timesteps: int | None = None
    generations: int | None = None
    out_dir: str = "runs"
    checkpoint: str = ""
    workers: int = 1
    dtype: str = "float32"
    friction: str = "coulomb"
    checkpoint_every: int = 0

    def resolved(self) -> "RunConfig":
        """Fill profile-dependent fields and validate."""
        if self.profile not in PROFILES:
            raise ConfigError(f"profile: expected one of {PROFILES}, got {self.profile!r}")
        filled = {k: v if getattr(self, k) is None else getattr(self, k)
                  for k, v in PROFILE_DEFAULTS[self.profile].items()}
        cfg = replace(self, **filled)
        cfg.validate()
        return cfg

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        for name in ("population", "batch", "steps", "timesteps", "generations", "workers"):
            value = getattr(self, name)
            if value is None or value < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
        if self.population < 4 or self.population % 2:
            raise ConfigError(f"population: must be an even number >= 4, got {self.population}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every: must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: expected float32 or float64, got {self.dtype!r}")
        if self.friction not in ph.FRICTION_MODES:
            raise ConfigError(f"friction: expected one of {ph.FRICTION_MODES}, got {self.friction!r}")
        if self.mode in ("zero-shot", "few-shot", "eval"):
            if not self.checkpoint:
                raise ConfigError(f"checkpoint: required for mode {self.mode}")
            if not Path(self.checkpoint).is_file():
                raise ConfigError(f"checkpoint: no such file {self.checkpoint}")

    # flat text form -----------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls(**parse_config_text(text))


def _coerce(name, raw):
    f = {f.name: f for f in fields(RunConfig)}.get(name)
    if f is None:
        raise ConfigError(f"{name}: unknown config key")
    raw = raw.strip()
    kind = str(f.type)
    if "int" in kind:
        if raw == "" and "None" in kind:
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def load_config(path) -> RunConfig:
    return RunConfig.loads(Path(path).read_text())


# ---------------------------------------------------------------------------

def make_run_dir(cfg: RunConfig, now=None) -> Path:
    """``<out_dir>/<mode>_s<seed>_<timestamp>``, suffixed ``-1``, ``-2``... on collision."""
    stamp = (now or datetime.now()).strftime("%Y%m%d-%H%M%S")
    root = Path(cfg.out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"out_dir: not writable ({exc})") from None
    base = f"{cfg.mode}_s{cfg.seed}_{stamp}"
    for n in range(1000):
        path = root / (base if n == 0 else f"{base}-{n}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
        except OSError as exc:
            raise ConfigError(f"out_dir: not writable ({exc})") from None
    raise ConfigError("out_dir: could not create a unique run directory")


def sim_config(cfg: RunConfig) -> ph.SimConfig:
    return ph.SimConfig(steps=cfg.timesteps, dtype=cfg.dtype, friction=cfg.friction)


def pretrain_config(cfg: RunConfig) -> tr.PretrainConfig:
    return tr.PretrainConfig(batch=cfg.batch, steps=cfg.steps, timesteps=cfg.timesteps, sim=sim_config(cfg),
                             workers=cfg.workers, checkpoint_every=cfg.checkpoint_every, dtype=cfg.dtype)


def evolution_config(cfg: RunConfig) -> evo.EvolutionConfig:
    return evo.EvolutionConfig(population=cfg.population, generations=cfg.generations, timesteps=cfg.timesteps,
                               sim=sim_config(cfg), train_batch=cfg.batch, workers=cfg.workers, dtype=cfg.dtype)


def _load_params(cfg):
    return ctl.load_checkpoint(cfg.checkpoint, np.dtype(cfg.dtype))


def _run_pretrain(cfg, run_dir):
    _, logs = tr.pretrain(pretrain_config(cfg), cfg.seed, out_dir=run_dir)
    losses = [log.loss for log in logs]
    tail = losses[-20:]
    return dict(first_loss=losses[0], final_loss=losses[-1], final_20_mean=float(np.mean(tail)), steps=len(logs))


def _run_evolution(cfg, run_dir):
    params = None if cfg.mode == "simultaneous" else _load_params(cfg)
    ecfg = evolution_config(cfg)
    suite = envgen.build_eval_suite(tr.Streams(cfg.seed).sequences["suite"])
    envgen.save_eval_suite(suite, run_dir / "eval_suite.csv")
    result = evo.run(cfg.mode, ecfg, cfg.seed, params=params, suite=suite, out_dir=run_dir)
    f = result.population.fitness()
    div = [log.diversity for log in result.logs]
    return dict(final_fitness_min=float(f.min()), final_fitness_mean=float(f.mean()),
                final_fitness_max=float(f.max()), diversity_first=div[0], diversity_last=div[-1],
                diversity_peak=float(max(div)), generations=len(result.logs) - 1)


def _run_eval(cfg, run_dir):
    """Score the checkpoint on ``population`` fresh random bodies."""
    params = _load_params(cfg)
    streams = tr.Streams(cfg.seed)
    suite = envgen.build_eval_suite(streams.sequences["suite"])
    envgen.save_eval_suite(suite, run_dir / "eval_suite.csv")
    pop = evo.initial_population(evolution_config(cfg), streams.robots)
    evo.evaluate(pop.members, params, suite, sim_config(cfg), workers=cfg.workers)
    evo.write_population(pop, run_dir / "population.csv")
    f = pop.fitness()
    with open(run_dir / "metrics.csv", "w") as fh:
        fh.write("index,key,fitness,n_diverged\n")
        for i, m in enumerate(pop.members):
            fh.write(f"{i},{m.key},{m.fitness!r},{m.n_diverged}\n")
    return dict(final_fitness_min=float(f.min()), final_fitness_mean=float(f.mean()), final_fitness_max=float(f.max()))


GRADCHECK_CASES = (
    # name, terrain sigma, tolerance
    ("flat", 0.0, 1e-3),
    ("rugged", 0.1, 5e-2),
)


def gradcheck_batch(seed, sigma):
    """A one-voxel body with a light 1 m away, on flat or rugged terrain."""
    rng = np.random.default_rng(seed)
    g = ms.center_and_ground(ms.from_voxels([(0, 0, 0)]))
    terrain = envgen.sample_terrain(rng, sigma=sigma) if sigma > 0 else ph.HeightMap.flat()
    pheno = ms.express(g)
    com = ph.initial_com(pheno, terrain)
    light = np.array([com[0] + 1.0, com[1] + 0.3, 0.0])
    light[2] = ph.height_at(terrain, light[0], light[1])
    return ph.make_batch([pheno], [ph.Environment(terrain, light)], np.float64)


def run_gradcheck(seed=0, n_params=20, steps=50, eps=1e-5, friction="coulomb"):
    """Reverse pass vs central differences on flat and rugged terrain.

    Returns a list of ``(case, index, analytic, numeric, rel_err, tol)`` rows.
    """
    rows = []
    params = ctl.init_params(seed, np.float64)
    cfg = ph.SimConfig(steps=steps, dtype="float64", friction=friction)
    for case, sigma, tol in GRADCHECK_CASES:
        batch = gradcheck_batch(seed, sigma)
        idx, a, n, err = gr.gradient_check(batch, params, cfg, n_params=n_params, eps=eps, rng=seed)
        rows += [(case, int(i), float(x), float(y), float(e), tol) for i, x, y, e in zip(idx, a, n, err)]
    return rows


def _run_gradcheck(cfg, run_dir):
    rows = run_gradcheck(cfg.seed, steps=min(cfg.timesteps, 50), friction=cfg.friction)
    with open(run_dir / "metrics.csv", "w") as fh:
        fh.write("case,index,analytic,numeric,rel_err,tol\n")
        for r in rows:
            fh.write(",".join([r[0], str(r[1])] + [repr(v) for v in r[2:]]) + "\n")
    worst = {case: max(r[4] for r in rows if r[0] == case) for case, _, _ in GRADCHECK_CASES}
    passed = all(r[4] <= r[5] for r in rows)
    return dict(passed=passed, **{f"max_rel_err_{k}": v for k, v in worst.items()})


PIPELINES = {
    "pretrain": _run_pretrain,
    "zero-shot": _run_evolution,
    "few-shot": _run_evolution,
    "simultaneous": _run_evolution,
    "eval": _run_eval,
    "gradcheck": _run_gradcheck,
}


@dataclass
class RunOutcome:
    run_dir: Path
    exit_code: int
    summary: dict


def run(config: RunConfig) -> RunOutcome:
    """Resolve, validate, create the run directory, and execute the mode's pipeline.

    Raises :class:`ConfigError` before touching the filesystem if the
    configuration is invalid.
    """
    cfg = config.resolved()
    run_dir = make_run_dir(cfg)
    (run_dir / "config.txt").write_text(cfg.dumps())
    if cfg.checkpoint and cfg.mode in ("zero-shot", "few-shot", "eval"):
        shutil.copyfile(cfg.checkpoint, run_dir / "input_checkpoint.vxcp")
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        summary = PIPELINES[cfg.mode](cfg, run_dir)
    except tr.DivergenceError as exc:
        summary, code = dict(error=str(exc)), EXIT_DIVERGED
    if cfg.mode == "gradcheck" and not summary["passed"]:
        code = EXIT_GRADCHECK
    summary = dict(mode=cfg.mode, seed=cfg.seed, exit_code=code, wall_seconds=round(time.perf_counter() - t0, 3),
                   **summary)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunOutcome(run_dir, code, summary)


# ---------------------------------------------------------------------------

REQUIRED = {
    "pretrain": ("config.txt", "metrics.csv", "pretrained.vxcp", "summary.json"),
    "zero-shot": ("config.txt", "metrics.csv", "lineage.csv", "population.csv", "eval_suite.csv", "summary.json"),
    "few-shot": ("config.txt", "metrics.csv", "lineage.csv", "population.csv", "eval_suite.csv",
                 "final_params.vxcp", "summary.json"),
    "simultaneous": ("config.txt", "metrics.csv", "lineage.csv", "population.csv", "eval_suite.csv",
                     "final_params.vxcp", "summary.json"),
    "eval": ("config.txt", "metrics.csv", "population.csv", "eval_suite.csv", "summary.json"),
    "gradcheck": ("config.txt", "metrics.csv", "summary.json"),
}


def _population_fitness(path):
    with open(path) as fh:
        fh.readline()
        return np.array([float(line.rstrip("\n").split(",")[2]) for line in fh if line.strip()])


def report(run_dir) -> str:
    """Write plot-ready series into ``run_dir`` and return a text summary."""
    run_dir = Path(run_dir)
    if not (run_dir / "config.txt").is_file():
        raise IncompleteRunError(run_dir, ["config.txt"])
    cfg = load_config(run_dir / "config.txt")
    missing = [name for name in REQUIRED[cfg.mode] if not (run_dir / name).is_file()]
    if missing:
        raise IncompleteRunError(run_dir, missing)
    summary = json.loads((run_dir / "summary.json").read_text())
    lines = [f"run {run_dir.name}: mode {cfg.mode}, seed {cfg.seed}, exit code {summary.get('exit_code')}"]
    if cfg.mode == "pretrain":
        m = tr.read_metrics(run_dir / "metrics.csv")
        with open(run_dir / "loss_series.csv", "w") as fh:
            fh.write("step,loss,loss_smoothed50\n")
            for s, loss, sm in zip(m["step"], m["loss"], tr.smoothed(m["loss"])):
                fh.write(f"{int(s)},{loss!r},{sm!r}\n")
        lines.append(f"steps {len(m['step'])}, first loss {m['loss'][0]:.4f}, "
                     f"final 20-step mean {np.mean(m['loss'][-20:]):.4f}")
    elif cfg.mode in evo.MODES:
        m = np.genfromtxt(run_dir / "metrics.csv", delimiter=",", names=True, ndmin=1)
        with open(run_dir / "diversity_series.csv", "w") as fh:
            fh.write("generation,diversity,diversity_canonical\n")
            for g, d, dc in zip(m["generation"], m["diversity"], m["diversity_canonical"]):
                fh.write(f"{int(g)},{d!r},{dc!r}\n")
        with open(run_dir / "fitness_series.csv", "w") as fh:
            fh.write("generation,mean_fitness,min_fitness,max_fitness\n")
            for g, a, b, c in zip(m["generation"], m["mean_fitness"], m["min_fitness"], m["max_fitness"]):
                fh.write(f"{int(g)},{a!r},{b!r},{c!r}\n")
        lines.append(f"generations {len(m) - 1}, diversity {m['diversity'][0]:.4f} -> {m['diversity'][-1]:.4f} "
                     f"(peak {m['diversity'].max():.4f})")
    if cfg.mode in evo.MODES or cfg.mode == "eval":
        f = _population_fitness(run_dir / "population.csv")
        lines.append(f"final fitness min {f.min():.4f} mean {f.mean():.4f} max {f.max():.4f}")
    if cfg.mode == "gradcheck":
        lines.append("gradient check " + ("passed" if summary.get("passed") else "FAILED") + ", " + ", ".join(
            f"{k} {v:.2e}" for k, v in sorted(summary.items()) if k.startswith("max_rel_err")))
    lines.append(f"wall time {summary.get('wall_seconds', float('nan')):.1f} s")
    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text)
    return text


def config_fields():
    return [(f.name, f.type, f.default) for f in dataclasses.fields(RunConfig)]
