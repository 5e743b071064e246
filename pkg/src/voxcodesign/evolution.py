"""Genetic algorithm over voxel body plans and its three co-design regimes.

zero-shot      frozen pretrained controller
few-shot       pretrained controller finetuned afresh every generation
simultaneous   controller trained from scratch alongside evolution,
               parameters and optimizer state carried over
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import controller as ctl
from . import envgen
from . import morphospace as ms
from . import physics as ph
from . import training as tr

MAX_MUTATION_RETRIES = 10_000
MODES = ("zero-shot", "few-shot", "simultaneous")
METRICS_HEADER = (
    "generation,mean_fitness,min_fitness,max_fitness,diversity,diversity_canonical,"
    "mutation_survival,crossover_survival,lr,n_diverged"
)


class RetryLimitError(RuntimeError):
    pass


@dataclass
class Individual:
    genotype: np.ndarray
    key: str  # canonical form, hex
    fitness: float | None = None
    parents: tuple = ()
    generation: int = 0
    operator: str = "init"
    n_diverged: int = 0

    @classmethod
    def new(cls, genotype, **kw):
        return cls(genotype, ms.canonical_key(genotype), **kw)


@dataclass
class Population:
    members: list
    seen: set = field(default_factory=set)

    def __len__(self):
        return len(self.members)

    def fitness(self):
        return np.array([m.fitness for m in self.members], dtype=np.float64)

    def genotypes(self):
        return np.stack([m.genotype for m in self.members])


@dataclass(frozen=True)
class EvolutionConfig:
    population: int = 64
    generations: int = 40
    mutation_fraction: float = 0.25
    escalation: float = 0.025
    escalation_mode: str = "multiplicative"  # p *= 1 + escalation; "additive": p += escalation
    timesteps: int = 200
    sim: ph.SimConfig = field(default_factory=ph.SimConfig)
    train_batch: int = 32
    finetune_steps: int = 30  # per group, few-shot
    few_shot_schedule: tr.ScheduleConfig = tr.FEW_SHOT_SCHEDULE
    simultaneous_schedule: tr.ScheduleConfig = tr.SIMULTANEOUS_SCHEDULE
    max_norm: float = 1.0
    eval_chunk: int = 32  # individuals per evaluation batch
    crossover_attempts: int = 100  # per required offspring, before falling back
    workers: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.population < 4 or self.population % 2:
            raise ValueError("population must be an even number >= 4")
        if not 0 < self.mutation_fraction < 1:
            raise ValueError("mutation_fraction must lie in (0, 1)")
        if self.escalation_mode not in ("multiplicative", "additive"):
            raise ValueError("escalation_mode must be multiplicative or additive")

    @property
    def n_mutators(self):
        return int(round(self.population * self.mutation_fraction))

    @property
    def sim_config(self):
        return replace(self.sim, steps=self.timesteps, dtype=self.dtype)


DESK_EVOLUTION = EvolutionConfig()
PAPER_EVOLUTION = EvolutionConfig(population=8192, generations=100, timesteps=1000, train_batch=8192)


# --- variation ---------------------------------------------------------------

def mutation_rate(retry: int, cfg: EvolutionConfig = DESK_EVOLUTION) -> float:
    p0 = 1.0 / ms.N_VOXELS
    if cfg.escalation_mode == "multiplicative":
        return p0 * (1 + cfg.escalation) ** retry
    return min(1.0, p0 + cfg.escalation * retry)


def mutate(g, rng, seen, cfg: EvolutionConfig = DESK_EVOLUTION):
    """Bit-flip mutation, escalating the flip rate until the child is
    non-empty and its canonical form is not in ``seen``."""
    for retry in range(MAX_MUTATION_RETRIES):
        p = min(mutation_rate(retry, cfg), 1.0)
        child = ms.postprocess(g ^ (rng.random(g.shape) < p))
        if child.any() and ms.canonical_key(child) not in seen:
            return child
    raise RetryLimitError(f"no valid unseen mutant after {MAX_MUTATION_RETRIES} retries")


def crossover(a, b, seen):
    """XOR of two parent grids, post-processed; ``None`` when the result is
    empty or already seen."""
    child = ms.postprocess(np.logical_xor(a, b))
    if not child.any() or ms.canonical_key(child) in seen:
        return None
    return child


# --- evaluation --------------------------------------------------------------

def _chunks(n, size):
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def evaluate(individuals, params, suite: envgen.EvalSuite, sim: ph.SimConfig, chunk=32, workers=1):
    """Fitness = mean d1/d0 over the suite; cached on each individual.

    Every individual is paired with every suite environment, so a call
    costs ``len(individuals) * len(suite)`` rollouts.
    """
    if not individuals:
        return np.zeros(0)
    envs = list(suite.environments)
    E = len(envs)
    phenos = [ms.express(ind.genotype) for ind in individuals]
    dtype = params.dtype

    def run(rows):
        batch = ph.make_batch([phenos[i] for i in rows for _ in range(E)], envs * len(rows), dtype)
        traj = ph.rollout(batch, params, sim, record=False)
        return traj.loss.reshape(len(rows), E), traj.diverged.reshape(len(rows), E)

    parts = _chunks(len(individuals), chunk)
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(min(workers, len(parts))) as pool:
            results = list(pool.map(run, parts))
    else:
        results = [run(rows) for rows in parts]
    losses = np.concatenate([r[0] for r in results]).astype(np.float64)
    diverged = np.concatenate([r[1] for r in results])
    fitness = losses.mean(axis=1)
    for ind, f, d in zip(individuals, fitness, diverged):
        ind.fitness = float(f)
        ind.n_diverged = int(d.sum())
    return fitness


# --- population statistics ---------------------------------------------------

def diversity(genotypes) -> float:
    """Mean pairwise Hamming distance over all unordered pairs, as a fraction of 144 bits."""
    G = np.asarray(genotypes, dtype=bool).reshape(len(genotypes), -1)
    P = len(G)
    if P < 2:
        raise ValueError("diversity needs at least two members")
    ones = G.sum(axis=0).astype(np.int64)
    differing = int((ones * (P - ones)).sum())  # pairs that differ, summed over bits
    return differing / (G.shape[1] * P * (P - 1) / 2)


def population_diversity(pop: Population, canonical=False) -> float:
    gs = pop.genotypes()
    if canonical:
        gs = np.stack([ms.canonicalize(g) for g in gs])
    return diversity(gs)


def variation_success_stats(offspring, survivors) -> dict:
    """Fraction of each operator's offspring that survived selection."""
    alive = {s.key for s in survivors}
    out = {}
    for op in ("mutation", "crossover"):
        born = [o for o in offspring if o.operator == op]
        out[op] = sum(o.key in alive for o in born) / len(born) if born else 0.0
    return out


def select(candidates, size):
    """Top ``size`` by fitness, ties broken by canonical key."""
    return sorted(candidates, key=lambda m: (m.fitness, m.key))[:size]


# --- generation machinery ----------------------------------------------------

def initial_population(cfg: EvolutionConfig, rng, seen=None) -> Population:
    seen = set() if seen is None else set(seen)
    members = []
    for _ in range(cfg.population * envgen.MAX_RETRIES):
        if len(members) == cfg.population:
            break
        g = envgen.sample_robot(rng)
        key = ms.canonical_key(g)
        if key in seen:
            continue
        seen.add(key)
        members.append(Individual(g, key))
    else:
        raise RetryLimitError("could not fill the initial population with unique bodies")
    return Population(members, seen)


def partition(pop: Population, rng, cfg: EvolutionConfig):
    order = rng.permutation(len(pop))
    k = cfg.n_mutators
    return [pop.members[i] for i in order[:k]], [pop.members[i] for i in order[k:]]


def make_offspring(pop: Population, rng, generation, cfg: EvolutionConfig, groups=None):
    """One mutant per mutator, then XOR children until the recombination
    group's quota is met. Every child's key is added to ``pop.seen``."""
    mutators, recombiners = groups if groups is not None else partition(pop, rng, cfg)
    children = []
    for parent in mutators:
        g = mutate(parent.genotype, rng, pop.seen, cfg)
        child = Individual.new(g, parents=(parent.key,), generation=generation, operator="mutation")
        pop.seen.add(child.key)
        children.append(child)
    quota = len(recombiners)
    made, attempts = 0, 0
    while made < quota:
        i, j = rng.choice(len(recombiners), size=2, replace=False)
        a, b = recombiners[i], recombiners[j]
        attempts += 1
        g = crossover(a.genotype, b.genotype, pop.seen)
        if g is None and attempts > cfg.crossover_attempts * quota:
            # pool exhausted: escalate-mutate the XOR child (or parent a if it was empty)
            base = ms.postprocess(np.logical_xor(a.genotype, b.genotype))
            g = mutate(base if base.any() else a.genotype, rng, pop.seen, cfg)
        if g is None:
            continue
        child = Individual.new(g, parents=(a.key, b.key), generation=generation, operator="crossover")
        pop.seen.add(child.key)
        children.append(child)
        made += 1
    return children


@dataclass
class GenerationLog:
    generation: int
    fitness: np.ndarray
    diversity: float
    diversity_canonical: float
    mutation_survival: float
    crossover_survival: float
    lr: float
    n_diverged: int
    seconds: float = 0.0

    def row(self):
        f = self.fitness
        vals = [
            str(self.generation), repr(float(f.mean())), repr(float(f.min())), repr(float(f.max())),
            repr(self.diversity), repr(self.diversity_canonical),
            repr(self.mutation_survival), repr(self.crossover_survival), repr(self.lr), str(self.n_diverged),
        ]
        return ",".join(vals)


def _log(pop, generation, offspring, lr, n_diverged, t0):
    stats = variation_success_stats(offspring, pop.members) if offspring else dict(mutation=np.nan, crossover=np.nan)
    return GenerationLog(
        generation, pop.fitness(), population_diversity(pop), population_diversity(pop, canonical=True),
        stats["mutation"], stats["crossover"], lr, n_diverged, time.perf_counter() - t0,
    )


@dataclass
class Trainer:
    """Controller updates inside a generation (few-shot and simultaneous)."""

    params: np.ndarray
    state: tr.AdamState
    schedule: tr.ScheduleConfig
    step: int = 0
    last_lr: float = float("nan")

    def train_on(self, group, n_steps, streams: tr.Streams, cfg: EvolutionConfig):
        source = tr.SampleSource(streams)
        sim = cfg.sim_config
        for _ in range(n_steps):
            picks = streams.robots.integers(len(group), size=cfg.train_batch)
            phenos = [ms.express(group[i].genotype) for i in picks]
            batch = ph.make_batch(phenos, tr.environments_for(phenos, source), self.params.dtype)
            self.params, self.state, log = tr.train_step(
                self.params, self.state, batch, self.step, self.schedule, sim, cfg.max_norm, cfg.workers,
            )
            self.last_lr = log.lr
            self.step += 1


def generation_step(pop: Population, params, mode, streams: tr.Streams, generation, suite,
                    cfg: EvolutionConfig = DESK_EVOLUTION, trainer: Trainer | None = None):
    """Produce offspring, update the controller if the mode trains, evaluate,
    and keep the best half. Returns ``(population, params, offspring, lr)``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if any(m.fitness is None for m in pop.members):
        raise ValueError("population must be fully evaluated")
    sim = cfg.sim_config
    rng = streams.ga
    lr = float("nan")
    if mode == "zero-shot":
        offspring = make_offspring(pop, rng, generation, cfg)
        evaluate(offspring, params, suite, sim, cfg.eval_chunk, cfg.workers)
        candidates = pop.members + offspring
    else:
        if trainer is None:
            raise ValueError(f"{mode} needs a trainer")
        n = cfg.finetune_steps if mode == "few-shot" else 1
        groups = partition(pop, rng, cfg)
        trainer.train_on(pop.members, n, streams, cfg)
        offspring = make_offspring(pop, rng, generation, cfg, groups)
        trainer.train_on(offspring, n, streams, cfg)
        params, lr = trainer.params, trainer.last_lr
        candidates = pop.members + offspring
        # the controller moved, so parents are scored again alongside offspring
        evaluate(candidates, params, suite, sim, cfg.eval_chunk, cfg.workers)
    survivors = select(candidates, len(pop))
    return Population(survivors, pop.seen), params, offspring, lr


# --- drivers -----------------------------------------------------------------

@dataclass(frozen=True)
class LineageRecord:
    child: str
    parents: tuple
    operator: str
    generation: int
    fitness: float  # score at admission

    @classmethod
    def of(cls, ind: Individual):
        return cls(ind.key, ind.parents, ind.operator, ind.generation, ind.fitness)


@dataclass
class EvolutionResult:
    population: Population
    params: np.ndarray
    logs: list
    lineage: list  # LineageRecord per admitted body, in admission order
    suite: envgen.EvalSuite


def run(mode, cfg: EvolutionConfig, seed, params=None, suite=None, out_dir=None, progress=None,
        save_params_every=0):
    """Run ``cfg.generations`` generations of ``mode``.

    ``params`` is the pretrained checkpoint for zero-/few-shot and ignored
    by simultaneous co-design, which starts from ``init_params``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    streams = tr.Streams(seed)
    dtype = np.dtype(cfg.dtype)
    if mode == "simultaneous":
        params = ctl.init_params(streams.init, dtype)
    elif params is None:
        raise ValueError(f"{mode} needs pretrained params")
    pretrained = np.array(params, dtype=dtype)
    params = pretrained.copy()
    if suite is None:
        suite = envgen.build_eval_suite(streams.sequences["suite"])
    out = Path(out_dir) if out_dir is not None else None

    trainer = None
    if mode == "simultaneous":
        trainer = Trainer(params, tr.AdamState.zeros_like(params), cfg.simultaneous_schedule)

    t0 = time.perf_counter()
    pop = initial_population(cfg, streams.robots)
    evaluate(pop.members, params, suite, cfg.sim_config, cfg.eval_chunk, cfg.workers)
    lineage = [LineageRecord.of(m) for m in pop.members]
    logs = [_log(pop, 0, [], float("nan"), sum(m.n_diverged for m in pop.members), t0)]
    if progress:
        progress(logs[-1])
    for gen in range(1, cfg.generations + 1):
        t0 = time.perf_counter()
        if mode == "few-shot":
            # every generation starts from the pretrained weights and a fresh optimizer
            trainer = Trainer(pretrained.copy(), tr.AdamState.zeros_like(pretrained), cfg.few_shot_schedule)
        pop, params, offspring, lr = generation_step(pop, params, mode, streams, gen, suite, cfg, trainer)
        lineage.extend(LineageRecord.of(o) for o in offspring)
        n_div = sum(m.n_diverged for m in offspring)
        logs.append(_log(pop, gen, offspring, lr, n_div, t0))
        if progress:
            progress(logs[-1])
        if out is not None and save_params_every and mode != "zero-shot" and gen % save_params_every == 0:
            ctl.save_checkpoint(out / f"params_gen{gen:04d}.vxcp", params)
    result = EvolutionResult(pop, params, logs, lineage, suite)
    if out is not None:
        write_outputs(result, out, mode)
    return result


def run_zero_shot(params, cfg: EvolutionConfig, seed, **kw):
    return run("zero-shot", cfg, seed, params=params, **kw)


def run_few_shot(params, cfg: EvolutionConfig, seed, **kw):
    return run("few-shot", cfg, seed, params=params, **kw)


def run_simultaneous(cfg: EvolutionConfig, seed, **kw):
    return run("simultaneous", cfg, seed, **kw)


# --- persistence -------------------------------------------------------------

def write_metrics(logs, path, timings_path=None):
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for log in logs:
            fh.write(log.row() + "\n")
    if timings_path is not None:
        with open(timings_path, "w") as fh:
            fh.write("generation,seconds\n")
            for log in logs:
                fh.write(f"{log.generation},{log.seconds:.3f}\n")


# Edge list, one row per admitted body:
#   child,parents,operator,generation,fitness
# ``parents`` is ';'-joined canonical keys (empty for the initial population);
# fitness is the score the body was first evaluated with.
def write_lineage(records, path):
    with open(path, "w") as fh:
        fh.write("child,parents,operator,generation,fitness\n")
        for r in records:
            fh.write(f"{r.child},{';'.join(r.parents)},{r.operator},{r.generation},{r.fitness!r}\n")


def read_lineage(path):
    rows = []
    with open(path) as fh:
        fh.readline()
        for line in fh:
            child, parents, op, gen, fit = line.rstrip("\n").split(",")
            rows.append(LineageRecord(child, tuple(p for p in parents.split(";") if p), op, int(gen), float(fit)))
    return rows


def write_population(pop: Population, path):
    with open(path, "w") as fh:
        fh.write("key,genotype,fitness\n")
        for m in pop.members:
            fh.write(f"{m.key},{ms.to_hex(m.genotype)},{m.fitness!r}\n")


def write_outputs(result: EvolutionResult, out: Path, mode):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(result.logs, out / "metrics.csv", out / "timings.csv")
    write_lineage(result.lineage, out / "lineage.csv")
    write_population(result.population, out / "population.csv")
    if mode != "zero-shot":
        ctl.save_checkpoint(out / "final_params.vxcp", result.params)
