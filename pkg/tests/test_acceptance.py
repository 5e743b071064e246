"""Acceptance criteria, one test per criterion.

The desk-scale runs are shared through module-scoped fixtures: one
pretraining run, three zero-shot runs and three simultaneous runs. The
zero-shot run with seed 0 doubles as the elitism and accounting run.
Determinism is checked by replaying a short prefix of each run with the
same seed and comparing the leading rows of the metrics log byte for byte;
nothing before step ``n`` depends on the total run length.
"""
from dataclasses import replace

import numpy as np
import pytest

from voxcodesign import controller as ctl
from voxcodesign import envgen
from voxcodesign import evolution as ev
from voxcodesign import morphospace as ms
from voxcodesign import physics as ph
from voxcodesign import training as tr
from voxcodesign.runner import run_gradcheck

SEEDS = (0, 1, 2)
DESK_PRETRAIN = tr.PretrainConfig(batch=32, steps=300, timesteps=200)
DESK_EVOLUTION = ev.EvolutionConfig(population=64, generations=40, timesteps=200)


def check_all(checks):
    failed = [name for name, ok in checks if not ok]
    assert not failed, "failed: " + "; ".join(failed)


# --- shared desk-scale runs --------------------------------------------------

@pytest.fixture(scope="module")
def pretrain_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrain")
    params, logs = tr.pretrain(DESK_PRETRAIN, 0, out_dir=out)
    return out, params, logs


@pytest.fixture(scope="module")
def zero_shot_runs(pretrain_run, tmp_path_factory):
    """Seed 0 also records every selection call for the accounting checks."""
    _, params, _ = pretrain_run
    calls = []
    real = ev.select

    def spy(candidates, size):
        chosen = real(candidates, size)
        calls.append(([(c.key, c.fitness) for c in candidates], [c.key for c in chosen], size))
        return chosen

    runs = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"zero_shot_{seed}")
        with pytest.MonkeyPatch.context() as mp:
            if seed == 0:
                mp.setattr(ev, "select", spy)
            runs[seed] = (out, ev.run_zero_shot(params, DESK_EVOLUTION, seed, out_dir=out))
    return runs, calls


@pytest.fixture(scope="module")
def simultaneous_runs(tmp_path_factory):
    runs = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"simultaneous_{seed}")
        runs[seed] = (out, ev.run_simultaneous(DESK_EVOLUTION, seed, out_dir=out))
    return runs


# --- criteria ----------------------------------------------------------------

def test_criterion_01_structural_exactness():
    p = ms.express(np.ones(ms.SHAPE, dtype=bool))
    check_all([
        ("245 masses", len(p.mass_ids) == 245),
        ("1648 springs", len(p.spring_ids) == 1648),
        ("620912 parameters", ctl.N_PARAMS == 620_912 and ctl.init_params(0).size == 620_912),
    ])


def test_criterion_02_gradient_oracle():
    rows = run_gradcheck(seed=0, n_params=20, steps=50, eps=1e-5)
    flat = [r for r in rows if r[0] == "flat"]
    rugged = [r for r in rows if r[0] == "rugged"]
    check_all([
        ("20 flat parameters", len(flat) >= 20),
        ("20 rugged parameters", len(rugged) >= 20),
        ("flat within 1e-3", max(r[4] for r in flat) <= 1e-3),
        ("rugged within 5e-2", max(r[4] for r in rugged) <= 5e-2),
    ])


def test_criterion_03_pretraining_trend(pretrain_run):
    _, _, logs = pretrain_run
    loss = np.array([log.loss for log in logs])
    smooth = tr.smoothed(loss, window=50)
    running_min = np.minimum.accumulate(smooth)
    print(f"step-0 loss {loss[0]:.4f}, final 20-step mean {loss[-20:].mean():.4f}")
    check_all([
        ("300 steps", len(loss) == 300),
        ("step-0 loss in [0.95, 1.05]", 0.95 <= loss[0] <= 1.05),
        ("final 20-step mean < 0.85", loss[-20:].mean() < 0.85),
        ("50-step smoothing monotone within 5%", np.all(smooth <= 1.05 * running_min)),
    ])


def test_criterion_04_zero_shot_elitism(zero_shot_runs):
    runs, _ = zero_shot_runs
    _, res = runs[0]
    best = np.array([log.fitness.min() for log in res.logs])
    check_all([
        ("41 generation rows", len(best) == 41),
        ("population 64", all(len(log.fitness) == 64 for log in res.logs)),
        ("best fitness non-increasing", np.all(np.diff(best) <= 0)),
    ])


def test_criterion_05_diversity_metric():
    g = ms.center_and_ground(ms.from_voxels([(0, 0, 0)]))
    h = g.copy()
    h[0, 0, 0] = not h[0, 0, 0]
    full = np.ones(ms.SHAPE, dtype=bool)
    check_all([
        ("identical population", ev.diversity(np.stack([g, g, g])) == 0),
        ("one voxel apart", ev.diversity(np.stack([g, h])) == 1 / 144),
        ("full vs single", ev.diversity(np.stack([full, g])) == 143 / 144),
    ])


def test_criterion_06_symmetry_suite():
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        g = rng.random(ms.SHAPE) < rng.uniform(0.05, 0.6)
        if not g.any():
            g[rng.integers(6), rng.integers(6), rng.integers(4)] = True
        ref = ms.canonicalize(g)
        for w in range(8):
            t = ms.align_to_origin(ms.apply_symmetry(g, w))
            occ = np.argwhere(t)
            room = np.array(ms.SHAPE) - occ.max(axis=0) - 1
            moved = ms.empty_genotype()
            moved[tuple((occ + rng.integers(0, room + 1)).T)] = True
            bad += not np.array_equal(ms.canonicalize(moved), ref)
    assert bad == 0


def _desk_rollouts(friction, n=100, seed=7):
    """Yield recorded rollouts of ``n`` random desk samples in chunks of 25."""
    source = tr.SampleSource(tr.Streams(seed))
    params = ctl.init_params(seed)
    params[ctl.param_slice("W4")] *= 20  # large actuation so bodies slide and bounce
    sim = ph.SimConfig(steps=200, friction=friction)
    for _ in range(n // 25):
        batch = source.batch(25, np.float32)
        yield batch, ph.rollout(batch, params, sim, record=True)


def test_criterion_07_physics_invariants():
    checks = []
    worst_pen, n_contacts = 0.0, 0
    for friction in ph.FRICTION_MODES:
        clamp_ok = True
        for batch, traj in _desk_rollouts(friction):
            rec = traj.record
            terrains = [ph.HeightMap(h, batch.extent) for h in batch.heights]
            for x, res in zip(rec.positions[1:], rec.steps):
                for b, terrain in enumerate(terrains):
                    m = batch.mass_mask[b]
                    h = ph.height_at(terrain, x[b, m, 0], x[b, m, 1])
                    worst_pen = max(worst_pen, float((h - x[b, m, 2]).max()))
                c = res.contacts
                n_contacts += len(c.mass)
                vn = c.normal_speed.astype(np.float64)
                before = c.tangent_speed_before.astype(np.float64)
                after = c.tangent_speed_after.astype(np.float64)
                tol = 1e-5 * (1 + vn)
                if friction == "reverse":
                    clamp_ok &= bool(np.all(after <= vn + tol))
                else:
                    # the friction impulse is capped by the normal speed and never speeds the mass up
                    clamp_ok &= bool(np.all(before - after <= vn + tol) and np.all(after <= before + tol))
        checks.append((f"friction clamp ({friction})", clamp_ok))
    checks.append(("contacts occurred", n_contacts > 1000))
    checks.append((f"penetration {worst_pen:.2e} <= 1e-4", worst_pen <= 1e-4))

    # momentum: zero actuation, zero gravity, no damping, no contact
    rng = np.random.default_rng(0)
    pheno = ms.express(envgen.sample_robot(rng))
    x = ms.MASS_POSITIONS[None].astype(np.float64) + np.array([0, 0, 5.0])
    v = np.where(pheno.sensor_mask[None, :, None], rng.normal(0, 0.5, (1, 245, 3)), 0)
    x = x + np.where(pheno.sensor_mask[None, :, None], rng.normal(0, 0.005, x.shape), 0)
    cfg = ph.SimConfig(gravity=0.0, velocity_damping=1.0, dtype="float64")
    heights = np.zeros((1, 8, 8))
    p0 = v[0, pheno.sensor_mask].sum(axis=0)
    for _ in range(200):
        res = ph.step(x, v, np.zeros((1, ms.N_SPRINGS)), pheno.sensor_mask[None], pheno.actuator_mask[None],
                      heights, cfg, ph.TERRAIN_EXTENT)
        x, v = res.positions, res.velocities
    p1 = v[0, pheno.sensor_mask].sum(axis=0)
    checks.append(("momentum conserved", np.linalg.norm(p1 - p0) <= 1e-9 * np.linalg.norm(p0)))
    check_all(checks)


def test_criterion_08_learning_rate_values():
    floor = min(tr.lr_at(s) for s in range(10_000))
    fs = tr.FEW_SHOT_SCHEDULE
    print(f"few-shot lr at step 60 = {tr.lr_at(60, fs)!r}")
    check_all([
        ("lr(0) = 1e-3", abs(tr.lr_at(0) - 1e-3) <= 1e-12),
        ("first restart = 7e-4", abs(tr.lr_at(10) - 7e-4) <= 1e-12),
        ("floor respected", floor >= 1e-5 - 1e-12),
        ("few-shot lr(0) = 3.5e-4", abs(tr.lr_at(0, fs) - 3.5e-4) <= 1e-12),
        ("few-shot lr(60) = 1.5e-4", abs(tr.lr_at(60, fs) - 1.5e-4) <= 1e-12),
    ])


def test_criterion_09_ga_accounting(zero_shot_runs):
    runs, calls = zero_shot_runs
    _, res = runs[0]
    P = DESK_EVOLUTION.population
    by_gen = {}
    for r in res.lineage:
        by_gen.setdefault(r.generation, []).append(r)
    keys = [r.child for r in res.lineage]
    checks = [
        ("40 selection calls", len(calls) == 40),
        ("initial population", len(by_gen[0]) == P),
        ("no duplicate canonical forms", len(set(keys)) == len(keys)),
    ]
    for g in range(1, 41):
        kids = by_gen.get(g, [])
        n_mut = sum(r.operator == "mutation" for r in kids)
        checks.append((f"gen {g} offspring", len(kids) == P))
        checks.append((f"gen {g} split", n_mut == P // 4 and len(kids) - n_mut == P - P // 4))
    for g, (cands, chosen, size) in enumerate(calls, 1):
        fit = dict(cands)
        rest = [f for k, f in cands if k not in set(chosen)]
        checks.append((f"gen {g} keeps half", len(cands) == 2 * P and size == P and len(chosen) == P))
        checks.append((f"gen {g} keeps the best", max(fit[k] for k in chosen) <= min(rest)))
    check_all(checks)


def test_criterion_10_determinism(pretrain_run, zero_shot_runs, simultaneous_runs, tmp_path):
    pre_dir, _, _ = pretrain_run
    tr.pretrain(replace(DESK_PRETRAIN, steps=15), 0, out_dir=tmp_path / "pre")
    zs_dir, _ = zero_shot_runs[0][0]
    _, params, _ = pretrain_run
    ev.run_zero_shot(params, replace(DESK_EVOLUTION, generations=2), 0, out_dir=tmp_path / "zs")
    sim_dir, _ = simultaneous_runs[0]
    ev.run_simultaneous(replace(DESK_EVOLUTION, generations=2), 0, out_dir=tmp_path / "sim")

    def prefix_equal(long_dir, short_dir):
        short = (short_dir / "metrics.csv").read_bytes().splitlines()
        long = (long_dir / "metrics.csv").read_bytes().splitlines()
        return short == long[: len(short)]

    check_all([
        ("pretrain", prefix_equal(pre_dir, tmp_path / "pre")),
        ("zero-shot", prefix_equal(zs_dir, tmp_path / "zs")),
        ("simultaneous", prefix_equal(sim_dir, tmp_path / "sim")),
    ])


def _collapsed(res):
    gens = np.array([log.generation for log in res.logs])
    div = np.array([log.diversity for log in res.logs])
    G = gens.max()
    peak = div[gens <= G // 4].max()
    final = div[gens > G - G // 4].mean()
    return final < peak, peak, final


def test_criterion_11_diversity_collapse(zero_shot_runs, simultaneous_runs):
    checks = []
    for mode, runs in (("zero-shot", zero_shot_runs[0]), ("simultaneous", simultaneous_runs)):
        votes = []
        for seed in SEEDS:
            ok, peak, final = _collapsed(runs[seed][1])
            print(f"{mode} seed {seed}: early peak {peak:.4f}, final-quarter mean {final:.4f}")
            votes.append(ok)
        checks.append((f"{mode} majority", sum(votes) >= 2))
    check_all(checks)
