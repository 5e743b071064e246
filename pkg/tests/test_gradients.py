from dataclasses import replace

import numpy as np
import pytest

from voxcodesign import controller as ctl
from voxcodesign import envgen
from voxcodesign import gradients as gr
from voxcodesign import morphospace as ms
from voxcodesign import physics as ph
from voxcodesign.runner import gradcheck_batch

CFG = ph.SimConfig(steps=30, dtype="float64")


def small_batch(n, seed=0, sigma=0.03):
    rng = np.random.default_rng(seed)
    phenos, envs = [], []
    for _ in range(n):
        p = ms.express(envgen.sample_robot(rng))
        t = envgen.sample_terrain(rng, sigma=sigma)
        phenos.append(p)
        envs.append(ph.Environment(t, envgen.sample_light(rng, ph.initial_com(p, t), t)))
    return ph.make_batch(phenos, envs, np.float64)


@pytest.fixture(scope="module")
def params():
    return ctl.init_params(0, np.float64)


def test_body_without_actuators_has_zero_gradient(params):
    batch = gradcheck_batch(0, 0.0)
    frozen = replace(batch, spring_mask=np.zeros_like(batch.spring_mask))
    g, _, _ = gr.batch_gradient(frozen, params, CFG)
    assert not g.any()


def test_identical_bodies_match_single_body(params):
    one = gradcheck_batch(1, 0.05)
    many = one.subset([0, 0, 0, 0])
    g1, _, _ = gr.batch_gradient(one, params, CFG)
    g4, _, _ = gr.batch_gradient(many, params, CFG)
    assert np.allclose(g4, g1, rtol=1e-9, atol=1e-9 * np.abs(g1).max())


def test_batch_mean_is_mean_of_single_gradients(params):
    batch = small_batch(3)
    g, losses, _ = gr.batch_gradient(batch, params, CFG)
    singles = [gr.batch_gradient(batch.subset([i]), params, CFG) for i in range(3)]
    assert np.allclose(g, np.mean([s[0] for s in singles], axis=0), rtol=1e-9, atol=1e-9 * np.abs(g).max())
    assert np.allclose(losses, [s[1][0] for s in singles])


def test_worker_count_determinism(params):
    batch = small_batch(4, seed=2)
    a = gr.batch_gradient(batch, params, CFG, workers=2)[0]
    b = gr.batch_gradient(batch, params, CFG, workers=2)[0]
    c = gr.batch_gradient(batch, params, CFG, workers=1)[0]
    assert a.tobytes() == b.tobytes()
    assert np.allclose(a, c, rtol=1e-9, atol=1e-9 * np.abs(c).max())


def test_dead_parameters_have_zero_gradient(params):
    batch = small_batch(2, seed=3)
    g, _, _ = gr.batch_gradient(batch, params, CFG)
    live = np.zeros(ctl.N_PARAMS, bool)
    live[gr.live_parameter_indices(batch.spring_mask, batch.mass_mask)] = True
    assert not g[~live].any()
    dead = np.flatnonzero(~live)[:2]
    for i in dead:
        assert gr.finite_difference_oracle(batch, params, int(i), 1e-4, CFG) == 0.0


def test_oracle_is_consistent_under_step_halving(params):
    batch = gradcheck_batch(0, 0.0)
    live = gr.live_parameter_indices(batch.spring_mask, batch.mass_mask)
    for i in live[::len(live) // 3][:3]:
        a = gr.finite_difference_oracle(batch, params, int(i), 1e-5, CFG)
        b = gr.finite_difference_oracle(batch, params, int(i), 5e-6, CFG)
        assert abs(a - b) <= 1e-4 * max(abs(a), abs(b), 1e-6)
    with pytest.raises(ValueError):
        gr.finite_difference_oracle(batch, params, 0, 0.0, CFG)


def test_reverse_pass_matches_differences_on_two_voxels(params):
    g = ms.center_and_ground(ms.from_voxels([(0, 0, 0), (1, 0, 0)]))
    pheno = ms.express(g)
    t = ph.HeightMap.flat()
    com = ph.initial_com(pheno, t)
    batch = ph.make_batch([pheno], [ph.Environment(t, com + np.array([0.8, -0.5, -com[2]]))], np.float64)
    _, a, n, err = gr.gradient_check(batch, params, CFG, n_params=8, rng=4)
    assert np.all((err < 1e-3) | (np.abs(a - n) < 1e-9)), err


def test_relative_error():
    assert gr.relative_error(1.0, 1.0) == 0
    assert gr.relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert gr.relative_error(0.0, 0.0) == 0
