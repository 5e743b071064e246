import numpy as np
import pytest

from voxcodesign import envgen
from voxcodesign import morphospace as ms
from voxcodesign import physics as ph


def test_sampled_robots_are_valid():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = envgen.sample_robot(rng)
        assert g.any() and ms.is_connected(g) and ms.is_grounded(g)
        assert np.array_equal(ms.center_and_ground(g), g)


def test_unit_box_gives_single_voxel():
    cfg = envgen.RobotSamplerConfig(shape=(1, 1, 1))
    g = envgen.sample_robot(np.random.default_rng(1), cfg)
    assert g.sum() == 1 and ms.voxels(g) == [(2, 2, 0)]


def test_volume_table():
    volumes, by_volume = envgen._box_table(ms.SHAPE)
    brute = {a * b * c for a in range(1, 7) for b in range(1, 7) for c in range(1, 5)}
    assert volumes == sorted(brute)
    assert sum(len(v) for v in by_volume.values()) == 6 * 6 * 4


def test_activation_probability_statistics():
    rng = np.random.default_rng(2)
    p = np.array([envgen.sample_activation_probability(rng) for _ in range(20_000)])
    assert p.min() >= 0.1 and p.max() <= 0.6
    assert 0.25 <= p.mean() <= 0.45
    fills = [envgen.sample_robot(rng, return_details=True)[1]["p"] for _ in range(2000)]
    assert 0.25 <= np.mean(fills) <= 0.45


def test_terrain_statistics():
    rng = np.random.default_rng(3)
    assert not envgen.sample_terrain(rng, sigma=0.0).heights.any()
    h = np.stack([envgen.sample_terrain(rng, sigma=0.1).heights for _ in range(10_000)])
    assert h.shape[1:] == (8, 8)
    assert 0.09 <= h.std() <= 0.11
    flat = h.reshape(len(h), -1)
    assert abs(np.corrcoef(flat[:, 0], flat[:, 1])[0, 1]) < 0.05
    assert abs(np.corrcoef(flat[:, 9], flat[:, 10])[0, 1]) < 0.05
    sigmas = [envgen.sample_terrain(rng).heights.std() for _ in range(2000)]
    assert max(sigmas) < 0.2


def test_light_distribution():
    rng = np.random.default_rng(4)
    terrain = envgen.sample_terrain(rng, sigma=0.05)
    com = np.array([0.1, -0.2, 0.0])
    pts = np.array([envgen.sample_light(rng, com, terrain) for _ in range(20_000)])
    rho = np.hypot(pts[:, 0] - com[0], pts[:, 1] - com[1])
    assert rho.max() <= 2.0 and rho.min() >= 1e-3
    assert np.allclose(pts[:, 2], ph.height_at(terrain, pts[:, 0], pts[:, 1]))
    # uniform in a disk of random radius r ~ U(0.4, 2): P(rho < 0.2) = E[(0.2 / r)^2] = 0.05
    assert abs(np.mean(rho < 0.2) - 0.05) < 0.01
    # P(rho < 1) = E[min(1, 1 / r^2)] = (0.6 + (1 - 0.5)) / 1.6
    assert abs(np.mean(rho < 1.0) - 1.1 / 1.6) < 0.015


def test_eval_suite_geometry():
    suite = envgen.build_eval_suite(0)
    assert len(suite) == 10
    for ring in (0, 1):
        envs = [e for e, r in zip(suite.environments, suite.ring) if r == ring]
        sig = [s for s, r in zip(suite.sigmas, suite.ring) if r == ring]
        assert sorted(sig) == list(envgen.EVAL_SIGMAS)
        radius = envgen.EVAL_RADII[ring]
        angles = []
        for e in envs:
            assert np.hypot(*e.light[:2]) == pytest.approx(radius)
            assert e.light[2] == pytest.approx(ph.height_at(e.terrain, *e.light[:2]))
            angles.append(np.arctan2(e.light[1], e.light[0]) % (2 * np.pi))
        expected = (2 * np.pi * np.arange(5) / 5 + ring * np.pi / 5) % (2 * np.pi)
        assert np.allclose(sorted(angles), sorted(expected))
    for e, s in zip(suite.environments, suite.sigmas):
        assert 0.3 * s < e.terrain.heights.std() < 2.5 * s


def test_eval_suite_lights_are_far_from_every_start():
    suite = envgen.build_eval_suite(1)
    full = ms.express(np.ones(ms.SHAPE, bool))
    for e in suite.environments:
        com = ph.initial_com(full, e.terrain)
        assert np.linalg.norm(com - e.light) > 1e-6


def test_eval_suite_deterministic_and_round_trip(tmp_path):
    a, b = envgen.build_eval_suite(7), envgen.build_eval_suite(7)
    for x, y in zip(a.environments, b.environments):
        assert np.array_equal(x.terrain.heights, y.terrain.heights) and np.array_equal(x.light, y.light)
    path = tmp_path / "suite.csv"
    envgen.save_eval_suite(a, path)
    c = envgen.load_eval_suite(path)
    assert c.sigmas == a.sigmas and c.ring == a.ring
    for x, y in zip(a.environments, c.environments):
        assert np.array_equal(x.terrain.heights, y.terrain.heights) and np.array_equal(x.light, y.light)
