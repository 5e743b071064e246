"""Random bodies, random training environments, and the fixed evaluation suite."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import morphospace as ms
from .physics import Environment, HeightMap, TERRAIN_EXTENT, height_at

TERRAIN_GRID = 8
EVAL_SIGMAS = (0.02, 0.04, 0.06, 0.08, 0.1)
EVAL_RADII = (1.5, 2.0)
MAX_RETRIES = 1000


@dataclass(frozen=True)
class RobotSamplerConfig:
    p_mean: float = 0.35
    p_std: float = 0.125
    p_min: float = 0.1
    p_max: float = 0.6
    shape: tuple = ms.SHAPE


def _box_table(shape):
    boxes = list(itertools.product(range(1, shape[0] + 1), range(1, shape[1] + 1), range(1, shape[2] + 1)))
    by_volume = {}
    for box in boxes:
        by_volume.setdefault(int(np.prod(box)), []).append(box)
    volumes = sorted(by_volume)
    return volumes, by_volume


def sample_activation_probability(rng, cfg: RobotSamplerConfig = RobotSamplerConfig()) -> float:
    return float(np.clip(rng.normal(cfg.p_mean, cfg.p_std), cfg.p_min, cfg.p_max))


def sample_robot(rng, cfg: RobotSamplerConfig = RobotSamplerConfig(), return_details=False):
    """Random valid genotype: volume, then box, then Bernoulli voxels, then
    largest component, centered and grounded.

    The volume is uniform over the distinct products ``l * w * h``; the box
    is uniform among boxes with that volume.
    """
    volumes, by_volume = _box_table(cfg.shape)
    for _ in range(MAX_RETRIES):
        vol = volumes[rng.integers(len(volumes))]
        choices = by_volume[vol]
        box = choices[rng.integers(len(choices))]
        p = sample_activation_probability(rng, cfg)
        block = rng.random(box) < p
        if not block.any():
            continue
        g = ms.empty_genotype()
        g[: box[0], : box[1], : box[2]] = block
        g = ms.center_and_ground(ms.largest_connected_component(g))
        if return_details:
            return g, dict(box=box, p=p, filled=float(block.mean()))
        return g
    raise RuntimeError("robot sampler exceeded its retry cap")


def sample_terrain(rng, sigma=None, grid=TERRAIN_GRID, extent=TERRAIN_EXTENT) -> HeightMap:
    """Independent ``N(0, sigma)`` heights; ``sigma ~ U(0, 0.1)`` unless given."""
    if sigma is None:
        sigma = rng.uniform(0.0, 0.1)
    return HeightMap(rng.normal(0.0, 1.0, size=(grid, grid)) * sigma, extent)


def sample_light(rng, robot_com, terrain: HeightMap) -> np.ndarray:
    """Uniform point in a disk of radius ``r ~ U(0.4, 2.0)`` around the body,
    lifted onto the terrain."""
    cx, cy = float(robot_com[0]), float(robot_com[1])
    for _ in range(MAX_RETRIES):
        r = rng.uniform(0.4, 2.0)
        rho = r * np.sqrt(rng.random())
        theta = rng.uniform(0.0, 2 * np.pi)
        x, y = cx + rho * np.cos(theta), cy + rho * np.sin(theta)
        if np.hypot(x - cx, y - cy) >= 1e-3:
            return np.array([x, y, height_at(terrain, x, y)])
    raise RuntimeError("light sampler exceeded its retry cap")


@dataclass(frozen=True)
class EvalSuite:
    environments: tuple
    sigmas: tuple
    ring: tuple  # ring index per environment

    def __len__(self):
        return len(self.environments)


def build_eval_suite(seed) -> EvalSuite:
    """Ten fixed (terrain, light) pairs: two rings of five lights around the
    origin, the outer ring rotated by pi/5, each ring paired one-to-one with
    terrains of the five difficulty levels."""
    rng = np.random.default_rng(seed)
    envs, sigmas, rings = [], [], []
    for ring, radius in enumerate(EVAL_RADII):
        terrains = [sample_terrain(rng, sigma=s) for s in EVAL_SIGMAS]
        pairing = rng.permutation(len(EVAL_SIGMAS))
        for m in range(5):
            angle = 2 * np.pi * m / 5 + ring * np.pi / 5
            terrain = terrains[pairing[m]]
            x, y = radius * np.cos(angle), radius * np.sin(angle)
            envs.append(Environment(terrain, np.array([x, y, height_at(terrain, x, y)])))
            sigmas.append(EVAL_SIGMAS[pairing[m]])
            rings.append(ring)
    return EvalSuite(tuple(envs), tuple(sigmas), tuple(rings))


# One row per environment:
#   env,ring,sigma,light_x,light_y,light_z,h_0_0,h_0_1,...,h_7_7
# heights in row-major [ix, iy] order; floats written with repr().
def save_eval_suite(suite: EvalSuite, path) -> None:
    n = suite.environments[0].terrain.heights.shape[0]
    cols = ["env", "ring", "sigma", "light_x", "light_y", "light_z"]
    cols += [f"h_{i}_{j}" for i in range(n) for j in range(n)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for e, (env, sigma, ring) in enumerate(zip(suite.environments, suite.sigmas, suite.ring)):
            vals = [str(e), str(ring), repr(float(sigma))]
            vals += [repr(float(c)) for c in env.light]
            vals += [repr(float(h)) for h in np.asarray(env.terrain.heights).ravel()]
            fh.write(",".join(vals) + "\n")


def load_eval_suite(path, extent=TERRAIN_EXTENT) -> EvalSuite:
    envs, sigmas, rings = [], [], []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n = int(round(np.sqrt(len(header) - 6)))
        for line in fh:
            parts = line.strip().split(",")
            if not line.strip():
                continue
            rings.append(int(parts[1]))
            sigmas.append(float(parts[2]))
            light = np.array([float(v) for v in parts[3:6]])
            heights = np.array([float(v) for v in parts[6:]]).reshape(n, n)
            envs.append(Environment(HeightMap(heights, extent), light))
    return EvalSuite(tuple(envs), tuple(sigmas), tuple(rings))
