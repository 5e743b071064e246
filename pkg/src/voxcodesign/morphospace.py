"""Voxel genotypes, their symmetry classes, and expression into mass-spring bodies.

A genotype is a ``(6, 6, 4)`` boolean array indexed ``(i, j, k)`` for
(length, width, height). Every voxel of the full workspace maps onto fixed
global mass and spring slots, so any body can be described by a pair of
masks over the same 245 mass sites and 1648 spring sites.

Bit order used everywhere (strings, hex packing, lexicographic comparison)
is row-major over ``(i, j, k)``: ``i`` outermost, ``k`` innermost.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SHAPE = (6, 6, 4)
N_VOXELS = 6 * 6 * 4
CELL = 0.1  # lattice spacing, meters

_CORNER_SHAPE = (SHAPE[0] + 1, SHAPE[1] + 1, SHAPE[2] + 1)
# face adjacency
_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def _build_lattice():
    corner_index = np.arange(np.prod(_CORNER_SHAPE)).reshape(_CORNER_SHAPE)
    positions = CELL * np.array(list(np.ndindex(_CORNER_SHAPE)), dtype=np.float64)

    offsets = list(itertools.product((0, 1), repeat=3))
    pairs = []
    for a, b in itertools.combinations(range(8), 2):
        differ = sum(x != y for x, y in zip(offsets[a], offsets[b]))
        # 1 -> cube edge, 2 -> face diagonal; 3 (body diagonal) is not a spring
        if differ in (1, 2):
            pairs.append((a, b))
    assert len(pairs) == 24

    voxel_masses = np.empty((N_VOXELS, 8), dtype=np.int64)
    unique_pairs = set()
    for v, (i, j, k) in enumerate(np.ndindex(SHAPE)):
        corners = [corner_index[i + dx, j + dy, k + dz] for dx, dy, dz in offsets]
        voxel_masses[v] = corners
        for a, b in pairs:
            p, q = sorted((corners[a], corners[b]))
            unique_pairs.add((p, q))

    endpoints = np.array(sorted(unique_pairs), dtype=np.int64)
    spring_lookup = {tuple(e): s for s, e in enumerate(endpoints.tolist())}
    voxel_springs = np.empty((N_VOXELS, 24), dtype=np.int64)
    for v in range(N_VOXELS):
        corners = voxel_masses[v]
        voxel_springs[v] = [
            spring_lookup[tuple(sorted((corners[a], corners[b])))] for a, b in pairs
        ]
    rest = np.linalg.norm(positions[endpoints[:, 0]] - positions[endpoints[:, 1]], axis=1)
    return positions, endpoints, rest, voxel_masses, voxel_springs


(
    MASS_POSITIONS,
    SPRING_ENDPOINTS,
    SPRING_REST_LENGTHS,
    VOXEL_MASSES,
    VOXEL_SPRINGS,
) = _build_lattice()
N_MASSES = MASS_POSITIONS.shape[0]
N_SPRINGS = SPRING_ENDPOINTS.shape[0]
for _arr in (MASS_POSITIONS, SPRING_ENDPOINTS, SPRING_REST_LENGTHS, VOXEL_MASSES, VOXEL_SPRINGS):
    _arr.flags.writeable = False


@dataclass(frozen=True)
class Phenotype:
    """Mass-spring body expressed from a genotype.

    ``mass_ids`` and ``spring_ids`` index the global workspace enumeration;
    ``positions`` are lattice coordinates in meters (workspace frame, before
    any world placement).
    """

    mass_ids: np.ndarray
    positions: np.ndarray
    spring_ids: np.ndarray
    endpoints: np.ndarray
    rest_lengths: np.ndarray
    sensor_mask: np.ndarray
    actuator_mask: np.ndarray

    @property
    def n_masses(self) -> int:
        return len(self.mass_ids)

    @property
    def n_springs(self) -> int:
        return len(self.spring_ids)


def empty_genotype() -> np.ndarray:
    return np.zeros(SHAPE, dtype=bool)


def from_voxels(voxels) -> np.ndarray:
    g = empty_genotype()
    for v in voxels:
        g[tuple(v)] = True
    return g


def voxels(g: np.ndarray) -> list[tuple[int, int, int]]:
    return [tuple(int(c) for c in v) for v in np.argwhere(g)]


def _check_shape(g):
    g = np.asarray(g, dtype=bool)
    if g.shape != SHAPE:
        raise ValueError(f"genotype must have shape {SHAPE}, got {g.shape}")
    return g


def largest_connected_component(g: np.ndarray) -> np.ndarray:
    """Keep only the largest face-connected component.

    Equal-sized components are resolved in favour of the one whose smallest
    voxel coordinate comes first in row-major order. An empty input gives an
    empty grid back.
    """
    g = _check_shape(g)
    labels, n = ndimage.label(g, structure=_FACE_STRUCTURE)
    if n == 0:
        return empty_genotype()
    sizes = np.bincount(labels.ravel())[1:]
    # labels are assigned in raster (row-major) order of first voxel, so the
    # lowest label among the largest components has the smallest min coordinate
    best = int(np.flatnonzero(sizes == sizes.max())[0]) + 1
    return labels == best


def is_connected(g: np.ndarray) -> bool:
    g = _check_shape(g)
    _, n = ndimage.label(g, structure=_FACE_STRUCTURE)
    return n == 1


def center_and_ground(g: np.ndarray) -> np.ndarray:
    """Translate so the body rests on ``k = 0`` and its x-y center of mass
    sits as close as possible to the workspace center.

    Voxel centers carry unit weight. Fractional shifts round to the nearest
    integer with exact ties going toward the lower index.
    """
    g = _check_shape(g)
    occ = np.argwhere(g)
    if len(occ) == 0:
        raise ValueError("cannot center an empty genotype")
    shift = np.zeros(3, dtype=np.int64)
    for axis in (0, 1):
        target = (SHAPE[axis] - 1) / 2.0 - occ[:, axis].mean()
        s = int(np.ceil(target - 0.5))
        lo, hi = -occ[:, axis].min(), SHAPE[axis] - 1 - occ[:, axis].max()
        shift[axis] = min(max(s, lo), hi)
    shift[2] = -occ[:, 2].min()
    out = empty_genotype()
    moved = occ + shift
    out[moved[:, 0], moved[:, 1], moved[:, 2]] = True
    return out


def is_grounded(g: np.ndarray) -> bool:
    g = _check_shape(g)
    occ = np.argwhere(g)
    return len(occ) > 0 and occ[:, 2].min() == 0


def postprocess(g: np.ndarray) -> np.ndarray:
    """Largest component, then centered and grounded. Empty stays empty."""
    lcc = largest_connected_component(g)
    if not lcc.any():
        return lcc
    return center_and_ground(lcc)


# The eight planar symmetries: rotations by 90 degrees about z, each with or
# without a reflection of the y coordinate (reflection about the x axis).
# Reflection about the y axis is rotation by 180 composed with the former,
# so these eight elements are the whole group the three generators produce.
def _symmetries():
    mats = []
    rot = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]])
    flip = np.diag([1, -1, 1])
    for r in range(4):
        rm = np.linalg.matrix_power(rot, r)
        mats.append(rm)
        mats.append(rm @ flip)
    return np.stack(mats)


SYMMETRIES = _symmetries()
SYMMETRIES.flags.writeable = False


def apply_symmetry(g: np.ndarray, which: int) -> np.ndarray:
    """Apply group element ``which`` (0..7) and re-align the body to the origin."""
    g = _check_shape(g)
    occ = np.argwhere(g)
    if len(occ) == 0:
        return empty_genotype()
    moved = occ @ SYMMETRIES[which].T
    moved -= moved.min(axis=0)
    out = empty_genotype()
    out[moved[:, 0], moved[:, 1], moved[:, 2]] = True
    return out


def align_to_origin(g: np.ndarray) -> np.ndarray:
    return apply_symmetry(g, 0)


def canonicalize(g: np.ndarray) -> np.ndarray:
    """Lexicographically smallest origin-aligned grid over the symmetry orbit."""
    g = _check_shape(g)
    if not g.any():
        raise ValueError("cannot canonicalize an empty genotype")
    best = None
    best_bits = None
    for e in range(len(SYMMETRIES)):
        cand = apply_symmetry(g, e)
        bits = np.packbits(cand.ravel()).tobytes()
        if best_bits is None or bits < best_bits:
            best, best_bits = cand, bits
    return best


def to_bitstring(g: np.ndarray) -> str:
    """144 characters of '0'/'1' in row-major order."""
    g = _check_shape(g)
    return "".join("1" if b else "0" for b in g.ravel())


def from_bitstring(s: str) -> np.ndarray:
    s = s.strip()
    if len(s) != N_VOXELS or set(s) - {"0", "1"}:
        raise ValueError("expected 144 characters of '0'/'1'")
    return np.array([c == "1" for c in s], dtype=bool).reshape(SHAPE)


def to_hex(g: np.ndarray) -> str:
    """36 hex digits; bit ``n`` of the row-major order is the MSB-first bit
    ``n % 8`` of byte ``n // 8``."""
    g = _check_shape(g)
    return np.packbits(g.ravel()).tobytes().hex()


def from_hex(s: str) -> np.ndarray:
    raw = bytes.fromhex(s.strip())
    if len(raw) != N_VOXELS // 8:
        raise ValueError("expected 36 hex digits")
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8)).astype(bool).reshape(SHAPE)


def canonical_key(g: np.ndarray) -> str:
    """Hex form of the canonical genotype; equal for symmetric/translated bodies."""
    return to_hex(canonicalize(g))


def express(g: np.ndarray) -> Phenotype:
    g = _check_shape(g)
    if not g.any():
        raise ValueError("cannot express an empty genotype")
    if not is_grounded(g):
        raise ValueError("genotype must be grounded (lowest voxel at k = 0)")
    occupied = np.flatnonzero(g.ravel())
    mass_ids = np.unique(VOXEL_MASSES[occupied])
    spring_ids = np.unique(VOXEL_SPRINGS[occupied])
    sensor_mask = np.zeros(N_MASSES, dtype=bool)
    sensor_mask[mass_ids] = True
    actuator_mask = np.zeros(N_SPRINGS, dtype=bool)
    actuator_mask[spring_ids] = True
    return Phenotype(
        mass_ids=mass_ids,
        positions=MASS_POSITIONS[mass_ids].copy(),
        spring_ids=spring_ids,
        endpoints=SPRING_ENDPOINTS[spring_ids].copy(),
        rest_lengths=SPRING_REST_LENGTHS[spring_ids].copy(),
        sensor_mask=sensor_mask,
        actuator_mask=actuator_mask,
    )
