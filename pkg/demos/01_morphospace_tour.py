"""Tour of the voxel design space.

Samples a few random bodies, prints them layer by layer, expresses them
as mass-spring lattices and shows that rotated or mirrored copies share
one canonical form.

    python3 demos/01_morphospace_tour.py [seed]
"""
import sys

import numpy as np

from voxcodesign import envgen
from voxcodesign import morphospace as ms


def show(g):
    for z in range(g.shape[2]):
        if not g[:, :, z].any():
            continue
        print(f"  layer z={z}")
        for y in range(g.shape[1] - 1, -1, -1):
            print("    " + "".join("#" if g[x, y, z] else "." for x in range(g.shape[0])))


def main(seed=0):
    rng = np.random.default_rng(seed)
    for i in range(3):
        g, info = envgen.sample_robot(rng, return_details=True)
        p = ms.express(g)
        print(f"body {i}: box {info['box']}, fill p={info['p']:.2f}, {g.sum()} voxels, "
              f"{len(p.mass_ids)} masses, {len(p.spring_ids)} springs")
        show(g)

    g = envgen.sample_robot(rng)
    key = ms.canonical_key(g)
    same = all(ms.canonical_key(ms.center_and_ground(ms.apply_symmetry(g, w))) == key for w in range(8))
    print(f"all 8 rotations/reflections share canonical key {key[:12]}...: {same}")

    full = ms.express(np.ones(ms.SHAPE, dtype=bool))
    print(f"full workspace: {len(full.mass_ids)} masses, {len(full.spring_ids)} springs")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
