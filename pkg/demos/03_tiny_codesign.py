"""A miniature end-to-end run: pretrain briefly, then evolve bodies.

Everything is scaled far below the desk profile so it finishes in a few
minutes on one core. Expect the controller to barely improve at this
size; the point is to see the pieces working together.

    python3 demos/03_tiny_codesign.py [out_dir]
"""
import sys
from pathlib import Path

from voxcodesign import evolution as ev
from voxcodesign import training as tr


def main(out_dir="demo_out"):
    out = Path(out_dir)
    pre = tr.PretrainConfig(batch=8, steps=20, timesteps=100)
    params, logs = tr.pretrain(pre, 0, out_dir=out / "pretrain",
                               progress=lambda log: print(f"pretrain step {log.step:3d} loss {log.loss:.4f}"))

    cfg = ev.EvolutionConfig(population=16, generations=6, timesteps=100, train_batch=8, finetune_steps=3)
    for mode in ("zero-shot", "few-shot"):
        print(f"\n{mode}:")
        res = ev.run(mode, cfg, 0, params=params, out_dir=out / mode,
                     progress=lambda log: print(f"  gen {log.generation}: best {log.fitness.min():.4f} "
                                                f"mean {log.fitness.mean():.4f} diversity {log.diversity:.3f}"))
        best = min(res.population.members, key=lambda m: m.fitness)
        print(f"  best body {best.key[:12]}... ({best.genotype.sum()} voxels, fitness {best.fitness:.4f})")
    print(f"\nmetrics, lineage and populations written under {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:2])
