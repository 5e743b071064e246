"""Simulate one random body and check its gradient.

Rolls a random body toward a light on rugged terrain, writes the center
of mass trace to CSV, then compares the reverse pass against central
differences on a handful of parameters in 64-bit.

    python3 demos/02_rollout_and_gradient.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from voxcodesign import controller as ctl
from voxcodesign import gradients as gr
from voxcodesign import physics as ph
from voxcodesign import training as tr


def main(out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = tr.SampleSource(tr.Streams(0))
    batch = source.batch(1, np.float64)
    params = ctl.init_params(0, np.float64)
    params[ctl.param_slice("W4")] *= 10  # livelier than the near-still initial controller

    cfg = ph.SimConfig(steps=200, dtype="float64")
    traj = ph.rollout(batch, params, cfg, record=True, trace=True)
    ph.export_trajectory(traj.record, out / "com.csv")
    moved = np.linalg.norm(traj.com1 - traj.com0, axis=-1)[0]
    print(f"d0 {traj.d0[0]:.3f} m, d1 {traj.d1[0]:.3f} m, loss {traj.loss[0]:.4f}, "
          f"center of mass moved {moved:.3f} m; trace in {out / 'com.csv'}")

    short = ph.SimConfig(steps=40, dtype="float64")
    idx, analytic, numeric, err = gr.gradient_check(batch, params, short, n_params=6, rng=1)
    for i, a, n, e in zip(idx, analytic, numeric, err):
        print(f"  param {i:6d}: reverse {a: .6e}  differences {n: .6e}  rel err {e:.1e}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
