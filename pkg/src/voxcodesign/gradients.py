"""Reverse-mode gradients of the d1/d0 loss through a recorded rollout.

Discrete contact decisions (which masses hit the terrain, bisected impact
times, the final projection) are frozen at their forward values; the
continuous arithmetic around them is differentiated exactly. At the
friction clamp's kink the interior (unclamped) branch derivative is used.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import controller as ctl
from . import physics as ph


def loss(traj: ph.Trajectory) -> np.ndarray:
    """Per-body d1/d0 (diverged bodies report 1.0)."""
    if np.any(traj.d0 <= ph.MIN_D0):
        raise ValueError("degenerate initial distance d0 <= 1e-6")
    return traj.loss


def backward(traj: ph.Trajectory, params) -> np.ndarray:
    """Gradient of the batch-mean loss over non-diverged bodies w.r.t. ``params``.

    Returns a flat vector shaped like ``params``. Bodies flagged as diverged
    contribute nothing and are excluded from the mean; if every body
    diverged, the gradient is zero.
    """
    rec = traj.record
    if rec is None:
        raise ValueError("rollout was run without a record")
    return _backward_sum(traj, params) / max(int((~traj.diverged).sum()), 1)


def _backward_sum(traj: ph.Trajectory, params) -> np.ndarray:
    rec = traj.record
    batch, cfg = rec.batch, rec.cfg
    valid = ~traj.diverged
    grad = np.zeros_like(params)
    T = len(rec.steps)
    mask = batch.mass_mask
    counts = mask.sum(axis=-1).astype(params.dtype)

    # seed: L_b = |com_T - light| / d0
    diff = traj.com1 - batch.light
    d1 = np.maximum(traj.d1, np.finfo(params.dtype).tiny)
    g_com = np.where(valid[:, None], diff / (d1 * traj.d0)[:, None], 0)
    gx = np.where(mask[..., None], g_com[:, None, :] / counts[:, None, None], 0).astype(params.dtype)
    gv = np.zeros_like(gx)

    for t in range(T - 1, -1, -1):
        x, v = rec.positions[t], rec.velocities[t]
        res = rec.steps[t]
        gx, gv, ga = ph.step_vjp(
            x, v, rec.actuations[t], mask, batch.spring_mask, batch.heights, cfg, res, gx, gv,
            batch.extent,
        )
        # bodies that diverged at or before this step have no influence
        live = rec.alive[t + 1] & valid
        ga = np.where(live[:, None], ga, 0)
        g_read = ctl.forward_vjp(rec.net[t], ga, batch.spring_mask, params, grad)
        gx = gx + ph.sense_light_vjp(x, mask, batch.light, g_read)
        gx = np.where(live[:, None, None], gx, 0)
        gv = np.where(live[:, None, None], gv, 0)
    return grad


def batch_gradient(batch: ph.RobotBatch, params, cfg: ph.SimConfig, workers=1, cpg_cfg=ctl.CPGConfig()):
    """Rollout plus reverse pass, split into ``workers`` contiguous chunks.

    Chunk gradients are summed in chunk order, so results are bit-identical
    for a fixed worker count. Returns ``(mean_grad, per_body_loss, diverged)``.
    """
    B = len(batch)
    chunks = [c for c in np.array_split(np.arange(B), max(1, min(workers, B))) if len(c)]

    def run(rows):
        traj = ph.rollout(batch.subset(rows), params, cfg, record=True, cpg_cfg=cpg_cfg)
        return _backward_sum(traj, params), traj.loss, traj.diverged

    if len(chunks) == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            results = list(pool.map(run, chunks))
    total = np.zeros_like(params)
    for g, _, _ in results:
        total += g
    losses = np.concatenate([r[1] for r in results])
    diverged = np.concatenate([r[2] for r in results])
    n_valid = max(int((~diverged).sum()), 1)
    return total / n_valid, losses, diverged


def mean_loss(batch, params, cfg, steps=None, cpg_cfg=ctl.CPGConfig()) -> float:
    traj = ph.rollout(batch, params, cfg, record=False, cpg_cfg=cpg_cfg, steps=steps)
    return float(np.mean(traj.loss))


def finite_difference_oracle(batch: ph.RobotBatch, params, index: int, eps: float, cfg: ph.SimConfig,
                             cpg_cfg=ctl.CPGConfig()) -> float:
    """Central difference of the batch-mean loss along one parameter."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    plus = params.copy()
    minus = params.copy()
    plus[index] += eps
    minus[index] -= eps
    return (mean_loss(batch, plus, cfg, cpg_cfg=cpg_cfg) - mean_loss(batch, minus, cfg, cpg_cfg=cpg_cfg)) / (2 * eps)


def live_parameter_indices(spring_mask, mass_mask=None) -> np.ndarray:
    """Indices of parameters that can influence the loss of some body in the batch.

    Dead parameters are output weights/biases of springs absent from every
    body, and first-layer weights fed by sensors absent from every body.
    """
    dead = np.zeros(ctl.N_PARAMS, dtype=bool)
    views = ctl.unpack(dead)
    active = np.asarray(spring_mask).any(axis=0)
    out = ctl.N_HIDDEN_LAYERS + 1
    views[f"W{out}"][:, ~active] = True
    views[f"b{out}"][~active] = True
    if mass_mask is not None:
        sensing = np.asarray(mass_mask).any(axis=0)
        views["W1"][: sensing.size][~sensing] = True
    return np.flatnonzero(~dead)


def relative_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(batch, params, cfg, n_params=20, eps=1e-5, rng=None, indices=None):
    """Compare the reverse pass with central differences on random live parameters.

    Returns ``(indices, analytic, numeric, relative_errors)``.
    """
    rng = np.random.default_rng(rng)
    traj = ph.rollout(batch, params, cfg, record=True)
    grad = backward(traj, params)
    if indices is None:
        live = live_parameter_indices(batch.spring_mask, batch.mass_mask)
        indices = np.sort(rng.choice(live, size=n_params, replace=False))
    numeric = np.array([finite_difference_oracle(batch, params, int(i), eps, cfg) for i in indices])
    analytic = grad[indices]
    return indices, analytic, numeric, relative_error(analytic, numeric)
