"""Batched 3D mass-spring simulation over height-map terrain.

All bodies in a batch share the full-workspace slot layout: positions are
``(B, 245, 3)`` and spring quantities ``(B, 1648)``; absent masses and
springs are switched off by masks. Every forward primitive that the reverse
pass needs has a matching ``*_vjp`` function next to it.

World frame: the workspace center ``(0.3, 0.3)`` sits at the origin; z is up.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from . import controller as ctl
from . import morphospace as ms

SENSOR_MIN_D2 = 1e-6
DEGENERATE_LENGTH = 1e-9
PENETRATION_TOL = 1e-4
NORMAL_EPS = 1e-4
MAX_SPEED = 1e3
MIN_D0 = 1e-6
TERRAIN_EXTENT = 6.0
WORKSPACE_CENTER = np.array([0.3, 0.3, 0.0])


FRICTION_MODES = ("coulomb", "reverse")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.004
    steps: int = 1000
    stiffness: float = 1.5e4
    actuation_bound: float = 0.2
    gravity: float = 9.81
    node_mass: float = 1.0
    velocity_damping: float = 0.999
    contact_bisection_iters: int = 16
    friction: str = "coulomb"  # or "reverse"
    contact_time_grad: bool = True  # False: impact time held constant in the reverse pass
    dtype: str = "float32"

    def __post_init__(self):
        if self.dt <= 0 or self.steps < 0 or self.node_mass <= 0:
            raise ValueError("dt and node_mass must be positive, steps non-negative")
        if not self.dt * np.sqrt(self.stiffness / self.node_mass) < 2:
            raise ValueError("dt * sqrt(k / m) must be below 2 for explicit integration")
        if not 0 < self.actuation_bound < 1:
            raise ValueError("actuation_bound must lie in (0, 1)")
        if self.friction not in FRICTION_MODES:
            raise ValueError(f"friction must be one of {FRICTION_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class HeightMap:
    """Grid heights ``heights[ix, iy]`` on knots spanning a centered square."""

    heights: np.ndarray
    extent: float = TERRAIN_EXTENT

    @classmethod
    def flat(cls, n: int = 8, level: float = 0.0, extent: float = TERRAIN_EXTENT):
        return cls(np.full((n, n), float(level)), extent)


@dataclass(frozen=True)
class Environment:
    terrain: HeightMap
    light: np.ndarray


# ---------------------------------------------------------------------------
# terrain


def _bilinear(H, b, x, y, extent):
    """Height and analytic slope at ``(x, y)`` on terrain ``H[b]``.

    Queries outside the grid are clamped to the boundary, where the slope
    along the clamped axis is zero.
    """
    n = H.shape[-1]
    cell = extent / (n - 1)
    u = (x + extent / 2) / cell
    w = (y + extent / 2) / cell
    in_u = (u > 0) & (u < n - 1)
    in_w = (w > 0) & (w < n - 1)
    u = np.clip(u, 0, n - 1)
    w = np.clip(w, 0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    j0 = np.minimum(np.floor(w).astype(np.int64), n - 2)
    fx = u - i0
    fy = w - j0
    h00 = H[b, i0, j0]
    h10 = H[b, i0 + 1, j0]
    h01 = H[b, i0, j0 + 1]
    h11 = H[b, i0 + 1, j0 + 1]
    h = h00 * (1 - fx) * (1 - fy) + h10 * fx * (1 - fy) + h01 * (1 - fx) * fy + h11 * fx * fy
    dhdx = ((h10 - h00) * (1 - fy) + (h11 - h01) * fy) / cell * in_u
    dhdy = ((h01 - h00) * (1 - fx) + (h11 - h10) * fx) / cell * in_w
    return h, dhdx, dhdy


def _normal(H, b, x, y, extent, eps=NORMAL_EPS):
    """Unit normal from central differences of the interpolated height."""
    hx = (_bilinear(H, b, x + eps, y, extent)[0] - _bilinear(H, b, x - eps, y, extent)[0]) / (2 * eps)
    hy = (_bilinear(H, b, x, y + eps, extent)[0] - _bilinear(H, b, x, y - eps, extent)[0]) / (2 * eps)
    u = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
    norm = np.sqrt((u * u).sum(axis=-1, keepdims=True))
    return u / norm, norm


def _normal_vjp(H, b, x, y, extent, gn, eps=NORMAL_EPS):
    n, norm = _normal(H, b, x, y, extent, eps)
    gu = (gn - n * (n * gn).sum(axis=-1, keepdims=True)) / norm
    ghx, ghy = -gu[..., 0], -gu[..., 1]
    _, xp_dx, xp_dy = _bilinear(H, b, x + eps, y, extent)
    _, xm_dx, xm_dy = _bilinear(H, b, x - eps, y, extent)
    _, yp_dx, yp_dy = _bilinear(H, b, x, y + eps, extent)
    _, ym_dx, ym_dy = _bilinear(H, b, x, y - eps, extent)
    gx = ghx * (xp_dx - xm_dx) / (2 * eps) + ghy * (yp_dx - ym_dx) / (2 * eps)
    gy = ghx * (xp_dy - xm_dy) / (2 * eps) + ghy * (yp_dy - ym_dy) / (2 * eps)
    return gx, gy


def height_at(terrain: HeightMap, x, y):
    H = np.asarray(terrain.heights, dtype=np.float64)[None]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h = _bilinear(H, np.zeros(np.shape(x), dtype=np.int64), x, y, terrain.extent)[0]
    return h if np.ndim(h) else float(h)


def surface_normal(terrain: HeightMap, x, y) -> np.ndarray:
    H = np.asarray(terrain.heights, dtype=np.float64)[None]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return _normal(H, np.zeros(np.shape(x), dtype=np.int64), x, y, terrain.extent)[0]


# ---------------------------------------------------------------------------
# springs


def _incidence():
    # per mass: the springs touching it and the sign of their force on it,
    # padded with a dummy spring slot (index N_SPRINGS) of sign 0
    a, b = ms.SPRING_ENDPOINTS[:, 0], ms.SPRING_ENDPOINTS[:, 1]
    rows = [[] for _ in range(ms.N_MASSES)]
    for s in range(ms.N_SPRINGS):
        rows[a[s]].append((s, -1.0))
        rows[b[s]].append((s, 1.0))
    width = max(len(r) for r in rows)
    idx = np.full((ms.N_MASSES, width), ms.N_SPRINGS, dtype=np.int64)
    sign = np.zeros((ms.N_MASSES, width))
    for m, r in enumerate(rows):
        for c, (s, sg) in enumerate(r):
            idx[m, c] = s
            sign[m, c] = sg
    return idx, sign


_NBR_IDX, _NBR_SIGN = _incidence()
_END_A = ms.SPRING_ENDPOINTS[:, 0]
_END_B = ms.SPRING_ENDPOINTS[:, 1]


def _scatter(fu):
    """Sum per-spring force vectors (force on endpoint b) onto masses."""
    pad = np.zeros(fu.shape[:-2] + (1, 3), dtype=fu.dtype)
    ext = np.concatenate([fu, pad], axis=-2)
    return np.einsum("...mcd,mc->...md", ext[..., _NBR_IDX, :], _NBR_SIGN.astype(fu.dtype))


def spring_forces_reference(positions, actuations, spring_mask, cfg: SimConfig, return_parts=False):
    """Plain numpy version of :func:`spring_forces`, kept as a cross-check."""
    x = positions
    d = x[..., _END_A, :] - x[..., _END_B, :]
    L = np.sqrt((d * d).sum(axis=-1))
    ok = spring_mask & (L > DEGENERATE_LENGTH)
    safe_L = np.where(ok, L, 1)
    u = np.where(ok[..., None], d / safe_L[..., None], 0)
    rest = ms.SPRING_REST_LENGTHS.astype(x.dtype) * (1 + cfg.actuation_bound * actuations)
    f = np.where(ok, cfg.stiffness * (L - rest), 0).astype(x.dtype)
    fu = f[..., None] * u
    F = _scatter(fu)
    if return_parts:
        return F, (u, safe_L, f, ok)
    return F


def spring_forces_vjp_reference(parts, gF, cfg: SimConfig):
    u, L, f, ok = parts
    g_fu = gF[..., _END_B, :] - gF[..., _END_A, :]
    gf = (g_fu * u).sum(axis=-1)
    gu = f[..., None] * g_fu
    gL = np.where(ok, cfg.stiffness * gf, 0)
    ga = -gL * ms.SPRING_REST_LENGTHS.astype(u.dtype) * cfg.actuation_bound
    gd = (gu - u * (u * gu).sum(axis=-1, keepdims=True)) / L[..., None] + gL[..., None] * u
    gd = np.where(ok[..., None], gd, 0)
    # d = x_a - x_b, gathered back onto masses: +gd at a, -gd at b
    gx = -_scatter(gd)
    return gx, ga


def spring_forces(positions, actuations, spring_mask, cfg: SimConfig, return_parts=False):
    """Hooke forces ``k (L - L0 (1 + actuation_bound * a))`` summed onto masses.

    Batched shapes: ``positions`` ``(B, 245, 3)``; ``actuations`` and
    ``spring_mask`` ``(B, 1648)``. Springs shorter than 1e-9 m contribute
    nothing. With ``return_parts`` also returns the per-spring quantities
    :func:`spring_forces_vjp` needs.
    """
    x = np.ascontiguousarray(positions)
    dtype = x.dtype
    F, u, L, f, ok = _kernels.spring_forces(
        x,
        np.ascontiguousarray(actuations, dtype=dtype),
        np.ascontiguousarray(spring_mask, dtype=bool),
        _END_A, _END_B, ms.SPRING_REST_LENGTHS.astype(dtype),
        dtype.type(cfg.stiffness), dtype.type(cfg.actuation_bound), dtype.type(DEGENERATE_LENGTH),
    )
    if return_parts:
        return F, (u, L, f, ok)
    return F


def spring_forces_vjp(parts, gF, cfg: SimConfig):
    """Given ``dL/dF`` return ``(dL/dx, dL/da)``."""
    u, L, f, ok = parts
    dtype = u.dtype
    return _kernels.spring_forces_vjp(
        u, L, f, ok, np.ascontiguousarray(gF, dtype=dtype), _END_A, _END_B,
        ms.SPRING_REST_LENGTHS.astype(dtype), dtype.type(cfg.stiffness), dtype.type(cfg.actuation_bound),
    )


# ---------------------------------------------------------------------------
# light


def sense_light(positions, sensor_mask, light):
    """Inverse-square readings, mean-centered over active sensors; inactive are 0."""
    sensor_mask = np.asarray(sensor_mask, dtype=bool)
    counts = sensor_mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("at least one active sensor required")
    rel = positions - np.asarray(light, dtype=positions.dtype)[..., None, :]
    d2 = (rel * rel).sum(axis=-1)
    raw = 1.0 / np.maximum(d2, SENSOR_MIN_D2)
    raw = np.where(sensor_mask, raw, 0)
    mean = raw.sum(axis=-1, keepdims=True) / counts
    return np.where(sensor_mask, raw - mean, 0).astype(positions.dtype, copy=False)


def sense_light_vjp(positions, sensor_mask, light, g_readings):
    counts = sensor_mask.sum(axis=-1, keepdims=True)
    g = np.where(sensor_mask, g_readings, 0)
    g_raw = np.where(sensor_mask, g - g.sum(axis=-1, keepdims=True) / counts, 0)
    rel = positions - light[..., None, :]
    d2 = (rel * rel).sum(axis=-1)
    g_d2 = np.where(d2 > SENSOR_MIN_D2, -g_raw / (d2 * d2), 0)
    return 2 * rel * g_d2[..., None]


# ---------------------------------------------------------------------------
# contact


@dataclass
class ContactInfo:
    """Per-contact data for the masses that hit the terrain in one step."""

    batch: np.ndarray
    mass: np.ndarray
    lo: np.ndarray  # bisection bracket, frozen in the reverse pass
    hi: np.ndarray
    tau: np.ndarray
    projected: np.ndarray
    normal_speed: np.ndarray  # |v . n| before resolution
    tangent_speed_before: np.ndarray
    tangent_speed_after: np.ndarray

    @classmethod
    def empty(cls, dtype):
        z = np.zeros(0, dtype=np.int64)
        f = np.zeros(0, dtype=dtype)
        return cls(z, z.copy(), f, f.copy(), f.copy(), np.zeros(0, dtype=bool), f.copy(), f.copy(), f.copy())


def _gap(H, b, x, v, tau, extent):
    """Height of ``x + tau v`` above the terrain, and the terrain slope there."""
    p = x + tau[:, None] * v
    h, hdx, hdy = _bilinear(H, b, p[:, 0], p[:, 1], extent)
    return p[:, 2] - h, hdx, hdy


def _contact_bracket(H, b, x, v, extent, dt, iters):
    lo = np.zeros(len(b), dtype=x.dtype)
    hi = np.full(len(b), dt, dtype=x.dtype)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = _gap(H, b, x, v, mid, extent)[0] < 0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return lo, hi


def _contact_time(H, b, x, v, extent, lo, hi):
    """Regula-falsi step inside the bisection bracket.

    Exact on planar terrain; elsewhere the error is second order in the
    bracket width. A mass already at or below the surface gets ``lo``.
    """
    g_lo = _gap(H, b, x, v, lo, extent)[0]
    g_hi = _gap(H, b, x, v, hi, extent)[0]
    interp = (g_lo > 0) & (g_hi < 0)
    denom = np.where(interp, g_lo - g_hi, 1)
    w = np.where(interp, g_lo / denom, 0)
    return lo + (hi - lo) * w, interp, g_lo, g_hi, denom


def _friction_project(v, n):
    vn = (v * n).sum(axis=-1)
    vt = v - vn[:, None] * n
    nt = np.sqrt((vt * vt).sum(axis=-1))
    a = np.abs(vn)
    clamp = nt > a
    s = np.where(clamp, a / np.where(clamp, nt, 1), 1)
    return vn, vt, nt, s, clamp


def _tangent_coef(s, mode):
    """Post-contact tangential velocity is ``coef * vt``.

    The friction impulse is ``-s vt`` with ``s = min(1, |vn| / |vt|)``.
    ``coulomb`` adds it to the tangential velocity (sliding slows by the
    normal speed, slow masses stick); ``reverse`` replaces the tangential
    velocity with it. Either way ``d coef / d s = -1``.
    """
    return 1 - s if mode == "coulomb" else -s


def resolve_collision(x, v, H, b, extent, cfg: SimConfig, bracket=None):
    """Resolve terrain contact for masses whose candidate position penetrates.

    ``x`` are the positions at the start of the step and ``v`` the updated
    velocities (both ``(K, 3)``); ``b`` selects each mass's terrain.

    The impact time is bracketed by bisection on ``[0, dt]`` and pinned by
    one regula-falsi step; the mass advances there and loses its normal
    velocity, and friction acts on its tangential velocity with an impulse
    capped by the normal speed (see ``_tangent_coef``). It then slides for the rest of the step along the
    tangent plane; a residual dip below a curved surface is projected back
    onto it.

    Returns ``(x_new, v_new, info)`` where ``info`` holds ``lo, hi, tau,
    projected, normal_speed, tangent_speed_before``.
    """
    dt = cfg.dt
    if bracket is None:
        bracket = _contact_bracket(H, b, x, v, extent, dt, cfg.contact_bisection_iters)
    lo, hi = bracket
    tau = _contact_time(H, b, x, v, extent, lo, hi)[0]
    pc = x + tau[:, None] * v
    n, _ = _normal(H, b, pc[:, 0], pc[:, 1], extent)
    vn, vt, nt, s, _ = _friction_project(v, n)
    v_new = _tangent_coef(s, cfg.friction)[:, None] * vt
    y = pc + (dt - tau)[:, None] * v_new
    hy = _bilinear(H, b, y[:, 0], y[:, 1], extent)[0]
    projected = y[:, 2] < hy
    x_new = y.copy()
    x_new[:, 2] = np.where(projected, hy, y[:, 2])
    info = dict(lo=lo, hi=hi, tau=tau, projected=projected, normal_speed=np.abs(vn), tangent_speed_before=nt)
    return x_new, v_new, info


def resolve_collision_vjp(x, v, H, b, extent, cfg, lo, hi, projected, gx_new, gv_new):
    """Reverse of :func:`resolve_collision` with the bracket and branches frozen."""
    dt = cfg.dt
    tau, interp, g_lo, g_hi, denom = _contact_time(H, b, x, v, extent, lo, hi)
    pc = x + tau[:, None] * v
    n, _ = _normal(H, b, pc[:, 0], pc[:, 1], extent)
    vn, vt, nt, s, clamp = _friction_project(v, n)
    coef = _tangent_coef(s, cfg.friction)
    v_new = coef[:, None] * vt
    y = pc + (dt - tau)[:, None] * v_new

    gy = gx_new.copy()
    _, hdx, hdy = _bilinear(H, b, y[:, 0], y[:, 1], extent)
    gz = gx_new[:, 2]
    gy[:, 0] += np.where(projected, gz * hdx, 0)
    gy[:, 1] += np.where(projected, gz * hdy, 0)
    gy[:, 2] = np.where(projected, 0, gz)

    # y = pc + (dt - tau) v_new
    g_vnew = gv_new + (dt - tau)[:, None] * gy
    g_tau = -(gy * v_new).sum(axis=-1)
    g_pc = gy.copy()
    # v_new = coef(s) vt
    g_vt = coef[:, None] * g_vnew
    g_s = -(vt * g_vnew).sum(axis=-1)
    safe_nt = np.where(clamp, nt, 1)
    g_a = np.where(clamp, g_s / safe_nt, 0)
    g_nt = np.where(clamp, -g_s * np.abs(vn) / (safe_nt * safe_nt), 0)
    g_vn = g_a * np.sign(vn)
    g_vt = g_vt + (g_nt / safe_nt)[:, None] * vt
    # vt = v - vn n
    g_v = g_vt.copy()
    g_vn = g_vn - (g_vt * n).sum(axis=-1)
    g_n = -vn[:, None] * g_vt
    # vn = v . n
    g_v += g_vn[:, None] * n
    g_n += g_vn[:, None] * v
    gpx, gpy = _normal_vjp(H, b, pc[:, 0], pc[:, 1], extent, g_n)
    g_pc[:, 0] += gpx
    g_pc[:, 1] += gpy
    # pc = x + tau v
    g_x = g_pc.copy()
    g_v = g_v + tau[:, None] * g_pc
    g_tau = g_tau + (g_pc * v).sum(axis=-1)
    # tau = lo + (hi - lo) * gap(lo) / (gap(lo) - gap(hi))
    scale = np.where(interp & cfg.contact_time_grad, g_tau * (hi - lo) / (denom * denom), 0)
    for t_k, coef in ((lo, -g_hi * scale), (hi, g_lo * scale)):
        _, sx, sy = _gap(H, b, x, v, t_k, extent)
        grad_gap = np.stack([-sx, -sy, np.ones_like(sx)], axis=-1)
        g_x += coef[:, None] * grad_gap
        g_v += (coef * t_k)[:, None] * grad_gap
    return g_x, g_v


# ---------------------------------------------------------------------------
# stepping


@dataclass
class StepResult:
    positions: np.ndarray
    velocities: np.ndarray
    v_pre: np.ndarray  # velocity after force integration, before contact
    contacts: ContactInfo
    diverged: np.ndarray  # (B,) bool


def step(x, v, actuations, mass_mask, spring_mask, H, cfg: SimConfig, extent=TERRAIN_EXTENT):
    """One semi-implicit Euler step followed by contact resolution.

    Shapes are batched: ``x, v`` ``(B, 245, 3)``, ``actuations`` and
    ``spring_mask`` ``(B, 1648)``, ``mass_mask`` ``(B, 245)``, ``H`` ``(B, n, n)``.
    """
    dt = cfg.dt
    dtype = x.dtype
    F = spring_forces(x, actuations, spring_mask, cfg)
    accel = F / cfg.node_mass
    accel[..., 2] -= cfg.gravity
    v1 = cfg.velocity_damping * (v + dt * accel)
    v1 = np.where(mass_mask[..., None], v1, 0).astype(dtype, copy=False)
    x1 = x + dt * v1

    ground = _bilinear(H, np.arange(x.shape[0])[:, None], x1[..., 0], x1[..., 1], extent)[0]
    hit = mass_mask & (x1[..., 2] < ground)
    bi, ni = np.nonzero(hit)
    contacts = ContactInfo.empty(dtype)
    if len(bi):
        xc, vc, info = resolve_collision(x[bi, ni], v1[bi, ni], H, bi, extent, cfg)
        x1 = x1.copy()
        x1[bi, ni] = xc
        v_out = v1.copy()
        v_out[bi, ni] = vc
        contacts = ContactInfo(
            bi, ni, tangent_speed_after=np.sqrt((vc * vc).sum(axis=-1)), **info
        )
    else:
        v_out = v1
    with np.errstate(invalid="ignore"):
        speed = np.sqrt((v_out * v_out).sum(axis=-1))
        bad = ~np.isfinite(x1).all(axis=(-1, -2)) | ~np.isfinite(v_out).all(axis=(-1, -2))
        bad |= (np.where(mass_mask, speed, 0) > MAX_SPEED).any(axis=-1)
    return StepResult(x1, v_out, v1, contacts, bad)


def step_vjp(x, v, actuations, mass_mask, spring_mask, H, cfg, res: StepResult, gx1, gv1, extent=TERRAIN_EXTENT):
    """Reverse of :func:`step`; returns ``(dL/dx, dL/dv, dL/d actuations)``."""
    dt = cfg.dt
    c = res.contacts
    # adjoints of the pre-contact position/velocity
    g_xpre = gx1.copy()
    g_vpre = gv1.copy()
    gx = np.zeros_like(x)
    if len(c.batch):
        g_xpre[c.batch, c.mass] = 0
        g_vpre[c.batch, c.mass] = 0
        gxc, gvc = resolve_collision_vjp(
            x[c.batch, c.mass], res.v_pre[c.batch, c.mass], H, c.batch, extent, cfg,
            c.lo, c.hi, c.projected, gx1[c.batch, c.mass], gv1[c.batch, c.mass],
        )
        gx[c.batch, c.mass] += gxc
        g_vpre[c.batch, c.mass] += gvc
    # x1 = x + dt v1
    gx += g_xpre
    g_vpre += dt * g_xpre
    # v1 = damping * (v + dt * (F / m + g)), masked
    g_inner = np.where(mass_mask[..., None], cfg.velocity_damping * g_vpre, 0)
    gv = g_inner
    gF = g_inner * (dt / cfg.node_mass)
    _, parts = spring_forces(x, actuations, spring_mask, cfg, return_parts=True)
    gx_s, ga = spring_forces_vjp(parts, gF, cfg)
    gx += gx_s
    return gx, gv, ga


# ---------------------------------------------------------------------------
# bodies in the world


@dataclass
class RobotBatch:
    """Bodies placed in their environments, ready to simulate."""

    positions: np.ndarray  # (B, 245, 3) initial
    mass_mask: np.ndarray  # (B, 245)
    spring_mask: np.ndarray  # (B, 1648)
    heights: np.ndarray  # (B, n, n)
    light: np.ndarray  # (B, 3)
    extent: float = TERRAIN_EXTENT

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, rows):
        return replace(
            self,
            positions=self.positions[rows],
            mass_mask=self.mass_mask[rows],
            spring_mask=self.spring_mask[rows],
            heights=self.heights[rows],
            light=self.light[rows],
        )

    def astype(self, dtype):
        return replace(
            self,
            positions=self.positions.astype(dtype),
            heights=self.heights.astype(dtype),
            light=self.light.astype(dtype),
        )


def place_on_terrain(phenotype: ms.Phenotype, terrain: HeightMap) -> np.ndarray:
    """World positions for all 245 slots with the body's lowest point touching
    the terrain. Absent slots keep lattice coordinates (never simulated)."""
    pos = ms.MASS_POSITIONS - WORKSPACE_CENTER
    active = pos[phenotype.mass_ids]
    ground = height_at(terrain, active[:, 0], active[:, 1])
    lift = float(np.max(ground - active[:, 2]))
    out = pos.copy()
    out[:, 2] += lift
    return out


def initial_com(phenotype: ms.Phenotype, terrain: HeightMap) -> np.ndarray:
    pos = place_on_terrain(phenotype, terrain)
    return pos[phenotype.mass_ids].mean(axis=0)


def make_batch(phenotypes, environments, dtype=np.float64) -> RobotBatch:
    """Stack phenotype/environment pairs (equal-length sequences) into a batch."""
    if len(phenotypes) != len(environments):
        raise ValueError("need one environment per phenotype")
    pos = np.stack([place_on_terrain(p, e.terrain) for p, e in zip(phenotypes, environments)])
    extents = {e.terrain.extent for e in environments}
    if len(extents) != 1:
        raise ValueError("all terrains in a batch must share one extent")
    return RobotBatch(
        positions=pos.astype(dtype),
        mass_mask=np.stack([p.sensor_mask for p in phenotypes]),
        spring_mask=np.stack([p.actuator_mask for p in phenotypes]),
        heights=np.stack([np.asarray(e.terrain.heights) for e in environments]).astype(dtype),
        light=np.stack([np.asarray(e.light, dtype=np.float64) for e in environments]).astype(dtype),
        extent=extents.pop(),
    )


def center_of_mass(positions, mass_mask):
    w = mass_mask.astype(positions.dtype)
    return (positions * w[..., None]).sum(axis=-2) / w.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# rollout


@dataclass
class AdjointRecord:
    """Everything the reverse pass needs to replay a rollout backward."""

    batch: RobotBatch
    cfg: SimConfig
    cpg: ctl.CPGConfig
    positions: list = field(default_factory=list)  # T + 1 arrays (B, 245, 3)
    velocities: list = field(default_factory=list)
    actuations: list = field(default_factory=list)  # T arrays (B, 1648)
    steps: list = field(default_factory=list)  # T StepResult
    net: list = field(default_factory=list)  # T controller caches
    alive: list = field(default_factory=list)  # T + 1 arrays (B,) bool


@dataclass
class Trajectory:
    d0: np.ndarray
    d1: np.ndarray
    loss: np.ndarray
    diverged: np.ndarray
    com0: np.ndarray
    com1: np.ndarray
    com_trace: np.ndarray | None = None  # (T + 1, B, 3)
    record: AdjointRecord | None = None


def rollout(batch: RobotBatch, params, cfg: SimConfig, record=True, cpg_cfg=ctl.CPGConfig(),
            trace=False, steps=None) -> Trajectory:
    """Simulate ``steps`` (default ``cfg.steps``) of sense -> control -> step.

    Loss per body is ``d1 / d0``; a body that diverges is frozen from that
    step on, reports loss 1.0, and is flagged.
    """
    dtype = params.dtype
    batch = batch.astype(dtype)
    T = cfg.steps if steps is None else steps
    x = batch.positions.copy()
    v = np.zeros_like(x)
    B = len(batch)
    com0 = center_of_mass(x, batch.mass_mask)
    diff0 = com0 - batch.light
    d0 = np.sqrt((diff0 * diff0).sum(axis=-1))
    if np.any(d0 < MIN_D0):
        raise ValueError("light coincides with the body's center of mass (d0 < 1e-6)")
    alive = np.ones(B, dtype=bool)
    rec = AdjointRecord(batch, cfg, cpg_cfg) if record else None
    coms = [com0] if trace else None
    if rec is not None:
        rec.positions.append(x)
        rec.velocities.append(v)
        rec.alive.append(alive.copy())
    for t in range(T):
        readings = sense_light(x, batch.mass_mask, batch.light)
        clock = ctl.cpg_signals(t * cfg.dt, cpg_cfg)
        if record:
            act, cache = ctl.forward(readings, clock, batch.spring_mask, params, keep_cache=True)
        else:
            act = ctl.forward(readings, clock, batch.spring_mask, params)
        res = step(x, v, act, batch.mass_mask, batch.spring_mask, batch.heights, cfg, batch.extent)
        alive = alive & ~res.diverged
        x_next, v_next = res.positions, res.velocities
        if not alive.all():
            dead = ~alive
            x_next = np.where(dead[:, None, None], x, x_next)
            v_next = np.where(dead[:, None, None], 0, v_next)
        x, v = x_next, v_next
        if rec is not None:
            rec.positions.append(x)
            rec.velocities.append(v)
            rec.actuations.append(act)
            rec.steps.append(res)
            rec.net.append(cache)
            rec.alive.append(alive.copy())
        if trace:
            coms.append(center_of_mass(x, batch.mass_mask))
    com1 = center_of_mass(x, batch.mass_mask)
    diff1 = com1 - batch.light
    d1 = np.sqrt((diff1 * diff1).sum(axis=-1))
    loss = np.where(alive, d1 / d0, 1.0)
    return Trajectory(
        d0=d0, d1=d1, loss=loss, diverged=~alive, com0=com0, com1=com1,
        com_trace=np.stack(coms) if trace else None, record=rec,
    )


def export_trajectory(record: AdjointRecord, com_path, mass_path=None) -> None:
    """Write per-step centers of mass (``step,robot,x,y,z``) and optionally
    per-mass positions (``step,robot,mass,x,y,z``) for active masses, as CSV."""
    mask = record.batch.mass_mask
    with open(com_path, "w") as fh:
        fh.write("step,robot,x,y,z\n")
        for t, x in enumerate(record.positions):
            com = center_of_mass(x, mask)
            for r, c in enumerate(com):
                fh.write(f"{t},{r},{float(c[0])!r},{float(c[1])!r},{float(c[2])!r}\n")
    if mass_path is None:
        return
    with open(mass_path, "w") as fh:
        fh.write("step,robot,mass,x,y,z\n")
        for t, x in enumerate(record.positions):
            for r, m in zip(*np.nonzero(mask)):
                p = x[r, m]
                fh.write(f"{t},{r},{m},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
