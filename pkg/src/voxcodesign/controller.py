"""Universal controller: one MLP drives every body through input/output masks.

Inputs are 245 mean-centered photosensor slots (global mass order) followed
by 5 CPG clock signals. Outputs are 1648 spring actuations in ``[-1, 1]``.
Hidden layers are ``linear -> layer norm -> relu``; the output layer is
``linear -> tanh``.

Parameters live in a single flat vector so that clipping, Adam and
checkpointing can treat them uniformly; :func:`unpack` returns named views.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .morphospace import N_MASSES, N_SPRINGS

N_CPG = 5
N_INPUTS = N_MASSES + N_CPG
HIDDEN = 256
LAYER_SIZES = (N_INPUTS, HIDDEN, HIDDEN, HIDDEN, N_SPRINGS)
LN_EPS = 1e-5


def _layout():
    entries = []
    for layer, (fan_in, fan_out) in enumerate(zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]), 1):
        entries.append((f"W{layer}", (fan_in, fan_out)))
        entries.append((f"b{layer}", (fan_out,)))
        if layer < len(LAYER_SIZES) - 1:
            entries.append((f"gain{layer}", (fan_out,)))
            entries.append((f"offset{layer}", (fan_out,)))
    layout = {}
    offset = 0
    for name, shape in entries:
        size = int(np.prod(shape))
        layout[name] = (offset, shape)
        offset += size
    return layout, offset


LAYOUT, N_PARAMS = _layout()
N_HIDDEN_LAYERS = len(LAYER_SIZES) - 2


def unpack(flat: np.ndarray) -> dict[str, np.ndarray]:
    """Named views into a flat parameter (or gradient) vector."""
    if flat.shape != (N_PARAMS,):
        raise ValueError(f"expected flat vector of {N_PARAMS} entries, got {flat.shape}")
    return {
        name: flat[off : off + int(np.prod(shape))].reshape(shape)
        for name, (off, shape) in LAYOUT.items()
    }


def param_slice(name: str) -> slice:
    off, shape = LAYOUT[name]
    return slice(off, off + int(np.prod(shape)))


def init_params(seed, dtype=np.float32) -> np.ndarray:
    """Xavier-uniform weights (gain 1), zero biases, unit norm gains, zero offsets."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = np.zeros(N_PARAMS, dtype=np.float64)
    p = unpack(flat)
    for layer, (fan_in, fan_out) in enumerate(zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]), 1):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        p[f"W{layer}"][...] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if layer <= N_HIDDEN_LAYERS:
            p[f"gain{layer}"][...] = 1.0
    return flat.astype(dtype)


@dataclass(frozen=True)
class CPGConfig:
    n_waves: int = N_CPG
    omega: float = 10.0  # rad/s

    @property
    def phases(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_waves) / self.n_waves


def cpg_signals(t: float, cfg: CPGConfig = CPGConfig()) -> np.ndarray:
    if t < 0:
        raise ValueError("time must be non-negative")
    return np.sin(cfg.omega * t + cfg.phases)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    hidden: list = field(default_factory=list)  # per layer: (h_in, xhat, inv_std, y)
    last_hidden: np.ndarray | None = None
    out: np.ndarray | None = None  # unmasked tanh output


def forward(readings, cpg, actuator_mask, params, keep_cache=False):
    """Map ``(B, 245)`` readings and the 5 clock values to ``(B, 1648)`` actuations.

    Entries for absent springs are exactly zero. Readings for absent masses
    must already be zero (``sense_light`` guarantees it).
    """
    p = unpack(params)
    dtype = params.dtype
    readings = np.asarray(readings, dtype=dtype)
    squeeze = readings.ndim == 1
    if squeeze:
        readings = readings[None]
        actuator_mask = np.asarray(actuator_mask)[None]
    B = readings.shape[0]
    clock = np.broadcast_to(np.asarray(cpg, dtype=dtype), (B, N_CPG))
    h = np.concatenate([readings, clock], axis=1)
    cache = ForwardCache(inputs=h) if keep_cache else None
    for layer in range(1, N_HIDDEN_LAYERS + 1):
        z = h @ p[f"W{layer}"] + p[f"b{layer}"]
        mu = z.mean(axis=1, keepdims=True)
        zc = z - mu
        inv_std = 1.0 / np.sqrt((zc * zc).mean(axis=1, keepdims=True) + LN_EPS)
        xhat = zc * inv_std
        y = p[f"gain{layer}"] * xhat + p[f"offset{layer}"]
        h_next = np.maximum(y, 0)
        if keep_cache:
            cache.hidden.append((h, xhat, inv_std, y))
        h = h_next
    last = N_HIDDEN_LAYERS + 1
    out = np.tanh(h @ p[f"W{last}"] + p[f"b{last}"])
    act = np.where(actuator_mask, out, 0).astype(dtype, copy=False)
    if not np.all(np.isfinite(act)):
        raise FloatingPointError("non-finite controller output; parameters corrupted")
    if keep_cache:
        cache.last_hidden = h
        cache.out = out
    if squeeze:
        act = act[0]
    return (act, cache) if keep_cache else act


def forward_vjp(cache: ForwardCache, grad_act, actuator_mask, params, grad_params):
    """Back-propagate ``dL/d actuations`` through the network.

    Accumulates parameter gradients into ``grad_params`` (flat, same layout)
    and returns ``dL/d readings`` of shape ``(B, 245)``.
    """
    p = unpack(params)
    g = unpack(grad_params)
    last = N_HIDDEN_LAYERS + 1
    delta = np.where(actuator_mask, grad_act, 0) * (1 - cache.out * cache.out)
    g[f"W{last}"] += cache.last_hidden.T @ delta
    g[f"b{last}"] += delta.sum(axis=0)
    gh = delta @ p[f"W{last}"].T
    for layer in range(N_HIDDEN_LAYERS, 0, -1):
        h_in, xhat, inv_std, y = cache.hidden[layer - 1]
        gy = gh * (y > 0)
        g[f"gain{layer}"] += (gy * xhat).sum(axis=0)
        g[f"offset{layer}"] += gy.sum(axis=0)
        gx = gy * p[f"gain{layer}"]
        gz = inv_std * (
            gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        g[f"W{layer}"] += h_in.T @ gz
        g[f"b{layer}"] += gz.sum(axis=0)
        gh = gz @ p[f"W{layer}"].T
    return gh[:, :N_MASSES]


# Checkpoint layout (all integers little-endian):
#   magic b"VXCP" | u32 version | u32 tensor count
#   per tensor: u16 name length | name (utf-8) | u8 ndim | u32 dims...
#   then every tensor's data as little-endian float32, in header order.
CHECKPOINT_MAGIC = b"VXCP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: np.ndarray) -> None:
    p = unpack(np.asarray(params))
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(p))]
    for name, arr in p.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in p.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, dtype=np.float32) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a controller checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        header.append((name, tuple(shape)))
    flat = np.zeros(N_PARAMS, dtype=np.float32)
    views = unpack(flat)
    for name, shape in header:
        if name not in views or views[name].shape != shape:
            raise ValueError(f"{path}: unexpected tensor {name} {shape}")
        size = int(np.prod(shape))
        views[name][...] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return flat.astype(dtype)
