"""Hash-grid encoder + MLP decoder predicting an SDF correction.

Parameters are stored as float32 and the passes run in the parameters'
dtype; gradients accumulate into float64 buffers. Casting a network to
float64 gives a full double-precision path for gradient checks. Only
parameter gradients are produced (no input-position gradients).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfBoundsError, ShapeMismatchError
from .octree import CORNERS

HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)
_P32 = HASH_PRIMES.astype(np.uint32)
_BX, _BY, _BZ = (CORNERS[:, a] for a in range(3))


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 4
    features: int = 2
    resolutions: tuple = (16, 32, 64, 128)
    table_size: int = 2 ** 19
    init_scale: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        if self.levels < 1 or self.features < 1:
            raise ValueError("levels and features must be >= 1")
        if len(self.resolutions) != self.levels:
            raise ValueError("need one resolution per level")
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError("level resolutions must be strictly increasing")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError("table size must be a power of two")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 8
    hidden: tuple = (64, 64, 64, 64, 64)
    negative_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_shapes(self):
        dims = (self.input_dim, *self.hidden, 1)
        return list(zip(dims[:-1], dims[1:]))


def spatial_hash(corners, table_size: int) -> np.ndarray:
    """``(i*p1 ^ j*p2 ^ k*p3) mod T`` on unsigned 64-bit integers."""
    c = np.asarray(corners).astype(np.uint64)
    h = (c[..., 0] * HASH_PRIMES[0]) ^ (c[..., 1] * HASH_PRIMES[1]) ^ (c[..., 2] * HASH_PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


class HashGrid:
    def __init__(self, config: HashGridConfig, root_min, side: float, rng=None):
        self.config = config
        self.root_min = np.asarray(root_min, dtype=np.float64).reshape(3)
        self.side = float(side)
        shape = (config.table_size, config.features)
        if rng is None:
            self.tables = [np.zeros(shape, dtype=np.float32) for _ in range(config.levels)]
        else:
            s = config.init_scale
            self.tables = [rng.uniform(-s, s, size=shape).astype(np.float32)
                           for _ in range(config.levels)]

    def encode(self, points):
        """Concatenated per-level features (coarse to fine) and the interpolation footprint.

        The footprint is a list, one ``(index (n, 8), weight (n, 8))`` pair
        per level, addressing that level's table.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        u = (pts - self.root_min) / self.side
        bad = np.any((u < 0.0) | (u > 1.0) | ~np.isfinite(u), axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise OutOfBoundsError(f"point {pts[i].tolist()} outside the encoder domain")
        cfg = self.config
        dtype = self.tables[0].dtype
        n = pts.shape[0]
        feats = np.empty((n, cfg.output_dim), dtype=dtype)
        footprint = []
        mask = np.uint32(cfg.table_size - 1)
        for level, res in enumerate(cfg.resolutions):
            pos = u * res
            cell = np.clip(np.floor(pos).astype(np.int64), 0, res - 1)
            frac = pos - cell
            # low 32 bits of the products suffice because T divides 2**32
            c32 = cell.astype(np.uint32)
            hashed = [np.stack([c32[:, a] * _P32[a], (c32[:, a] + np.uint32(1)) * _P32[a]], axis=1)
                      for a in range(3)]
            idx = (hashed[0][:, _BX] ^ hashed[1][:, _BY] ^ hashed[2][:, _BZ]) & mask
            idx = idx.astype(np.int64)
            wa = [np.stack([1.0 - frac[:, a], frac[:, a]], axis=1) for a in range(3)]
            w = wa[0][:, _BX] * wa[1][:, _BY] * wa[2][:, _BZ]
            vals = self.tables[level][idx]  # (n, 8, F)
            lo = level * cfg.features
            feats[:, lo:lo + cfg.features] = np.einsum("nk,nkf->nf", w.astype(dtype), vals)
            footprint.append((idx, w))
        return feats, footprint

    def accumulate(self, footprint, dfeat, grad_tables) -> None:
        """Scatter ``dL/dfeatures`` into per-entry table gradients."""
        cfg = self.config
        for level, (idx, w) in enumerate(footprint):
            lo = level * cfg.features
            flat = idx.ravel()
            for f in range(cfg.features):
                contrib = (w * dfeat[:, lo + f, None]).ravel()
                grad_tables[level][:, f] += np.bincount(flat, weights=contrib,
                                                        minlength=cfg.table_size)


class Mlp:
    def __init__(self, config: MlpConfig, rng=None):
        self.config = config
        self.weights, self.biases = [], []
        shapes = config.layer_shapes
        for i, (fan_in, fan_out) in enumerate(shapes):
            last = i == len(shapes) - 1
            if rng is None or last:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(np.ascontiguousarray(w, dtype=np.float32))
            self.biases.append(np.zeros(fan_out, dtype=np.float32))

    def forward(self, f):
        """Scalar outputs and the cached layer inputs needed for backward.

        Arithmetic runs in the parameters' dtype.
        """
        slope = self.config.negative_slope
        dtype = self.weights[0].dtype
        a = np.asarray(f).astype(dtype, copy=False)
        if a.ndim != 2 or a.shape[1] != self.config.input_dim:
            raise ShapeMismatchError(f"expected features of width {self.config.input_dim}")
        acts = [a]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w
            z += b
            a = np.maximum(z, z * dtype.type(slope), out=z)
            acts.append(a)
        out = a @ self.weights[-1] + self.biases[-1]
        return out[:, 0], acts

    def backward(self, cache, upstream, grad_w, grad_b) -> np.ndarray:
        """Accumulate weight/bias gradients; returns dL/d(input features)."""
        slope = self.config.negative_slope
        acts = cache
        dtype = self.weights[0].dtype
        delta = np.asarray(upstream).astype(dtype).reshape(-1, 1)
        if delta.shape[0] != acts[0].shape[0]:
            raise ShapeMismatchError(
                f"upstream has {delta.shape[0]} rows, cache has {acts[0].shape[0]}")
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = acts[i]
            grad_w[i] += a_in.T @ delta
            grad_b[i] += delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0:
                # activations keep the sign of their pre-activations
                fac = (a_in > 0).astype(dtype)
                fac *= dtype.type(1.0 - slope)
                fac += dtype.type(slope)
                delta *= fac
        return delta

    def decode(self, f) -> np.ndarray:
        return self.forward(f)[0]


@dataclass
class GradBuffer:
    """Gradient accumulators mirroring every learnable array (float64)."""

    tables: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    octree_d: np.ndarray = field(default_factory=lambda: np.zeros(0))
    octree_g: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @classmethod
    def for_net(cls, net: "ResidualNet", n_vertices: int = 0) -> "GradBuffer":
        buf = cls(
            tables=[np.zeros(t.shape) for t in net.grid.tables],
            weights=[np.zeros(w.shape) for w in net.mlp.weights],
            biases=[np.zeros(b.shape) for b in net.mlp.biases],
        )
        buf.resize_octree(n_vertices)
        return buf

    def resize_octree(self, n_vertices: int) -> None:
        self.octree_d = np.zeros(n_vertices)
        self.octree_g = np.zeros((n_vertices, 3))

    def zero(self) -> None:
        for arr in (*self.tables, *self.weights, *self.biases, self.octree_d, self.octree_g):
            arr.fill(0.0)

    def arrays(self):
        return [*self.tables, *self.weights, *self.biases, self.octree_d, self.octree_g]


class ResidualNet:
    """``delta(x) = decode(encode(x))``."""

    def __init__(self, grid_config: HashGridConfig, mlp_config: MlpConfig, root_min,
                 side: float, seed: int | None = 0):
        if mlp_config.input_dim != grid_config.output_dim:
            raise ValueError("MLP input width must equal levels * features")
        rng = None if seed is None else np.random.default_rng(seed)
        self.grid = HashGrid(grid_config, root_min, side, rng)
        self.mlp = Mlp(mlp_config, rng)

    def forward(self, points):
        feats, footprint = self.grid.encode(points)
        out, mlp_cache = self.mlp.forward(feats)
        return out, (footprint, mlp_cache)

    def backward(self, cache, upstream, grads: GradBuffer) -> None:
        footprint, mlp_cache = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape[0] != mlp_cache[0].shape[0]:
            raise ShapeMismatchError("upstream gradient does not match the cached batch")
        if not np.any(upstream):
            return
        dfeat = self.mlp.backward(mlp_cache, upstream, grads.weights, grads.biases)
        self.grid.accumulate(footprint, dfeat, grads.tables)

    def param_arrays(self):
        return [*self.grid.tables, *self.mlp.weights, *self.mlp.biases]


def encode(grid: HashGrid, x):
    return grid.encode(x)


def decode(mlp: Mlp, f):
    return mlp.decode(np.atleast_2d(f))


def residual_forward(net: ResidualNet, x):
    return net.forward(x)


def residual_backward(net: ResidualNet, cache, upstream, grads: GradBuffer) -> None:
    net.backward(cache, upstream, grads)
