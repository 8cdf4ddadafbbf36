"""Semi-sparse octree with learnable per-vertex SDF values and gradients.

Depth 0 is the root cube of side ``r * 2**(N-1)``; depth ``N-1`` holds leaf
octants of side ``r``. Every vertex of every octant lies on the finest vertex
lattice (spacing ``r``), so vertices are shared across depths through one
key -> parameter-index table.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import CheckpointError, OutOfBoundsError
from .geometry import Aabb

log = logging.getLogger(__name__)

SEMI_SPARSE = "semi-sparse"
SPARSE = "sparse"
_MODE_FLAG = {SEMI_SPARSE: 0, SPARSE: 1}

# corner k has offset bits (k & 1, k >> 1 & 1, k >> 2 & 1) along (x, y, z)
CORNERS = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=np.int64)

SNAP_REL = 1e-9
GRAD_NORM_CLAMP = 10.0


@dataclass(frozen=True)
class OctreeConfig:
    depth: int = 9
    semi_sparse_depth: int = 5
    resolution: float = 0.10
    root_min: tuple = (-12.8, -12.8, -12.8)

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("octree depth N must be >= 2")
        if not 1 <= self.semi_sparse_depth < self.depth:
            raise ValueError("semi-sparse depth M must satisfy 1 <= M < N")
        if not self.resolution > 0:
            raise ValueError("leaf resolution must be positive")
        object.__setattr__(self, "root_min", tuple(float(v) for v in self.root_min))

    @property
    def side(self) -> float:
        return self.resolution * 2 ** (self.depth - 1)

    @property
    def root(self) -> Aabb:
        lo = np.asarray(self.root_min)
        return Aabb(lo, lo + self.side)

    @property
    def lattice_size(self) -> int:
        """Vertices per axis on the finest lattice."""
        return 2 ** (self.depth - 1) + 1

    def octant_size(self, depth):
        return self.resolution * 2.0 ** (self.depth - 1 - np.asarray(depth))


class OctantAddr(NamedTuple):
    depth: int
    cell: tuple


class InsertReport(NamedTuple):
    octants_created: int
    vertices_created: int
    dropped: int


class ParameterView(NamedTuple):
    keys: np.ndarray  # (K, 3) int lattice keys
    d: np.ndarray  # (K,) SDF estimates
    g: np.ndarray  # (K, 3) gradient estimates


class Footprint(NamedTuple):
    """Per-query interpolation support: vertex indices, weights and offsets x - x_k."""

    index: np.ndarray  # (n, 8) int64
    weight: np.ndarray  # (n, 8) float64
    offset: np.ndarray  # (n, 8, 3) float64


def _cell_code(cells, n_per_axis):
    cells = np.asarray(cells, dtype=np.int64)
    return (cells[..., 0] * n_per_axis + cells[..., 1]) * n_per_axis + cells[..., 2]


def _decode_cells(codes, n_per_axis):
    codes = np.asarray(codes, dtype=np.int64)
    z = codes % n_per_axis
    y = (codes // n_per_axis) % n_per_axis
    x = codes // (n_per_axis * n_per_axis)
    return np.stack([x, y, z], axis=-1)


def interp_weights(corner_min, size, x) -> np.ndarray:
    """Normalised inverse-distance-product weights of the 8 octant corners.

    ``w_k = 1 / prod_a |x_a - x_{k,a}|``, divided by their sum. Points within
    ``1e-9 * size`` of a vertex-aligned plane use the exact limit of that
    ratio, which is the trilinear weight.
    """
    corner_min = np.asarray(corner_min, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    lead = np.broadcast_shapes(corner_min.shape, x.shape)[:-1]
    size = np.broadcast_to(size, lead)
    t = (x - corner_min) / size[..., None]
    near = t * size[..., None]  # distance to the o=0 plane per axis
    far = (1.0 - t) * size[..., None]
    dist = np.where(CORNERS == 0, near[..., None, :], far[..., None, :])  # (..., 8, 3)
    degenerate = np.min(np.minimum(near, far), axis=-1) < SNAP_REL * size

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        w = 1.0 / np.prod(dist, axis=-1)
        w = w / np.sum(w, axis=-1, keepdims=True)
    if np.any(degenerate):
        tri = np.prod(np.where(CORNERS == 0, 1.0 - t[..., None, :], t[..., None, :]), axis=-1)
        w = np.where(degenerate[..., None], tri, w)
    return w


class SemiSparseOctree:
    """Octant index plus a shared vertex store of learnable ``(d, g)`` pairs."""

    def __init__(self, config: OctreeConfig, mode: str = SEMI_SPARSE):
        if mode not in _MODE_FLAG:
            raise ValueError(f"unknown octree mode {mode!r}")
        self.config = config
        self.mode = mode
        n = config.depth
        # per depth: cell code -> child existence bitmask
        self.octants = [dict() for _ in range(n)]
        self._sorted = [None] * n
        self.keys = np.zeros((0, 3), dtype=np.int32)
        self.d = np.zeros(0, dtype=np.float32)
        self.g = np.zeros((0, 3), dtype=np.float32)
        self._vcodes = np.zeros(0, dtype=np.int64)
        self._vorder = np.zeros(0, dtype=np.int64)
        self.octants[0][0] = 0
        self._add_vertices(CORNERS * 2 ** (n - 1), np.full(8, config.side), None)

    # ------------------------------------------------------------------ basics

    @property
    def num_vertices(self) -> int:
        return self.keys.shape[0]

    @property
    def num_octants(self) -> int:
        return sum(len(level) for level in self.octants)

    def vertex_positions(self, index=None) -> np.ndarray:
        keys = self.keys if index is None else self.keys[index]
        return np.asarray(self.config.root_min) + self.config.resolution * keys.astype(np.float64)

    def parameters(self) -> ParameterView:
        """All vertex parameters in storage order.

        Storage is append-only: indices never move once issued, and each
        insertion appends its new vertices sorted by lattice key.
        """
        return ParameterView(self.keys, self.d, self.g)

    def _sorted_codes(self, depth):
        if self._sorted[depth] is None:
            self._sorted[depth] = np.fromiter(self.octants[depth].keys(), dtype=np.int64,
                                              count=len(self.octants[depth]))
            self._sorted[depth].sort()
        return self._sorted[depth]

    def _has(self, depth, codes):
        table = self._sorted_codes(depth)
        if table.size == 0:
            return np.zeros(np.shape(codes), dtype=bool)
        pos = np.searchsorted(table, codes)
        pos = np.minimum(pos, table.size - 1)
        return table[pos] == codes

    def vertex_index(self, keys) -> np.ndarray:
        """Parameter indices for lattice keys; -1 where absent."""
        codes = _cell_code(keys, self.config.lattice_size)
        if self._vcodes.size == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._vcodes, codes)
        pos = np.minimum(pos, self._vcodes.size - 1)
        found = self._vcodes[pos] == codes
        return np.where(found, self._vorder[pos], -1)

    # ------------------------------------------------------------- insertion

    def leaf_cells(self, points) -> np.ndarray:
        """Integer leaf-lattice cell of each point (half-open, clamped at the max face)."""
        cfg = self.config
        u = (np.asarray(points, dtype=np.float64) - np.asarray(cfg.root_min)) / cfg.resolution
        n_leaf = 2 ** (cfg.depth - 1)
        return np.clip(np.floor(u).astype(np.int64), 0, n_leaf - 1)

    def leaf_codes(self, points) -> np.ndarray:
        return _cell_code(self.leaf_cells(points), 2 ** (self.config.depth - 1))

    def insert_points(self, points, init_points=None, origin=None) -> InsertReport:
        """Allocate the octants holding ``points`` and initialise any new vertices.

        Depths ``1..M`` receive whole sibling sets (semi-sparse mode); deeper
        layers receive only the octants on each point's root-to-leaf path.
        New vertices are seeded from ``init_points`` (default: ``points``).
        With the sensor ``origin`` known, a vertex lying behind its nearest
        point (as seen from the origin) starts negative.
        """
        cfg = self.config
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inside = cfg.root.contains(pts) & np.all(np.isfinite(pts), axis=-1)
        dropped = int((~inside).sum())
        pts = pts[inside]
        if pts.shape[0] == 0:
            return InsertReport(0, 0, dropped)

        n = cfg.depth
        leaf = np.unique(self.leaf_cells(pts), axis=0)
        new_cells, new_depths = [], []
        for depth in range(1, n):
            shift = n - 1 - depth
            path = np.unique(leaf >> shift, axis=0)
            if self.mode == SEMI_SPARSE and depth <= cfg.semi_sparse_depth:
                parents = np.unique(path >> 1, axis=0)
                cells = (parents[:, None, :] * 2 + CORNERS[None]).reshape(-1, 3)
            else:
                cells = path
            per_axis = 2 ** depth
            codes = _cell_code(cells, per_axis)
            fresh = ~self._has(depth, codes)
            if not fresh.any():
                continue
            cells, codes = cells[fresh], codes[fresh]
            level, parent_level = self.octants[depth], self.octants[depth - 1]
            parent_codes = _cell_code(cells >> 1, per_axis // 2)
            bits = (cells & 1) @ np.array([1, 2, 4])
            for c, pc, b in zip(codes.tolist(), parent_codes.tolist(), bits.tolist()):
                level[c] = 0
                parent_level[pc] |= 1 << b
            self._sorted[depth] = None
            self._sorted[depth - 1] = None
            new_cells.append(cells)
            new_depths.append(np.full(cells.shape[0], depth))

        if not new_cells:
            return InsertReport(0, 0, dropped)
        cells = np.concatenate(new_cells)
        depths = np.concatenate(new_depths)
        scale = 2 ** (n - 1 - depths)
        vkeys = ((cells[:, None, :] + CORNERS[None]) * scale[:, None, None]).reshape(-1, 3)
        vsize = np.repeat(cfg.octant_size(depths), 8)
        init = pts if init_points is None else np.asarray(init_points, dtype=np.float64)
        n_new = self._add_vertices(vkeys, vsize, init, origin)
        return InsertReport(int(cells.shape[0]), n_new, dropped)

    def _add_vertices(self, vkeys, vsize, init_points, origin=None) -> int:
        cfg = self.config
        codes = _cell_code(vkeys, cfg.lattice_size)
        # coarsest allocating octant wins the size used by the fallback rule
        order = np.lexsort((-vsize, codes))
        codes, vkeys, vsize = codes[order], vkeys[order], vsize[order]
        first = np.ones(codes.size, dtype=bool)
        first[1:] = codes[1:] != codes[:-1]
        codes, vkeys, vsize = codes[first], vkeys[first], vsize[first]
        if self._vcodes.size:
            pos = np.minimum(np.searchsorted(self._vcodes, codes), self._vcodes.size - 1)
            fresh = self._vcodes[pos] != codes
            codes, vkeys, vsize = codes[fresh], vkeys[fresh], vsize[fresh]
        if codes.size == 0:
            return 0

        pos = np.asarray(cfg.root_min) + cfg.resolution * vkeys.astype(np.float64)
        d = vsize.copy()
        g = np.zeros((codes.size, 3))
        if init_points is not None and len(init_points):
            dist, nn = cKDTree(init_points).query(pos)
            near = dist <= 2.0 * vsize
            d = np.where(near, dist, vsize)
            diff = pos - init_points[nn]
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = diff / dist[:, None]
            g = np.where((near & (dist > 0))[:, None], unit, 0.0)
            if origin is not None:
                view = np.asarray(origin, dtype=np.float64) - init_points[nn]
                behind = near & (np.einsum("ij,ij->i", diff, view) < 0)
                d = np.where(behind, -d, d)
                g = np.where(behind[:, None], -g, g)

        start = self.keys.shape[0]
        self.keys = np.concatenate([self.keys, vkeys.astype(np.int32)])
        self.d = np.concatenate([self.d, d.astype(np.float32)])
        self.g = np.concatenate([self.g, g.astype(np.float32)])
        all_codes = np.concatenate([self._vcodes, codes])
        all_order = np.concatenate([self._vorder, start + np.arange(codes.size)])
        srt = np.argsort(all_codes, kind="stable")
        self._vcodes, self._vorder = all_codes[srt], all_order[srt]
        return int(codes.size)

    # --------------------------------------------------------------- queries

    def locate_depth(self, points):
        """Depth of the deepest allocated octant containing each point, plus leaf cells."""
        cfg = self.config
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        bad = ~cfg.root.contains(pts)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise OutOfBoundsError(f"point {pts[i].tolist()} outside the root box")
        leaf = self.leaf_cells(pts)
        depth = np.zeros(pts.shape[0], dtype=np.int64)
        active = np.arange(pts.shape[0])
        n = cfg.depth
        for level in range(1, n):
            if active.size == 0:
                break
            codes = _cell_code(leaf[active] >> (n - 1 - level), 2 ** level)
            ok = self._has(level, codes)
            active = active[ok]
            depth[active] = level
        return depth, leaf

    def locate(self, x) -> OctantAddr:
        depth, leaf = self.locate_depth(np.asarray(x, dtype=np.float64).reshape(1, 3))
        dep = int(depth[0])
        cell = leaf[0] >> (self.config.depth - 1 - dep)
        return OctantAddr(dep, tuple(int(c) for c in cell))

    def footprint(self, points) -> Footprint:
        cfg = self.config
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        depth, leaf = self.locate_depth(pts)
        shift = cfg.depth - 1 - depth
        cells = leaf >> shift[:, None]
        scale = (1 << shift)
        size = cfg.resolution * scale.astype(np.float64)
        corner_min = np.asarray(cfg.root_min) + cells * size[:, None]
        vkeys = (cells[:, None, :] + CORNERS[None]) * scale[:, None, None]
        index = self.vertex_index(vkeys)
        if np.any(index < 0):
            raise RuntimeError("octree invariant broken: octant vertex missing from store")
        weight = interp_weights(corner_min, size, pts)
        corner_pos = corner_min[:, None, :] + CORNERS[None] * size[:, None, None]
        offset = pts[:, None, :] - corner_pos
        return Footprint(index, weight, offset)

    def interpolate_ga(self, points, fp: Footprint | None = None):
        """Gradient-augmented prior ``sum_k w_k (d_k + g_k . (x - x_k))``.

        Returns the values and the footprint; the partials are
        ``d/d d_k = w_k`` and ``d/d g_k = w_k (x - x_k)``.
        """
        if fp is None:
            fp = self.footprint(points)
        d = self.d[fp.index].astype(np.float64)
        g = self.g[fp.index].astype(np.float64)
        extrap = d + np.einsum("nkc,nkc->nk", g, fp.offset)
        return np.sum(fp.weight * extrap, axis=1), fp

    def interpolate_tl(self, points, fp: Footprint | None = None):
        """Plain trilinear prior ``sum_k w_k d_k`` (gradients ignored)."""
        if fp is None:
            fp = self.footprint(points)
        d = self.d[fp.index].astype(np.float64)
        return np.sum(fp.weight * d, axis=1), fp

    def clamp_gradients(self, max_norm: float = GRAD_NORM_CLAMP) -> None:
        norms = np.linalg.norm(self.g.astype(np.float64), axis=1)
        over = norms > max_norm
        if over.any():
            self.g[over] = (self.g[over] * (max_norm / norms[over])[:, None]).astype(np.float32)

    def set_vertex_data(self, d, g) -> None:
        self.d = np.asarray(d, dtype=np.float32).reshape(self.num_vertices).copy()
        self.g = np.asarray(g, dtype=np.float32).reshape(self.num_vertices, 3).copy()

    # ----------------------------------------------------------------- audit

    def audit(self) -> list:
        """Check the structural invariants; returns a list of violation messages."""
        problems = []
        cfg = self.config
        for depth in range(1, cfg.depth):
            per_axis = 2 ** depth
            codes = self._sorted_codes(depth)
            if codes.size == 0:
                continue
            cells = _decode_cells(codes, per_axis)
            if np.any(cells < 0) or np.any(cells >= per_axis):
                problems.append(f"depth {depth}: cell out of range")
            parents = _cell_code(cells >> 1, per_axis // 2)
            if not np.all(self._has(depth - 1, parents)):
                problems.append(f"depth {depth}: octant without parent")
        for depth in range(cfg.depth):
            per_axis = 2 ** depth
            for code, mask in self.octants[depth].items():
                if depth == cfg.depth - 1:
                    if mask:
                        problems.append(f"leaf {code} has children")
                    continue
                cell = _decode_cells(code, per_axis)
                kids = _cell_code(cell * 2 + CORNERS, per_axis * 2)
                actual = sum(1 << k for k in range(8) if int(kids[k]) in self.octants[depth + 1])
                if actual != mask:
                    problems.append(f"depth {depth} cell {code}: child mask mismatch")
                if (self.mode == SEMI_SPARSE and depth < cfg.semi_sparse_depth
                        and mask not in (0, 0xFF)):
                    problems.append(f"depth {depth} cell {code}: partial sibling set")
        for depth in range(cfg.depth):
            codes = self._sorted_codes(depth)
            if codes.size == 0:
                continue
            cells = _decode_cells(codes, 2 ** depth)
            scale = 2 ** (cfg.depth - 1 - depth)
            vkeys = (cells[:, None, :] + CORNERS[None]) * scale
            if np.any(self.vertex_index(vkeys) < 0):
                problems.append(f"depth {depth}: octant vertex missing")
        if not (np.all(np.isfinite(self.d)) and np.all(np.isfinite(self.g))):
            problems.append("non-finite vertex data")
        if np.any(np.linalg.norm(self.g, axis=1) > GRAD_NORM_CLAMP * (1 + 1e-6)):
            problems.append("vertex gradient above clamp")
        return problems

    # ----------------------------------------------------------- serialising

    def to_bytes(self) -> bytes:
        cfg = self.config
        buf = io.BytesIO()
        root = cfg.root
        buf.write(struct.pack("<IId", cfg.depth, cfg.semi_sparse_depth, cfg.resolution))
        buf.write(struct.pack("<6d", *root.min, *root.max))
        buf.write(struct.pack("<B", _MODE_FLAG[self.mode]))
        rec = np.zeros(self.num_vertices, dtype=[("key", "<i4", 3), ("d", "<f4"), ("g", "<f4", 3)])
        rec["key"], rec["d"], rec["g"] = self.keys, self.d, self.g
        buf.write(struct.pack("<Q", self.num_vertices))
        buf.write(rec.tobytes())
        # octant index: per depth, sorted cells and child masks
        for depth in range(cfg.depth):
            codes = self._sorted_codes(depth)
            cells = _decode_cells(codes, 2 ** depth).astype("<i4")
            masks = np.array([self.octants[depth][c] for c in codes.tolist()], dtype=np.uint8)
            orec = np.zeros(codes.size, dtype=[("cell", "<i4", 3), ("mask", "u1")])
            orec["cell"], orec["mask"] = cells, masks
            buf.write(struct.pack("<Q", codes.size))
            buf.write(orec.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SemiSparseOctree":
        try:
            view = memoryview(data)
            n, m, r = struct.unpack_from("<IId", view, 0)
            bounds = struct.unpack_from("<6d", view, 16)
            (flag,) = struct.unpack_from("<B", view, 64)
            off = 65
            cfg = OctreeConfig(n, m, r, tuple(bounds[:3]))
            mode = {v: k for k, v in _MODE_FLAG.items()}[flag]
            tree = cls.__new__(cls)
            tree.config, tree.mode = cfg, mode
            (count,) = struct.unpack_from("<Q", view, off)
            off += 8
            vdt = np.dtype([("key", "<i4", 3), ("d", "<f4"), ("g", "<f4", 3)])
            rec = np.frombuffer(view, dtype=vdt, count=count, offset=off)
            off += count * vdt.itemsize
            tree.keys = rec["key"].astype(np.int32)
            tree.d = rec["d"].astype(np.float32)
            tree.g = rec["g"].astype(np.float32)
            codes = _cell_code(tree.keys, cfg.lattice_size)
            tree._vorder = np.argsort(codes, kind="stable")
            tree._vcodes = codes[tree._vorder]
            odt = np.dtype([("cell", "<i4", 3), ("mask", "u1")])
            tree.octants, tree._sorted = [], []
            for depth in range(n):
                (k,) = struct.unpack_from("<Q", view, off)
                off += 8
                orec = np.frombuffer(view, dtype=odt, count=k, offset=off)
                off += k * odt.itemsize
                oc = _cell_code(orec["cell"].astype(np.int64), 2 ** depth)
                tree.octants.append(dict(zip(oc.tolist(), orec["mask"].tolist())))
                tree._sorted.append(None)
        except (struct.error, ValueError, KeyError) as exc:
            raise CheckpointError(f"corrupt OCTREE section: {exc}") from exc
        return tree
