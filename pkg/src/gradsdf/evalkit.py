"""Mesh extraction, mesh and SDF-field metrics, and the prior study harness."""

from __future__ import annotations

import csv
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .errors import EmptyMeshError
from .geometry import AnalyticScene, Aabb, Room
from .octree import SEMI_SPARSE, SPARSE, OctreeConfig, SemiSparseOctree

MIN_TRIANGLE_AREA = 1e-12
NEAR_LOW, NEAR_HIGH = -0.1, 0.2
EVAL_CHUNK = 65536


# ---------------------------------------------------------------------------
# meshes


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n, 3) float64
    faces: np.ndarray  # (m, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return self.faces.shape[0]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def content_crc(self) -> int:
        crc = zlib.crc32(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        return zlib.crc32(np.ascontiguousarray(self.faces, dtype="<i8").tobytes(), crc)

    def sample(self, count: int, rng) -> np.ndarray:
        """Area-weighted uniform points on the surface."""
        areas = self.triangle_areas()
        if areas.sum() <= 0:
            raise EmptyMeshError("cannot sample a mesh without area")
        tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
        u, v = rng.random(count), rng.random(count)
        su = np.sqrt(u)
        a, b, c = (self.vertices[self.faces[tri, i]] for i in range(3))
        return (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c


@dataclass(frozen=True)
class SdfGridSpec:
    bounds: Aabb
    resolution: float

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("grid resolution must be positive")

    @property
    def shape(self):
        n = np.floor(self.bounds.size / self.resolution + 1e-9).astype(int) + 1
        return tuple(int(v) for v in n)

    def axes(self):
        lo = np.asarray(self.bounds.min, dtype=np.float64)
        return [lo[a] + self.resolution * np.arange(n) for a, n in enumerate(self.shape)]

    def points(self) -> np.ndarray:
        """Grid samples, x slowest, as an (nx*ny*nz, 3) array."""
        gx, gy, gz = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def evaluation_grid(scene: AnalyticScene, resolution: float = 0.05,
                    padding: float = 0.05) -> SdfGridSpec:
    """Bounds of the observable region plus ``padding``, clipped to the root.

    For a room that is its interior; otherwise the union of primitive bounds.
    """
    rooms = [p for p in scene.primitives if isinstance(p, Room)]
    if rooms:
        box = rooms[0].interior()
    else:
        boxes = [p.bounds() for p in scene.primitives]
        box = Aabb(np.min([b.min for b in boxes], axis=0), np.max([b.max for b in boxes], axis=0))
    lo = np.maximum(np.asarray(box.min) - padding, scene.root.min)
    hi = np.minimum(np.asarray(box.max) + padding, scene.root.max)
    return SdfGridSpec(Aabb(lo, hi), resolution)


# ---------------------------------------------------------------------------
# predictors


class OraclePredictor:
    """The analytic scene as a predictor, optionally with a constant bias."""

    def __init__(self, scene: AnalyticScene, bias: float = 0.0):
        self.scene = scene
        self.bias = float(bias)

    def predict(self, points) -> np.ndarray:
        return self.scene.sdf(np.asarray(points, dtype=np.float64).reshape(-1, 3)) + self.bias

    def gradient(self, points) -> np.ndarray:
        return self.scene.gradient(np.asarray(points, dtype=np.float64).reshape(-1, 3))[0]


class ModelPredictor:
    """A trained model; gradients are central differences with step ``eps``."""

    def __init__(self, model, eps: float = 0.01):
        self.model = model
        self.eps = float(eps)

    def predict(self, points) -> np.ndarray:
        return self.model.predict(points)

    def gradient(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty_like(pts)
        step = EVAL_CHUNK // 6
        for lo in range(0, len(pts), step):
            out[lo:lo + step] = self.model.numerical_gradient(pts[lo:lo + step], self.eps)
        return out


class FunctionPredictor:
    """Wraps a plain callable ``points -> values``."""

    def __init__(self, fn, eps: float = 1e-4):
        self.fn = fn
        self.eps = eps

    def predict(self, points) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(points, dtype=np.float64).reshape(-1, 3)),
                          dtype=np.float64)

    def gradient(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = np.empty_like(pts)
        for a in range(3):
            e = np.zeros(3)
            e[a] = self.eps
            g[:, a] = (self.predict(pts + e) - self.predict(pts - e)) / (2 * self.eps)
        return g


def as_predictor(obj):
    if hasattr(obj, "predict") and hasattr(obj, "gradient"):
        return obj
    if hasattr(obj, "predict") and hasattr(obj, "numerical_gradient"):
        return ModelPredictor(obj)
    if callable(obj):
        return FunctionPredictor(obj)
    raise TypeError(f"cannot use {type(obj).__name__} as an SDF predictor")


# ---------------------------------------------------------------------------
# mesh extraction and metrics


def extract_mesh(predictor, grid: SdfGridSpec, iso: float = 0.0) -> TriMesh:
    """Marching cubes over the predicted field sampled on ``grid``."""
    pred = as_predictor(predictor)
    vol = pred.predict(grid.points()).reshape(grid.shape)
    if not (np.nanmin(vol) < iso < np.nanmax(vol)):
        raise EmptyMeshError("the field never crosses the iso level on this grid")
    res = grid.resolution
    verts, faces, _, _ = marching_cubes(vol, level=iso, spacing=(res, res, res),
                                        method="lorensen")
    verts = verts.astype(np.float64) + np.asarray(grid.bounds.min, dtype=np.float64)
    mesh = TriMesh(verts, faces)
    keep = mesh.triangle_areas() > MIN_TRIANGLE_AREA
    faces = mesh.faces[keep]
    if faces.size == 0:
        raise EmptyMeshError("every extracted triangle was degenerate")
    used, inverse = np.unique(faces, return_inverse=True)
    return TriMesh(mesh.vertices[used], inverse.reshape(-1, 3))


@dataclass
class MeshMetrics:
    accuracy: float  # cm
    completion: float  # cm
    chamfer: float  # cm
    precision: float  # %
    recall: float  # %
    f1: float  # %
    completion_ratio: float  # %


def _mesh_samples(mesh: TriMesh, count: int, seed: int) -> np.ndarray:
    # keyed on mesh content so a mesh draws the same cloud on either side
    return mesh.sample(count, np.random.default_rng([seed, mesh.content_crc()]))


def mesh_metrics(recon: TriMesh, gt: TriMesh, samples: int = 200000, threshold: float = 0.05,
                 seed: int = 0) -> MeshMetrics:
    if len(recon) == 0 or len(gt) == 0:
        raise EmptyMeshError("mesh metrics need two non-empty meshes")
    pr = _mesh_samples(recon, samples, seed)
    pg = _mesh_samples(gt, samples, seed)
    d_rg = cKDTree(pg).query(pr)[0]
    d_gr = cKDTree(pr).query(pg)[0]
    acc, comp = float(d_rg.mean()), float(d_gr.mean())
    prec = float(np.mean(d_rg < threshold))
    rec = float(np.mean(d_gr < threshold))
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return MeshMetrics(100 * acc, 100 * comp, 100 * (acc + comp) / 2, 100 * prec, 100 * rec,
                       100 * f1, 100 * rec)


# ---------------------------------------------------------------------------
# SDF field


@dataclass
class SdfMetrics:
    mae_all: float  # cm
    mae_near: float
    mae_far: float
    grad_mae_all: float  # rad
    grad_mae_near: float
    grad_mae_far: float
    valid_ratio: float  # %
    n_kept: int = 0
    n_near: int = 0
    n_far: int = 0
    n_medial: int = 0


def _angles(a, b) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, 1e-300)
    ang = np.arccos(np.clip(cos, -1.0, 1.0))
    return np.where((na > 0) & (nb > 0), ang, np.pi / 2)


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else float("nan")


def eval_sdf_field(predictor, scene: AnalyticScene, grid: SdfGridSpec) -> SdfMetrics:
    """SDF and gradient-direction errors over grid points with ``d >= -0.1``."""
    pred = as_predictor(predictor)
    pts = grid.points()
    d = scene.sdf(pts)
    kept = d >= NEAR_LOW
    pts, d = pts[kept], d[kept]
    near = d <= NEAR_HIGH
    est = pred.predict(pts)
    valid = np.isfinite(est)
    err = np.abs(est - d)
    g_true, medial = scene.gradient(pts)
    g_est = pred.gradient(pts)
    ok = ~medial & valid
    ang = _angles(g_est, g_true)
    return SdfMetrics(
        mae_all=100 * _mean(err[valid]),
        mae_near=100 * _mean(err[valid & near]),
        mae_far=100 * _mean(err[valid & ~near]),
        grad_mae_all=_mean(ang[ok]),
        grad_mae_near=_mean(ang[ok & near]),
        grad_mae_far=_mean(ang[ok & ~near]),
        valid_ratio=100 * float(valid.mean()) if len(valid) else 0.0,
        n_kept=int(len(d)), n_near=int(near.sum()), n_far=int((~near).sum()),
        n_medial=int(medial.sum()),
    )


def gradient_norm_fraction(predictor, points, lo: float = 0.8, hi: float = 1.2) -> float:
    g = as_predictor(predictor).gradient(points)
    n = np.linalg.norm(g, axis=1)
    return float(np.mean((n >= lo) & (n <= hi)))


# ---------------------------------------------------------------------------
# prior study


def prop1_bound(m: float, size: float) -> float:
    """Worst-case gradient-augmented error ``3 M L^2 / 8`` in an octant of side L."""
    return 3.0 * m * size * size / 8.0


def hessian_bound(scene: AnalyticScene, lo, size: float):
    """Conservative bound on the SDF Hessian norm inside an octant, or None.

    Valid only where one primitive is closest throughout and the octant lies
    strictly outside it: for a convex primitive at distance ``s`` the bound
    is ``1/s``; the cavity of a room is piecewise planar (bound 0).
    Returns None when no bound can be certified.
    """
    center = np.asarray(lo, dtype=np.float64) + size / 2
    reach = np.sqrt(3.0) * size / 2
    dists = np.array([float(p.sdf(center[None])[0]) for p in scene.primitives])
    order = np.argsort(dists)
    best = order[0]
    if len(dists) > 1 and dists[order[1]] - reach <= dists[best] + reach:
        return None  # another primitive may take over inside the octant
    prim = scene.primitives[best]
    low = dists[best] - reach
    if low <= 0:
        return None
    if isinstance(prim, Room):
        # closest wall must not change inside the octant
        inner = prim.interior()
        gaps = np.concatenate([center - inner.min, inner.max - center])
        gs = np.sort(gaps)
        if gs[1] - gs[0] <= 2 * reach:
            return None
        return 0.0
    return 1.0 / low


@dataclass
class StudyRow:
    mode: str
    interp: str
    mean_near: float  # m
    max_near: float
    mean_far: float
    max_far: float
    vertices: int
    octants: int


@dataclass
class StudyResult:
    rows: list
    audited_octants: int = 0
    audit_violations: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)

    def row(self, mode: str, interp: str) -> StudyRow:
        for r in self.rows:
            if r.mode == mode and r.interp == interp:
                return r
        raise KeyError((mode, interp))


def oracle_octree(scene: AnalyticScene, frames, config: OctreeConfig, mode: str) -> SemiSparseOctree:
    """Octree allocated from ``frames`` with exact oracle values and gradients at vertices."""
    tree = SemiSparseOctree(config, mode)
    for fr in frames:
        tree.insert_points(fr.clipped(config.root).points)
    pos = tree.vertex_positions()
    g, _ = scene.gradient(pos)
    tree.set_vertex_data(scene.sdf(pos), g)
    return tree


def _audit_prop1(scene, tree: SemiSparseOctree, pts, max_octants: int, per_axis: int = 5):
    """Dense-sample octants holding ``pts`` and check the gradient-augmented bound."""
    cfg = tree.config
    depth, leaf = tree.locate_depth(pts)
    shift = cfg.depth - 1 - depth
    cells = leaf >> shift[:, None]
    uniq = np.unique(np.concatenate([depth[:, None], cells], axis=1), axis=0)
    checked, violations = 0, []
    t = (np.arange(per_axis) + 0.5) / per_axis
    unit = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
    for row in uniq:
        if checked >= max_octants:
            break
        dep, cell = int(row[0]), row[1:]
        size = cfg.octant_size(dep)
        lo = np.asarray(cfg.root_min) + cell * size
        m = hessian_bound(scene, lo, size)
        if m is None:
            continue
        samples = lo + unit * size
        err = np.abs(tree.interpolate_ga(samples)[0] - scene.sdf(samples)).max()
        bound = prop1_bound(m, size) + 1e-6
        # float32 vertex storage adds rounding on top of the analytic bound
        bound += 4 * np.finfo(np.float32).eps * (1 + np.abs(tree.d).max())
        checked += 1
        if err > bound:
            violations.append((dep, tuple(int(c) for c in cell), float(err), float(bound)))
    return checked, violations


def prior_study(scene: AnalyticScene, frames, config: OctreeConfig, grid: SdfGridSpec,
                audit_octants: int = 2000, keep_errors: bool = False) -> StudyResult:
    """{semi-sparse, sparse} x {gradient-augmented, trilinear} with oracle vertex data."""
    pts = grid.points()
    d = scene.sdf(pts)
    kept = d >= NEAR_LOW
    pts, d = pts[kept], d[kept]
    near = d <= NEAR_HIGH
    rows, errors = [], {}
    audited, violations = 0, []
    for mode in (SEMI_SPARSE, SPARSE):
        tree = oracle_octree(scene, frames, config, mode)
        fp = None
        for interp in ("ga", "tl"):
            if interp == "ga":
                est, fp = tree.interpolate_ga(pts, fp)
            else:
                est, fp = tree.interpolate_tl(pts, fp)
            err = np.abs(est - d)
            rows.append(StudyRow(mode, interp, _mean(err[near]), float(err[near].max(initial=0)),
                                 _mean(err[~near]), float(err[~near].max(initial=0)),
                                 tree.num_vertices, tree.num_octants))
            if keep_errors:
                errors[(mode, interp)] = err
        if mode == SEMI_SPARSE:
            audited, violations = _audit_prop1(scene, tree, pts, audit_octants)
    return StudyResult(rows, audited, violations, errors)


def write_study_csv(result: StudyResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "interp", "mean_near_m", "max_near_m", "mean_far_m", "max_far_m",
                    "vertices", "octants"])
        for r in result.rows:
            w.writerow([r.mode, r.interp, f"{r.mean_near:.9g}", f"{r.max_near:.9g}",
                        f"{r.mean_far:.9g}", f"{r.max_far:.9g}", r.vertices, r.octants])


def read_study_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_report(*metric_sets, extra: dict | None = None) -> str:
    """``key=value`` lines; field names carry their unit where it matters."""
    lines = []
    for ms in metric_sets:
        for k, v in asdict(ms).items():
            lines.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            try:
                out[k.strip()] = float(v)
            except ValueError:
                out[k.strip()] = v.strip()
    return out


def write_report(path, *metric_sets, extra: dict | None = None) -> None:
    Path(path).write_text(format_report(*metric_sets, extra=extra))
