"""Prior + residual predictor, the three training losses, Adam, and the online loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .config import LossWeights, RunConfig, TrainConfig
from .errors import EmptyFrameError, NonFiniteLossError
from .geometry import Frame
from .octree import SemiSparseOctree
from .residual import GradBuffer, ResidualNet
from .sampling import (KeyframeStore, SampleBatch, generate_batch, maybe_insert_keyframe,
                       select_keyframes)

log = logging.getLogger(__name__)

PREDICT_CHUNK = 65536

# stencil order: +x, -x, +y, -y, +z, -z
_STENCIL = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                    dtype=np.float64)


class HybridSdf:
    """``d_hat(x) = prior(x) + residual(x)``.

    ``gradient_augmented=False`` swaps the prior for plain trilinear
    interpolation and ``residual=False`` drops the network; both exist for
    ablation runs.
    """

    def __init__(self, octree: SemiSparseOctree, net: ResidualNet, residual: bool = True,
                 gradient_augmented: bool = True):
        self.octree = octree
        self.net = net
        self.residual = residual
        self.gradient_augmented = gradient_augmented

    @classmethod
    def from_config(cls, config: RunConfig) -> "HybridSdf":
        tree = SemiSparseOctree(config.octree, config.octree_mode)
        oc = config.octree
        net = ResidualNet(config.hashgrid, config.mlp, oc.root_min, oc.side, seed=config.train.seed)
        return cls(tree, net, config.residual, config.gradient_augmented)

    def prior(self, points, fp=None):
        if self.gradient_augmented:
            return self.octree.interpolate_ga(points, fp)
        return self.octree.interpolate_tl(points, fp)

    def forward(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        value, fp = self.prior(pts)
        rcache = None
        if self.residual:
            delta, rcache = self.net.forward(pts)
            value = value + delta
        return value, (fp, rcache)

    def backward(self, cache, upstream, grads: GradBuffer) -> None:
        fp, rcache = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        n_vert = self.octree.num_vertices
        if grads.octree_d.shape[0] != n_vert:
            raise ValueError("gradient buffer not sized for the current octree")
        wu = fp.weight * upstream[:, None]
        flat = fp.index.ravel()
        grads.octree_d += np.bincount(flat, weights=wu.ravel(), minlength=n_vert)
        if self.gradient_augmented:
            for c in range(3):
                grads.octree_g[:, c] += np.bincount(flat, weights=(wu * fp.offset[..., c]).ravel(),
                                                    minlength=n_vert)
        if self.residual:
            self.net.backward(rcache, upstream, grads)

    def predict(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(pts.shape[0])
        for lo in range(0, pts.shape[0], PREDICT_CHUNK):
            out[lo:lo + PREDICT_CHUNK] = self.forward(pts[lo:lo + PREDICT_CHUNK])[0]
        return out

    def numerical_gradient(self, points, eps: float) -> np.ndarray:
        """Central differences ``(d(x + eps e_i) - d(x - eps e_i)) / 2 eps``."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        stencil = (pts[:, None, :] + eps * _STENCIL[None]).reshape(-1, 3)
        vals = self.predict(stencil).reshape(-1, 3, 2)
        return (vals[..., 0] - vals[..., 1]) / (2.0 * eps)

    def param_arrays(self):
        """Learnable arrays in GradBuffer order."""
        return [*self.net.param_arrays(), self.octree.d, self.octree.g]

    def astype(self, dtype) -> "HybridSdf":
        """A copy whose parameters use ``dtype`` (float64 copies back gradient checks)."""
        import copy

        twin = copy.deepcopy(self)
        twin.octree.d = twin.octree.d.astype(dtype)
        twin.octree.g = twin.octree.g.astype(dtype)
        twin.net.grid.tables = [t.astype(dtype) for t in twin.net.grid.tables]
        twin.net.mlp.weights = [w.astype(dtype) for w in twin.net.mlp.weights]
        twin.net.mlp.biases = [b.astype(dtype) for b in twin.net.mlp.biases]
        return twin


def predict(model: HybridSdf, x):
    return model.predict(x)


def numerical_gradient(model: HybridSdf, x, eps: float):
    return model.numerical_gradient(x, eps)


# ---------------------------------------------------------------------------
# losses


class LossResult(NamedTuple):
    total: float
    terms: dict
    grads: GradBuffer | None
    dropped: int


def new_grad_buffer(model: HybridSdf) -> GradBuffer:
    return GradBuffer.for_net(model.net, model.octree.num_vertices)


def objective(model: HybridSdf, batch: SampleBatch, weights: LossWeights, eps: float,
              terms=("recon", "eik", "proj"), grads: GradBuffer | None = None,
              with_grad: bool = True) -> LossResult:
    """Evaluate the selected loss terms in one shared forward pass.

    Gradients are accumulated into ``grads`` (a fresh buffer if None). Samples
    outside the root box, and Eikonal samples whose stencil leaves it, are
    dropped from the means and counted in ``dropped``.
    """
    terms = set(terms)
    root = model.octree.config.root
    keep_p = root.contains(batch.perturbed)
    keep_f = root.contains(batch.free)
    surface = batch.surface[root.contains(batch.surface)]
    perturbed = batch.perturbed[keep_p]
    p_target = (batch.perturbed_sign * batch.perturbed_target)[keep_p]
    free = batch.free[keep_f]
    f_target = batch.free_target[keep_f]
    n_s, n_p, n_f = len(surface), len(perturbed), len(free)
    centers = np.concatenate([surface, perturbed, free]).reshape(-1, 3)
    n_c = centers.shape[0]
    outside = len(batch) - n_c

    eik_idx = np.zeros(0, dtype=np.int64)
    stencil = np.zeros((0, 3))
    dropped = 0
    if "eik" in terms:
        st = centers[:, None, :] + eps * _STENCIL[None]
        ok = np.all(root.contains(st), axis=1)
        dropped = int((~ok).sum())
        eik_idx = np.flatnonzero(ok)
        stencil = st[ok].reshape(-1, 3)

    need_centers = bool(terms & {"recon", "proj"})
    pts = np.concatenate([centers if need_centers else np.zeros((0, 3)), stencil])
    value, cache = model.forward(pts)
    up = np.zeros(pts.shape[0])
    out = {}

    if "recon" in terms:
        loss = 0.0
        if n_s:
            d_s = value[:n_s]
            loss += weights.recon_surface * np.mean(np.abs(d_s))
            up[:n_s] += weights.recon_surface / n_s * np.sign(d_s)
        if n_p:
            r = value[n_s:n_s + n_p] - p_target
            loss += weights.recon_perturbed * np.mean(np.abs(r))
            up[n_s:n_s + n_p] += weights.recon_perturbed / n_p * np.sign(r)
        out["recon"] = float(loss)

    if "proj" in terms:
        loss = 0.0
        if n_f:
            r = value[n_s + n_p:n_c] - f_target
            loss = weights.proj * np.mean(np.abs(r))
            up[n_s + n_p:n_c] += weights.proj / n_f * np.sign(r)
        out["proj"] = float(loss)

    if "eik" in terms:
        base = n_c if need_centers else 0
        vals = value[base:].reshape(-1, 3, 2)
        ghat = (vals[..., 0] - vals[..., 1]) / (2.0 * eps)
        norm = np.linalg.norm(ghat, axis=1)
        res = norm - 1.0
        near = eik_idx < n_s + n_p
        coef = np.zeros(eik_idx.size)
        loss = 0.0
        for mask, w in ((near, weights.eik_surface), (~near, weights.eik_free)):
            cnt = int(mask.sum())
            if cnt:
                loss += w * np.mean(np.abs(res[mask]))
                coef[mask] = w / cnt
        out["eik"] = float(loss)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(norm[:, None] > 0, ghat / norm[:, None], 0.0)
        dg = (coef * np.sign(res))[:, None] * unit / (2.0 * eps)  # d loss / d value(x + eps e_i)
        sten_up = np.stack([dg, -dg], axis=-1).reshape(-1)
        up[base:] += sten_up

    total = float(sum(out.values()))
    if with_grad:
        if grads is None:
            grads = new_grad_buffer(model)
        if np.any(up):
            model.backward(cache, up, grads)
    return LossResult(total, out, grads if with_grad else None, dropped + outside)


def loss_recon(model, batch, weights: LossWeights, grads=None) -> LossResult:
    return objective(model, batch, weights, 1.0, terms=("recon",), grads=grads)


def loss_eik(model, batch, weights: LossWeights, eps: float, grads=None) -> LossResult:
    return objective(model, batch, weights, eps, terms=("eik",), grads=grads)


def loss_proj(model, batch, weights: LossWeights, grads=None) -> LossResult:
    return objective(model, batch, weights, 1.0, terms=("proj",), grads=grads)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with separate step sizes for network and octree parameter groups.

    Moments are float64; octree moments grow (zero padded) as vertices are
    allocated so existing indices keep their history.
    """

    def __init__(self, config: TrainConfig, n_network: int):
        self.config = config
        self.n_network = n_network
        self.t = 0
        self.m: list = []
        self.v: list = []

    def _ensure(self, params):
        if not self.m:
            self.m = [np.zeros(p.shape) for p in params]
            self.v = [np.zeros(p.shape) for p in params]
            return
        for i, p in enumerate(params):
            if self.m[i].shape != p.shape:
                pad = p.shape[0] - self.m[i].shape[0]
                widths = [(0, pad)] + [(0, 0)] * (p.ndim - 1)
                self.m[i] = np.pad(self.m[i], widths)
                self.v[i] = np.pad(self.v[i], widths)

    def step(self, params, grads) -> None:
        cfg = self.config
        self._ensure(params)
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            lr = cfg.lr_network if i < self.n_network else cfg.lr_octree
            m, v = self.m[i], self.v[i]
            if not g.any() and not m.any():
                continue  # untouched group (ablated branch): update would be exactly zero
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
            p[...] = (p.astype(np.float64) - upd).astype(p.dtype)


# ---------------------------------------------------------------------------
# state and loop


@dataclass
class TrainState:
    config: RunConfig
    model: HybridSdf
    grads: GradBuffer
    optimizer: Adam
    keyframes: KeyframeStore = field(default_factory=KeyframeStore)
    step: int = 0
    frames_done: int = 0

    @classmethod
    def create(cls, config: RunConfig) -> "TrainState":
        model = HybridSdf.from_config(config)
        grads = new_grad_buffer(model)
        opt = Adam(config.train, len(model.net.param_arrays()))
        state = cls(config, model, grads, opt)
        if config.debug_inject_nan:
            model.net.mlp.biases[-1][:] = np.nan  # poisons every prediction
        return state

    def sync_octree(self) -> None:
        n = self.model.octree.num_vertices
        if self.grads.octree_d.shape[0] != n:
            self.grads.resize_octree(n)


class StepReport(NamedTuple):
    step: int
    losses: dict
    total: float
    grad_norms: dict
    dropped: int


def train_step(state: TrainState, batch: SampleBatch) -> StepReport:
    """Zero grads, accumulate all losses, one Adam update, clamp octree gradients."""
    cfg = state.config
    model = state.model
    state.sync_octree()
    state.grads.zero()
    res = objective(model, batch, cfg.weights, cfg.train.fd_eps, grads=state.grads)
    if not np.isfinite(res.total) or not all(np.isfinite(v) for v in res.terms.values()):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: {res.terms} "
            f"(octree d finite: {bool(np.all(np.isfinite(model.octree.d)))}, "
            f"vertices: {model.octree.num_vertices})")
    g = state.grads
    norms = {
        "network": float(np.sqrt(sum(np.sum(a * a) for a in (*g.tables, *g.weights, *g.biases)))),
        "octree": float(np.sqrt(np.sum(g.octree_d ** 2) + np.sum(g.octree_g ** 2))),
    }
    state.optimizer.step(model.param_arrays(), g.arrays())
    model.octree.clamp_gradients()
    state.step += 1
    return StepReport(state.step, res.terms, res.total, norms, res.dropped)


def batch_seed(seed: int, step: int):
    return [int(seed), int(step)]


@dataclass
class FrameRecord:
    frame_id: int
    octants_created: int
    vertices_created: int
    keyframes: int
    inserted: bool
    losses: dict
    wall_ms: float


def process_frame(state: TrainState, frame: Frame, frame_lookup: Callable | None = None,
                  on_batch: Callable | None = None) -> FrameRecord:
    cfg = state.config
    t0 = time.perf_counter()
    tree = state.model.octree
    frame = frame.clipped(tree.config.root)
    rep = tree.insert_points(frame.points, origin=frame.origin)
    state.sync_octree()
    inserted = maybe_insert_keyframe(state.keyframes, frame, tree, cfg.sampling.c_min)
    selected = select_keyframes(state.keyframes, cfg.sampling.window)
    train_frames = list(selected)
    if frame.id not in {f.id for f in train_frames}:
        train_frames.append(frame)
    losses: dict = {}
    for _ in range(cfg.train.iters_per_frame):
        batch = generate_batch(train_frames, cfg.sampling.rays, cfg.sampling,
                               batch_seed(cfg.train.seed, state.step))
        if on_batch is not None:
            on_batch(state.step, batch)
        report = train_step(state, batch)
        losses = report.losses
    state.frames_done += 1
    return FrameRecord(frame.id, rep.octants_created, rep.vertices_created, len(state.keyframes),
                       inserted, losses, (time.perf_counter() - t0) * 1e3)


def run_online(frames: Iterable[Frame], config: RunConfig | None = None,
               state: TrainState | None = None, on_frame: Callable | None = None,
               on_batch: Callable | None = None, stop_after: int | None = None):
    """Stream frames through insert -> keyframe -> select -> (batch, step) x iters.

    With an existing ``state`` the stream is resumed at ``state.frames_done``.
    Returns the state and one record per processed frame.
    """
    if state is None:
        state = TrainState.create(config)
    frames = list(frames)
    records = []
    for frame in frames[state.frames_done:]:
        if stop_after is not None and state.frames_done >= stop_after:
            break
        try:
            rec = process_frame(state, frame, on_batch=on_batch)
        except EmptyFrameError as exc:
            log.warning("skipping frame %d: %s", frame.id, exc)
            state.frames_done += 1
            continue
        records.append(rec)
        if on_frame is not None:
            on_frame(state, rec)
    return state, records
