"""Keyframe bookkeeping and per-step training batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Frame

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingConfig:
    window: int = 8
    rays: int = 20480
    margin: float = 0.05  # delta
    sigma: float = 0.06
    n_free: int = 1
    n_perturbed: int = 2
    c_min: float = 0.85


@dataclass
class Keyframe:
    frame: Frame
    octants: frozenset


@dataclass
class KeyframeStore:
    keyframes: list = field(default_factory=list)

    @property
    def last(self):
        return self.keyframes[-1] if self.keyframes else None

    def ids(self):
        return [kf.frame.id for kf in self.keyframes]

    def __len__(self):
        return len(self.keyframes)


def observed_octants(frame: Frame, tree) -> frozenset:
    """Leaf octants containing the frame's points."""
    return frozenset(np.unique(tree.leaf_codes(frame.points)).tolist())


def overlap(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def maybe_insert_keyframe(store: KeyframeStore, frame: Frame, tree, c_min: float = 0.85) -> bool:
    """Append ``frame`` when its octant IoU with the last keyframe drops below ``c_min``."""
    octs = observed_octants(frame, tree)
    if not octs:
        return False
    if store.last is None or overlap(octs, store.last.octants) < c_min:
        store.keyframes.append(Keyframe(frame, octs))
        return True
    return False


def select_keyframes(store: KeyframeStore, window: int) -> list:
    """Greedy max-coverage choice of up to ``window`` keyframes.

    Picks the frame seeing the most unmasked octants (ties: most recent id),
    masks them, repeats. When every octant is masked the mask is reset to
    the last pick's octants only.
    """
    if not store.keyframes:
        return []
    everything = frozenset().union(*(kf.octants for kf in store.keyframes))
    remaining = list(store.keyframes)
    mask: set = set()
    chosen = []
    while remaining and len(chosen) < window:
        best = max(remaining, key=lambda kf: (len(kf.octants - mask), kf.frame.id))
        chosen.append(best)
        remaining = [kf for kf in remaining if kf is not best]
        mask |= best.octants
        if mask >= everything:
            mask = set(best.octants)
    return [kf.frame for kf in chosen]


@dataclass
class SampleBatch:
    surface: np.ndarray  # (S, 3)
    perturbed: np.ndarray  # (P, 3)
    perturbed_target: np.ndarray  # (P,) magnitude, >= 0
    perturbed_sign: np.ndarray  # (P,) +1 in front of the surface, -1 behind
    free: np.ndarray  # (F, 3)
    free_target: np.ndarray  # (F,)
    seed: int = 0
    # ray parameters, kept for range checks
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.surface) + len(self.perturbed) + len(self.free)


def generate_batch(frames, rays: int, config: SamplingConfig, seed) -> SampleBatch:
    """Surface, perturbed and free-space samples along ``rays`` rays split over ``frames``.

    Approximate targets are nearest-neighbour distances to this batch's
    surface samples.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    quota = rays // len(frames)
    origins, hits = [], []
    for fr in frames:
        q = quota
        if fr.points.shape[0] < q:
            log.info("frame %d: only %d points for a quota of %d rays", fr.id,
                     fr.points.shape[0], q)
            q = fr.points.shape[0]
        pick = rng.choice(fr.points.shape[0], size=q, replace=False)
        hits.append(fr.points[pick])
        origins.append(np.broadcast_to(fr.origin, (q, 3)))
    o = np.concatenate(origins)
    q = np.concatenate(hits)
    ray = q - o

    s = config.sigma
    alpha = np.clip(rng.normal(1.0, s, size=(q.shape[0], config.n_perturbed)), 1 - 2 * s, 1 + 2 * s)
    lam = rng.uniform(config.margin, 1.0 - config.margin, size=(q.shape[0], config.n_free))
    pert = (o[:, None, :] + alpha[..., None] * ray[:, None, :]).reshape(-1, 3)
    free = (o[:, None, :] + lam[..., None] * ray[:, None, :]).reshape(-1, 3)

    index = cKDTree(q)
    pert_d = index.query(pert)[0] if len(pert) else np.zeros(0)
    free_d = index.query(free)[0] if len(free) else np.zeros(0)
    sign = np.where(alpha.ravel() < 1.0, 1.0, -1.0)
    return SampleBatch(q, pert, pert_d, sign, free, free_d, seed=seed,
                       alpha=alpha.ravel(), lam=lam.ravel())
