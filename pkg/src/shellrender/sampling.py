"""Two-stage ray sampling: uniform samples inside the boundary shells, then a
regressed center/radius window for the render-time samples.

Stage 1 walks the band between the dilated and eroded shells (skipping empty
space); the per-sample signed-ray-distance and confidence regressions turn
those samples into a tight per-ray window that stage 2 samples uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import RayBundle
from .geometry import BoundaryShells, first_last_hits


@dataclass
class ShellIntervals:
    """Per-ray stage-1 sampling interval derived from the boundary shells."""

    t_lo: np.ndarray   # (N,)
    t_hi: np.ndarray   # (N,)
    valid: np.ndarray  # (N,) False where the dilated shell is missed

    @property
    def span(self) -> np.ndarray:
        return np.where(self.valid, self.t_hi - self.t_lo, 0.0)


@dataclass
class RaySampleBatch:
    """Samples for the valid subset of a ray grid.

    t is strictly increasing per ray; positions are origin + t * direction.
    Network outputs (features, SRDF, confidence, kernel) are attached by the
    pipeline as flat (R*K,) tensors alongside.
    """

    ray_ids: np.ndarray    # (R,) indices into the originating RayBundle
    t: np.ndarray          # (R, K)
    positions: np.ndarray  # (R, K, 3)
    directions: np.ndarray  # (R, 3)

    @property
    def n_rays(self) -> int:
        return len(self.ray_ids)

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]

    def flat_positions(self) -> np.ndarray:
        return self.positions.reshape(-1, 3)

    def flat_directions(self) -> np.ndarray:
        return np.repeat(self.directions, self.n_samples, axis=0)


@dataclass
class SamplingGuide:
    """Per-ray second-stage window: center on the ray and a radius."""

    ray_ids: np.ndarray
    t_center: np.ndarray   # (R,)
    centers: np.ndarray    # (R, 3), origin + t_center * direction
    radius: np.ndarray     # (R,)
    valid: np.ndarray      # (R,)


def shell_intervals(shells: BoundaryShells, rays: RayBundle) -> ShellIntervals:
    """Stage-1 interval per ray.

    Both shells hit: [first dilated hit, first eroded hit].  Only the dilated
    shell hit (or no eroded shell exists): [first, last] dilated hits.  No
    dilated hit: the ray is background.
    """
    d_first, d_last, d_hit = first_last_hits(shells.dilated, rays.origins, rays.directions)
    if shells.eroded is not None:
        e_first, _, e_hit = first_last_hits(shells.eroded, rays.origins, rays.directions)
    else:
        e_first = np.full(len(rays), np.nan)
        e_hit = np.zeros(len(rays), dtype=bool)
    both = d_hit & e_hit & (e_first > d_first)
    t_lo = np.where(d_hit, d_first, 0.0)
    t_hi = np.where(both, e_first, np.where(d_hit, d_last, 0.0))
    return ShellIntervals(t_lo, t_hi, d_hit)


def aabb_intervals(lo: np.ndarray, hi: np.ndarray, rays: RayBundle) -> ShellIntervals:
    """Full scene-box intervals for the boundary-meshes-off ablation."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.directions
    t1 = (lo[None, :] - rays.origins) * inv
    t2 = (hi[None, :] - rays.origins) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin[~np.isfinite(tmin)] = -np.inf
    tmax[~np.isfinite(tmax)] = np.inf
    t_lo = np.maximum(tmin.max(axis=1), 1e-4)
    t_hi = tmax.min(axis=1)
    valid = t_hi > t_lo
    return ShellIntervals(np.where(valid, t_lo, 0.0), np.where(valid, t_hi, 0.0), valid)


def stage1_sample(intervals: ShellIntervals, rays: RayBundle, k: int) -> RaySampleBatch:
    """K inclusive-linspace samples per valid ray inside its interval."""
    if k < 2:
        raise ValueError("stage 1 needs at least 2 samples")
    ids = np.where(intervals.valid)[0]
    lo = intervals.t_lo[ids]
    hi = intervals.t_hi[ids]
    steps = np.linspace(0.0, 1.0, k)
    t = lo[:, None] + (hi - lo)[:, None] * steps[None, :]
    dirs = rays.directions[ids]
    positions = rays.origins[ids][:, None, :] + t[:, :, None] * dirs[:, None, :]
    return RaySampleBatch(ids, t, positions, dirs)


def regress_guidance(batch: RaySampleBatch, f: np.ndarray, c: np.ndarray,
                     origins: np.ndarray, r_min: float,
                     fallback_lo: np.ndarray | None = None,
                     fallback_hi: np.ndarray | None = None) -> SamplingGuide:
    """Confidence-weighted window from per-sample surface estimates.

    Each stage-1 sample k places the surface at its own parameter plus the
    regressed signed ray distance; the window center is the confidence
    weighted mean of those estimates and the radius their weighted standard
    deviation (computed on the scalar along-ray offsets, which equals the
    vector form on collinear points), clamped to r_min.  Rays whose total
    confidence underflows fall back to the stage-1 interval midpoint with
    half the interval as radius.
    """
    f = np.asarray(f, dtype=np.float64).reshape(batch.t.shape)
    c = np.asarray(c, dtype=np.float64).reshape(batch.t.shape)
    tau = batch.t + f  # per-sample estimated surface parameter
    csum = c.sum(axis=1)
    ok = csum >= 1e-8
    safe = np.where(ok, csum, 1.0)
    t_c = (c * tau).sum(axis=1) / safe
    var = (c * (tau - t_c[:, None]) ** 2).sum(axis=1) / safe
    radius = np.maximum(np.sqrt(var), r_min)
    if not ok.all():
        lo = batch.t[:, 0] if fallback_lo is None else fallback_lo
        hi = batch.t[:, -1] if fallback_hi is None else fallback_hi
        t_c = np.where(ok, t_c, (lo + hi) / 2.0)
        radius = np.where(ok, radius, np.maximum((hi - lo) / 2.0, r_min))
    centers = origins + t_c[:, None] * batch.directions
    return SamplingGuide(batch.ray_ids, t_c, centers, radius,
                         np.ones(len(t_c), dtype=bool))


def stage2_sample(guide: SamplingGuide, rays: RayBundle, l: int,
                  near: float = 1e-4,
                  jitter_rng: np.random.Generator | None = None) -> RaySampleBatch:
    """L inclusive-linspace samples in [t_c - r, t_c + r]; L = 1 hits t_c.

    Deterministic by default; ``jitter_rng`` enables train-time stratified
    jitter (each sample moves uniformly within half its stratum).  The window
    shifts forward if it would cross the near plane, preserving strictly
    increasing parameters.
    """
    if l < 1:
        raise ValueError("stage 2 needs at least 1 sample")
    if l == 1:
        t = guide.t_center[:, None].copy()
    else:
        steps = np.linspace(-1.0, 1.0, l)
        t = guide.t_center[:, None] + guide.radius[:, None] * steps[None, :]
    if jitter_rng is not None and l > 1:
        half_stratum = (guide.radius / (l - 1))[:, None]
        t = t + jitter_rng.uniform(-0.5, 0.5, size=t.shape) * half_stratum
    shift = np.maximum(near - t[:, 0], 0.0)
    t = t + shift[:, None]
    ids = guide.ray_ids
    dirs = rays.directions[ids]
    positions = rays.origins[ids][:, None, :] + t[:, :, None] * dirs[:, None, :]
    return RaySampleBatch(ids, t, positions, dirs)


@dataclass
class QueryCounter:
    """Exact network-query instrumentation per rendered ray."""

    n_rays: int
    stage1: np.ndarray = field(default=None)
    stage2: np.ndarray = field(default=None)
    stage1_span: np.ndarray = field(default=None)

    def __post_init__(self):
        self.stage1 = np.zeros(self.n_rays, dtype=np.int64)
        self.stage2 = np.zeros(self.n_rays, dtype=np.int64)
        self.stage1_span = np.zeros(self.n_rays)

    def record_stage1(self, batch: RaySampleBatch, intervals: ShellIntervals) -> None:
        self.stage1[batch.ray_ids] += batch.n_samples
        self.stage1_span[batch.ray_ids] = intervals.span[batch.ray_ids]

    def record_stage2(self, batch: RaySampleBatch) -> None:
        self.stage2[batch.ray_ids] += batch.n_samples

    def per_ray(self) -> np.ndarray:
        """Sample positions touched per ray: K + L for rendered rays, 0 else."""
        return self.stage1 + self.stage2

    def mean_span(self) -> float:
        touched = self.stage1 > 0
        return float(self.stage1_span[touched].mean()) if touched.any() else 0.0
