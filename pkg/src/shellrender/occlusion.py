"""Position maps of the prior mesh and occlusion distances between views.

A sample point that two cameras "see" at the same surface position is visible
to both; a large gap between the observed positions signals that the input
view is looking at some other, occluding surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, generate_rays, sample_bilinear_np
from .geometry import TriangleMesh, ray_mesh_intersections_batch, _watertight_pairs


@dataclass
class PositionMap:
    """Per-pixel world position of the first mesh hit, with a hit flag."""

    positions: np.ndarray  # (H, W, 3)
    hit: np.ndarray        # (H, W)
    camera: Camera

    @property
    def resolution(self) -> tuple[int, int]:
        return self.hit.shape


def render_position_map(mesh: TriangleMesh, cam: Camera, stride: int = 2) -> PositionMap:
    """Ray-cast every sampled pixel; store first-hit world positions.

    Default stride 2 matches the feature-map resolution.
    """
    rays = generate_rays(cam, stride=stride)
    t_pad, _, counts = ray_mesh_intersections_batch(mesh, rays.origins, rays.directions)
    hit = counts > 0
    t = np.where(hit, t_pad[:, 0], 0.0)
    pos = rays.origins + t[:, None] * rays.directions
    pos[~hit] = 0.0
    map_cam = cam.scaled(1.0 / stride)
    return PositionMap(pos.reshape(rays.n_v, rays.n_u, 3), hit.reshape(rays.n_v, rays.n_u),
                       map_cam)


def _lookup_positions(pmap: PositionMap, cam: Camera, points: np.ndarray,
                      full_width: int):
    """Miss-aware bilinear lookup of a position map at projected points.

    Texels flagged as misses are dropped from the bilinear footprint and the
    remaining weights renormalized; an all-miss footprint (or a point behind
    the camera) reports invalid.
    """
    uv, _, in_front = cam.project_batch(points)
    scale = pmap.hit.shape[1] / float(full_width)
    uv = uv * scale
    h, w = pmap.hit.shape
    weighted = sample_bilinear_np(
        np.concatenate([pmap.positions * pmap.hit[:, :, None],
                        pmap.hit[:, :, None].astype(np.float64)], axis=2), uv)
    wsum = weighted[:, 3]
    ok = in_front & (wsum > 1e-6)
    pos = np.zeros((len(points), 3))
    pos[ok] = weighted[ok, :3] / wsum[ok, None]
    return pos, ok


def occlusion_distance(points: np.ndarray, target_map: PositionMap,
                       input_map: PositionMap, full_width: int, d_max: float):
    """Per-point observed positions and their distance (x', x_i, d_i).

    d_i is ``d_max`` wherever either lookup is invalid (behind a camera or an
    all-miss bilinear footprint).
    """
    x_target, ok_t = _lookup_positions(target_map, target_map.camera, points,
                                       full_width=target_map.hit.shape[1])
    x_input, ok_i = _lookup_positions(input_map, input_map.camera, points,
                                      full_width=input_map.hit.shape[1])
    d = np.full(len(points), d_max)
    ok = ok_t & ok_i
    d[ok] = np.linalg.norm(x_target[ok] - x_input[ok], axis=1)
    return x_target, x_input, np.minimum(d, d_max)


def occlusion_features(points: np.ndarray, target_map: PositionMap,
                       input_maps: list[PositionMap], d_max: float):
    """Stacked occlusion inputs for a sample batch.

    Returns (x_target (N, 3), x_views (N, V, 3), distances (N, V)).
    """
    n = len(points)
    n_views = len(input_maps)
    x_views = np.zeros((n, n_views, 3))
    dists = np.zeros((n, n_views))
    x_target = None
    for i, pmap in enumerate(input_maps):
        xt, xi, d = occlusion_distance(points, target_map, pmap,
                                       full_width=target_map.hit.shape[1], d_max=d_max)
        x_target = xt
        x_views[:, i] = xi
        dists[:, i] = d
    return x_target, x_views, dists


def _segment_blocked(mesh: TriangleMesh, starts: np.ndarray, ends: np.ndarray,
                     tol: float = 1e-4) -> np.ndarray:
    """True where the open segment (start, end) crosses the mesh.

    Hits within ``tol`` of either endpoint do not count, so a segment leaving
    a surface point toward a camera is not blocked by its own surface.
    """
    d = ends - starts
    dist = np.linalg.norm(d, axis=1)
    d = d / np.maximum(dist[:, None], 1e-12)
    t_pad, _, counts = ray_mesh_intersections_batch(mesh, starts, d)
    inside = (t_pad > tol) & (t_pad < (dist[:, None] - tol))
    return inside.any(axis=1)


def gt_occlusion_mask(scene_mesh: TriangleMesh, target_cam: Camera,
                      input_cams: list[Camera], stride: int = 1) -> np.ndarray:
    """Pixels whose first-hit point is blocked from every input camera.

    First hits come from the true scene mesh; a hit is blocked in a view when
    some nearer surface lies strictly between it and that camera (1e-4
    endpoint tolerance).  Background pixels are never occluded.
    """
    rays = generate_rays(target_cam, stride=stride)
    t_pad, _, counts = ray_mesh_intersections_batch(scene_mesh, rays.origins, rays.directions)
    hit = counts > 0
    t = np.where(hit, t_pad[:, 0], 0.0)
    points = rays.origins + t[:, None] * rays.directions
    occluded = hit.copy()
    idx = np.where(hit)[0]
    for cam in input_cams:
        if not idx.size:
            break
        starts = points[idx]
        ends = np.broadcast_to(cam.center, starts.shape)
        blocked = _segment_blocked(scene_mesh, starts, ends)
        occluded[idx[~blocked]] = False
        idx = idx[blocked]  # visible anywhere -> not occluded; stop tracking
    return occluded.reshape(rays.n_v, rays.n_u)


def brute_force_occlusion_mask(scene_mesh: TriangleMesh, target_cam: Camera,
                               input_cams: list[Camera], stride: int = 1,
                               tol: float = 1e-4) -> np.ndarray:
    """Per-pixel visibility oracle: exhaustive triangle tests, camera-side rays.

    Independent of the BVH and of the segment direction used by
    :func:`gt_occlusion_mask`: every input camera casts toward the surface
    point and the point counts visible when no triangle lies strictly before
    it.  Only used in tests.
    """
    rays = generate_rays(target_cam, stride=stride)
    v0, v1, v2 = scene_mesh.face_corners()
    n_faces = scene_mesh.n_faces

    def all_hits(o, d):
        oo = np.broadcast_to(o, v0.shape)
        dd = np.broadcast_to(d, v0.shape)
        t, keep = _watertight_pairs(oo, dd, v0, v1, v2)
        return np.sort(t[keep])

    out = np.zeros(len(rays), dtype=bool)
    for i in range(len(rays)):
        ts = all_hits(rays.origins[i], rays.directions[i])
        if len(ts) == 0:
            continue
        p = rays.origins[i] + ts[0] * rays.directions[i]
        visible = False
        for cam in input_cams:
            seg = p - cam.center
            dist = np.linalg.norm(seg)
            ts_cam = all_hits(cam.center, seg / dist)
            ahead = ts_cam[(ts_cam > tol) & (ts_cam < dist - tol)]
            if len(ahead) == 0:
                visible = True
                break
        out[i] = not visible
    return out.reshape(rays.n_v, rays.n_u)
