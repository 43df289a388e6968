"""Pinhole cameras: projection, ray generation, and camera-set JSON IO.

Convention: camera x points right, y down, z forward; integer pixel (u, v)
addresses the texel centered at (u + 0.5, v + 0.5) in continuous coordinates.
Cameras are immutable; projection and ray generation are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


class BehindCameraError(CameraError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8):
            raise CameraError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise CameraError("rotation must have det +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def project(self, point) -> tuple[np.ndarray, float]:
        """Project a single world point to (continuous uv, camera depth)."""
        pc = self.world_to_camera(point)[0]
        if pc[2] <= 1e-6:
            raise BehindCameraError(f"point at depth {pc[2]:.3g} is behind the camera")
        uv = np.array([self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy])
        return uv, float(pc[2])

    def project_batch(self, points: np.ndarray):
        """Vectorized projection: (uv (N, 2), depth (N,), in_front (N,) mask).

        Points behind the camera get uv (cx, cy) and keep in_front False so
        callers can substitute zero features instead of raising.
        """
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        in_front = z > 1e-6
        zs = np.where(in_front, z, 1.0)
        uv = np.empty((len(pc), 2))
        uv[:, 0] = np.where(in_front, self.fx * pc[:, 0] / zs + self.cx, self.cx)
        uv[:, 1] = np.where(in_front, self.fy * pc[:, 1] / zs + self.cy, self.cy)
        return uv, z, in_front

    def scaled(self, factor: float) -> "Camera":
        """Same view at a rescaled resolution (for half-resolution maps)."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      self.rotation, self.translation,
                      int(round(self.width * factor)), int(round(self.height * factor)))


@dataclass
class RayBundle:
    """World-space rays through sampled pixel centers of a camera grid."""

    origins: np.ndarray      # (N, 3)
    directions: np.ndarray   # (N, 3) unit
    pixels: np.ndarray       # (N, 2) continuous full-resolution coords
    n_u: int
    n_v: int

    def __len__(self):
        return len(self.directions)


def generate_rays(cam: Camera, stride: int = 1) -> RayBundle:
    """One ray per sampled pixel center ((u + 0.5) * stride convention).

    ``stride`` 2 yields the half-resolution ray grid used for low-res buffer
    rendering; a trailing partial row/column is dropped.
    """
    n_u = cam.width // stride
    n_v = cam.height // stride
    us = (np.arange(n_u) + 0.5) * stride
    vs = (np.arange(n_v) + 0.5) * stride
    uu, vv = np.meshgrid(us, vs)
    px = np.stack([uu.ravel(), vv.ravel()], axis=1)
    d_cam = np.stack([
        (px[:, 0] - cam.cx) / cam.fx,
        (px[:, 1] - cam.cy) / cam.fy,
        np.ones(len(px)),
    ], axis=1)
    d_world = d_cam @ cam.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return RayBundle(origins, d_world, px, n_u, n_v)


def sample_bilinear_np(grid: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Plain-numpy bilinear map sampling with border clamping.

    Same texel-center/clamp convention as the differentiable op; used for
    non-trainable lookups such as position maps.
    """
    h, w = grid.shape[0], grid.shape[1]
    u = np.clip(np.asarray(uv, dtype=np.float64)[:, 0], 0.5, w - 0.5) - 0.5
    v = np.clip(np.asarray(uv, dtype=np.float64)[:, 1], 0.5, h - 0.5) - 0.5
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    g = grid.reshape(h * w, -1)
    out = (g[v0 * w + u0] * (1 - fu) * (1 - fv) + g[v0 * w + u1] * fu * (1 - fv)
           + g[v1 * w + u0] * (1 - fu) * fv + g[v1 * w + u1] * fu * fv)
    return out.reshape(uv.shape[:-1] + (grid.shape[-1],)) if grid.ndim == 3 else out[:, 0]


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation/translation for a camera at eye facing target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:  # forward parallel to up; pick another up
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        nrm = np.linalg.norm(right)
    right /= nrm
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    return r, -r @ eye


def save_cameras(path, cams: list[Camera]) -> None:
    records = [
        {
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "R": [float(x) for x in c.rotation.reshape(-1)],
            "t": [float(x) for x in c.translation],
        }
        for c in cams
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1, sort_keys=True)


def load_cameras(path) -> list[Camera]:
    with open(path, "r", encoding="utf-8") as fh:
        records = json.load(fh)
    return [
        Camera(r["fx"], r["fy"], r["cx"], r["cy"],
               np.array(r["R"]).reshape(3, 3), np.array(r["t"]),
               r["width"], r["height"])
        for r in records
    ]
