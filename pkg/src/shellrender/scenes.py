"""Synthetic scenes with exact geometry oracles.

Primitives (spheres, capsules, unions) are the ground truth: images, depths
and ray hit lists come from analytic intersection, while triangle meshes are
tessellated approximations.  The proxy mesh is deliberately coarser than the
true mesh to reproduce a fitted-prior-vs-reality mismatch.

Scalar intersection routines are the reference; the ``*_batch`` paths are the
vectorized equivalents used for image-scale work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, RayBundle, generate_rays, look_at
from .geometry import TriangleMesh, compute_vertex_normals


class SceneError(ValueError):
    pass


class GeometryAccessError(RuntimeError):
    """Raised when ground-truth geometry is queried in a no-geometry run."""


# ---------------------------------------------------------------------------
# analytic primitives


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float] = (0.8, 0.5, 0.35)

    def interval(self, o: np.ndarray, d: np.ndarray):
        oc = np.asarray(o, dtype=np.float64) - np.asarray(self.center)
        b = float(np.dot(oc, d))
        c = float(np.dot(oc, oc)) - self.radius ** 2
        disc = b * b - c
        if disc <= 0:
            return None
        s = np.sqrt(disc)
        return (-b - s, -b + s)

    def interval_batch(self, o: np.ndarray, d: np.ndarray):
        oc = o - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        valid = disc > 0
        s = np.sqrt(np.where(valid, disc, 0.0))
        return -b - s, -b + s, valid

    def normal(self, p: np.ndarray) -> np.ndarray:
        n = p - np.asarray(self.center)
        return n / np.linalg.norm(n)

    def normal_batch(self, p: np.ndarray) -> np.ndarray:
        n = p - np.asarray(self.center)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def surface_distance_batch(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius)


@dataclass(frozen=True)
class Capsule:
    p0: tuple[float, float, float]
    p1: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float] = (0.8, 0.5, 0.35)

    def _frame(self):
        a0 = np.asarray(self.p0, dtype=np.float64)
        a1 = np.asarray(self.p1, dtype=np.float64)
        axis = a1 - a0
        length = float(np.linalg.norm(axis))
        ah = axis / length if length > 1e-12 else np.array([0.0, 0.0, 1.0])
        return a0, a1, ah, length

    def interval(self, o: np.ndarray, d: np.ndarray):
        t0, t1, valid = self.interval_batch(np.asarray(o, dtype=np.float64)[None],
                                            np.asarray(d, dtype=np.float64)[None])
        return (float(t0[0]), float(t1[0])) if valid[0] else None

    def interval_batch(self, o: np.ndarray, d: np.ndarray):
        a0, a1, ah, length = self._frame()
        n = len(o)
        cand = np.full((n, 6), np.nan)

        oc = o - a0
        d_ax = d @ ah
        o_ax = oc @ ah
        d_perp = d - d_ax[:, None] * ah
        o_perp = oc - o_ax[:, None] * ah
        qa = np.einsum("ij,ij->i", d_perp, d_perp)
        qb = 2.0 * np.einsum("ij,ij->i", o_perp, d_perp)
        qc = np.einsum("ij,ij->i", o_perp, o_perp) - self.radius ** 2
        cyl_ok = qa > 1e-14
        disc = qb * qb - 4 * qa * qc
        cyl_ok &= disc > 0
        s = np.sqrt(np.where(cyl_ok, disc, 0.0))
        qa_safe = np.where(cyl_ok, qa, 1.0)
        for k, tc in enumerate(((-qb - s) / (2 * qa_safe), (-qb + s) / (2 * qa_safe))):
            axial = o_ax + tc * d_ax
            ok = cyl_ok & (axial >= 0.0) & (axial <= length)
            cand[:, k] = np.where(ok, tc, np.nan)

        for ci, (cap, low_side) in enumerate(((a0, True), (a1, False))):
            occ = o - cap
            b = np.einsum("ij,ij->i", occ, d)
            c = np.einsum("ij,ij->i", occ, occ) - self.radius ** 2
            disc = b * b - c
            ok0 = disc > 0
            s = np.sqrt(np.where(ok0, disc, 0.0))
            for k, tc in enumerate((-b - s, -b + s)):
                axial = o_ax + tc * d_ax
                side = axial <= 0.0 if low_side else axial >= length
                ok = ok0 & side
                cand[:, 2 + 2 * ci + k] = np.where(ok, tc, np.nan)

        missing = np.isnan(cand)
        valid = ~np.all(missing, axis=1)
        t0 = np.where(missing, np.inf, cand).min(axis=1)
        t1 = np.where(missing, -np.inf, cand).max(axis=1)
        return np.where(valid, t0, 0.0), np.where(valid, t1, 0.0), valid

    def normal(self, p: np.ndarray) -> np.ndarray:
        return self.normal_batch(np.asarray(p, dtype=np.float64)[None])[0]

    def normal_batch(self, p: np.ndarray) -> np.ndarray:
        a0, _, ah, length = self._frame()
        s = np.clip((p - a0) @ ah, 0.0, length)
        closest = a0 + s[:, None] * ah
        n = p - closest
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def surface_distance_batch(self, p: np.ndarray) -> np.ndarray:
        a0, _, ah, length = self._frame()
        s = np.clip((p - a0) @ ah, 0.0, length)
        closest = a0 + s[:, None] * ah
        return np.abs(np.linalg.norm(p - closest, axis=1) - self.radius)


Primitive = Sphere | Capsule


# ---------------------------------------------------------------------------
# union intersection


def union_boundaries(prims, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Entry/exit parameters of the union solid along a line, sorted (scalar)."""
    intervals = []
    for prim in prims:
        iv = prim.interval(o, d)
        if iv is not None and iv[1] > iv[0]:
            intervals.append(iv)
    if not intervals:
        return np.zeros(0)
    intervals.sort()
    merged = [list(intervals[0])]
    for lo, hi in intervals[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return np.array([t for iv in merged for t in iv])


def union_boundaries_batch(prims, o: np.ndarray, d: np.ndarray, t_min: float = 1e-6):
    """Boundary parameters > t_min per ray: (padded (N, 2P) inf-padded ascending, counts)."""
    n = len(o)
    n_prims = len(prims)
    t0 = np.full((n, n_prims), np.inf)
    t1 = np.full((n, n_prims), np.inf)
    for j, prim in enumerate(prims):
        a, b, v = prim.interval_batch(o, d)
        t0[:, j] = np.where(v, a, np.inf)
        t1[:, j] = np.where(v, b, np.inf)
    order = np.argsort(t0, axis=1)
    t0 = np.take_along_axis(t0, order, 1)
    t1 = np.take_along_axis(t1, order, 1)

    out = np.full((n, 2 * n_prims), np.inf)
    counts = np.zeros(n, dtype=np.int64)
    cur_lo = np.full(n, np.inf)
    cur_hi = np.full(n, np.inf)
    has_cur = np.zeros(n, dtype=bool)
    for j in range(n_prims):
        lo, hi = t0[:, j], t1[:, j]
        vj = np.isfinite(lo)
        extend = has_cur & vj & (lo <= cur_hi)
        cur_hi = np.where(extend, np.maximum(cur_hi, hi), cur_hi)
        emit = has_cur & vj & ~extend
        idx = np.where(emit)[0]
        out[idx, counts[idx]] = cur_lo[idx]
        out[idx, counts[idx] + 1] = cur_hi[idx]
        counts[idx] += 2
        fresh = vj & ~extend
        cur_lo = np.where(fresh, lo, cur_lo)
        cur_hi = np.where(fresh, hi, cur_hi)
        has_cur |= vj
    idx = np.where(has_cur)[0]
    out[idx, counts[idx]] = cur_lo[idx]
    out[idx, counts[idx] + 1] = cur_hi[idx]

    out[out <= t_min] = np.inf
    out = np.sort(out, axis=1)
    return out, np.isfinite(out).sum(axis=1)


def first_hit(prims, o: np.ndarray, d: np.ndarray, t_min: float = 1e-6):
    """(t, owning primitive index) of the nearest union boundary, or None."""
    bounds = union_boundaries(prims, o, d)
    bounds = bounds[bounds > t_min]
    if len(bounds) == 0:
        return None
    t = float(bounds[0])
    p = np.asarray(o, dtype=np.float64) + t * np.asarray(d, dtype=np.float64)
    dists = [prim.surface_distance_batch(p[None])[0] for prim in prims]
    return t, int(np.argmin(dists))


def first_hit_batch(prims, o: np.ndarray, d: np.ndarray):
    """(t (N,), hit (N,), owner (N,)) of the nearest union boundary per ray."""
    padded, counts = union_boundaries_batch(prims, o, d)
    t = padded[:, 0]
    hit = counts > 0
    t = np.where(hit, t, 0.0)
    p = o + t[:, None] * d
    dists = np.stack([prim.surface_distance_batch(p) for prim in prims], axis=1)
    owner = np.argmin(dists, axis=1)
    return t, hit, owner


def scene_normals(prims, p: np.ndarray, owner: np.ndarray) -> np.ndarray:
    normals = np.zeros_like(p)
    for j, prim in enumerate(prims):
        sel = owner == j
        if sel.any():
            normals[sel] = prim.normal_batch(p[sel])
    return normals


# ---------------------------------------------------------------------------
# tessellation


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip winding if the signed volume says the faces point inward."""
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    volume = np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0
    return faces[:, [0, 2, 1]] if volume < 0 else faces


def icosphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), subdiv: int = 2) -> TriangleMesh:
    """Subdivided icosahedron projected to the sphere; watertight."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    vlist = [v for v in verts]
    for _ in range(subdiv):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = vlist[i] + vlist[j]
                m /= np.linalg.norm(m)
                cache[key] = len(vlist)
                vlist.append(m)
            return cache[key]

        new_faces = []
        for i, j, k in faces:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [[i, ij, ki], [j, jk, ij], [k, ki, jk], [ij, jk, ki]]
        faces = np.array(new_faces, dtype=np.int64)
    unit = np.array(vlist)
    verts = unit * radius + np.asarray(center, dtype=np.float64)
    # Normals are analytically radial; the tessellation approximates the sphere.
    return TriangleMesh(verts, faces, unit.copy())


def capsule_mesh(p0, p1, radius: float, subdiv: int = 2) -> TriangleMesh:
    """Capsule as two UV hemispheres joined by a straight wall; watertight."""
    a0 = np.asarray(p0, dtype=np.float64)
    a1 = np.asarray(p1, dtype=np.float64)
    axis = a1 - a0
    length = np.linalg.norm(axis)
    if length < 1e-12:
        return icosphere(radius, p0, subdiv + 1)
    ah = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(ah[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ah, ref)
    u /= np.linalg.norm(u)
    w = np.cross(ah, u)
    n_seg = 8 * (2 ** subdiv)
    n_ring = 2 * (2 ** subdiv)

    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    circle = np.outer(np.cos(ang), u) + np.outer(np.sin(ang), w)  # (S, 3)

    verts = [a0 - radius * ah]  # bottom pole
    rings: list[int] = []
    # Bottom hemisphere: pole toward the equator ring centered at a0.
    for r in range(1, n_ring + 1):
        theta = (np.pi / 2) * r / n_ring
        rings.append(len(verts))
        for s in range(n_seg):
            verts.append(a0 - radius * np.cos(theta) * ah + radius * np.sin(theta) * circle[s])
    # Wall rings keep the vertex density of the caps along the cylinder part.
    ring_step = (np.pi / 2) * radius / n_ring
    n_wall = max(int(np.ceil(length / ring_step)) - 1, 0)
    for w_i in range(1, n_wall + 1):
        frac = w_i / (n_wall + 1)
        center = a0 + frac * length * ah
        rings.append(len(verts))
        for s in range(n_seg):
            verts.append(center + radius * circle[s])
    # Top hemisphere: equator ring centered at a1 toward the pole.
    for r in range(n_ring, 0, -1):
        theta = (np.pi / 2) * r / n_ring
        rings.append(len(verts))
        for s in range(n_seg):
            verts.append(a1 + radius * np.cos(theta) * ah + radius * np.sin(theta) * circle[s])
    verts.append(a1 + radius * ah)  # top pole
    verts = np.array(verts)

    faces = []
    first = rings[0]
    for s in range(n_seg):
        faces.append([0, first + s, first + (s + 1) % n_seg])
    last = rings[-1]
    top = len(verts) - 1
    for s in range(n_seg):
        faces.append([top, last + (s + 1) % n_seg, last + s])
    # Ring strips; the equator-to-equator pair forms the cylinder wall.
    for r0, r1 in zip(rings[:-1], rings[1:]):
        for s in range(n_seg):
            s1 = (s + 1) % n_seg
            faces.append([r0 + s, r1 + s, r1 + s1])
            faces.append([r0 + s, r1 + s1, r0 + s1])
    faces = _orient_outward(verts, np.array(faces, dtype=np.int64))
    normals = Capsule(tuple(a0), tuple(a1), radius).normal_batch(verts)
    return TriangleMesh(verts, faces, normals)


def primitive_mesh(prim: Primitive, subdiv: int) -> TriangleMesh:
    if isinstance(prim, Sphere):
        return icosphere(prim.radius, prim.center, subdiv + 1)
    return capsule_mesh(prim.p0, prim.p1, prim.radius, subdiv)


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    verts = []
    faces = []
    normals = []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        normals.append(m.normals)
        offset += m.n_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(normals))


# ---------------------------------------------------------------------------
# analytic shading


def shade_batch(prims, spec: "SceneSpec", p: np.ndarray, owner: np.ndarray) -> np.ndarray:
    normals = scene_normals(prims, p, owner)
    base = np.asarray([prim.color for prim in prims], dtype=np.float64)[owner]
    if spec.albedo == "checker":
        cells = np.floor(p / spec.checker_cell).sum(axis=1).astype(np.int64)
        dark = (cells % 2).astype(bool)
        base = np.where(dark[:, None], base * 0.35, base)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.maximum(normals @ light, 0.0)
    shading = spec.ambient + (1.0 - spec.ambient) * lam
    return np.clip(base * shading[:, None], 0.0, 1.0)


def trace_image(prims, spec: "SceneSpec", rays: RayBundle):
    """Analytic Lambertian render: (rgb (N, 3), depth t (N,), hit mask (N,))."""
    t, hit, owner = first_hit_batch(prims, rays.origins, rays.directions)
    rgb = np.tile(np.asarray(spec.background, dtype=np.float64), (len(rays), 1))
    if hit.any():
        p = rays.origins[hit] + t[hit, None] * rays.directions[hit]
        rgb[hit] = shade_batch(prims, spec, p, owner[hit])
    depth = np.where(hit, t, 0.0)
    return rgb, depth, hit


def srdf_from_padded(padded: np.ndarray, counts: np.ndarray, t_query: np.ndarray) -> np.ndarray:
    """Vectorized nearest-hit signed distance; ties go to the smaller hit.

    padded: (R, M) ascending inf-padded hits; t_query: (R, L).  Rows with no
    hits return 0; callers mask them out.
    """
    dist = np.abs(t_query[:, :, None] - padded[:, None, :])  # (R, L, M)
    nearest = np.argmin(dist, axis=2)  # first minimum = smaller hit on ties
    closest = np.take_along_axis(padded, nearest.reshape(len(padded), -1), axis=1)
    closest = closest.reshape(t_query.shape)
    out = closest - t_query
    out[counts == 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# scene assembly


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    n_input_views: int = 4
    n_target_views: int = 2
    image_size: int = 128
    proxy_subdiv: int = 1
    true_subdiv: int = 3
    albedo: str = "checker"
    checker_cell: float = 0.22
    light_dir: tuple[float, float, float] = (0.4, 0.25, 0.88)
    ambient: float = 0.35
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    fit_margin: float = 1.25
    ring_height: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_input_views < 1:
            raise SceneError("need at least one input view")
        if not self.primitives:
            raise SceneError("scene needs at least one primitive")
        for p in self.primitives:
            if p.radius <= 0:
                raise SceneError("primitive radius must be positive")


def capsule_person() -> tuple:
    """Three-capsule stand-in for a human: torso plus two legs."""
    return (
        Capsule((0.0, 0.0, 0.05), (0.0, 0.0, 0.78), 0.24, color=(0.75, 0.42, 0.30)),
        Capsule((-0.16, 0.0, -0.80), (-0.13, 0.0, 0.05), 0.11, color=(0.30, 0.42, 0.75)),
        Capsule((0.16, 0.0, -0.80), (0.13, 0.0, 0.05), 0.11, color=(0.32, 0.68, 0.38)),
    )


def two_sphere_occluder() -> tuple:
    """Small sphere hidden behind a large one for occlusion studies."""
    return (
        Sphere((0.0, 0.0, 0.0), 0.55, color=(0.75, 0.45, 0.3)),
        Sphere((0.95, 0.0, 0.0), 0.3, color=(0.3, 0.5, 0.8)),
    )


def _rig_cameras(spec: SceneSpec, aabb_lo: np.ndarray, aabb_hi: np.ndarray):
    center = (aabb_lo + aabb_hi) / 2.0
    half_height = float(aabb_hi[2] - aabb_lo[2]) / 2.0
    half_width = float(np.max(aabb_hi[:2] - aabb_lo[:2])) / 2.0
    size = spec.image_size
    fx = fy = float(size)  # ~53 degree vertical fov
    extent = max(half_height, half_width)
    distance = spec.fit_margin * extent * fx / (size / 2.0) + half_width
    z = center[2] if spec.ring_height is None else spec.ring_height

    def cam_at(angle_deg: float) -> Camera:
        a = np.deg2rad(angle_deg)
        eye = center + np.array([distance * np.cos(a), distance * np.sin(a), 0.0])
        eye[2] = z
        r, t = look_at(eye, center)
        return Camera(fx, fy, size / 2.0, size / 2.0, r, t, size, size)

    interval = 360.0 / spec.n_input_views
    inputs = [cam_at(k * interval) for k in range(spec.n_input_views)]
    # Targets spread over the whole ring, offset by half a step so none
    # coincides with an input; with matching counts they sit at the
    # half-interval gap views.
    target_interval = 360.0 / spec.n_target_views
    targets = [cam_at((k + 0.5) * target_interval) for k in range(spec.n_target_views)]
    return inputs, targets


class SceneData:
    """Generated scene bundle with capability-gated geometry oracles."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        prims = spec.primitives
        self.primitives = prims
        true_parts = [primitive_mesh(p, spec.true_subdiv) for p in prims]
        proxy_parts = [primitive_mesh(p, spec.proxy_subdiv) for p in prims]
        self.true_mesh = merge_meshes(true_parts) if len(true_parts) > 1 else true_parts[0]
        self.proxy_mesh = merge_meshes(proxy_parts) if len(proxy_parts) > 1 else proxy_parts[0]
        lo, hi = self.true_mesh.aabb()
        self.scene_scale = float(np.linalg.norm(hi - lo))
        self.input_cameras, self.target_cameras = _rig_cameras(spec, lo, hi)

        # Observed input images (always available).
        self.images = []
        for cam in self.input_cameras:
            rgb, _, _ = trace_image(prims, spec, generate_rays(cam, stride=1))
            self.images.append(rgb.reshape(cam.height, cam.width, 3))

        # Ground-truth supervision per target camera.
        self._gt_rgb = []
        self._fg_mask = []
        self._gt_depth_low = []
        self._gt_hit_mask_low = []
        self._gt_hits_padded = []
        self._gt_hit_counts = []
        for cam in self.target_cameras:
            rays_full = generate_rays(cam, stride=1)
            rgb, _, hit = trace_image(prims, spec, rays_full)
            self._gt_rgb.append(rgb.reshape(cam.height, cam.width, 3))
            self._fg_mask.append(_dilate_mask(hit.reshape(cam.height, cam.width), 2))
            rays_low = generate_rays(cam, stride=2)
            _, depth, hit_low = trace_image(prims, spec, rays_low)
            self._gt_depth_low.append(depth.reshape(rays_low.n_v, rays_low.n_u))
            self._gt_hit_mask_low.append(hit_low.reshape(rays_low.n_v, rays_low.n_u))
            padded, counts = union_boundaries_batch(prims, rays_low.origins, rays_low.directions)
            self._gt_hits_padded.append(padded)
            self._gt_hit_counts.append(counts)

        self.geometry_allowed = True
        self.geometry_queries = 0

    # -- gated ground-truth geometry access ---------------------------------

    def _check_geometry(self):
        if not self.geometry_allowed:
            raise GeometryAccessError(
                "ground-truth geometry access is disabled for this run")
        self.geometry_queries += 1

    def gt_image(self, target_idx: int) -> np.ndarray:
        return self._gt_rgb[target_idx]

    def fg_mask(self, target_idx: int) -> np.ndarray:
        return self._fg_mask[target_idx]

    def gt_depth_low(self, target_idx: int) -> np.ndarray:
        self._check_geometry()
        return self._gt_depth_low[target_idx]

    def gt_hit_mask_low(self, target_idx: int) -> np.ndarray:
        self._check_geometry()
        return self._gt_hit_mask_low[target_idx]

    def gt_srdf(self, target_idx: int, ray_ids: np.ndarray, t_query: np.ndarray) -> np.ndarray:
        """Oracle SRDF at (ray, t) sample grids of a target's stride-2 rays."""
        self._check_geometry()
        padded = self._gt_hits_padded[target_idx][ray_ids]
        counts = self._gt_hit_counts[target_idx][ray_ids]
        return srdf_from_padded(padded, counts, t_query)

    def gt_hit_counts(self, target_idx: int, ray_ids: np.ndarray) -> np.ndarray:
        self._check_geometry()
        return self._gt_hit_counts[target_idx][ray_ids]

    def without_geometry(self) -> "SceneData":
        self.geometry_allowed = False
        return self


def _dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def generate_scene(spec: SceneSpec) -> SceneData:
    """Build meshes, cameras, analytic ground truth, and hit lists."""
    return SceneData(spec)
