"""Triangle meshes, boundary shells, BVH ray casting, and signed ray distances.

All geometry runs in double precision; ray parameters are reported as float64.
Meshes and BVHs are immutable once built, so intersection queries are safe to
issue concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_T_MIN = 1e-6
_BARY_EPS = 1e-9
_DEDUP_DT = 1e-7
_LEAF_SIZE = 4
_SAH_BINS = 16


class GeometryError(ValueError):
    pass


@dataclass
class TriangleMesh:
    """Vertices (N, 3), faces (M, 3) int, optional unit per-vertex normals."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    _bvh: "BVH | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise GeometryError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_corners(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        a, b, c = self.face_corners()
        n = np.cross(b - a, c - a)
        if normalized:
            length = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
        return n

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bvh(self) -> "BVH":
        if self._bvh is None:
            self._bvh = BVH(self)
        return self._bvh


@dataclass
class BoundaryShells:
    """Dilated (outer) and optional eroded (inner) copies of a source mesh."""

    dilated: TriangleMesh
    eroded: TriangleMesh | None
    offset_out: float
    offset_in: float


@dataclass
class HitList:
    """Sorted ray parameters of mesh intersections along one ray."""

    ray_id: int
    t: np.ndarray          # strictly increasing, all > 0
    face_ids: np.ndarray

    def __len__(self):
        return len(self.t)


def compute_vertex_normals(mesh: TriangleMesh) -> TriangleMesh:
    """Area-weighted average of incident face normals, unit length.

    Degenerate (zero-area) faces contribute nothing; a mesh whose faces are
    all degenerate raises.
    """
    if mesh.n_faces < 1:
        raise GeometryError("mesh has no faces")
    a, b, c = mesh.face_corners()
    fn = np.cross(b - a, c - a)  # magnitude = 2 * area, the area weighting
    if not np.any(np.linalg.norm(fn, axis=1) > 0):
        raise GeometryError("all faces are degenerate")
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    normals = np.divide(acc, length, out=np.zeros_like(acc), where=length > 1e-20)
    return TriangleMesh(mesh.vertices.copy(), mesh.faces.copy(), normals)


def offset_mesh(mesh: TriangleMesh, signed_distance: float) -> TriangleMesh:
    """Move every vertex along its normal; topology and normals carry over."""
    if mesh.normals is None:
        raise GeometryError("offset_mesh requires populated normals")
    moved = mesh.vertices + signed_distance * mesh.normals
    return TriangleMesh(moved, mesh.faces.copy(), mesh.normals.copy())


def erode_with_guard(mesh: TriangleMesh, distance: float,
                     max_flipped_frac: float = 0.01) -> TriangleMesh | None:
    """Erode inward by ``distance``; drop the result if the geometry inverts.

    A face counts as flipped when its post-erosion normal points against its
    pre-erosion normal.  More than ``max_flipped_frac`` flipped faces returns
    None, in which case callers fall back to the dilated shell alone.
    """
    if distance <= 0:
        raise GeometryError("erosion distance must be positive")
    eroded = offset_mesh(mesh, -distance)
    before = mesh.face_normals(normalized=False)
    after = eroded.face_normals(normalized=False)
    flipped = np.einsum("ij,ij->i", before, after) < 0
    if flipped.mean() >= max_flipped_frac:
        return None
    return eroded


def make_shells(mesh: TriangleMesh, offset_out: float, offset_in: float) -> BoundaryShells:
    if mesh.normals is None:
        mesh = compute_vertex_normals(mesh)
    dilated = offset_mesh(mesh, offset_out)
    eroded = erode_with_guard(mesh, offset_in)
    return BoundaryShells(dilated=dilated, eroded=eroded,
                          offset_out=offset_out, offset_in=offset_in)


# ---------------------------------------------------------------------------
# BVH

class BVH:
    """Binned-SAH BVH over mesh triangles, leaf size <= 4; built once per mesh."""

    def __init__(self, mesh: TriangleMesh):
        a, b, c = mesh.face_corners()
        self._v0, self._v1, self._v2 = a, b, c
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        centroids = (lo + hi) * 0.5
        order = np.arange(mesh.n_faces)

        bounds_min: list[np.ndarray] = []
        bounds_max: list[np.ndarray] = []
        lefts: list[int] = []
        rights: list[int] = []
        starts: list[int] = []
        counts: list[int] = []
        perm: list[np.ndarray] = []
        n_done = [0]

        def build(idx: np.ndarray) -> int:
            node = len(bounds_min)
            bounds_min.append(lo[idx].min(axis=0))
            bounds_max.append(hi[idx].max(axis=0))
            lefts.append(-1)
            rights.append(-1)
            starts.append(-1)
            counts.append(0)
            split = _sah_split(lo[idx], hi[idx], centroids[idx]) if len(idx) > _LEAF_SIZE else None
            if split is None:
                starts[node] = n_done[0]
                counts[node] = len(idx)
                perm.append(idx)
                n_done[0] += len(idx)
                return node
            left_mask = split
            lefts[node] = build(idx[left_mask])
            rights[node] = build(idx[~left_mask])
            return node

        import sys
        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 10000))
        try:
            build(order)
        finally:
            sys.setrecursionlimit(limit)

        self.bounds_min = np.array(bounds_min)
        self.bounds_max = np.array(bounds_max)
        self.left = np.array(lefts, dtype=np.int64)
        self.right = np.array(rights, dtype=np.int64)
        self.start = np.array(starts, dtype=np.int64)
        self.count = np.array(counts, dtype=np.int64)
        self.tri_order = np.concatenate(perm) if perm else np.zeros(0, dtype=np.int64)

    def candidate_triangles(self, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Triangle ids whose node AABBs the ray passes through."""
        o3 = (float(origin[0]), float(origin[1]), float(origin[2]))
        d3 = (float(direction[0]), float(direction[1]), float(direction[2]))
        inv = tuple(1.0 / d if d != 0.0 else None for d in d3)
        bmin, bmax = self.bounds_min, self.bounds_max
        left, right, start, count = self.left, self.right, self.start, self.count
        out: list[np.ndarray] = []
        stack = [0]
        while stack:
            node = stack.pop()
            nmin = bmin[node]
            nmax = bmax[node]
            tmin, tmax = 0.0, np.inf
            hit = True
            for k in range(3):
                ik = inv[k]
                if ik is None:
                    if not (nmin[k] <= o3[k] <= nmax[k]):
                        hit = False
                        break
                    continue
                t1 = (nmin[k] - o3[k]) * ik
                t2 = (nmax[k] - o3[k]) * ik
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
            if not hit or tmax < tmin:
                continue
            c = count[node]
            if c > 0:
                s = start[node]
                out.append(self.tri_order[s:s + c])
            else:
                stack.append(left[node])
                stack.append(right[node])
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(out)


def _sah_split(lo: np.ndarray, hi: np.ndarray, centroids: np.ndarray):
    """Binned SAH over the widest centroid axis; None when splitting won't help."""
    cmin = centroids.min(axis=0)
    cmax = centroids.max(axis=0)
    axis = int(np.argmax(cmax - cmin))
    extent = cmax[axis] - cmin[axis]
    if extent <= 0:
        # All centroids coincide; split in half to bound the leaf size.
        half = len(centroids) // 2
        mask = np.zeros(len(centroids), dtype=bool)
        mask[np.argsort(centroids[:, axis], kind="stable")[:half]] = True
        return mask
    bins = np.minimum((_SAH_BINS * (centroids[:, axis] - cmin[axis]) / extent).astype(np.int64),
                      _SAH_BINS - 1)
    counts = np.bincount(bins, minlength=_SAH_BINS)
    bin_lo = np.full((_SAH_BINS, 3), np.inf)
    bin_hi = np.full((_SAH_BINS, 3), -np.inf)
    for b in range(_SAH_BINS):
        sel = bins == b
        if counts[b]:
            bin_lo[b] = lo[sel].min(axis=0)
            bin_hi[b] = hi[sel].max(axis=0)

    def growing_area(lo_b, hi_b):
        glo = np.minimum.accumulate(lo_b, axis=0)
        ghi = np.maximum.accumulate(hi_b, axis=0)
        ext = np.maximum(ghi - glo, 0)
        return 2 * (ext[:, 0] * ext[:, 1] + ext[:, 1] * ext[:, 2] + ext[:, 0] * ext[:, 2])

    area_l = growing_area(bin_lo, bin_hi)
    area_r = growing_area(bin_lo[::-1], bin_hi[::-1])[::-1]
    n_l = np.cumsum(counts)
    n_r = len(centroids) - n_l
    cost = area_l[:-1] * n_l[:-1] + area_r[1:] * n_r[:-1]
    valid = (n_l[:-1] > 0) & (n_r[:-1] > 0)
    if not valid.any():
        return None
    cost[~valid] = np.inf
    cut = int(np.argmin(cost))
    return bins <= cut


def _watertight_pairs(o, d, v0, v1, v2):
    """Watertight ray/triangle test over (ray, triangle) pairs.

    o, d, v0, v1, v2: (P, 3).  Returns (t, keep_mask).  Shared-edge grazes
    produce duplicate hits at the same t; callers dedup by |dt| < 1e-7.
    """
    idx = np.arange(len(d))
    kz = np.argmax(np.abs(d), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    neg = d[idx, kz] < 0.0
    kx, ky = np.where(neg, ky, kx), np.where(neg, kx, ky)
    dz = d[idx, kz]
    sx = d[idx, kx] / dz
    sy = d[idx, ky] / dz
    sz = 1.0 / dz

    a = v0 - o
    b = v1 - o
    c = v2 - o
    ax = a[idx, kx] - sx * a[idx, kz]
    ay = a[idx, ky] - sy * a[idx, kz]
    bx = b[idx, kx] - sx * b[idx, kz]
    by = b[idx, ky] - sy * b[idx, kz]
    cx = c[idx, kx] - sx * c[idx, kz]
    cy = c[idx, ky] - sy * c[idx, kz]

    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    det = u + v + w
    nonzero = det != 0.0
    # Barycentric tolerance: hits on edges (u/v/w ~ 0) are accepted by both
    # adjacent triangles and deduplicated downstream.
    tol = _BARY_EPS * np.abs(det)
    bary_ok = (u >= -tol) & (v >= -tol) & (w >= -tol)
    bary_ok |= (u <= tol) & (v <= tol) & (w <= tol)
    az = sz * a[idx, kz]
    bz = sz * b[idx, kz]
    cz = sz * c[idx, kz]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (u * az + v * bz + w * cz) / det
    keep = nonzero & bary_ok & (t > _T_MIN)
    return t, keep


def _watertight_hits(origin, direction, v0, v1, v2):
    o = np.broadcast_to(np.asarray(origin, dtype=np.float64), v0.shape)
    d = np.broadcast_to(np.asarray(direction, dtype=np.float64), v0.shape)
    return _watertight_pairs(o, d, v0, v1, v2)


def ray_mesh_intersections(mesh: TriangleMesh, origin, direction, ray_id: int = 0) -> HitList:
    """All intersections t > 1e-6 along a unit-direction ray, sorted ascending."""
    bvh = mesh.bvh()
    cand = bvh.candidate_triangles(np.asarray(origin, dtype=np.float64),
                                   np.asarray(direction, dtype=np.float64))
    if len(cand) == 0:
        return HitList(ray_id, np.zeros(0), np.zeros(0, dtype=np.int64))
    t, keep = _watertight_hits(origin, direction, bvh._v0[cand], bvh._v1[cand], bvh._v2[cand])
    t = t[keep]
    faces = cand[keep]
    if len(t) == 0:
        return HitList(ray_id, np.zeros(0), np.zeros(0, dtype=np.int64))
    order = np.argsort(t, kind="stable")
    t = t[order]
    faces = faces[order]
    # Drop duplicate hits from shared edges/vertices.
    uniq = np.ones(len(t), dtype=bool)
    uniq[1:] = np.diff(t) >= _DEDUP_DT
    return HitList(ray_id, t[uniq], faces[uniq])


def ray_mesh_intersections_batch(mesh: TriangleMesh, origins: np.ndarray,
                                 directions: np.ndarray):
    """All hits for many rays: (t_pad (N, M) inf-padded ascending, face_pad, counts).

    Same intersection rules as :func:`ray_mesh_intersections`; triangle tests
    run once over the concatenated candidate set of all rays.
    """
    bvh = mesh.bvh()
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    directions = np.ascontiguousarray(directions, dtype=np.float64)
    n = len(origins)
    ray_of: list[np.ndarray] = []
    tris: list[np.ndarray] = []
    for i in range(n):
        cand = bvh.candidate_triangles(origins[i], directions[i])
        if len(cand):
            ray_of.append(np.full(len(cand), i, dtype=np.int64))
            tris.append(cand)
    if not ray_of:
        return (np.full((n, 1), np.inf), np.full((n, 1), -1, dtype=np.int64),
                np.zeros(n, dtype=np.int64))
    ray_of = np.concatenate(ray_of)
    tris = np.concatenate(tris)
    t, keep = _watertight_pairs(origins[ray_of], directions[ray_of],
                                bvh._v0[tris], bvh._v1[tris], bvh._v2[tris])
    ray_of, tris, t = ray_of[keep], tris[keep], t[keep]
    order = np.lexsort((t, ray_of))
    ray_of, tris, t = ray_of[order], tris[order], t[order]
    # Dedup shared-edge duplicates within each ray.
    if len(t):
        same = np.zeros(len(t), dtype=bool)
        same[1:] = (ray_of[1:] == ray_of[:-1]) & (np.diff(t) < _DEDUP_DT)
        ray_of, tris, t = ray_of[~same], tris[~same], t[~same]
    counts = np.bincount(ray_of, minlength=n)
    m = max(int(counts.max()), 1)
    t_pad = np.full((n, m), np.inf)
    f_pad = np.full((n, m), -1, dtype=np.int64)
    slot = np.arange(len(t)) - np.repeat(np.cumsum(counts) - counts, counts)
    t_pad[ray_of, slot] = t
    f_pad[ray_of, slot] = tris
    return t_pad, f_pad, counts


def first_last_hits(mesh: TriangleMesh, origins: np.ndarray, directions: np.ndarray):
    """(t_first, t_last, hit_mask) per ray; NaN where the ray misses."""
    t_pad, _, counts = ray_mesh_intersections_batch(mesh, origins, directions)
    hit = counts > 0
    t_first = np.where(hit, t_pad[:, 0], np.nan)
    last = np.maximum(counts - 1, 0)
    t_last = np.where(hit, t_pad[np.arange(len(counts)), last], np.nan)
    return t_first, t_last, hit


def srdf_ground_truth(hits: HitList, t) -> np.ndarray | float:
    """Signed distance along the ray to the nearest hit: t_closest - t.

    Ties between two equidistant hits resolve toward the smaller hit
    parameter.  Raises on an empty hit list; callers mask such rays out.
    """
    if len(hits) == 0:
        raise GeometryError("srdf_ground_truth requires a non-empty hit list")
    scalar = np.isscalar(t)
    tq = np.atleast_1d(np.asarray(t, dtype=np.float64))
    hs = hits.t
    idx = np.searchsorted(hs, tq)
    left = np.clip(idx - 1, 0, len(hs) - 1)
    right = np.clip(idx, 0, len(hs) - 1)
    dl = np.abs(tq - hs[left])
    dr = np.abs(tq - hs[right])
    closest = np.where(dl <= dr, hs[left], hs[right])  # tie -> smaller t
    out = closest - tq
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# OBJ import/export (ASCII v/vn/f records only)


def save_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.normals is not None:
            for n in mesh.normals:
                fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
            for f in mesh.faces:
                fh.write(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} {f[2]+1}//{f[2]+1}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


def load_obj(path) -> TriangleMesh:
    vertices: list[list[float]] = []
    normals: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    return TriangleMesh(
        np.array(vertices),
        np.array(faces, dtype=np.int64),
        np.array(normals) if normals else None,
    )


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge must be shared by exactly two faces."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))
