"""Image features, pixel-aligned sampling, view attentions, and the sparse
geometry feature volume.

The volume stores features only at active voxels (the band around the prior
surface); convolution gathers 3x3x3 neighborhoods over that band, so build
cost scales with the active count rather than the full grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .camera import Camera


class EncoderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image feature extraction


class ImageEncoder(nn.Module):
    """Trainable stride-2 CNN: 3 -> 24 (s2) -> 24 (residual) -> 32 channels."""

    def __init__(self, rng, out_channels: int = 32):
        self.conv1 = nn.Conv2d(rng, 3, 24, stride=2)
        self.conv2 = nn.Conv2d(rng, 24, 24)
        self.conv3 = nn.Conv2d(rng, 24, out_channels)
        self.out_channels = out_channels

    def __call__(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, C, H/2, W/2)."""
        if images.shape[2] % 2 or images.shape[3] % 2:
            raise EncoderError(f"image extents must be even, got {images.shape}")
        y1 = ad.relu(self.conv1(images))
        y2 = ad.add(ad.relu(self.conv2(y1)), y1)
        return self.conv3(y2)


def encode_images(encoder: ImageEncoder, images: list[np.ndarray]) -> list[Tensor]:
    """Per-view feature maps in (H/2, W/2, C) layout.

    All views must share one resolution; determinism follows from the ops.
    """
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise EncoderError(f"mismatched image resolutions: {sorted(shapes)}")
    stack = np.stack(images).transpose(0, 3, 1, 2)
    feats = encoder(Tensor(stack))
    n_views = feats.shape[0]
    per_view = []
    for i in range(n_views):
        fmap = ad.reshape(ad.narrow(feats, 0, i, 1), feats.shape[1:])
        per_view.append(ad.permute(fmap, (1, 2, 0)))  # (H', W', C)
    return per_view


# ---------------------------------------------------------------------------
# pixel-aligned features


def pixel_aligned(feature_map: Tensor, cam: Camera, points: np.ndarray,
                  full_width: int) -> tuple[Tensor, np.ndarray]:
    """Project points into a view and bilinearly sample its feature map.

    Returns (features (N, C), in_front mask).  Points behind the camera get
    zero features and a False flag; points projecting outside the image
    reuse border-clamped values (and keep the flag True).
    """
    uv, _, in_front = cam.project_batch(points)
    scale = feature_map.shape[1] / float(full_width)
    feats = ad.sample_bilinear(feature_map, uv * scale)
    if not in_front.all():
        gate = np.where(in_front, 1.0, 0.0)
        feats = ad.mul(feats, ad.expand(Tensor(gate), 1, feats.shape[1]))
    return feats, in_front


def view_directions(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Unit directions from the camera center to each point."""
    d = points - cam.center
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def meanvar_feature(per_view: Tensor) -> Tensor:
    """Mean and population variance over the view axis, concatenated.

    per_view: (N, V, C) -> (N, 2C).  A single view yields zero variance.
    """
    return ad.concat([ad.mean(per_view, axis=1), ad.variance(per_view, axis=1)], axis=1)


# ---------------------------------------------------------------------------
# the three view attentions


class AttGeo(nn.Module):
    """Aggregates per-view vertex features under a normal-direction query."""

    def __init__(self, rng, feat_dim: int, out_dim: int, att_dim: int = 32):
        self.att = nn.Attention(rng, q_in=3, k_in=feat_dim + 3, v_in=feat_dim,
                                out_dim=out_dim, dim=att_dim)

    def __call__(self, h: Tensor, d: np.ndarray, normals: np.ndarray) -> Tensor:
        """h: (N, V, C) features; d: (N, V, 3) view dirs; normals: (N, 3)."""
        keys = ad.concat([h, Tensor(d)], axis=2)
        return self.att(Tensor(normals), keys, h)


class AttApp(nn.Module):
    """Blends per-view features and raw colors into an appearance feature."""

    def __init__(self, rng, feat_dim: int, g_dim: int, out_dim: int, att_dim: int = 32):
        self.att = nn.Attention(rng, q_in=g_dim + 3, k_in=feat_dim + 6,
                                v_in=feat_dim + 3, out_dim=out_dim, dim=att_dim)

    def __call__(self, h: Tensor, rgb: Tensor, d: np.ndarray,
                 g: Tensor, d_target: np.ndarray) -> Tensor:
        """h: (N, V, C); rgb: (N, V, 3); d: (N, V, 3); g: (N, Cg); d_target: (N, 3)."""
        q = ad.concat([g, Tensor(d_target)], axis=1)
        keys = ad.concat([h, rgb, Tensor(d)], axis=2)
        values = ad.concat([h, rgb], axis=2)
        return self.att(q, keys, values)


class AttOcc(nn.Module):
    """Occlusion-aware attention over views.

    Query: sample geometry feature, target direction, and the target-view
    observed position.  Keys: per-view image feature, view direction, the
    view-observed position, and the observed-position distance.  Values: the
    geometry feature with that distance.
    """

    def __init__(self, rng, feat_dim: int, g_dim: int, out_dim: int, att_dim: int = 32):
        self.att = nn.Attention(rng, q_in=g_dim + 6, k_in=feat_dim + 7,
                                v_in=g_dim + 1, out_dim=out_dim, dim=att_dim)
        self.g_dim = g_dim

    def __call__(self, g: Tensor, d_target: np.ndarray, x_target: np.ndarray,
                 h: Tensor, d: np.ndarray, x_views: np.ndarray,
                 distances: np.ndarray) -> Tensor:
        """g: (N, Cg); x_target: (N, 3); h: (N, V, C); x_views: (N, V, 3);
        distances: (N, V)."""
        n, n_views = distances.shape
        q = ad.concat([g, Tensor(d_target), Tensor(x_target)], axis=1)
        dist = Tensor(distances[:, :, None])
        keys = ad.concat([h, Tensor(d), Tensor(x_views), dist], axis=2)
        g_rep = ad.reshape(ad.expand(g, 1, n_views), (n, n_views, self.g_dim))
        values = ad.concat([g_rep, dist], axis=2)
        return self.att(q, keys, values)


# ---------------------------------------------------------------------------
# sparse feature volume


@dataclass(frozen=True)
class VolumeGrid:
    """Axis-aligned voxel lattice; voxel (i,j,k) is centered at
    origin + (ijk + 0.5) * voxel_size."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]

    @staticmethod
    def for_aabb(lo: np.ndarray, hi: np.ndarray, resolution: int) -> "VolumeGrid":
        """Grid covering [lo, hi] with a 2-voxel margin on each side."""
        extent = float(np.max(hi - lo))
        voxel = extent / max(resolution - 4, 1)
        dims = tuple(int(np.ceil((hi[k] - lo[k]) / voxel)) + 4 for k in range(3))
        origin = np.asarray(lo, dtype=np.float64) - 2 * voxel
        return VolumeGrid(origin, voxel, dims)

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor((points - self.origin) / self.voxel_size).astype(np.int64)

    def flat_id(self, ijk: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        return (ijk[:, 0] * ny + ijk[:, 1]) * nz + ijk[:, 2]

    def in_bounds(self, ijk: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        return ((ijk >= 0).all(axis=1) & (ijk[:, 0] < nx) & (ijk[:, 1] < ny)
                & (ijk[:, 2] < nz))


@dataclass
class FeatureVolume:
    """Active-voxel feature storage over a VolumeGrid."""

    grid: VolumeGrid
    active_ijk: np.ndarray          # (A, 3)
    index_map: np.ndarray           # dense (nx, ny, nz) -> active row or -1
    features: Tensor                # (A, C)
    build_stats: dict = field(default_factory=dict)

    @property
    def n_active(self) -> int:
        return len(self.active_ijk)

    @property
    def channels(self) -> int:
        return self.features.shape[1]


_NEIGHBOR_OFFSETS = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1)
                              for k in (-1, 0, 1)], dtype=np.int64)  # center at index 13


class VolumeBuilder(nn.Module):
    """Scatter vertex features into the grid and run two masked 3-D convs."""

    def __init__(self, rng, in_dim: int, out_dim: int):
        self.w1 = Tensor(nn.he_init(rng, 27 * in_dim, (27 * in_dim, out_dim)), requires_grad=True)
        self.b1 = Tensor(np.zeros(out_dim), requires_grad=True)
        self.w2 = Tensor(nn.he_init(rng, 27 * out_dim, (27 * out_dim, out_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, grid: VolumeGrid, positions: np.ndarray,
                 vertex_feats: Tensor,
                 band_positions: np.ndarray | None = None) -> FeatureVolume:
        """``band_positions`` are extra activation-only points (no features)
        that fill the space between the boundary shells, so the active set is
        the full surface band rather than three disconnected vertex shells."""
        ijk = grid.voxel_of(positions)
        if not grid.in_bounds(ijk).all():
            bad = positions[~grid.in_bounds(ijk)][0]
            raise EncoderError(f"vertex {bad} outside volume grid; size the grid "
                               "from the dilated AABB plus margin")
        flat = grid.flat_id(ijk)
        seeds, inverse = np.unique(flat, return_inverse=True)
        n_seeds = len(seeds)
        n_verts = len(positions)

        # Collision-averaging scatter as a fixed matrix (deterministic).
        avg = np.zeros((n_seeds, n_verts), dtype=ad.default_dtype())
        counts = np.bincount(inverse, minlength=n_seeds).astype(ad.default_dtype())
        avg[inverse, np.arange(n_verts)] = 1.0
        avg /= counts[:, None]
        seed_feats = ad.matmul(Tensor(avg), vertex_feats)  # (S, C_in)

        # Active set: seed voxels (plus band fillers) and their 1-ring.
        nx, ny, nz = grid.dims
        seed_flat = seeds
        if band_positions is not None:
            bijk = grid.voxel_of(band_positions)
            bijk = bijk[grid.in_bounds(bijk)]
            seed_flat = np.unique(np.concatenate([seeds, grid.flat_id(bijk)]))
        seed_ijk = np.stack(np.unravel_index(seed_flat, grid.dims), axis=1)
        ring = (seed_ijk[:, None, :] + _NEIGHBOR_OFFSETS[None, :, :]).reshape(-1, 3)
        ring = ring[((ring >= 0) & (ring < np.array(grid.dims))).all(axis=1)]
        active_flat = np.unique(np.concatenate([seed_flat, grid.flat_id(ring)]))
        active_ijk = np.stack(np.unravel_index(active_flat, grid.dims), axis=1)
        n_active = len(active_flat)

        index_map = np.full(grid.dims, -1, dtype=np.int64)
        index_map[active_ijk[:, 0], active_ijk[:, 1], active_ijk[:, 2]] = np.arange(n_active)

        # Spread vertex-fed seed features into the active rows; band fillers
        # and ring-only rows stay zero until the convolutions reach them.
        feat_ijk = np.stack(np.unravel_index(seeds, grid.dims), axis=1)
        seed_rows = np.full(n_active, -1, dtype=np.int64)
        seed_rows[index_map[feat_ijk[:, 0], feat_ijk[:, 1], feat_ijk[:, 2]]] = np.arange(n_seeds)
        feats0 = ad.take_rows(seed_feats, seed_rows)

        neighbors = self._neighbor_rows(grid, active_ijk, index_map)
        feats1 = ad.relu(ad.masked_conv3d(feats0, neighbors, self.w1, self.b1))
        feats2 = ad.masked_conv3d(feats1, neighbors, self.w2, self.b2)

        gathered = int((neighbors >= 0).sum())
        stats = {
            "active_voxels": n_active,
            "seed_voxels": n_seeds,
            "gathered_neighbors": 2 * gathered,
            "flops": 2 * gathered * (self.in_dim * self.out_dim + self.out_dim * self.out_dim),
        }
        return FeatureVolume(grid, active_ijk, index_map, feats2, stats)

    @staticmethod
    def _neighbor_rows(grid: VolumeGrid, active_ijk: np.ndarray,
                       index_map: np.ndarray) -> np.ndarray:
        nbr = active_ijk[:, None, :] + _NEIGHBOR_OFFSETS[None, :, :]  # (A, 27, 3)
        flatn = nbr.reshape(-1, 3)
        ok = ((flatn >= 0) & (flatn < np.array(grid.dims))).all(axis=1)
        rows = np.full(len(flatn), -1, dtype=np.int64)
        sel = flatn[ok]
        rows[ok] = index_map[sel[:, 0], sel[:, 1], sel[:, 2]]
        return rows.reshape(len(active_ijk), 27)


def sample_volume(vol: FeatureVolume, points: np.ndarray) -> Tensor:
    """Trilinear interpolation over the 8 surrounding voxels.

    Inactive or out-of-grid corners contribute zero, so queries outside the
    grid return zero features.
    """
    grid = vol.grid
    g = (points - grid.origin) / grid.voxel_size - 0.5
    base = np.floor(g).astype(np.int64)
    frac = (g - base).astype(ad.default_dtype())
    channels = vol.channels
    out = None
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        ijk = base + off
        ok = grid.in_bounds(ijk)
        rows = np.full(len(points), -1, dtype=np.int64)
        sel = ijk[ok]
        rows[ok] = vol.index_map[sel[:, 0], sel[:, 1], sel[:, 2]]
        w = np.ones(len(points), dtype=ad.default_dtype())
        for axis in range(3):
            w = w * (frac[:, axis] if off[axis] else (1.0 - frac[:, axis]))
        term = ad.mul(ad.take_rows(vol.features, rows), ad.expand(Tensor(w), 1, channels))
        out = term if out is None else ad.add(out, term)
    return out
