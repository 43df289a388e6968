"""End-to-end render pipeline: model assembly, per-scene preparation, and the
buffer rendering used by training, evaluation, and benchmarks.

Static geometry (shells, ray grids, shell intervals, position maps) is
prepared once per scene; every render rebuilds only the trainable parts
(feature maps, feature volume, per-sample regressions).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from . import renderer as rnd
from .autodiff import Tensor
from .camera import Camera, RayBundle, generate_rays
from .encoder import (AttApp, AttGeo, AttOcc, FeatureVolume, ImageEncoder,
                      VolumeBuilder, VolumeGrid, encode_images, pixel_aligned,
                      sample_volume, view_directions)
from .geometry import make_shells
from .occlusion import PositionMap, occlusion_features, render_position_map
from .sampling import (QueryCounter, RaySampleBatch, ShellIntervals,
                       aabb_intervals, regress_guidance, shell_intervals,
                       stage1_sample, stage2_sample)
from .scenes import SceneData


@dataclass(frozen=True)
class ModelConfig:
    feat_channels: int = 32
    vol_in_channels: int = 16
    vol_channels: int = 16
    app_channels: int = 16
    occ_channels: int = 16
    att_dim: int = 32
    hidden: int = 64
    k_guidance: int = 16
    l_render: int = 8
    volume_res: int = 64
    occlusion: bool = False
    formulation: str = "srdf"  # or "density"
    boundary_meshes: bool = True
    r_min_voxels: float = 0.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    u_width: int = 32
    o_width: int = 24
    s_init: float | None = None
    offset_out_scale: float = 0.05
    offset_in_scale: float = 0.02

    def __post_init__(self):
        if self.k_guidance < 2 or self.l_render < 1:
            raise ValueError("need k_guidance >= 2 and l_render >= 1")
        if self.formulation not in ("srdf", "density"):
            raise ValueError(f"unknown formulation {self.formulation!r}")


class RenderModel(nn.Module):
    """All trainable components, constructed deterministically from a seed."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        self.config = c
        self.encoder = ImageEncoder(rng, out_channels=c.feat_channels)
        self.att_geo = AttGeo(rng, feat_dim=c.feat_channels, out_dim=c.vol_in_channels,
                              att_dim=c.att_dim)
        self.shell_proj = nn.Linear(rng, 2 * c.feat_channels, c.vol_in_channels)
        self.volume = VolumeBuilder(rng, c.vol_in_channels, c.vol_channels)
        self.s_c = rnd.GuidanceHead(rng, c.vol_channels, hidden=c.hidden)
        self.s_f = rnd.GeometryHead(rng, c.vol_channels, hidden=c.hidden, s_init=c.s_init)
        self.att_app = AttApp(rng, feat_dim=c.feat_channels, g_dim=c.vol_channels,
                              out_dim=c.app_channels, att_dim=c.att_dim)
        self.s_a = rnd.ColorHead(rng, c.app_channels, hidden=c.hidden)
        if c.occlusion:
            self.att_occ = AttOcc(rng, feat_dim=c.feat_channels, g_dim=c.vol_channels,
                                  out_dim=c.occ_channels, att_dim=c.att_dim)
            self.cnn_o = rnd.OcclusionCNN(rng, c.occ_channels, width=c.o_width)
            u_in = c.app_channels + c.occ_channels + 1
        else:
            self.att_occ = None
            self.cnn_o = None
            u_in = c.app_channels
        self.cnn_u = rnd.RefineCNN(rng, u_in, width=c.u_width)


@dataclass
class TargetView:
    camera: Camera
    rays: RayBundle                 # full stride-2 grid
    intervals: ShellIntervals
    position_map: PositionMap | None


@dataclass
class ScenePrep:
    """Static per-scene data shared by every render of that scene."""

    shells: object
    grid: VolumeGrid
    r_min: float
    d_max: float
    verts_base: np.ndarray
    verts_dilated: np.ndarray
    verts_eroded: np.ndarray | None
    band_positions: np.ndarray
    normals: np.ndarray
    view_dirs_base: np.ndarray      # (Nv, V, 3)
    targets: list[TargetView]
    input_maps: list[PositionMap] | None
    aabb: tuple[np.ndarray, np.ndarray]


def prepare_scene(model: RenderModel, scene: SceneData) -> ScenePrep:
    c = model.config
    proxy = scene.proxy_mesh
    shells = make_shells(proxy, c.offset_out_scale * scene.scene_scale,
                         c.offset_in_scale * scene.scene_scale)
    lo, hi = shells.dilated.aabb()
    grid = VolumeGrid.for_aabb(np.asarray(lo), np.asarray(hi), c.volume_res)
    dirs = np.stack([view_directions(cam, proxy.vertices)
                     for cam in scene.input_cameras], axis=1)
    # Activation-only points filling the shell band along every vertex normal,
    # so the feature volume's active set is the whole dilated-eroded band.
    span = shells.offset_out + shells.offset_in
    n_fill = max(int(np.ceil(span / grid.voxel_size)) + 1, 2)
    offsets = np.linspace(-shells.offset_in, shells.offset_out, n_fill)
    band = (proxy.vertices[None, :, :]
            + offsets[:, None, None] * proxy.normals[None, :, :]).reshape(-1, 3)
    targets = []
    occlusion = c.occlusion
    for cam in scene.target_cameras:
        rays = generate_rays(cam, stride=2)
        if c.boundary_meshes:
            iv = shell_intervals(shells, rays)
        else:
            slo, shi = scene.true_mesh.aabb()
            margin = 0.05 * scene.scene_scale
            iv = aabb_intervals(np.asarray(slo) - margin, np.asarray(shi) + margin, rays)
        pmap = render_position_map(proxy, cam, stride=2) if occlusion else None
        targets.append(TargetView(cam, rays, iv, pmap))
    input_maps = ([render_position_map(proxy, cam, stride=2)
                   for cam in scene.input_cameras] if occlusion else None)
    slo, shi = scene.true_mesh.aabb()
    return ScenePrep(
        shells=shells, grid=grid,
        r_min=c.r_min_voxels * grid.voxel_size,
        d_max=scene.scene_scale,
        verts_base=proxy.vertices,
        verts_dilated=shells.dilated.vertices,
        verts_eroded=None if shells.eroded is None else shells.eroded.vertices,
        band_positions=band,
        normals=proxy.normals,
        view_dirs_base=dirs,
        targets=targets,
        input_maps=input_maps,
        aabb=(np.asarray(slo), np.asarray(shi)),
    )


@dataclass
class RenderContext:
    """Per-render trainable state: feature maps and the feature volume."""

    feature_maps: list[Tensor]
    raw_images: list[Tensor]
    volume: FeatureVolume


def _stack_views(per_view: list[Tensor]) -> Tensor:
    """List of (N, C) tensors -> (N, V, C)."""
    n, c = per_view[0].shape
    return ad.concat([ad.reshape(t, (n, 1, c)) for t in per_view], axis=1)


def _per_view_features(maps: list[Tensor], cams: list[Camera], points: np.ndarray,
                       full_width: int) -> Tensor:
    feats = []
    for fmap, cam in zip(maps, cams):
        h, _ = pixel_aligned(fmap, cam, points, full_width)
        feats.append(h)
    return _stack_views(feats)


def build_context(model: RenderModel, scene: SceneData, prep: ScenePrep) -> RenderContext:
    """Encode input views and build the geometry feature volume."""
    c = model.config
    maps = encode_images(model.encoder, scene.images)
    cams = scene.input_cameras
    width = cams[0].width

    h_base = _per_view_features(maps, cams, prep.verts_base, width)
    a_v = model.att_geo(h_base, prep.view_dirs_base, prep.normals)
    positions = [prep.verts_base]
    feats = [a_v]
    if c.boundary_meshes:
        from .encoder import meanvar_feature
        h_dil = _per_view_features(maps, cams, prep.verts_dilated, width)
        positions.append(prep.verts_dilated)
        feats.append(model.shell_proj(meanvar_feature(h_dil)))
        if prep.verts_eroded is not None:
            h_ero = _per_view_features(maps, cams, prep.verts_eroded, width)
            positions.append(prep.verts_eroded)
            feats.append(model.shell_proj(meanvar_feature(h_ero)))
    volume = model.volume(prep.grid, np.concatenate(positions),
                          ad.concat(feats, axis=0),
                          band_positions=prep.band_positions)
    raw = [Tensor(img) for img in scene.images]
    return RenderContext(maps, raw, volume)


@dataclass
class CropBox:
    y0: int
    x0: int
    height: int
    width: int

    def flat_indices(self, n_u: int) -> np.ndarray:
        ys = np.arange(self.y0, self.y0 + self.height)
        xs = np.arange(self.x0, self.x0 + self.width)
        return (ys[:, None] * n_u + xs[None, :]).ravel()


@dataclass
class RenderResult:
    """Rendered buffers plus the per-sample state the losses consume."""

    crop: CropBox
    low_rgb: Tensor                  # (1, 3, h, w)
    depth: Tensor                    # (1, 1, h, w)
    app: Tensor                      # (1, C_a, h, w)
    occ_feat: Tensor | None
    image: Tensor                    # (1, 3, 2h, 2w) clamped
    image_pre_clamp: Tensor
    occ_mask: Tensor | None
    weights: rnd.CompositeWeights | None
    valid_mask: np.ndarray           # (h, w)
    stage1: RaySampleBatch | None
    stage1_f: Tensor | None
    stage2: RaySampleBatch | None
    stage2_f: Tensor | None
    global_ray_ids: np.ndarray | None  # rows into the full stride-2 grid
    counter: QueryCounter
    guide: object | None = None


def _gated_rgb(image: Tensor, cam: Camera, points: np.ndarray) -> Tensor:
    """Raw input-view colors at projected points, zeroed behind the camera."""
    uv, _, in_front = cam.project_batch(points)
    rgb = ad.sample_bilinear(image, uv)
    if not in_front.all():
        rgb = ad.mul(rgb, ad.expand(Tensor(np.where(in_front, 1.0, 0.0)), 1, 3))
    return rgb


def _scatter_image(rows: Tensor, mapping: np.ndarray, h: int, w: int,
                   background: np.ndarray | None = None) -> Tensor:
    """(R, C) rows -> (1, C, h, w) image; unmapped pixels get the background."""
    img = ad.take_rows(rows, mapping)  # (h*w, C) with zero rows where -1
    c = rows.shape[1]
    if background is not None:
        bg = np.where((mapping < 0)[:, None], np.tile(background, (len(mapping), 1)), 0.0)
        img = ad.add(img, Tensor(bg.astype(ad.default_dtype())))
    img = ad.permute(ad.reshape(img, (h, w, c)), (2, 0, 1))
    return ad.reshape(img, (1, c, h, w))


def render_view(model: RenderModel, scene: SceneData, prep: ScenePrep,
                ctx: RenderContext, target_idx: int, crop: CropBox | None = None,
                check_invariants: bool = False, srdf_override=None,
                fixed_guide=None, k: int | None = None, l: int | None = None,
                jitter_rng=None) -> RenderResult:
    """Render the low-resolution buffers of one target view and refine them.

    ``crop`` selects a rectangle of the stride-2 ray grid (default: all).
    ``srdf_override`` replaces the geometry head with an oracle
    ``f(ray_ids, t) -> (f, s)`` for analytic rendering tests.  ``fixed_guide``
    reuses a previously computed sampling guide, freezing sample positions
    (finite-difference checks need positions held constant because
    interpolation weights are not differentiated w.r.t. position).  ``k`` and
    ``l`` override the configured per-ray sample counts (benchmark sweeps).
    """
    c = model.config
    k = c.k_guidance if k is None else k
    l = c.l_render if l is None else l
    view = prep.targets[target_idx]
    rays = view.rays
    if crop is None:
        crop = CropBox(0, 0, rays.n_v, rays.n_u)
    sel = crop.flat_indices(rays.n_u)
    sub = RayBundle(rays.origins[sel], rays.directions[sel], rays.pixels[sel],
                    crop.width, crop.height)
    intervals = ShellIntervals(view.intervals.t_lo[sel], view.intervals.t_hi[sel],
                               view.intervals.valid[sel])
    counter = QueryCounter(len(sel))
    h, w = crop.height, crop.width
    background = np.asarray(c.background, dtype=np.float64)

    if not intervals.valid.any():
        return _background_result(model, crop, sel, background, counter)

    # Stage 1: coarse samples inside the shells, guidance regression.
    batch1 = stage1_sample(intervals, sub, k)
    counter.record_stage1(batch1, intervals)
    g1 = sample_volume(ctx.volume, batch1.flat_positions())
    f1, c1 = model.s_c(g1, batch1.flat_directions())
    if fixed_guide is not None:
        guide = fixed_guide
    else:
        guide = regress_guidance(batch1, f1.data, c1.data, sub.origins[batch1.ray_ids],
                                 r_min=prep.r_min,
                                 fallback_lo=intervals.t_lo[batch1.ray_ids],
                                 fallback_hi=intervals.t_hi[batch1.ray_ids])

    # Stage 2: guided samples, geometry + appearance regression.
    batch2 = stage2_sample(guide, sub, l, jitter_rng=jitter_rng)
    counter.record_stage2(batch2)
    pts = batch2.flat_positions()
    dirs_flat = batch2.flat_directions()
    g2 = sample_volume(ctx.volume, pts)
    if srdf_override is None:
        f2, s2 = model.s_f(g2, dirs_flat)
    else:
        f_np, s_np = srdf_override(sel[batch2.ray_ids], batch2.t)
        f2 = Tensor(f_np.reshape(-1, 1))
        s2 = Tensor(s_np.reshape(-1, 1))

    cams = scene.input_cameras
    width_full = cams[0].width
    h_views = _per_view_features(ctx.feature_maps, cams, pts, width_full)
    rgb_views = _stack_views([_gated_rgb(img, cam, pts)
                              for img, cam in zip(ctx.raw_images, cams)])
    d_views = np.stack([view_directions(cam, pts) for cam in cams], axis=1)
    a_p = model.att_app(h_views, rgb_views, d_views, g2, dirs_flat)
    rgb = model.s_a(a_p)

    occ_p = None
    if c.occlusion:
        x_t, x_views, dists = occlusion_features(pts, view.position_map,
                                                 prep.input_maps, prep.d_max)
        occ_p = model.att_occ(g2, dirs_flat, x_t, h_views, d_views, x_views, dists)

    # Opacity and shared compositing.
    n_rays2 = batch2.n_rays
    f_mat = ad.reshape(f2, (n_rays2, l))
    s_mat = ad.reshape(s2, (n_rays2, l))
    if c.formulation == "srdf":
        alpha = rnd.alpha_from_srdf(f_mat, s_mat, batch2.t, radius=guide.radius)
    else:
        alpha = rnd.alpha_from_density(f_mat, batch2.t, radius=guide.radius)

    payload_parts = [a_p]
    split = [c.app_channels]
    if occ_p is not None:
        payload_parts.append(occ_p)
        split.append(c.occ_channels)
    payload_parts.append(rgb)
    split.append(3)
    payload_parts.append(Tensor(batch2.t.reshape(-1, 1)))
    split.append(1)
    # A constant ones channel composites to the per-ray weight sum, giving a
    # differentiable opacity for background completion.
    payload_parts.append(Tensor(np.ones((n_rays2 * l, 1))))
    split.append(1)
    payload = ad.reshape(ad.concat(payload_parts, axis=1),
                         (n_rays2, l, sum(split)))
    composited, weights = composite_and_check(alpha, payload, check_invariants)

    # Scatter composited rows into rectangular buffers.
    mapping = np.full(len(sel), -1, dtype=np.int64)
    mapping[batch2.ray_ids] = np.arange(n_rays2)
    offset = 0
    app_rows = ad.narrow(composited, 1, 0, c.app_channels)
    offset += c.app_channels
    occ_rows = None
    if occ_p is not None:
        occ_rows = ad.narrow(composited, 1, offset, c.occ_channels)
        offset += c.occ_channels
    rgb_rows = ad.narrow(composited, 1, offset, 3)
    offset += 3
    depth_rows = ad.narrow(composited, 1, offset, 1)
    offset += 1
    # Background completion: rays keep (1 - sum w) of the backdrop color, so
    # silhouette-adjacent rays composite toward the true background instead
    # of black, and interior opacity is pushed toward 1 by the color loss.
    wsum_rows = ad.narrow(composited, 1, offset, 1)
    leak = ad.sub(1.0, wsum_rows)
    bg_term = ad.matmul(leak, Tensor(background[None, :]))
    rgb_rows = ad.add(rgb_rows, bg_term)

    app_img = _scatter_image(app_rows, mapping, h, w)
    occ_img = _scatter_image(occ_rows, mapping, h, w) if occ_rows is not None else None
    low_rgb = _scatter_image(rgb_rows, mapping, h, w, background=background)
    depth_img = _scatter_image(depth_rows, mapping, h, w)

    image, pre_clamp, occ_mask = rnd.refine_image(model.cnn_u, model.cnn_o,
                                                  app_img, occ_img, low_rgb)
    valid_mask = np.zeros(len(sel), dtype=bool)
    valid_mask[batch2.ray_ids] = True

    return RenderResult(
        crop=crop, low_rgb=low_rgb, depth=depth_img, app=app_img, occ_feat=occ_img,
        image=image, image_pre_clamp=pre_clamp, occ_mask=occ_mask, weights=weights,
        valid_mask=valid_mask.reshape(h, w),
        stage1=batch1, stage1_f=f1, stage2=batch2, stage2_f=f2,
        global_ray_ids=sel, counter=counter, guide=guide,
    )


def composite_and_check(alpha, payload, check: bool):
    out, weights = rnd.composite(alpha, payload)
    if check:
        weights.check()
    return out, weights


def _background_result(model: RenderModel, crop: CropBox, sel: np.ndarray,
                       background: np.ndarray, counter: QueryCounter) -> RenderResult:
    c = model.config
    h, w = crop.height, crop.width
    mapping = np.full(len(sel), -1, dtype=np.int64)
    zero_rows = Tensor(np.zeros((1, c.app_channels)))
    app_img = _scatter_image(zero_rows, mapping, h, w)
    occ_img = (_scatter_image(Tensor(np.zeros((1, c.occ_channels))), mapping, h, w)
               if c.occlusion else None)
    low_rgb = _scatter_image(Tensor(np.zeros((1, 3))), mapping, h, w, background=background)
    depth_img = _scatter_image(Tensor(np.zeros((1, 1))), mapping, h, w)
    image, pre_clamp, occ_mask = rnd.refine_image(model.cnn_u, model.cnn_o,
                                                  app_img, occ_img, low_rgb)
    return RenderResult(
        crop=crop, low_rgb=low_rgb, depth=depth_img, app=app_img, occ_feat=occ_img,
        image=image, image_pre_clamp=pre_clamp, occ_mask=occ_mask, weights=None,
        valid_mask=np.zeros((h, w), dtype=bool),
        stage1=None, stage1_f=None, stage2=None, stage2_f=None,
        global_ray_ids=sel, counter=counter,
    )
