"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line printed in the terminal summary.  The
heavyweight end-to-end reproduction (criterion 5) trains once at module scope
and is reused by the sample-count ablation (criterion 6b).
"""

import time

import numpy as np
import pytest

from conftest import record_acceptance

from shellrender import autodiff as ad
from shellrender import encoder as enc
from shellrender import geometry as geo
from shellrender import losses as ls
from shellrender import nn
from shellrender import occlusion as occ
from shellrender import pipeline as pl
from shellrender import renderer as rnd
from shellrender import sampling as smp
from shellrender import train as tr
from shellrender.autodiff import Tensor
from shellrender.camera import RayBundle, generate_rays
from shellrender.scenes import (SceneSpec, Sphere, capsule_person, generate_scene,
                                icosphere, two_sphere_occluder)

# Frozen acceptance protocol for the toy reproduction (criterion 5): the
# thresholds below were calibrated on the first successful run and are
# non-regression bounds from then on.
ACCEPT_SCENE = SceneSpec(primitives=capsule_person(), image_size=128,
                         n_input_views=4, n_target_views=4,
                         proxy_subdiv=1, true_subdiv=3)
ACCEPT_MODEL = dict(k_guidance=16, l_render=8, volume_res=64, s_init=0.08)
ACCEPT_TRAIN = dict(steps=2000, crop=64, seed=0, lr=1e-3)
PSNR_FLOOR_DB = 26.0
DEPTH_MAE_FRAC = 0.02


def small_model_config(**kw):
    base = dict(feat_channels=8, vol_in_channels=4, vol_channels=4, app_channels=4,
                occ_channels=4, att_dim=8, hidden=16, k_guidance=8, l_render=4,
                volume_res=24, u_width=8, o_width=8, s_init=0.08)
    base.update(kw)
    return pl.ModelConfig(**base)


# ---------------------------------------------------------------------------
# criterion 1: SRDF oracle equivalence


def test_criterion_1_srdf_oracle_equivalence():
    t_start = time.perf_counter()
    rng = np.random.default_rng(42)
    n = 10_000
    origins = rng.normal(size=(n, 3))
    origins *= 3.0 / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.normal(size=(n, 3))
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    targets *= 0.8 * rng.uniform(0, 1, size=(n, 1)) ** (1 / 3)
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ts = rng.uniform(1.0, 5.0, size=n)

    sphere = Sphere((0.0, 0.0, 0.0), 1.0)
    t0_an, t1_an, valid = sphere.interval_batch(origins, dirs)
    assert valid.all()  # impact parameter <= 0.8 guarantees analytic hits
    analytic_hits = np.stack([t0_an, t1_an], axis=1)

    from shellrender.scenes import srdf_from_padded
    f_true = srdf_from_padded(analytic_hits, np.full(n, 2), ts[:, None])[:, 0]

    errors = []
    for subdiv in (2, 3, 4):
        mesh = icosphere(1.0, (0, 0, 0), subdiv=subdiv)
        t_pad, f_pad, counts = geo.ray_mesh_intersections_batch(mesh, origins, dirs)
        worst = 0.0
        for i in range(n):
            if counts[i] != 2:
                continue  # silhouette-grazing tessellation miss
            hits = geo.HitList(i, t_pad[i, :counts[i]], f_pad[i, :counts[i]])
            worst = max(worst, abs(geo.srdf_ground_truth(hits, ts[i]) - f_true[i]))
        errors.append(worst)
    elapsed = time.perf_counter() - t_start

    ok = errors[0] > errors[1] > errors[2] and errors[2] < 5e-3 and elapsed < 10.0
    record_acceptance(
        "1 SRDF oracle equivalence",
        ok, f"max err subdiv2..4 = {errors[0]:.1e} > {errors[1]:.1e} > {errors[2]:.1e}, "
            f"{elapsed:.1f}s")
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 5e-3
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# criterion 2: compositing invariants on a full eval frame


def test_criterion_2_compositing_invariants():
    scene = generate_scene(SceneSpec(primitives=capsule_person(), image_size=64,
                                     n_input_views=4, n_target_views=1,
                                     proxy_subdiv=1, true_subdiv=2))
    model = pl.RenderModel(small_model_config(), seed=0)
    prep = pl.prepare_scene(model, scene)
    ctx = pl.build_context(model, scene, prep)
    res = pl.render_view(model, scene, prep, ctx, 0, check_invariants=True)
    w = res.weights
    alpha_ok = bool((w.alpha >= 0).all() and (w.alpha <= 1.0).all())
    t_ok = bool((np.diff(w.transmittance, axis=1) <= 1e-6).all())
    wsum = w.weights.sum(axis=1)
    sum_ok = bool((wsum >= 0).all() and (wsum <= 1 + 1e-6).all())
    record_acceptance(
        "2 compositing invariants",
        alpha_ok and t_ok and sum_ok,
        f"{w.alpha.shape[0]} rendered rays, wsum in [{wsum.min():.3f}, {wsum.max():.3f}]")
    assert alpha_ok and t_ok and sum_ok


# ---------------------------------------------------------------------------
# criterion 3: gradient suite


def _gradient_suite(eps: float) -> float:
    rng = np.random.default_rng(11)
    worst = 0.0

    def track(err):
        nonlocal worst
        worst = max(worst, err)

    # The three regression MLPs.
    g = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    dirs = rng.normal(size=(4, 3))
    s_c = rnd.GuidanceHead(rng, g_dim=3, hidden=8)
    track(ad.gradcheck(lambda t: _sq(ad.concat(list(s_c(t, dirs)), axis=1)), g, eps=eps))
    s_f = rnd.GeometryHead(rng, g_dim=3, hidden=8)
    track(ad.gradcheck(lambda t: _sq(ad.concat(list(s_f(t, dirs)), axis=1)), g, eps=eps))
    s_a = rnd.ColorHead(rng, a_dim=3, hidden=8)
    track(ad.gradcheck(lambda t: _sq(s_a(t)), g, eps=eps))

    # The three attentions.
    att_geo = enc.AttGeo(rng, feat_dim=4, out_dim=3, att_dim=8)
    h = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    d2 = rng.normal(size=(3, 2, 3))
    normals = rng.normal(size=(3, 3))
    track(ad.gradcheck(lambda t: _sq(att_geo(t, d2, normals)), h, eps=eps))

    att_app = enc.AttApp(rng, feat_dim=4, g_dim=3, out_dim=3, att_dim=8)
    rgbs = Tensor(rng.normal(size=(3, 2, 3)))
    gq = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    dt = rng.normal(size=(3, 3))
    track(ad.gradcheck(lambda hh, gg: _sq(att_app(hh, rgbs, d2, gg, dt)), [h, gq], eps=eps))

    att_occ = enc.AttOcc(rng, feat_dim=4, g_dim=3, out_dim=3, att_dim=8)
    xt = rng.normal(size=(3, 3))
    xv = rng.normal(size=(3, 2, 3))
    dist = rng.uniform(0.1, 1.0, size=(3, 2))
    track(ad.gradcheck(lambda hh, gg: _sq(att_occ(gg, dt, xt, hh, d2, xv, dist)),
                       [h, gq], eps=eps))

    # Opacity + compositing.
    f = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    s = Tensor(rng.uniform(0.3, 1.0, size=(3, 4)), requires_grad=True)
    t_arr = np.sort(rng.uniform(1, 2, size=(3, 4)), axis=1)

    def alpha_comp(ff, ss):
        alpha = rnd.alpha_from_srdf(ff, ss, t_arr)
        payload = ad.reshape(ad.concat([ff, ss], axis=1), (3, 4, 2))
        out, _ = rnd.composite(alpha, payload)
        return ad.tensor_sum(ad.mul(out, out))

    track(ad.gradcheck(alpha_comp, [f, s], eps=eps))

    # Image-space refinement (occlusion path included).
    cnn_u = rnd.RefineCNN(rng, 9, width=8)
    cnn_u.conv_out.w.data[:] = rng.normal(size=cnn_u.conv_out.w.shape) * 0.1
    cnn_o = rnd.OcclusionCNN(rng, 4, width=8)
    app = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
    occ_f = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
    low = Tensor(rng.uniform(0.3, 0.7, size=(1, 3, 6, 6)), requires_grad=True)

    def refine(a, o, lo):
        img, _, mask = rnd.refine_image(cnn_u, cnn_o, a, o, lo)
        return ad.add(ad.tensor_sum(ad.mul(img, img)), ad.tensor_sum(mask))

    track(ad.gradcheck(refine, [app, occ_f, low], eps=eps, max_coords=30,
                       rng=np.random.default_rng(1)))

    # The loss terms.
    gt_img = rng.uniform(0.2, 0.8, size=(6, 6, 3))
    pred = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)), requires_grad=True)
    mask = rng.uniform(size=(6, 6)) > 0.3
    track(ad.gradcheck(lambda p: ls.color_loss(p, gt_img, mask), pred, eps=eps))
    track(ad.gradcheck(lambda p: ls.percep_substitute(p, gt_img), pred, eps=eps,
                       max_coords=40, rng=np.random.default_rng(2)))
    gt_d = rng.uniform(1, 3, size=(6, 6))
    pred_d = Tensor(rng.uniform(1, 3, size=(1, 1, 6, 6)), requires_grad=True)
    track(ad.gradcheck(lambda p: ls.depth_loss(p, gt_d, mask), pred_d, eps=eps))
    gt1 = rng.normal(size=(3, 4))
    gt2 = rng.normal(size=(3, 2))
    f1 = Tensor(rng.normal(size=(12, 1)), requires_grad=True)
    f2 = Tensor(rng.normal(size=(6, 1)), requires_grad=True)
    m = np.array([True, True, False])
    track(ad.gradcheck(lambda a, b: ls.srdf_loss(a, gt1, m, b, gt2, m), [f1, f2], eps=eps))
    return worst


def _sq(t):
    return ad.tensor_sum(ad.mul(t, t))


def test_criterion_3_gradient_suite():
    t_start = time.perf_counter()
    with ad.precision("float64"):
        worst_double = _gradient_suite(eps=1e-4)
    worst_single = _gradient_suite(eps=1e-3)
    elapsed = time.perf_counter() - t_start
    ok = worst_double < 1e-5 and worst_single < 1e-2 and elapsed < 60.0
    record_acceptance(
        "3 gradient suite",
        ok, f"double {worst_double:.2e} < 1e-5, single {worst_single:.2e} < 1e-2, "
            f"{elapsed:.1f}s")
    assert worst_double < 1e-5
    assert worst_single < 1e-2
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# criterion 4: sampling-guidance correctness


def _guide(t, f, c, r_min=0.01):
    t = np.asarray(t, dtype=np.float64)[None, :]
    origins = np.zeros((1, 3))
    dirs = np.array([[0.0, 0.0, 1.0]])
    rays = RayBundle(origins, dirs, np.zeros((1, 2)), 1, 1)
    batch = smp.RaySampleBatch(np.array([0]), t,
                               origins[0] + t[..., None] * dirs[0], dirs)
    return smp.regress_guidance(batch, np.asarray(f, dtype=np.float64)[None, :],
                                np.asarray(c, dtype=np.float64)[None, :],
                                origins, r_min=r_min)


def test_criterion_4_sampling_guidance():
    # The three analytic examples, exact (rays from the origin, samples at t=0
    # so the regressed distances are the full surface estimates).
    g1 = _guide([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], [1.0, 1.0, 1.0])
    ex1 = (np.array_equal(g1.centers[0], [0.0, 0.0, 2.0]) and g1.radius[0] == 0.01)
    g2 = _guide([0.0, 0.0], [1.0, 3.0], [1.0, 1.0])
    ex2 = (np.array_equal(g2.centers[0], [0.0, 0.0, 2.0]) and g2.radius[0] == 1.0)
    g3 = _guide([0.0, 0.0], [1.0, 9.0], [1.0, 0.0])
    ex3 = (np.array_equal(g3.centers[0], [0.0, 0.0, 1.0]) and g3.radius[0] == 0.01)

    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        t = np.sort(rng.uniform(0.5, 3.0, size=8))
        f = rng.normal(size=8)
        c = rng.uniform(0.05, 1.0, size=8)
        scale = rng.uniform(0.1, 50.0)
        a = _guide(t, f, c)
        b = _guide(t, f, c * scale)
        worst = max(worst, abs(a.t_center[0] - b.t_center[0]),
                    abs(a.radius[0] - b.radius[0]))
    scale_ok = worst < 1e-6
    record_acceptance("4 sampling-guidance correctness",
                      ex1 and ex2 and ex3 and scale_ok,
                      f"examples exact, scale invariance {worst:.1e} < 1e-6")
    assert ex1 and ex2 and ex3
    assert scale_ok


# ---------------------------------------------------------------------------
# criterion 5: end-to-end toy reproduction (and 6b on the same checkpoint)


@pytest.fixture(scope="module")
def toy_reproduction():
    t_start = time.perf_counter()
    scene = generate_scene(ACCEPT_SCENE)
    model = pl.RenderModel(pl.ModelConfig(**ACCEPT_MODEL), seed=0)
    trainer = tr.Trainer(model, scene, tr.TrainConfig(**ACCEPT_TRAIN), ls.LossWeights())
    trainer.run()
    elapsed = time.perf_counter() - t_start
    return scene, model, trainer, elapsed


@pytest.mark.slow
def test_criterion_5_toy_reproduction(toy_reproduction):
    scene, model, trainer, elapsed = toy_reproduction
    target = trainer.eval_targets[0]
    rows, results = tr.evaluate(model, scene, trainer.prep, [target])
    psnr_db = rows[1].psnr_db
    res = results[target]
    gt_d = scene.gt_depth_low(target)
    hit = scene.gt_hit_mask_low(target) & res.valid_mask
    depth_mae = float(np.abs(res.depth.data[0, 0] - gt_d)[hit].mean())
    mae_frac = depth_mae / scene.scene_scale
    ok = psnr_db >= PSNR_FLOOR_DB and mae_frac <= DEPTH_MAE_FRAC and elapsed < 1800
    record_acceptance(
        "5 end-to-end toy reproduction",
        ok, f"held-out psnr {psnr_db:.2f} dB >= {PSNR_FLOOR_DB}, depth MAE "
            f"{100 * mae_frac:.2f}% <= {100 * DEPTH_MAE_FRAC}%, train {elapsed:.0f}s")
    assert psnr_db >= PSNR_FLOOR_DB
    assert mae_frac <= DEPTH_MAE_FRAC
    assert elapsed < 1800


@pytest.mark.slow
def test_criterion_6a_supervision_ordering():
    # Table-4-style trend at a reduced protocol: SRDF+depth >= depth-only >=
    # no-geometry supervision on the held-out view.
    spec = SceneSpec(primitives=capsule_person(), image_size=64, n_input_views=4,
                     n_target_views=4, proxy_subdiv=1, true_subdiv=3)
    results = {}
    for mode, (use_depth, use_srdf) in (("srdf", (True, True)),
                                        ("depth", (True, False)),
                                        ("none", (False, False))):
        scene = generate_scene(spec)
        model = pl.RenderModel(pl.ModelConfig(k_guidance=16, l_render=8,
                                              volume_res=48, s_init=0.08), seed=0)
        trainer = tr.Trainer(model, scene,
                             tr.TrainConfig(steps=600, crop=32, seed=0, lr=1e-3,
                                            depth_supervision=use_depth,
                                            srdf_supervision=use_srdf),
                             ls.LossWeights())
        trainer.run()
        rows, _ = tr.evaluate(model, scene, trainer.prep, [trainer.eval_targets[0]])
        results[mode] = rows[1].psnr_db
    ok = results["srdf"] >= results["depth"] >= results["none"]
    record_acceptance(
        "6a supervision ordering",
        ok, f"srdf {results['srdf']:.2f} >= depth {results['depth']:.2f} >= "
            f"none {results['none']:.2f} dB")
    assert ok


@pytest.mark.slow
def test_criterion_6b_sample_count_robustness(toy_reproduction):
    scene, model, trainer, _ = toy_reproduction
    target = trainer.eval_targets[0]
    gt = scene.gt_image(target)
    mask = scene.fg_mask(target)

    def render_at(k, l):
        t0 = time.perf_counter()
        res = tr.render_full_view(model, scene, trainer.prep, target, k=k, l=l)
        dt = time.perf_counter() - t0
        pred = res.image.data[0].transpose(1, 2, 0).astype(np.float64)
        return ls.psnr(pred, gt, mask), dt

    full, t_full = render_at(16, 8)
    reduced, t_reduced = render_at(4, 2)
    ok = reduced >= full - 1.0 and t_reduced < t_full
    record_acceptance("6b sample-count robustness",
                      ok, f"(4,2) {reduced:.2f} dB vs (16,8) {full:.2f} dB; "
                          f"frame {t_reduced:.2f}s vs {t_full:.2f}s")
    assert reduced >= full - 1.0
    assert t_reduced < t_full  # fewer samples render faster on the same scene


def test_criterion_6c_query_counter():
    scene = generate_scene(SceneSpec(primitives=(Sphere((0.0, 0.0, 0.0), 0.5),),
                                     image_size=32, n_input_views=3,
                                     n_target_views=1, proxy_subdiv=1, true_subdiv=2))
    model = pl.RenderModel(small_model_config(k_guidance=16, l_render=8), seed=0)
    prep = pl.prepare_scene(model, scene)
    ctx = pl.build_context(model, scene, prep)
    res = pl.render_view(model, scene, prep, ctx, 0)
    per_ray = res.counter.per_ray()
    valid = res.valid_mask.ravel()
    ok = bool((per_ray[valid] == 24).all() and (per_ray[~valid] == 0).all())
    record_acceptance("6c query counter", ok,
                      f"{int(valid.sum())} rays at 24 queries, "
                      f"{int((~valid).sum())} background at 0")
    assert ok


# ---------------------------------------------------------------------------
# criterion 7: occlusion machinery


def test_criterion_7_occlusion_machinery():
    scene = generate_scene(SceneSpec(primitives=two_sphere_occluder(), image_size=64,
                                     n_input_views=3, n_target_views=1,
                                     proxy_subdiv=1, true_subdiv=2))
    target = scene.target_cameras[0]
    inputs = scene.input_cameras

    mask_fast = occ.gt_occlusion_mask(scene.true_mesh, target, inputs, stride=2)
    mask_brute = occ.brute_force_occlusion_mask(scene.true_mesh, target, inputs, stride=2)
    exact = bool(np.array_equal(mask_fast, mask_brute))

    # Separation AUC: min over views of the observed-position distance,
    # evaluated on proxy-mesh position maps at true first-hit points.
    rays = generate_rays(target, stride=2)
    t_pad, _, counts = geo.ray_mesh_intersections_batch(scene.true_mesh, rays.origins,
                                                        rays.directions)
    hit = counts > 0
    points = (rays.origins + t_pad[:, 0][:, None] * rays.directions)[hit]
    labels = mask_fast.ravel()[hit]
    target_map = occ.render_position_map(scene.proxy_mesh, target, stride=2)
    input_maps = [occ.render_position_map(scene.proxy_mesh, cam, stride=2)
                  for cam in inputs]
    _, _, dists = occ.occlusion_features(points, target_map, input_maps,
                                         d_max=scene.scene_scale)
    scores = dists.min(axis=1)
    auc = _rank_auc(scores[labels], scores[~labels])
    ok = exact and labels.any() and (~labels).any() and auc > 0.95
    record_acceptance("7 occlusion machinery",
                      ok, f"gt mask exact match, separation AUC {auc:.3f} > 0.95")
    assert exact
    assert auc > 0.95


def _rank_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with tie credit."""
    all_scores = np.concatenate([pos, neg])
    order = np.argsort(all_scores, kind="stable")
    ranks = np.empty(len(all_scores))
    ranks[order] = np.arange(1, len(all_scores) + 1)
    # average ranks over ties
    sorted_scores = all_scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    n_p, n_n = len(pos), len(neg)
    return float((r_pos - n_p * (n_p + 1) / 2.0) / (n_p * n_n))


# ---------------------------------------------------------------------------
# criterion 8: determinism


def test_criterion_8_determinism(tmp_path):
    def run(out):
        scene = generate_scene(SceneSpec(primitives=(Sphere((0.0, 0.0, 0.0), 0.5),),
                                         image_size=32, n_input_views=3,
                                         n_target_views=2, proxy_subdiv=1,
                                         true_subdiv=2))
        model = pl.RenderModel(small_model_config(), seed=0)
        trainer = tr.Trainer(model, scene,
                             tr.TrainConfig(steps=40, crop=16, seed=123,
                                            checkpoint_every=0),
                             ls.LossWeights(), out_dir=out)
        trainer.run()
        tr.evaluate(model, scene, trainer.prep, trainer.eval_targets, out_dir=out)
        return ((out / "final.ckpt").read_bytes(), (out / "metrics.csv").read_bytes())

    ckpt_a, csv_a = run(tmp_path / "a")
    ckpt_b, csv_b = run(tmp_path / "b")
    ok = ckpt_a == ckpt_b and csv_a == csv_b
    record_acceptance("8 determinism",
                      ok, f"checkpoints {len(ckpt_a)} bytes identical, CSV identical")
    assert ckpt_a == ckpt_b
    assert csv_a == csv_b
