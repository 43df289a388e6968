"""Command-line entry points: gen-scene, train, eval, bench, gradcheck.

Configuration comes from a TOML file with [scene], [model], [train], and
[loss] tables; a handful of flags override the common knobs.  Every command
writes its artifacts under a run directory together with a snapshot of the
resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import geometry, losses, pipeline as pl, train as tr
from .camera import save_cameras
from .imgio import save_pfm, save_png
from .scenes import (Capsule, SceneSpec, Sphere, capsule_person, generate_scene,
                     two_sphere_occluder)

_SCENE_KINDS = {
    "capsule_person": capsule_person,
    "two_sphere_occluder": two_sphere_occluder,
    "sphere": lambda: (Sphere((0.0, 0.0, 0.0), 0.5),),
}


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _primitives_from_config(scene_cfg: dict):
    kind = scene_cfg.get("kind", "capsule_person")
    if kind == "custom":
        prims = []
        for p in scene_cfg.get("spheres", []):
            prims.append(Sphere(tuple(p["center"]), p["radius"],
                                tuple(p.get("color", (0.8, 0.5, 0.35)))))
        for p in scene_cfg.get("capsules", []):
            prims.append(Capsule(tuple(p["p0"]), tuple(p["p1"]), p["radius"],
                                 tuple(p.get("color", (0.8, 0.5, 0.35)))))
        return tuple(prims)
    if kind not in _SCENE_KINDS:
        raise SystemExit(f"unknown scene kind {kind!r}; options: "
                         f"{sorted(_SCENE_KINDS)} or 'custom'")
    return _SCENE_KINDS[kind]()


def build_scene_spec(cfg: dict) -> SceneSpec:
    scene_cfg = dict(cfg.get("scene", {}))
    prims = _primitives_from_config(scene_cfg)
    kwargs = {k: v for k, v in scene_cfg.items()
              if k in SceneSpec.__dataclass_fields__ and k != "primitives"}
    for key in ("light_dir", "background"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SceneSpec(primitives=prims, **kwargs)


def build_model_config(cfg: dict) -> pl.ModelConfig:
    model_cfg = {k: v for k, v in cfg.get("model", {}).items()
                 if k in pl.ModelConfig.__dataclass_fields__}
    if "background" in model_cfg:
        model_cfg["background"] = tuple(model_cfg["background"])
    return pl.ModelConfig(**model_cfg)


def build_train_config(cfg: dict, seed_override=None) -> tr.TrainConfig:
    train_cfg = {k: v for k, v in cfg.get("train", {}).items()
                 if k in tr.TrainConfig.__dataclass_fields__}
    if "train_targets" in train_cfg and train_cfg["train_targets"] is not None:
        train_cfg["train_targets"] = tuple(train_cfg["train_targets"])
    if "betas" in train_cfg:
        train_cfg["betas"] = tuple(train_cfg["betas"])
    if seed_override is not None:
        train_cfg["seed"] = seed_override
    return tr.TrainConfig(**train_cfg)


def build_loss_weights(cfg: dict) -> losses.LossWeights:
    loss_cfg = {k: v for k, v in cfg.get("loss", {}).items()
                if k in losses.LossWeights.__dataclass_fields__}
    return losses.LossWeights(**loss_cfg)


def _snapshot(out_dir: Path, config_path, cfg: dict, extras: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if config_path is not None:
        shutil.copy(config_path, out_dir / "config.toml")
    resolved = {"config": cfg, **extras}
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True, default=str)


def cmd_gen_scene(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    spec = build_scene_spec(cfg)
    scene = generate_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, args.config, cfg, {"scene_scale": scene.scene_scale})
    geometry.save_obj(out / "true_mesh.obj", scene.true_mesh)
    geometry.save_obj(out / "proxy_mesh.obj", scene.proxy_mesh)
    save_cameras(out / "input_cameras.json", scene.input_cameras)
    save_cameras(out / "target_cameras.json", scene.target_cameras)
    for i, img in enumerate(scene.images):
        save_png(out / f"input{i}.png", img)
    for i in range(len(scene.target_cameras)):
        save_png(out / f"target{i}_gt.png", scene.gt_image(i))
        save_pfm(out / f"target{i}_depth.pfm", scene.gt_depth_low(i))
    print(f"scene written to {out} (scale {scene.scene_scale:.3f}, "
          f"{scene.true_mesh.n_faces} true faces, {scene.proxy_mesh.n_faces} proxy faces)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    spec = build_scene_spec(cfg)
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg, seed_override=args.seed)
    weights = build_loss_weights(cfg)
    out = Path(args.out)
    _snapshot(out, args.config, cfg, {
        "model": asdict(model_cfg), "train": asdict(train_cfg), "loss": asdict(weights),
    })
    scene = generate_scene(spec)
    model = pl.RenderModel(model_cfg, seed=train_cfg.seed)
    trainer = tr.Trainer(model, scene, train_cfg, weights, out_dir=out)
    reports = trainer.run()
    print(f"trained {train_cfg.steps} steps; "
          f"first loss {reports[0].total:.4f}, last loss {reports[-1].total:.4f}")
    rows, _ = tr.evaluate(model, scene, trainer.prep, trainer.eval_targets, out_dir=out)
    for row in rows:
        print(f"  {row.view_id}: psnr {row.psnr_db:.2f} dB, ssim {row.ssim:.4f}")
    return 0


def _load_model_for_eval(args, cfg):
    spec = build_scene_spec(cfg)
    model_cfg = build_model_config(cfg)
    scene = generate_scene(spec)
    model = pl.RenderModel(model_cfg, seed=build_train_config(cfg).seed)
    tr.load_checkpoint(args.checkpoint, model)
    prep = pl.prepare_scene(model, scene)
    return scene, model, prep


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    scene, model, prep = _load_model_for_eval(args, cfg)
    out = Path(args.out)
    _snapshot(out, args.config, cfg, {"checkpoint": args.checkpoint})
    targets = list(range(len(scene.target_cameras))) if args.all_views else \
        [len(scene.target_cameras) - 1]
    rows, _ = tr.evaluate(model, scene, prep, targets, out_dir=out)
    for row in rows:
        print(f"{row.view_id}: psnr {row.psnr_db:.2f} dB, ssim {row.ssim:.4f}, "
              f"fg {row.n_fg_pixels}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    scene, model, prep = _load_model_for_eval(args, cfg)
    out = Path(args.out)
    _snapshot(out, args.config, cfg, {"checkpoint": args.checkpoint, "mode": args.mode})
    report = tr.benchmark(model, scene, prep, args.mode)
    with open(out / f"bench_{args.mode}.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    """Run the double-precision gradient suite over every trainable block."""
    from . import autodiff as ad
    from . import nn
    from . import renderer as rnd
    from . import encoder as enc

    failures = []
    with ad.precision("float64"):
        rng = np.random.default_rng(0)

        def check(name, fn, xs, **kw):
            err = ad.gradcheck(fn, xs, **kw)
            status = "ok" if err < 1e-5 else "FAIL"
            print(f"  {name:<26s} max rel err {err:.3e}  [{status}]")
            if err >= 1e-5:
                failures.append(name)

        mlp = nn.MLP(rng, [6, 12, 12, 2])
        x = ad.Tensor(rng.uniform(0.2, 1.0, size=(5, 6)), requires_grad=True)
        check("mlp", lambda t: ad.tensor_sum(ad.mul(mlp(t), mlp(t))), x, eps=1e-4)

        att = nn.Attention(rng, q_in=4, k_in=5, v_in=5, out_dim=3, dim=8)
        q = ad.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        kf = ad.Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True)
        check("attention", lambda a, b: ad.tensor_sum(ad.mul(att(a, b, b), att(a, b, b))),
              [q, kf], eps=1e-4)

        f = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        s = ad.Tensor(rng.uniform(0.3, 1.0, size=(3, 4)), requires_grad=True)
        t = np.sort(rng.uniform(1, 2, size=(3, 4)), axis=1)

        def alpha_comp(ff, ss):
            alpha = rnd.alpha_from_srdf(ff, ss, t)
            payload = ad.reshape(ad.concat([ff, ss], axis=1), (3, 4, 2))
            out, _ = rnd.composite(alpha, payload)
            return ad.tensor_sum(ad.mul(out, out))

        check("alpha+composite", alpha_comp, [f, s], eps=1e-4)

        cnn_u = rnd.RefineCNN(rng, 4, width=8)
        cnn_u.conv_out.w.data[:] = rng.normal(size=cnn_u.conv_out.w.shape) * 0.1
        app = ad.Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
        low = ad.Tensor(rng.uniform(0.3, 0.7, size=(1, 3, 6, 6)), requires_grad=True)

        def refine(a, lo):
            img, _, _ = rnd.refine_image(cnn_u, None, a, None, lo)
            return ad.tensor_sum(ad.mul(img, img))

        check("refine_image", refine, [app, low], eps=1e-4, max_coords=40)
    if failures:
        print(f"gradcheck failures: {failures}")
        return 1
    print("gradcheck suite passed")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="shellrender",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene to disk")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="train a model on a synthetic scene")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out views")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--all-views", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="benchmark sample counts / shells / formulation")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--mode", choices=("samples", "shells", "formulation"),
                   default="samples")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="run the double-precision gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
