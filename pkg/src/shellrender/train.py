"""Training loop, evaluation, and benchmark modes.

Each training step renders one random low-resolution crop of a random
training target view, applies the weighted objective, and takes an Adam step.
Evaluation renders held-out views at full frame and reports PSNR/SSIM over
the foreground mask.  Everything is deterministic given (seed, config,
scene); only wall-clock fields vary between runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import pipeline as pl
from .autodiff import Tape
from .imgio import save_pfm, save_png
from .nn import Adam
from .scenes import SceneData


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    crop: int = 64                  # low-resolution crop extent per step
    checkpoint_every: int = 500
    train_targets: tuple[int, ...] | None = None  # default: all but the last
    depth_supervision: bool = True
    srdf_supervision: bool = True
    jitter: bool = False
    lr_schedule: str = "constant"  # or "cosine"
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.crop < 2:
            raise ValueError("steps >= 1 and crop >= 2 required")


def effective_weights(weights: ls.LossWeights, config: TrainConfig) -> ls.LossWeights:
    """Apply the supervision ablation flags to the loss weights."""
    return ls.LossWeights(
        color=weights.color,
        percep=weights.percep,
        depth=weights.depth if config.depth_supervision else 0.0,
        srdf=weights.srdf if config.srdf_supervision else 0.0,
        adv=weights.adv,
    )


class Trainer:
    def __init__(self, model: pl.RenderModel, scene: SceneData, config: TrainConfig,
                 weights: ls.LossWeights, out_dir=None):
        weights.require_supported()
        if model.config.formulation != "srdf" and config.srdf_supervision and weights.srdf > 0:
            raise TrainingError("the SRDF loss requires the srdf formulation")
        self.model = model
        self.scene = scene
        self.config = config
        self.weights = effective_weights(weights, config)
        if self.weights.depth == 0.0 and self.weights.srdf == 0.0:
            scene.without_geometry()
        self.prep = pl.prepare_scene(model, scene)
        self.opt = Adam(model.parameters(), lr=config.lr, betas=config.betas,
                        eps=config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.step = 0
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "train_log.jsonl", "w")
        n_targets = len(scene.target_cameras)
        if config.train_targets is not None:
            self.train_targets = list(config.train_targets)
        else:
            self.train_targets = list(range(max(n_targets - 1, 1)))
        self.eval_targets = [i for i in range(n_targets) if i not in self.train_targets]

    # -- one optimization step ------------------------------------------------

    def train_step(self) -> ls.LossReport:
        cfg = self.config
        target_idx = int(self.rng.integers(0, len(self.train_targets)))
        target = self.train_targets[target_idx]
        view = self.prep.targets[target]
        ch = min(cfg.crop, view.rays.n_v)
        cw = min(cfg.crop, view.rays.n_u)
        y0 = int(self.rng.integers(0, view.rays.n_v - ch + 1))
        x0 = int(self.rng.integers(0, view.rays.n_u - cw + 1))
        crop = pl.CropBox(y0, x0, ch, cw)

        if cfg.lr_schedule == "cosine":
            self.opt.lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * self.step / cfg.steps))
        t_start = time.perf_counter()
        self.opt.zero_grad()
        with Tape() as tape:
            ctx = pl.build_context(self.model, self.scene, self.prep)
            jitter_rng = self.rng if cfg.jitter else None
            res = pl.render_view(self.model, self.scene, self.prep, ctx, target,
                                 crop=crop, jitter_rng=jitter_rng)
            total, report = self._losses(res, target, crop)
            if not np.isfinite(report.total):
                self._dump_failure(res, report, target, crop)
                raise TrainingError(f"non-finite loss at step {self.step}: {report.total}")
            tape.backward(total)
        self.opt.step()
        self.step += 1
        report.counts["step"] = self.step
        if self._log_fh is not None and self.step % cfg.log_every == 0:
            entry = report.to_json_dict()
            entry["wall_time_s"] = time.perf_counter() - t_start
            self._log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._log_fh.flush()
        return report

    def _losses(self, res: pl.RenderResult, target: int, crop: pl.CropBox):
        scene = self.scene
        w = self.weights
        fy, fx = 2 * crop.y0, 2 * crop.x0
        fh, fw = 2 * crop.height, 2 * crop.width
        gt_img = scene.gt_image(target)[fy:fy + fh, fx:fx + fw]
        mask = scene.fg_mask(target)[fy:fy + fh, fx:fx + fw]

        # Both heads supervised: the refined image and the upsampled low-res
        # pass, so the volumetric path cannot hide behind the CNN.  Losses see
        # the pre-clamp image; a saturated clamp would zero the gradients.
        color_hi = ls.color_loss(res.image_pre_clamp, gt_img, mask)
        color_lo = ls.color_loss(ad.bilinear_resize(res.low_rgb, 2), gt_img, mask)
        color = ad.mul(ad.add(color_hi, color_lo), 0.5)
        percep = ls.percep_substitute(res.image_pre_clamp, gt_img) if w.percep > 0 else None

        depth = None
        srdf = None
        counts = {"fg_pixels": int(mask.sum()),
                  "rays": int(res.valid_mask.sum()),
                  "queries": int(res.counter.per_ray().sum())}
        if w.depth > 0:
            gt_d = scene.gt_depth_low(target)[crop.y0:crop.y0 + crop.height,
                                              crop.x0:crop.x0 + crop.width]
            hit = scene.gt_hit_mask_low(target)[crop.y0:crop.y0 + crop.height,
                                                crop.x0:crop.x0 + crop.width]
            depth = ls.depth_loss(res.depth, gt_d, hit & res.valid_mask)
        if w.srdf > 0 and res.stage1 is not None:
            ids1 = res.global_ray_ids[res.stage1.ray_ids]
            ids2 = res.global_ray_ids[res.stage2.ray_ids]
            gt1 = scene.gt_srdf(target, ids1, res.stage1.t)
            gt2 = scene.gt_srdf(target, ids2, res.stage2.t)
            m1 = scene.gt_hit_counts(target, ids1) > 0
            m2 = scene.gt_hit_counts(target, ids2) > 0
            srdf = ls.srdf_loss(res.stage1_f, gt1, m1, res.stage2_f, gt2, m2)
        return ls.total_loss(w, color=color, percep=percep, depth=depth, srdf=srdf,
                             counts=counts)

    def _dump_failure(self, res, report, target, crop):
        if self.out_dir is None:
            return
        np.savez(self.out_dir / f"failure_step{self.step}.npz",
                 step=self.step, target=target,
                 crop=np.array([crop.y0, crop.x0, crop.height, crop.width]),
                 terms=json.dumps(report.terms),
                 low_rgb=res.low_rgb.data, depth=res.depth.data)

    # -- driver ---------------------------------------------------------------

    def run(self) -> list[ls.LossReport]:
        reports = []
        for _ in range(self.config.steps):
            reports.append(self.train_step())
            if (self.out_dir is not None and self.config.checkpoint_every > 0
                    and self.step % self.config.checkpoint_every == 0):
                self.save_checkpoint(self.out_dir / f"step{self.step:06d}.ckpt")
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "final.ckpt")
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        return reports

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, self.model)

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None


def save_checkpoint(path, model: pl.RenderModel) -> None:
    ad.save_tensors(path, model.parameters())


def load_checkpoint(path, model: pl.RenderModel) -> None:
    state = ad.load_tensors(path)
    model.load_state(state)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    view_id: str
    psnr_db: float
    ssim: float
    n_fg_pixels: int


def render_full_view(model: pl.RenderModel, scene: SceneData, prep: pl.ScenePrep,
                     target: int, check_invariants: bool = False,
                     k: int | None = None, l: int | None = None) -> pl.RenderResult:
    ctx = pl.build_context(model, scene, prep)
    return pl.render_view(model, scene, prep, ctx, target,
                          check_invariants=check_invariants, k=k, l=l)


def evaluate(model: pl.RenderModel, scene: SceneData, prep: pl.ScenePrep,
             targets: list[int], out_dir=None, check_invariants: bool = True):
    """Render held-out targets; emit metrics and image artifacts.

    Metrics are computed over the foreground mask dilated by 2 px (the same
    mask the color loss uses); a gt-vs-gt sanity row caps at 99 dB.
    """
    rows = [EvalRow("gt_sanity", ls.psnr(scene.gt_image(targets[0]), scene.gt_image(targets[0])),
                    ls.ssim(scene.gt_image(targets[0]), scene.gt_image(targets[0])),
                    int(scene.fg_mask(targets[0]).sum()))]
    results = {}
    for target in targets:
        res = render_full_view(model, scene, prep, target, check_invariants=check_invariants)
        pred = res.image.data[0].transpose(1, 2, 0).astype(np.float64)
        gt = scene.gt_image(target)
        mask = scene.fg_mask(target)
        rows.append(EvalRow(f"view{target}", ls.psnr(pred, gt, mask),
                            ls.ssim(pred, gt, mask), int(mask.sum())))
        results[target] = res
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_png(out / f"view{target}_pred.png", pred)
            save_png(out / f"view{target}_low.png",
                     res.low_rgb.data[0].transpose(1, 2, 0))
            save_png(out / f"view{target}_gt.png", gt)
            save_pfm(out / f"view{target}_depth.pfm", res.depth.data[0, 0])
            if res.occ_mask is not None:
                save_pfm(out / f"view{target}_occlusion.pfm", res.occ_mask.data[0, 0])
    if out_dir is not None:
        write_metrics_csv(Path(out_dir) / "metrics.csv", rows)
    return rows, results


def write_metrics_csv(path, rows: list[EvalRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# metrics over foreground mask dilated by 2 px\n")
        fh.write("view_id,psnr_db,ssim,n_fg_pixels\n")
        for r in rows:
            fh.write(f"{r.view_id},{r.psnr_db:.6f},{r.ssim:.6f},{r.n_fg_pixels}\n")


# ---------------------------------------------------------------------------
# benchmarks


def benchmark(model: pl.RenderModel, scene: SceneData, prep: pl.ScenePrep,
              mode: str, target: int | None = None) -> dict:
    """Timing/quality sweeps: 'samples', 'shells', or 'formulation'."""
    target = target if target is not None else len(scene.target_cameras) - 1
    gt = scene.gt_image(target)
    mask = scene.fg_mask(target)

    def timed_render(m=model, p=prep, k=None, l=None):
        t0 = time.perf_counter()
        res = render_full_view(m, scene, p, target, k=k, l=l)
        dt = time.perf_counter() - t0
        pred = res.image.data[0].transpose(1, 2, 0).astype(np.float64)
        per_ray = res.counter.per_ray()
        valid = res.valid_mask.ravel()
        return {
            "wall_clock_s": dt,
            "psnr_db": ls.psnr(pred, gt, mask),
            "queries_per_ray": float(per_ray[valid].mean()) if valid.any() else 0.0,
            "mean_stage1_span": res.counter.mean_span(),
        }

    report = {"mode": mode, "target": target}
    if mode == "samples":
        sweeps = {}
        for k, l in ((4, 2), (8, 4), (16, 8)):
            sweeps[f"{k}x{l}"] = timed_render(k=k, l=l)
        report["sweeps"] = sweeps
    elif mode == "shells":
        report["shells_on"] = timed_render()
        off_cfg = pl.ModelConfig(**{**_config_dict(model.config), "boundary_meshes": False})
        off_model = pl.RenderModel(off_cfg, seed=0)
        for name, tensor in model.parameters().items():
            off_model.parameters()[name].data = tensor.data.copy()
        off_prep = pl.prepare_scene(off_model, scene)
        report["shells_off"] = timed_render(m=off_model, p=off_prep)
    elif mode == "formulation":
        report["srdf"] = timed_render()
        den_cfg = pl.ModelConfig(**{**_config_dict(model.config), "formulation": "density"})
        den_model = pl.RenderModel(den_cfg, seed=0)
        for name, tensor in model.parameters().items():
            den_model.parameters()[name].data = tensor.data.copy()
        den_prep = pl.prepare_scene(den_model, scene)
        report["density"] = timed_render(m=den_model, p=den_prep)
    else:
        raise ValueError(f"unknown benchmark mode {mode!r}")
    return report


def _config_dict(config: pl.ModelConfig) -> dict:
    return asdict(config)
