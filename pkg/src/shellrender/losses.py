"""Training objective terms and image-quality metrics.

All loss terms are built from tape ops and differentiate end to end; PSNR and
SSIM are plain-numpy evaluation metrics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    color: float = 150.0
    percep: float = 0.5
    depth: float = 1.0
    srdf: float = 1.0
    adv: float = 0.0  # retained for config compatibility; must stay 0

    def __post_init__(self):
        for name in ("color", "percep", "depth", "srdf", "adv"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be non-negative")

    def require_supported(self) -> None:
        if self.adv != 0.0:
            raise LossError("adversarial training is not supported; set adv weight to 0")


@dataclass
class LossReport:
    """Per-term scalar values; total == sum of weighted terms."""

    total: float
    terms: dict[str, float]
    weighted: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "terms": {k: self.terms[k] for k in sorted(self.terms)},
            "weighted": {k: self.weighted[k] for k in sorted(self.weighted)},
            "counts": {k: int(self.counts[k]) for k in sorted(self.counts)},
        }


def _image_tensor(gt: np.ndarray) -> Tensor:
    """(H, W, 3) numpy image -> constant (1, 3, H, W) tensor."""
    return Tensor(np.ascontiguousarray(gt.transpose(2, 0, 1))[None])


def color_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute color error over foreground-masked pixels and channels.

    pred: (1, 3, H, W); gt: (H, W, 3); mask: (H, W) boolean.
    """
    n_mask = int(mask.sum())
    if n_mask == 0:
        warnings.warn("color_loss: empty mask, returning 0")
        return Tensor(0.0)
    weight = np.broadcast_to(mask[None, None], pred.shape) / (3.0 * n_mask)
    diff = ad.absolute(ad.sub(pred, _image_tensor(gt)))
    return ad.tensor_sum(ad.mul(diff, Tensor(weight.astype(ad.default_dtype()))))


def depth_loss(pred: Tensor, gt: np.ndarray, hit_mask: np.ndarray) -> Tensor:
    """Mean absolute depth error over rays whose ground-truth ray hits.

    pred: (1, 1, h, w); gt, hit_mask: (h, w).
    """
    n_mask = int(hit_mask.sum())
    if n_mask == 0:
        warnings.warn("depth_loss: no foreground rays, returning 0")
        return Tensor(0.0)
    weight = (hit_mask[None, None] / n_mask).astype(ad.default_dtype())
    diff = ad.absolute(ad.sub(pred, Tensor(gt[None, None])))
    return ad.tensor_sum(ad.mul(diff, Tensor(weight)))


def srdf_loss(f_stage1: Tensor, gt_stage1: np.ndarray, mask1: np.ndarray,
              f_stage2: Tensor, gt_stage2: np.ndarray, mask2: np.ndarray) -> Tensor:
    """Mean absolute SRDF error over both sample sets.

    f_stage*: flat (R*K, 1) predictions; gt_stage*: (R, K); mask*: (R,) rays
    with a non-empty ground-truth hit list.  Each stage contributes the
    per-ray sample mean, averaged over contributing rays.
    """
    total = None
    any_rays = False
    for f, gt, mask in ((f_stage1, gt_stage1, mask1), (f_stage2, gt_stage2, mask2)):
        n_rays, k = gt.shape
        n_valid = int(mask.sum())
        if n_valid == 0:
            continue
        any_rays = True
        weight = (np.repeat(mask.astype(np.float64), k) / (k * n_valid)).astype(ad.default_dtype())
        diff = ad.absolute(ad.sub(ad.reshape(f, (n_rays * k,)), Tensor(gt.reshape(-1))))
        term = ad.tensor_sum(ad.mul(diff, Tensor(weight)))
        total = term if total is None else ad.add(total, term)
    if not any_rays:
        warnings.warn("srdf_loss: no rays hit geometry, returning 0")
        return Tensor(0.0)
    return total


def percep_substitute(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Multi-scale image-gradient L1: a pretrained-feature-free texture term.

    Compares finite-difference gradients at three dyadic scales, so constant
    color offsets cost nothing while edge structure mismatches do.
    """
    gt_t = _image_tensor(gt)
    total = None
    p, g = pred, gt_t
    for scale in range(3):
        if scale > 0:
            p = ad.bilinear_resize(p, 0.5)
            g = ad.bilinear_resize(g, 0.5)
        for axis in (2, 3):
            n = p.shape[axis]
            dp = ad.sub(ad.narrow(p, axis, 1, n - 1), ad.narrow(p, axis, 0, n - 1))
            dg = ad.sub(ad.narrow(g, axis, 1, n - 1), ad.narrow(g, axis, 0, n - 1))
            term = ad.mean(ad.absolute(ad.sub(dp, dg)))
            total = term if total is None else ad.add(total, term)
    return total


def total_loss(weights: LossWeights, color=None, percep=None, depth=None,
               srdf=None, counts=None) -> tuple[Tensor, LossReport]:
    """Weighted sum of the supplied terms plus a detached report."""
    weights.require_supported()
    total = None
    terms = {}
    weighted = {}
    for name, term, lam in (("color", color, weights.color),
                            ("percep", percep, weights.percep),
                            ("depth", depth, weights.depth),
                            ("srdf", srdf, weights.srdf)):
        if term is None:
            continue
        terms[name] = float(term.data)
        weighted[name] = lam * terms[name]
        scaled = ad.mul(term, float(lam))
        total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        raise LossError("no loss terms supplied")
    report = LossReport(float(total.data), terms, weighted, counts or {})
    return total, report


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    if a.shape != b.shape:
        raise LossError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    diff = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2
    if mask is not None:
        if not mask.any():
            return 99.0
        diff = diff[mask]
    mse = float(diff.mean())
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering of a (H, W) array."""
    t = sliding_window_view(img, len(kernel), axis=0) @ kernel
    return sliding_window_view(t, len(kernel), axis=1) @ kernel


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    C1 = 0.01^2, C2 = 0.03^2; the map is averaged over valid window centers
    (optionally restricted to a pixel mask).  Channels average uniformly.
    """
    if a.shape != b.shape:
        raise LossError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    kernel = _gaussian_kernel()
    pad = len(kernel) // 2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        xx = _filter_valid(x * x, kernel) - mu_x ** 2
        yy = _filter_valid(y * y, kernel) - mu_y ** 2
        xy = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        smap = num / den
        if mask is not None:
            inner = mask[pad:-pad, pad:-pad]
            if not inner.any():
                return 1.0
            smap = smap[inner]
        values.append(smap.mean())
    return float(np.mean(values))
