"""Per-sample regression heads, SRDF-based opacity, alpha compositing, and the
image-space refinement CNNs.

Opacity uses the ratio-of-sigmoid discretization: a sample absorbs in
proportion to how much the sigmoid of its signed ray distance drops before
the next sample.  Compositing is shared between the SRDF and density
formulations; only the per-sample opacity differs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

_PHI_EPS = 1e-12
_KERNEL_FLOOR = 1e-4


class GuidanceHead(nn.Module):
    """3-layer MLP from (geometry feature, ray direction) to (SRDF, confidence)."""

    def __init__(self, rng, g_dim: int, hidden: int = 64):
        self.mlp = nn.MLP(rng, [g_dim + 3, hidden, hidden, 2])

    def __call__(self, g: Tensor, dirs: np.ndarray):
        out = self.mlp(ad.concat([g, Tensor(dirs)], axis=1))
        f = ad.narrow(out, 1, 0, 1)
        # Keep confidence strictly inside (0, 1); float32 sigmoid saturates.
        c = ad.clamp(ad.sigmoid(ad.narrow(out, 1, 1, 1)), 1e-6, 1.0 - 1e-6)
        return f, c


class GeometryHead(nn.Module):
    """3-layer MLP to (SRDF, kernel size); the kernel stays positive.

    ``s_init`` biases the kernel channel so an untrained head starts near a
    given kernel size (sharpness should start near the sampling-band scale
    rather than softplus(0) ~ 0.69).
    """

    def __init__(self, rng, g_dim: int, hidden: int = 64, s_init: float | None = None):
        self.mlp = nn.MLP(rng, [g_dim + 3, hidden, hidden, 2])
        if s_init is not None:
            raw = np.log(np.expm1(max(s_init - _KERNEL_FLOOR, 1e-3)))
            self.mlp.layers[-1].b.data[1] = raw

    def __call__(self, g: Tensor, dirs: np.ndarray):
        out = self.mlp(ad.concat([g, Tensor(dirs)], axis=1))
        f = ad.narrow(out, 1, 0, 1)
        s = ad.add(ad.softplus(ad.narrow(out, 1, 1, 1)), _KERNEL_FLOOR)
        return f, s


class ColorHead(nn.Module):
    """3-layer MLP from the appearance feature to RGB in (0, 1)."""

    def __init__(self, rng, a_dim: int, hidden: int = 64):
        self.mlp = nn.MLP(rng, [a_dim, hidden, hidden, 3])

    def __call__(self, a: Tensor) -> Tensor:
        return ad.sigmoid(self.mlp(a))


# ---------------------------------------------------------------------------
# opacity


def alpha_from_srdf(f: Tensor, s: Tensor, t: np.ndarray,
                    radius: np.ndarray | None = None) -> Tensor:
    """Per-sample opacity from signed ray distances.

    f, s: (R, L) tensors; t: (R, L) sample parameters (ascending).  Each
    sample's opacity is the relative sigmoid drop toward the next sample,
    clamped to [0, 1).  The last sample extrapolates the SRDF linearly by its
    trailing spacing; with a single sample per ray the window is treated as a
    slab of width 2 * radius.
    """
    n_rays, n_samples = f.shape
    if n_samples == 1:
        if radius is None:
            raise ValueError("single-sample opacity needs the window radius")
        shifted = ad.sub(f, Tensor(2.0 * radius[:, None]))
        return ad.relu(ad.sub(1.0, _phi(shifted, s)))
    delta_last = (t[:, -1] - t[:, -2])[:, None]
    f_last = ad.sub(ad.narrow(f, 1, n_samples - 1, 1), Tensor(delta_last))
    f_next = ad.concat([ad.narrow(f, 1, 1, n_samples - 1), f_last], axis=1)
    phi_cur = _phi(f, s)
    phi_next = _phi(f_next, s)
    ratio = ad.divide(ad.sub(phi_cur, phi_next), ad.add(phi_cur, _PHI_EPS))
    return ad.relu(ratio)


def _phi(f: Tensor, s: Tensor) -> Tensor:
    return ad.sigmoid(ad.divide(f, s))


def alpha_from_density(raw: Tensor, t: np.ndarray, radius: np.ndarray | None = None) -> Tensor:
    """NeRF-style opacity 1 - exp(-sigma * delta) for the density ablation."""
    n_samples = raw.shape[1]
    sigma = ad.softplus(raw)
    if n_samples == 1:
        if radius is None:
            raise ValueError("single-sample opacity needs the window radius")
        delta = 2.0 * radius[:, None]
    else:
        gaps = np.diff(t, axis=1)
        delta = np.concatenate([gaps, gaps[:, -1:]], axis=1)
    return ad.sub(1.0, ad.exp(ad.neg(ad.mul(sigma, Tensor(delta)))))


# ---------------------------------------------------------------------------
# compositing


@dataclass
class CompositeWeights:
    """Forward-pass compositing state for invariant checks."""

    alpha: np.ndarray          # (R, L)
    transmittance: np.ndarray  # (R, L + 1); T_1 = 1
    weights: np.ndarray        # (R, L) = T_l * alpha_l

    def check(self, tol: float = 1e-6) -> None:
        if self.alpha.min() < -tol or self.alpha.max() > 1 + tol:
            raise AssertionError(f"alpha out of [0,1]: [{self.alpha.min()}, {self.alpha.max()}]")
        if np.any(np.diff(self.transmittance, axis=1) > tol):
            raise AssertionError("transmittance increased along a ray")
        wsum = self.weights.sum(axis=1)
        if wsum.min() < -tol or wsum.max() > 1 + tol:
            raise AssertionError(f"weight sum out of [0,1]: [{wsum.min()}, {wsum.max()}]")


def composite(alpha: Tensor, payload: Tensor) -> tuple[Tensor, CompositeWeights]:
    """Front-to-back alpha compositing: sum_l T_l alpha_l x_l.

    alpha: (R, L); payload: (R, L, C).  Differentiable in both.  Also returns
    the forward weights for invariant checking.
    """
    n_rays, n_samples = alpha.shape
    channels = payload.shape[2]
    out = None
    trans = None
    t_log = [np.ones(n_rays)]
    w_log = []
    for l in range(n_samples):
        a_l = ad.narrow(alpha, 1, l, 1)  # (R, 1)
        w_l = a_l if trans is None else ad.mul(trans, a_l)
        w_log.append(w_l.data[:, 0].copy())
        x_l = ad.reshape(ad.narrow(payload, 1, l, 1), (n_rays, channels))
        term = ad.mul(ad.expand(ad.reshape(w_l, (n_rays,)), 1, channels), x_l)
        out = term if out is None else ad.add(out, term)
        keep = ad.sub(1.0, a_l)
        trans = keep if trans is None else ad.mul(trans, keep)
        t_log.append(trans.data[:, 0].copy())
    weights = CompositeWeights(alpha.data.copy(), np.stack(t_log, axis=1),
                               np.stack(w_log, axis=1))
    return out, weights


# ---------------------------------------------------------------------------
# image-space refinement


class OcclusionCNN(nn.Module):
    """Occlusion-mask predictor: conv, residual block, 2x transposed conv,
    1x1 conv with sigmoid."""

    def __init__(self, rng, in_channels: int, width: int = 24):
        self.conv_in = nn.Conv2d(rng, in_channels, width)
        self.res1 = nn.Conv2d(rng, width, width)
        self.res2 = nn.Conv2d(rng, width, width)
        self.up = nn.ConvTranspose2d(rng, width, width)
        self.conv_out = nn.Conv2d(rng, width, 1, k=1, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.conv_in(x))
        r = self.res2(ad.relu(self.res1(h)))
        h = ad.relu(ad.add(h, r))
        h = ad.relu(self.up(h))
        return ad.sigmoid(self.conv_out(h))


class RefineCNN(nn.Module):
    """Upsampling decoder for the composited feature buffers.

    The final layer starts at zero, so an untrained network reduces to the
    bilinear-upsampled low-resolution image (pure residual path).
    """

    def __init__(self, rng, in_channels: int, width: int = 32):
        self.conv1 = nn.Conv2d(rng, in_channels, width)
        self.conv2 = nn.Conv2d(rng, width, width)
        self.up = nn.ConvTranspose2d(rng, width, width // 2)
        self.conv_out = nn.Conv2d(rng, width // 2, 3, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.conv1(x))
        h = ad.relu(self.conv2(h))
        h = ad.relu(self.up(h))
        return self.conv_out(h)


def refine_image(cnn_u: RefineCNN, cnn_o: OcclusionCNN | None,
                 app: Tensor, occ_feat: Tensor | None, low_rgb: Tensor):
    """Full-resolution image from half-resolution buffers.

    app/occ_feat/low_rgb: (1, C, h, w).  Returns (image, pre-clamp image,
    occlusion mask or None); the image is the CNN residual plus the
    2x-upsampled low-res RGB, clamped to [0, 1].
    """
    occ_mask = None
    if cnn_o is not None:
        if occ_feat is None:
            raise ValueError("occlusion mode needs the composited occlusion features")
        occ_mask = cnn_o(occ_feat)
        u_in = ad.concat([app, occ_feat, ad.bilinear_resize(occ_mask, 0.5)], axis=1)
    else:
        u_in = app
    residual = cnn_u(u_in)
    upsampled = ad.bilinear_resize(low_rgb, 2)
    pre_clamp = ad.add(residual, upsampled)
    return ad.clamp(pre_clamp, 0.0, 1.0), pre_clamp, occ_mask
