"""Differentiable training objectives for both stages.

Stage 1 (encoder-decoder): reconstruction (MSE + structural similarity +
Sobel gradient), cross-modal feature correlation, kernel distribution
distance, and a contrastive term.  Stage 2 (fusion layers): intensity and
max-gradient consistency against the pixelwise max of the sources, plus the
correlation term.  Sums in the source formulas are realized as means so loss
magnitudes stay resolution- and batch-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence

import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import DimensionError, ValidationError
from .kernels import KernelSpec, mmd_from_feature_maps

SOBEL_EPS = 1e-8
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


@dataclass
class LossReport:
    """Scalar objective plus detached per-term values for logging."""

    total: torch.Tensor
    components: Dict[str, float]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.components.values())


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, x_hat, "mse_loss")
    return F.mse_loss(x_hat, x)


def _gaussian_window(dtype, device) -> torch.Tensor:
    coords = torch.arange(_SSIM_WINDOW, dtype=dtype, device=device) - (_SSIM_WINDOW - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * _SSIM_SIGMA ** 2))
    g = g / g.sum()
    return (g[:, None] @ g[None, :])[None, None]


def ssim_index(x: torch.Tensor, y: torch.Tensor,
               c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> torch.Tensor:
    """Mean local structural similarity over an 11x11 Gaussian window (sigma 1.5).

    Single-channel [0,1] images; stability constants are on the unit range.
    """
    _check_same_shape(x, y, "ssim_index")
    if x.dim() != 4 or x.size(1) != 1:
        raise DimensionError(f"ssim_index: expected (B, 1, H, W), got {tuple(x.shape)}")
    if x.size(2) < _SSIM_WINDOW or x.size(3) < _SSIM_WINDOW:
        raise ValidationError(
            f"ssim_index: image {x.size(2)}x{x.size(3)} smaller than the "
            f"{_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    win = _gaussian_window(x.dtype, x.device)
    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_x = F.conv2d(x * x, win) - mu_xx
    sigma_y = F.conv2d(y * y, win) - mu_yy
    sigma_xy = F.conv2d(x * y, win) - mu_xy
    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / (
        (mu_xx + mu_yy + c1) * (sigma_x + sigma_y + c2)
    )
    return ssim_map.mean()


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_magnitude(x: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude sqrt(gx^2 + gy^2 + eps), reflect padding."""
    kx = _SOBEL_X.to(dtype=x.dtype, device=x.device)[None, None]
    ky = kx.transpose(-1, -2)
    padded = F.pad(x, (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    return torch.sqrt(gx * gx + gy * gy + SOBEL_EPS)


def gradient_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between Sobel gradient magnitudes."""
    _check_same_shape(x, x_hat, "gradient_loss")
    return (sobel_magnitude(x) - sobel_magnitude(x_hat)).abs().mean()


def recon_loss(ir: torch.Tensor, ir_hat: torch.Tensor,
               vis: torch.Tensor, vis_hat: torch.Tensor,
               w: LossWeights) -> LossReport:
    """Per-modality reconstruction objective: mse + alpha1*ssim + alpha2*grad.

    The similarity term is 2 - (ssim_vis + ssim_ir) so a perfect
    reconstruction scores exactly zero.
    """
    mse = mse_loss(vis, vis_hat) + mse_loss(ir, ir_hat)
    ssim = 2.0 - (ssim_index(vis, vis_hat, w.ssim_c1, w.ssim_c2)
                  + ssim_index(ir, ir_hat, w.ssim_c1, w.ssim_c2))
    grad = gradient_loss(vis, vis_hat) + gradient_loss(ir, ir_hat)
    total = mse + w.alpha1 * ssim + w.alpha2 * grad
    return LossReport(total, {
        "recon_mse": float(mse.detach()),
        "recon_ssim": float(ssim.detach()),
        "recon_grad": float(grad.detach()),
        "total": float(total.detach()),
    })


def correlation_coefficient(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pearson correlation over all flattened entries.

    Zero-variance input is the documented degenerate case and returns 0.
    """
    _check_same_shape(a, b, "correlation_coefficient")
    af = a.reshape(-1)
    bf = b.reshape(-1)
    ac = af - af.mean()
    bc = bf - bf.mean()
    var_a = (ac * ac).sum()
    var_b = (bc * bc).sum()
    if float(var_a.detach()) == 0.0 or float(var_b.detach()) == 0.0:
        return torch.zeros((), dtype=a.dtype, device=a.device)
    return (ac * bc).sum() / torch.sqrt(var_a * var_b)


def corr_loss(features, mode: str = "literal") -> torch.Tensor:
    """Cross-modal feature correlation.

    literal:    cc(base_vis, base_ir) + cc(detail_vis, detail_ir)
    decomposed: cc(detail_vis, detail_ir) - cc(base_vis, base_ir)
                (minimizing detail correlation while rewarding base alignment)
    """
    base = correlation_coefficient(features.base_vis, features.base_ir)
    detail = correlation_coefficient(features.detail_vis, features.detail_ir)
    if mode == "literal":
        return base + detail
    if mode == "decomposed":
        return detail - base
    raise ValidationError(f"unknown corr mode {mode!r}")


def infonce_loss(x_embed: torch.Tensor, y_embed: torch.Tensor, temperature: float) -> torch.Tensor:
    """Contrastive loss over K same-scene cross-modality pairs, dot-product similarity."""
    _check_same_shape(x_embed, y_embed, "infonce_loss")
    if x_embed.dim() != 2:
        raise DimensionError(f"infonce_loss: expected (K, d) embeddings, got {tuple(x_embed.shape)}")
    k = x_embed.size(0)
    if k < 2:
        raise ValidationError(f"infonce_loss needs K >= 2 pairs (no negatives exist for K={k})")
    sim = (x_embed @ y_embed.T) / temperature
    targets = torch.arange(k, device=x_embed.device)
    return F.cross_entropy(sim, targets)


def mkmmd_loss(taps_ir: Sequence[torch.Tensor], taps_vis: Sequence[torch.Tensor],
               spec: KernelSpec, n_positions: int = 256,
               generator: torch.Generator | None = None,
               adapt_bandwidths: bool = True) -> torch.Tensor:
    """Kernel distribution distance between the structure-encoder taps."""
    return mmd_from_feature_maps(taps_ir, taps_vis, spec, n_positions=n_positions,
                                 generator=generator, adapt_bandwidths=adapt_bandwidths)


def stage1_loss(ir: torch.Tensor, ir_hat: torch.Tensor,
                vis: torch.Tensor, vis_hat: torch.Tensor,
                features, spec: KernelSpec, w: LossWeights,
                n_positions: int = 256,
                generator: torch.Generator | None = None) -> LossReport:
    """Encoder-decoder objective: recon + beta1*corr + beta2*mkmmd + beta3*infonce."""
    recon = recon_loss(ir, ir_hat, vis, vis_hat, w)
    corr = corr_loss(features, mode=w.corr_mode)
    mmd = mkmmd_loss(features.base_taps_ir, features.base_taps_vis, spec,
                     n_positions=n_positions, generator=generator)
    nce = infonce_loss(features.base_ir.mean(dim=(2, 3)),
                       features.base_vis.mean(dim=(2, 3)), w.temperature)
    total = recon.total + w.beta1 * corr + w.beta2 * mmd + w.beta3 * nce
    components = {k: v for k, v in recon.components.items() if k != "total"}
    components.update({
        "recon": float(recon.total.detach()),
        "corr": float(corr.detach()),
        "mkmmd": float(mmd.detach()),
        "infonce": float(nce.detach()),
        "total": float(total.detach()),
    })
    return LossReport(total, components)


def intensity_loss(vis_lum: torch.Tensor, ir: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
    """Mean absolute deviation of the fused image from the pixelwise source max."""
    _check_same_shape(vis_lum, ir, "intensity_loss")
    _check_same_shape(vis_lum, fused, "intensity_loss")
    return (torch.maximum(vis_lum, ir) - fused).abs().mean()


def max_gradient_loss(vis_lum: torch.Tensor, ir: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
    """Mean L1 between the pixelwise max of source Sobel magnitudes and the fused one."""
    _check_same_shape(vis_lum, ir, "max_gradient_loss")
    _check_same_shape(vis_lum, fused, "max_gradient_loss")
    target = torch.maximum(sobel_magnitude(vis_lum), sobel_magnitude(ir))
    return (target - sobel_magnitude(fused)).abs().mean()


def stage2_loss(vis_lum: torch.Tensor, ir: torch.Tensor, fused: torch.Tensor,
                features, w: LossWeights) -> LossReport:
    """Fusion objective: intensity + gamma1*max_grad + gamma2*corr."""
    intensity = intensity_loss(vis_lum, ir, fused)
    max_grad = max_gradient_loss(vis_lum, ir, fused)
    corr = corr_loss(features, mode=w.corr_mode)
    total = intensity + w.gamma1 * max_grad + w.gamma2 * corr
    return LossReport(total, {
        "intensity": float(intensity.detach()),
        "max_grad": float(max_grad.detach()),
        "corr": float(corr.detach()),
        "total": float(total.detach()),
    })
