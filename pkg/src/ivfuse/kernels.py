"""Hybrid Gaussian+Laplacian multi-kernel and the empirical MK-MMD distance.

The kernel is a convex mix of a multi-bandwidth Gaussian kernel (global
smoothness) and multi-bandwidth Laplacian kernels (edge sensitivity).  The
distance between infrared and visible feature distributions is the biased
V-statistic estimate of the squared RKHS mean-embedding gap, which is
nonnegative by construction and differentiable w.r.t. both sample sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import KernelConfig
from .errors import DimensionError, ValidationError

_WEIGHT_TOL = 1e-6


def laplacian_bandwidth(gamma: float) -> float:
    """Bandwidth controlled by the rate hyperparameter: tau = 1/sqrt(2*gamma)."""
    return 1.0 / math.sqrt(2.0 * gamma)


def bandwidth_ladder(m: float, k: int = 5) -> tuple[float, ...]:
    """Geometric ladder of k bandwidths centered on m: m * 2**(j - ceil(k/2))."""
    center = k // 2 + 1
    return tuple(m * 2.0 ** (j - center) for j in range(1, k + 1))


@dataclass
class KernelSpec:
    """Bandwidths and weights defining the hybrid kernel."""

    gauss_bandwidths: tuple[float, ...] = field(default_factory=lambda: bandwidth_ladder(1.0, 5))
    gauss_weights: tuple[float, ...] = field(default_factory=lambda: (0.2,) * 5)
    lap_bandwidths: tuple[float, ...] = field(
        default_factory=lambda: tuple(laplacian_bandwidth(g) for g in (0.1, 1.0, 5.0))
    )
    lap_weights: tuple[float, ...] = field(default_factory=lambda: (1 / 3,) * 3)
    mix: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        self.gauss_bandwidths = tuple(float(b) for b in self.gauss_bandwidths)
        self.gauss_weights = tuple(float(w) for w in self.gauss_weights)
        self.lap_bandwidths = tuple(float(b) for b in self.lap_bandwidths)
        self.lap_weights = tuple(float(w) for w in self.lap_weights)
        self.mix = (float(self.mix[0]), float(self.mix[1]))
        if len(self.gauss_bandwidths) != len(self.gauss_weights):
            raise ValidationError("kernel spec: Gaussian bandwidth/weight lengths differ")
        if len(self.lap_bandwidths) != len(self.lap_weights):
            raise ValidationError("kernel spec: Laplacian bandwidth/weight lengths differ")
        for tau in self.gauss_bandwidths + self.lap_bandwidths:
            if tau <= 0:
                raise ValidationError(f"kernel spec: bandwidths must be positive, got {tau}")
        for w in self.gauss_weights + self.lap_weights + self.mix:
            if w < 0:
                raise ValidationError(f"kernel spec: weights must be nonnegative, got {w}")
        if abs(sum(self.gauss_weights) - 1.0) > _WEIGHT_TOL:
            raise ValidationError("kernel spec: Gaussian weights must sum to 1")
        if abs(sum(self.lap_weights) - 1.0) > _WEIGHT_TOL:
            raise ValidationError("kernel spec: Laplacian weights must sum to 1")
        if abs(self.mix[0] + self.mix[1] - 1.0) > _WEIGHT_TOL:
            raise ValidationError("kernel spec: mix weights must sum to 1")

    def with_gauss_bandwidths(self, bandwidths: Sequence[float]) -> "KernelSpec":
        k = len(bandwidths)
        return KernelSpec(
            gauss_bandwidths=tuple(bandwidths),
            gauss_weights=(1.0 / k,) * k,
            lap_bandwidths=self.lap_bandwidths,
            lap_weights=self.lap_weights,
            mix=self.mix,
        )


def spec_from_config(cfg: KernelConfig, gauss_bandwidths: Sequence[float] | None = None) -> KernelSpec:
    """Materialize a KernelSpec from the config-file surface, uniform weights."""
    k = cfg.gauss_k
    bw = tuple(gauss_bandwidths) if gauss_bandwidths is not None else bandwidth_ladder(1.0, k)
    if len(bw) != k:
        raise ValidationError(f"expected {k} Gaussian bandwidths, got {len(bw)}")
    return KernelSpec(
        gauss_bandwidths=bw,
        gauss_weights=(1.0 / k,) * k,
        lap_bandwidths=tuple(laplacian_bandwidth(g) for g in cfg.lap_gammas),
        lap_weights=(1.0 / len(cfg.lap_gammas),) * len(cfg.lap_gammas),
        mix=(cfg.mix_c1, 1.0 - cfg.mix_c1),
    )


def _as_matrix(x, name: str) -> torch.Tensor:
    """Coerce a sample set to a (n, d) tensor; numpy input becomes float64."""
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2:
        raise DimensionError(f"{name}: expected (n, d) samples, got shape {tuple(t.shape)}")
    if t.size(0) < 1:
        raise ValidationError(f"{name}: sample set is empty")
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name}: non-finite values in sample set")
    return t


def _as_vector(x, name: str) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x.reshape(-1)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(-1)
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name}: non-finite values")
    return t


def _sqrt_eps(dtype: torch.dtype) -> float:
    # keeps sqrt differentiable at zero distance without disturbing kernel values
    return 1e-24 if dtype == torch.float64 else 1e-12


def _gauss_from_sq(sq: torch.Tensor, spec: KernelSpec) -> torch.Tensor:
    acc = None
    for w, tau in zip(spec.gauss_weights, spec.gauss_bandwidths):
        term = w * torch.exp(-sq / (2.0 * tau * tau))
        acc = term if acc is None else acc + term
    return acc


def _lap_from_dist(dist: torch.Tensor, spec: KernelSpec) -> torch.Tensor:
    acc = None
    for w, tau in zip(spec.lap_weights, spec.lap_bandwidths):
        term = w * torch.exp(-dist / tau)
        acc = term if acc is None else acc + term
    return acc


def _hybrid_from_sq(sq: torch.Tensor, spec: KernelSpec) -> torch.Tensor:
    dist = torch.sqrt(sq + _sqrt_eps(sq.dtype))
    return spec.mix[0] * _gauss_from_sq(sq, spec) + spec.mix[1] * _lap_from_dist(dist, spec)


def _pair_sq(a, b, name_a: str = "a", name_b: str = "b") -> torch.Tensor:
    ta = _as_vector(a, name_a)
    tb = _as_vector(b, name_b)
    if ta.numel() != tb.numel():
        raise DimensionError(
            f"vector dimensions differ: {name_a} has {ta.numel()}, {name_b} has {tb.numel()}"
        )
    diff = ta - tb
    return (diff * diff).sum()


def gaussian_multikernel(a, b, spec: KernelSpec) -> torch.Tensor:
    """Weighted sum of Gaussian kernels exp(-||a-b||^2 / (2 tau_j^2))."""
    return _gauss_from_sq(_pair_sq(a, b), spec)


def laplacian_multikernel(a, b, spec: KernelSpec) -> torch.Tensor:
    """Weighted sum of Laplacian kernels exp(-||a-b|| / tau_j)."""
    sq = _pair_sq(a, b)
    return _lap_from_dist(torch.sqrt(sq + _sqrt_eps(sq.dtype)), spec)


def hybrid_kernel(a, b, spec: KernelSpec) -> torch.Tensor:
    """Convex mix c1*k_gauss + c2*k_laplace; equals 1 at a == b."""
    return _hybrid_from_sq(_pair_sq(a, b), spec)


def _cross_sq(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(1, keepdim=True) + (y * y).sum(1) - 2.0 * (x @ y.T)
    return sq.clamp_min(0.0)


def hybrid_gram(x, y, spec: KernelSpec) -> torch.Tensor:
    """Full (n, m) hybrid-kernel Gram matrix between two sample sets."""
    tx = _as_matrix(x, "x")
    ty = _as_matrix(y, "y")
    if tx.size(1) != ty.size(1):
        raise DimensionError(
            f"sample dimensions differ: x has d={tx.size(1)}, y has d={ty.size(1)}"
        )
    return _hybrid_from_sq(_cross_sq(tx, ty), spec)


def median_heuristic_bandwidths(
    samples,
    k: int = 5,
    max_pairs: int = 1000,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Gaussian bandwidth ladder from the median pairwise distance of a pooled set.

    Accepts one (n, d) array or a sequence of arrays to pool.  The median is
    computed over at most max_pairs randomly subsampled index pairs; a zero
    median falls back to 1.
    """
    if isinstance(samples, (list, tuple)):
        pooled = np.concatenate([np.asarray(s, dtype=np.float64).reshape(len(s), -1) for s in samples])
    else:
        arr = np.asarray(samples, dtype=np.float64)
        pooled = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(-1, 1)
    n = pooled.shape[0]
    if n < 2:
        raise ValidationError(f"median heuristic needs at least 2 vectors, got {n}")
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        ii, jj = np.triu_indices(n, k=1)
    else:
        rng = rng if rng is not None else np.random.default_rng()
        ii = rng.integers(0, n, size=max_pairs)
        shift = rng.integers(1, n, size=max_pairs)
        jj = (ii + shift) % n  # guarantees ii != jj
    dists = np.linalg.norm(pooled[ii] - pooled[jj], axis=1)
    m = float(np.median(dists))
    if m == 0.0:
        m = 1.0
    return list(bandwidth_ladder(m, k))


def mk_mmd(ir, vis, spec: KernelSpec) -> torch.Tensor:
    """Biased V-statistic estimate of the squared kernel mean-embedding distance.

    mean(K_xx) + mean(K_yy) - 2 mean(K_xy) with K the hybrid kernel; the
    diagonal self-similarities are exactly 1 by construction.  Clamped at 0.
    """
    x = _as_matrix(ir, "ir samples")
    y = _as_matrix(vis, "vis samples")
    if x.size(1) != y.size(1):
        raise DimensionError(
            f"sample dimensions differ: ir has d={x.size(1)}, vis has d={y.size(1)}"
        )
    if x is y or (x.shape == y.shape and torch.equal(x, y)):
        # identical sets: the three terms cancel exactly
        shared = _self_gram_mean(x, spec)
        return (shared + shared - 2.0 * shared).clamp_min(0.0)
    k_xx = _self_gram_mean(x, spec)
    k_yy = _self_gram_mean(y, spec)
    k_xy = _hybrid_from_sq(_cross_sq(x, y), spec).mean()
    return (k_xx + k_yy - 2.0 * k_xy).clamp_min(0.0)


def _self_gram_mean(x: torch.Tensor, spec: KernelSpec) -> torch.Tensor:
    n = x.size(0)
    if n == 1:
        return torch.ones((), dtype=x.dtype, device=x.device)
    sq = _cross_sq(x, x)
    off = 1.0 - torch.eye(n, dtype=x.dtype, device=x.device)
    # off-diagonal kernel values plus n exact units on the diagonal
    k_off = (_hybrid_from_sq(sq * off, spec) * off).sum()
    return (k_off + n) / (n * n)


def mmd_from_feature_maps(
    taps_ir: Sequence[torch.Tensor],
    taps_vis: Sequence[torch.Tensor],
    spec: KernelSpec,
    n_positions: int = 256,
    generator: torch.Generator | None = None,
    adapt_bandwidths: bool = True,
) -> torch.Tensor:
    """Mean MK-MMD over encoder taps, sampling spatial channel-vectors.

    For each tap, n_positions spatial locations are drawn per image (the same
    locations for both modalities, fresh per call) and each location's channel
    vector is one sample.  With adapt_bandwidths the Gaussian ladder is
    recomputed per tap from the pooled detached samples (median heuristic) and
    treated as constant w.r.t. gradients.
    """
    if len(taps_ir) != len(taps_vis):
        raise DimensionError(
            f"tap counts differ: {len(taps_ir)} infrared vs {len(taps_vis)} visible"
        )
    if not taps_ir:
        raise ValidationError("no feature taps given")
    total = None
    for t_ir, t_vis in zip(taps_ir, taps_vis):
        if t_ir.shape != t_vis.shape:
            raise DimensionError(
                f"tap shapes differ: {tuple(t_ir.shape)} vs {tuple(t_vis.shape)}"
            )
        b, c, h, w = t_ir.shape
        flat_ir = t_ir.reshape(b, c, h * w)
        flat_vis = t_vis.reshape(b, c, h * w)
        if h * w <= n_positions:
            x = flat_ir.permute(0, 2, 1).reshape(-1, c)
            y = flat_vis.permute(0, 2, 1).reshape(-1, c)
        else:
            xs, ys = [], []
            for i in range(b):
                idx = torch.randint(0, h * w, (n_positions,), generator=generator, device=t_ir.device)
                xs.append(flat_ir[i, :, idx].T)
                ys.append(flat_vis[i, :, idx].T)
            x = torch.cat(xs, 0)
            y = torch.cat(ys, 0)
        tap_spec = spec
        if adapt_bandwidths:
            pooled = torch.cat([x, y], 0).detach().cpu().numpy()
            bw = median_heuristic_bandwidths(pooled, k=len(spec.gauss_bandwidths))
            tap_spec = spec.with_gauss_bandwidths(bw)
        term = mk_mmd(x, y, tap_spec)
        total = term if total is None else total + term
    return total / len(taps_ir)
