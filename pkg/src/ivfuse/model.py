"""Dual-branch feature-decomposition fusion network.

A shared transformer stem feeds a structure branch (channel-attention
transformer blocks, taps exposed for the distribution-alignment penalty) and
a texture branch (invertible affine coupling blocks).  Two fusion layers
merge the per-modality features and a transformer decoder with a sigmoid
head emits a single-channel image in [0, 1].  Every block preserves spatial
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .config import ModelConfig
from .errors import ConfigError, DimensionError, ValidationError

BT601_WEIGHTS = (0.299, 0.587, 0.114)


def validate_image_batch(x: torch.Tensor, name: str = "images") -> None:
    if x.dim() != 4:
        raise DimensionError(f"{name}: expected (B, C, H, W), got shape {tuple(x.shape)}")
    if x.size(1) not in (1, 3):
        raise DimensionError(f"{name}: channel count must be 1 or 3, got {x.size(1)}")
    if x.size(2) % 8 != 0 or x.size(3) % 8 != 0:
        raise DimensionError(
            f"{name}: spatial dims {x.size(2)}x{x.size(3)} must be divisible by 8"
        )
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name}: non-finite values")


def to_luminance(x: torch.Tensor) -> torch.Tensor:
    """Reduce a 3-channel image to its BT.601 luminance plane; pass 1-channel through."""
    if x.size(1) == 1:
        return x
    r, g, b = BT601_WEIGHTS
    return r * x[:, 0:1] + g * x[:, 1:2] + b * x[:, 2:3]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, H, W) maps."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        normed = (x - mu) / torch.sqrt(var + 1e-5)
        return normed * self.weight[:, None, None] + self.bias[:, None, None]


class TransposedChannelAttention(nn.Module):
    """Attention across channels; spatial positions act as the feature axis."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.temperature = nn.Parameter(torch.ones(num_heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.project_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = rearrange(q, "b (head c) h w -> b head c (h w)", head=self.num_heads)
        k = rearrange(k, "b (head c) h w -> b head c (h w)", head=self.num_heads)
        v = rearrange(v, "b (head c) h w -> b head c (h w)", head=self.num_heads)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.temperature, dim=-1)
        out = rearrange(attn @ v, "b head c (h w) -> b (head c) h w", h=h, w=w)
        return self.project_out(out)


class GatedFeedForward(nn.Module):
    """Depthwise-conv feedforward with a GELU gate."""

    def __init__(self, dim: int, expansion: float = 2.0):
        super().__init__()
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden * 2, 1)
        self.dw = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.project_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        gate, value = self.dw(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(gate) * value)


class AttentionBlock(nn.Module):
    """Pre-norm transformer block: channel attention then gated feedforward."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = TransposedChannelAttention(dim, num_heads)
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = GatedFeedForward(dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def _coupling_subnet(in_ch: int, out_ch: int) -> nn.Sequential:
    hidden = max(in_ch, 16)
    last = nn.Conv2d(hidden, out_ch, 3, padding=1)
    # zero-init the head so the coupling block starts as the identity
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    return nn.Sequential(
        nn.Conv2d(in_ch, hidden, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(hidden, hidden, 3, padding=1),
        nn.ReLU(inplace=True),
        last,
    )


class CouplingBlock(nn.Module):
    """Invertible affine coupling over a channel split.

    Each half is scaled and shifted conditioned on the other; scale exponents
    are soft-clamped to [-2, 2] for stability, and zero-initialized subnet
    heads make the block an exact identity at init.
    """

    SCALE_CLAMP = 2.0

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError(f"coupling block needs an even channel count, got {dim}")
        half = dim // 2
        self.net_a = _coupling_subnet(half, 2 * half)
        self.net_b = _coupling_subnet(half, 2 * half)

    def _scale_shift(self, net, h):
        s, t = net(h).chunk(2, dim=1)
        s = self.SCALE_CLAMP * torch.tanh(s / self.SCALE_CLAMP)
        return s, t

    def forward(self, x):
        x1, x2 = x.chunk(2, dim=1)
        s2, t2 = self._scale_shift(self.net_a, x2)
        y1 = x1 * torch.exp(s2) + t2
        s1, t1 = self._scale_shift(self.net_b, y1)
        y2 = x2 * torch.exp(s1) + t1
        return torch.cat([y1, y2], dim=1)

    def inverse(self, y):
        y1, y2 = y.chunk(2, dim=1)
        s1, t1 = self._scale_shift(self.net_b, y1)
        x2 = (y2 - t1) * torch.exp(-s1)
        s2, t2 = self._scale_shift(self.net_a, x2)
        x1 = (y1 - t2) * torch.exp(-s2)
        return torch.cat([x1, x2], dim=1)


class SharedEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Conv2d(1, cfg.embed_dim, 3, padding=1)
        self.blocks = nn.Sequential(
            *[AttentionBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.shared_blocks)]
        )

    def forward(self, x):
        return self.blocks(self.embed(x))


class BaseEncoder(nn.Module):
    """Structure branch; exposes the last three stage outputs as alignment taps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            [AttentionBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.base_blocks)]
        )

    def forward(self, x) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return x, taps[-3:]


class DetailEncoder(nn.Module):
    """Texture branch built from invertible coupling blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList([CouplingBlock(cfg.embed_dim) for _ in range(cfg.detail_blocks)])

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def forward_block(self, x, block_index: int):
        self._check_index(block_index)
        return self.blocks[block_index](x)

    def invert_block(self, y, block_index: int):
        self._check_index(block_index)
        return self.blocks[block_index].inverse(y)

    def _check_index(self, i: int) -> None:
        if not 0 <= i < len(self.blocks):
            raise IndexError(f"detail block index {i} out of range [0, {len(self.blocks)})")


class BaseFusion(nn.Module):
    """Structure fusion: concat, one attention block at doubled width, 1x1 projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mix = AttentionBlock(2 * cfg.embed_dim, cfg.num_heads)
        self.project = nn.Conv2d(2 * cfg.embed_dim, cfg.embed_dim, 1)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise DimensionError(f"base fusion: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.project(self.mix(torch.cat([a, b], dim=1)))


class DetailFusion(nn.Module):
    """Texture fusion: concat, one coupling block at doubled width, 1x1 projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mix = CouplingBlock(2 * cfg.embed_dim)
        self.project = nn.Conv2d(2 * cfg.embed_dim, cfg.embed_dim, 1)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise DimensionError(f"detail fusion: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.project(self.mix(torch.cat([a, b], dim=1)))


class Decoder(nn.Module):
    """Transformer decoder over concatenated branch features, sigmoid-bounded head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.merge = nn.Conv2d(2 * cfg.embed_dim, cfg.embed_dim, 1)
        self.blocks = nn.Sequential(
            *[AttentionBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.decoder_blocks)]
        )
        self.head = nn.Conv2d(cfg.embed_dim, 1, 1)

    def forward(self, base, detail):
        if base.shape != detail.shape:
            raise DimensionError(
                f"decoder: branch shapes differ, {tuple(base.shape)} vs {tuple(detail.shape)}"
            )
        x = self.merge(torch.cat([base, detail], dim=1))
        x = self.blocks(x)
        return torch.sigmoid(self.head(x))


@dataclass
class FeatureBundle:
    """All intermediate features of one paired forward pass."""

    shared_ir: torch.Tensor
    shared_vis: torch.Tensor
    base_ir: torch.Tensor
    base_vis: torch.Tensor
    detail_ir: torch.Tensor
    detail_vis: torch.Tensor
    base_taps_ir: List[torch.Tensor]
    base_taps_vis: List[torch.Tensor]


class FusionModel(nn.Module):
    """Full network with the reconstruction (stage 1) and fusion (stage 2) paths."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.config = cfg if cfg is not None else ModelConfig()
        self.shared = SharedEncoder(self.config)
        self.base = BaseEncoder(self.config)
        self.detail = DetailEncoder(self.config)
        self.base_fusion = BaseFusion(self.config)
        self.detail_fusion = DetailFusion(self.config)
        self.decoder = Decoder(self.config)

    # --- encoder path -----------------------------------------------------

    def encode_shared(self, images: torch.Tensor) -> torch.Tensor:
        validate_image_batch(images)
        return self.shared(to_luminance(images))

    def encode_base(self, shared: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        return self.base(shared)

    def encode_detail(self, shared: torch.Tensor) -> torch.Tensor:
        return self.detail(shared)

    def invert_detail_block(self, output: torch.Tensor, block_index: int) -> torch.Tensor:
        return self.detail.invert_block(output, block_index)

    # --- fusion layers and decoder -----------------------------------------

    def fuse_base(self, base_ir: torch.Tensor, base_vis: torch.Tensor) -> torch.Tensor:
        return self.base_fusion(base_ir, base_vis)

    def fuse_detail(self, detail_ir: torch.Tensor, detail_vis: torch.Tensor) -> torch.Tensor:
        return self.detail_fusion(detail_ir, detail_vis)

    def decode(self, base: torch.Tensor, detail: torch.Tensor) -> torch.Tensor:
        return self.decoder(base, detail)

    # --- end-to-end paths ---------------------------------------------------

    def _encode_pair(self, ir: torch.Tensor, vis: torch.Tensor) -> FeatureBundle:
        validate_image_batch(ir, "infrared")
        validate_image_batch(vis, "visible")
        if ir.shape[0] != vis.shape[0] or ir.shape[2:] != vis.shape[2:]:
            raise DimensionError(
                f"pair shapes differ: infrared {tuple(ir.shape)} vs visible {tuple(vis.shape)}"
            )
        b = ir.shape[0]
        # both modalities ride through the encoders as one batch
        stacked = torch.cat([to_luminance(ir), to_luminance(vis)], dim=0)
        shared = self.shared(stacked)
        base, taps = self.base(shared)
        detail = self.detail(shared)
        return FeatureBundle(
            shared_ir=shared[:b], shared_vis=shared[b:],
            base_ir=base[:b], base_vis=base[b:],
            detail_ir=detail[:b], detail_vis=detail[b:],
            base_taps_ir=[t[:b] for t in taps],
            base_taps_vis=[t[b:] for t in taps],
        )

    def forward_reconstruct(
        self, ir: torch.Tensor, vis: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, FeatureBundle]:
        """Stage-1 path: reconstruct each modality from its own features."""
        feats = self._encode_pair(ir, vis)
        ir_hat = self.decoder(feats.base_ir, feats.detail_ir)
        vis_hat = self.decoder(feats.base_vis, feats.detail_vis)
        return ir_hat, vis_hat, feats

    def fuse_features(self, feats: FeatureBundle) -> Tuple[torch.Tensor, torch.Tensor]:
        base = self.base_fusion(feats.base_ir, feats.base_vis)
        detail = self.detail_fusion(feats.detail_ir, feats.detail_vis)
        return base, detail

    def forward_fuse(self, ir: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        """Stage-2 path: fused single-channel luminance in [0, 1]."""
        feats = self._encode_pair(ir, vis)
        base, detail = self.fuse_features(feats)
        return self.decoder(base, detail)

    def forward(self, ir: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        return self.forward_fuse(ir, vis)

    def encoder_modules(self) -> List[nn.Module]:
        return [self.shared, self.base, self.detail]
