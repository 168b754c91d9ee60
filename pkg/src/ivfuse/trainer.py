"""Two-stage training: encoder-decoder reconstruction, then fusion layers.

Stage 1 trains the full encoder-decoder with the alignment losses; stage 2
freezes the encoders (by default), trains the fusion layers, and fine-tunes
the decoder.  Batch sampling is re-seeded per (seed, stage, epoch) so a run
resumed from an epoch-boundary checkpoint continues bit-identically.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .config import KernelConfig, LossWeights, ModelConfig, TrainConfig
from .data import PairDataset
from .errors import ValidationError
from .kernels import spec_from_config
from .losses import LossReport, stage1_loss, stage2_loss
from .model import FeatureBundle, FusionModel

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class DivergenceSnapshot:
    iteration: int
    epoch: int
    components: Dict[str, float]
    grad_norm: float


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, snapshot: DivergenceSnapshot):
        self.snapshot = snapshot
        super().__init__(
            f"non-finite loss at iteration {snapshot.iteration} "
            f"(epoch {snapshot.epoch}): {snapshot.components}"
        )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Initial rate halved every lr_halve_every epochs (piecewise constant)."""
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halve_every)


def _epoch_rng(cfg: TrainConfig, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, stage, epoch)))


def _epoch_torch_generator(cfg: TrainConfig, stage: int, epoch: int) -> torch.Generator:
    seed = int(np.random.SeedSequence((cfg.seed, stage, epoch, 7)).generate_state(1)[0])
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def sample_patch_batch(
    dataset: PairDataset, cfg: TrainConfig, rng: np.random.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One batch of aligned (infrared, visible-luminance) patches.

    The same crop window is applied to both modalities of a pair; offsets are
    uniform over all valid positions.
    """
    n = len(dataset)
    if n < 1:
        raise ValidationError("dataset is empty")
    if cfg.batch_size <= n:
        indices = rng.choice(n, size=cfg.batch_size, replace=False)
    else:
        indices = rng.integers(0, n, size=cfg.batch_size)
    p = cfg.patch_size
    ir_crops, vis_crops = [], []
    for i in indices:
        pair = dataset[int(i)]
        h, w = pair.ir.shape
        if h < p or w < p:
            raise ValidationError(
                f"pair '{pair.identifier}' is {w}x{h}, smaller than patch size {p}"
            )
        top = int(rng.integers(0, h - p + 1))
        left = int(rng.integers(0, w - p + 1))
        ir_crops.append(pair.ir[top:top + p, left:left + p])
        vis_crops.append(pair.vis_luma[top:top + p, left:left + p])
    ir = torch.from_numpy(np.stack(ir_crops)[:, None]).float()
    vis = torch.from_numpy(np.stack(vis_crops)[:, None]).float()
    return ir, vis


def _iterations_per_epoch(dataset: PairDataset, cfg: TrainConfig) -> int:
    return max(1, len(dataset) // cfg.batch_size)


def _grad_norm(model: nn.Module) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return total ** 0.5


def _check_finite(report: LossReport, iteration: int, epoch: int, model: nn.Module) -> None:
    if not report.is_finite():
        raise TrainingDivergedError(DivergenceSnapshot(
            iteration=iteration, epoch=epoch,
            components=dict(report.components), grad_norm=_grad_norm(model),
        ))


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str | Path, model: FusionModel, optimizer: Optional[torch.optim.Optimizer],
                    stage: int, epoch: int, train_cfg: TrainConfig,
                    loss_weights: LossWeights, kernel_cfg: KernelConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "epoch": epoch,
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "train_config": asdict(train_cfg),
        "loss_weights": asdict(loss_weights),
        "kernel_config": asdict(kernel_cfg),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expect_stage: Optional[int] = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint format version {version} in {path}")
    if expect_stage is not None and payload["stage"] != expect_stage:
        raise ValidationError(
            f"checkpoint {path} carries stage {payload['stage']}, expected stage {expect_stage}"
        )
    return payload


def restore_model(payload: dict) -> FusionModel:
    model = FusionModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


def encoder_fingerprint(model: FusionModel) -> str:
    """Stable hash of all encoder parameters (freeze-contract witness)."""
    digest = hashlib.sha256()
    for module in model.encoder_modules():
        for name, param in sorted(module.state_dict().items()):
            digest.update(name.encode())
            digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def write_history_csv(history: List[Dict[str, float]], path: str | Path) -> None:
    if not history:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


# --- training loops --------------------------------------------------------------


def _maybe_save(checkpoint_dir, model, opt, stage, epoch, cfg, weights, kernel_cfg, final=False):
    if checkpoint_dir is None:
        return
    checkpoint_dir = Path(checkpoint_dir)
    if final:
        save_checkpoint(checkpoint_dir / f"stage{stage}_final.pt",
                        model, opt, stage, epoch, cfg, weights, kernel_cfg)
    elif (epoch + 1) % cfg.checkpoint_every == 0:
        save_checkpoint(checkpoint_dir / f"stage{stage}_epoch{epoch + 1:03d}.pt",
                        model, opt, stage, epoch + 1, cfg, weights, kernel_cfg)


def train_stage1(
    dataset: PairDataset,
    model: FusionModel,
    cfg: TrainConfig,
    loss_weights: Optional[LossWeights] = None,
    kernel_cfg: Optional[KernelConfig] = None,
    checkpoint_dir: Optional[str | Path] = None,
    history_path: Optional[str | Path] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> Tuple[FusionModel, List[Dict[str, float]]]:
    """Encoder-decoder training against the stage-1 objective."""
    weights = loss_weights if loss_weights is not None else LossWeights()
    kcfg = kernel_cfg if kernel_cfg is not None else KernelConfig()
    if cfg.batch_size < 2:
        raise ValidationError("stage 1 needs batch_size >= 2: the contrastive term has no negatives otherwise")
    spec = spec_from_config(kcfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    iters = _iterations_per_epoch(dataset, cfg)
    history: List[Dict[str, float]] = []
    iteration = start_epoch * iters
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = _epoch_rng(cfg, 1, epoch)
        gen = _epoch_torch_generator(cfg, 1, epoch)
        for _ in range(iters):
            ir, vis = sample_patch_batch(dataset, cfg, rng)
            ir_hat, vis_hat, feats = model.forward_reconstruct(ir, vis)
            report = stage1_loss(ir, ir_hat, vis, vis_hat, feats, spec, weights,
                                 n_positions=kcfg.n_positions, generator=gen)
            _check_finite(report, iteration, epoch, model)
            opt.zero_grad()
            report.total.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            history.append({"iteration": iteration, "epoch": epoch, "lr": lr,
                            **report.components})
            iteration += 1
        _maybe_save(checkpoint_dir, model, opt, 1, epoch, cfg, weights, kcfg)
        log.info("stage 1 epoch %d/%d: total=%.4f", epoch + 1, cfg.epochs,
                 history[-1]["total"])
    _maybe_save(checkpoint_dir, model, opt, 1, cfg.epochs, cfg, weights, kcfg, final=True)
    if history_path is not None:
        write_history_csv(history, history_path)
    model.eval()
    return model, history


def train_stage2(
    dataset: PairDataset,
    model: FusionModel,
    cfg: TrainConfig,
    loss_weights: Optional[LossWeights] = None,
    kernel_cfg: Optional[KernelConfig] = None,
    checkpoint_dir: Optional[str | Path] = None,
    history_path: Optional[str | Path] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> Tuple[FusionModel, List[Dict[str, float]]]:
    """Fusion-layer training from a stage-1 model; encoders frozen by default."""
    weights = loss_weights if loss_weights is not None else LossWeights()
    kcfg = kernel_cfg if kernel_cfg is not None else KernelConfig()
    model.train()
    freeze = cfg.stage2_freeze_encoders
    if freeze:
        for module in model.encoder_modules():
            module.requires_grad_(False)
    opt = torch.optim.Adam((p for p in model.parameters() if p.requires_grad), lr=cfg.lr0)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    iters = _iterations_per_epoch(dataset, cfg)
    history: List[Dict[str, float]] = []
    iteration = start_epoch * iters
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            rng = _epoch_rng(cfg, 2, epoch)
            for _ in range(iters):
                ir, vis = sample_patch_batch(dataset, cfg, rng)
                if freeze:
                    with torch.no_grad():
                        feats = model._encode_pair(ir, vis)
                else:
                    feats = model._encode_pair(ir, vis)
                base, detail = model.fuse_features(feats)
                fused = model.decoder(base, detail)
                report = stage2_loss(vis, ir, fused, feats, weights)
                _check_finite(report, iteration, epoch, model)
                opt.zero_grad()
                report.total.backward()
                if cfg.grad_clip > 0:
                    trainable = [p for p in model.parameters() if p.requires_grad]
                    nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
                opt.step()
                history.append({"iteration": iteration, "epoch": epoch, "lr": lr,
                                **report.components})
                iteration += 1
            _maybe_save(checkpoint_dir, model, opt, 2, epoch, cfg, weights, kcfg)
            log.info("stage 2 epoch %d/%d: total=%.4f", epoch + 1, cfg.epochs,
                     history[-1]["total"])
        _maybe_save(checkpoint_dir, model, opt, 2, cfg.epochs, cfg, weights, kcfg, final=True)
    finally:
        if freeze:
            for module in model.encoder_modules():
                module.requires_grad_(True)
    if history_path is not None:
        write_history_csv(history, history_path)
    model.eval()
    return model, history
