"""Batch command-line interface: synth, train-stage1, train-stage2, fuse, eval.

Exit codes: 0 success, 1 validation/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .config import RunConfig, load_config, save_config
from .data import (DatasetManifest, PairDataset, generate_synthetic_pairs,
                   load_pair, luma_chroma_to_rgb, rgb_to_luma_chroma,
                   save_gray_png, save_rgb_png)
from .errors import ValidationError
from .model import FusionModel
from .trainer import load_checkpoint, restore_model, train_stage1, train_stage2

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivfuse",
        description="Infrared/visible image fusion: synthetic data, two-stage "
                    "training, batch fusion, and quality metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output dataset root (gets ir/ and vis/)")
    p.add_argument("--pairs", type=int, default=20, help="number of pairs (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=160, help="image side length, multiple of 8")

    for stage in (1, 2):
        p = sub.add_parser(f"train-stage{stage}", help=f"run training stage {stage}")
        p.add_argument("--config", default=None, help="config file (defaults used if omitted)")
        p.add_argument("--data", required=True, help="dataset root with ir/ and vis/")
        p.add_argument("--out", required=True, help="output dir for checkpoints and history CSV")
        p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
        if stage == 2:
            p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint to start from")

    p = sub.add_parser("fuse", help="fuse every pair in a dataset")
    p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint")
    p.add_argument("--data", required=True, help="dataset root with ir/ and vis/")
    p.add_argument("--out", required=True, help="output dir for fused images")

    p = sub.add_parser("eval", help="compute the fusion metric battery")
    p.add_argument("--data", required=True, help="dataset root with ir/ and vis/")
    p.add_argument("--fused", required=True, help="dir of *_fused_gray.png images")
    p.add_argument("--out", required=True, help="output dir for metrics.csv")
    return parser


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def cmd_synth(args) -> int:
    manifest = generate_synthetic_pairs(args.out, n_pairs=args.pairs, seed=args.seed,
                                        size=args.size)
    print(f"wrote {len(manifest)} pairs under {manifest.root}")
    return 0


def _cmd_train(args, stage: int) -> int:
    cfg = _load_run_config(args.config)
    train_cfg = replace(cfg.train, stage=stage)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    manifest = DatasetManifest.discover(args.data)
    dataset = PairDataset.from_manifest(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(replace(cfg, train=train_cfg), out / f"stage{stage}_config.ini")
    if stage == 1:
        model = FusionModel(cfg.model)
        model, history = train_stage1(
            dataset, model, train_cfg, loss_weights=cfg.loss, kernel_cfg=cfg.kernel,
            checkpoint_dir=out, history_path=out / "stage1_history.csv")
    else:
        payload = load_checkpoint(args.checkpoint, expect_stage=1)
        model = restore_model(payload)
        model, history = train_stage2(
            dataset, model, train_cfg, loss_weights=cfg.loss, kernel_cfg=cfg.kernel,
            checkpoint_dir=out, history_path=out / f"stage{stage}_history.csv")
    final = out / f"stage{stage}_final.pt"
    print(f"stage {stage} done: {len(history)} iterations, "
          f"final total={history[-1]['total']:.4f}, checkpoint {final}")
    return 0


def cmd_fuse(args) -> int:
    import torch

    payload = load_checkpoint(args.checkpoint, expect_stage=2)
    model = restore_model(payload)
    manifest = DatasetManifest.discover(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for identifier in manifest.identifiers:
        ir_path, vis_path = manifest.pair_paths(identifier)
        pair = load_pair(ir_path, vis_path)
        luma, cb, cr = rgb_to_luma_chroma(pair.vis_rgb)
        ir = torch.from_numpy(pair.ir)[None, None].float()
        vis = torch.from_numpy(luma.astype(np.float32))[None, None]
        with torch.inference_mode():
            fused = model.forward_fuse(ir, vis)[0, 0].numpy().astype(np.float64)
        save_gray_png(out / f"{identifier}_fused_gray.png", fused)
        save_rgb_png(out / f"{identifier}_fused.png", luma_chroma_to_rgb(fused, cb, cr))
    print(f"fused {len(manifest)} pairs into {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.discover(args.data)
    fused_dir = Path(args.fused)
    if not fused_dir.is_dir():
        raise ValidationError(f"fused image directory not found: {fused_dir}")
    triples = []
    for identifier in manifest.identifiers:
        fused_path = fused_dir / f"{identifier}_fused_gray.png"
        if not fused_path.is_file():
            raise ValidationError(f"missing fused image: {fused_path}")
        ir_path, vis_path = manifest.pair_paths(identifier)
        pair = load_pair(ir_path, vis_path)
        fused = np.asarray(_load_gray(fused_path), dtype=np.float64)
        triples.append((identifier, fused, pair.ir.astype(np.float64),
                        pair.vis_luma.astype(np.float64)))
    rows, mean = metrics_mod.evaluate_many(triples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    metrics_mod.write_metrics_csv(rows, mean, csv_path)
    print(metrics_mod.format_metrics_table(rows, mean))
    print(f"wrote {csv_path}")
    return 0


def _load_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


_COMMANDS = {
    "synth": cmd_synth,
    "train-stage1": lambda args: _cmd_train(args, 1),
    "train-stage2": lambda args: _cmd_train(args, 2),
    "fuse": cmd_fuse,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("command failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
