"""Dataset ingestion, color-space handling, and synthetic pair generation.

Pairs are matched by filename stem across an `ir/` and a `vis/` subdirectory.
Fusion operates on the visible luminance plane; chroma is carried through
untouched and reattached to the fused output.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ValidationError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".bmp", ".jpg", ".jpeg")


def worker_count() -> int:
    """Concurrent file workers, capped by the DAF_NUM_WORKERS env var."""
    env = os.environ.get("DAF_NUM_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"DAF_NUM_WORKERS must be an integer, got {env!r}") from None
    return min(4, os.cpu_count() or 1)


# --- color space -------------------------------------------------------------

_BT601 = np.array([0.299, 0.587, 0.114])


def rgb_to_luma_chroma(rgb: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range BT.601 RGB -> (Y, Cb, Cr), all in [0, 1], neutral chroma at 0.5."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) RGB array, got shape {rgb.shape}")
    y = rgb @ _BT601
    cb = (rgb[..., 2] - y) / 1.772 + 0.5
    cr = (rgb[..., 0] - y) / 1.402 + 0.5
    return y, cb, cr


def luma_chroma_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """Inverse BT.601 conversion, clipped to [0, 1]."""
    y = np.asarray(y, dtype=np.float64)
    r = y + 1.402 * (np.asarray(cr) - 0.5)
    b = y + 1.772 * (np.asarray(cb) - 0.5)
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


# --- pairs and manifests ------------------------------------------------------


@dataclass
class ImagePair:
    """One registered infrared + visible image, unit of ingestion and fusion."""

    ir: np.ndarray          # (H, W) float32 in [0, 1]
    vis_rgb: np.ndarray     # (H, W, 3) float32 in [0, 1]
    identifier: str

    @property
    def vis_luma(self) -> np.ndarray:
        return (self.vis_rgb.astype(np.float64) @ _BT601).astype(np.float32)

    @property
    def height(self) -> int:
        return self.ir.shape[0]

    @property
    def width(self) -> int:
        return self.ir.shape[1]


def _read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise ValidationError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode in ("RGB", "RGBA", "P"):
                arr = np.asarray(img.convert("RGB"), dtype=np.float32)
            else:
                arr = np.asarray(img.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def _center_crop_multiple(arr: np.ndarray, multiple: int = 8) -> np.ndarray:
    h, w = arr.shape[:2]
    h8, w8 = h - h % multiple, w - w % multiple
    if h8 == 0 or w8 == 0:
        raise ValidationError(f"image {w}x{h} too small to crop to a multiple of {multiple}")
    top, left = (h - h8) // 2, (w - w8) // 2
    return arr[top:top + h8, left:left + w8]


def load_pair(ir_path: str | Path, vis_path: str | Path) -> ImagePair:
    """Load one registered pair, normalizing to [0, 1] and 8-divisible dims.

    A 3-channel infrared file is collapsed to its luminance plane; mismatched
    sizes are an error naming both files; non-divisible dims are center-cropped
    with a logged warning.
    """
    ir_path, vis_path = Path(ir_path), Path(vis_path)
    ir = _read_image(ir_path)
    vis = _read_image(vis_path)
    if ir.ndim == 3:
        ir = (ir.astype(np.float64) @ _BT601).astype(np.float32)
    if vis.ndim == 2:
        vis = np.repeat(vis[..., None], 3, axis=2)
    if ir.shape[:2] != vis.shape[:2]:
        raise ValidationError(
            f"pair size mismatch: {ir_path} is {ir.shape[1]}x{ir.shape[0]} but "
            f"{vis_path} is {vis.shape[1]}x{vis.shape[0]}"
        )
    h, w = ir.shape[:2]
    if h % 8 != 0 or w % 8 != 0:
        log.warning("center-cropping %s / %s from %dx%d to a multiple of 8",
                    ir_path.name, vis_path.name, w, h)
        ir = _center_crop_multiple(ir)
        vis = _center_crop_multiple(vis)
    return ImagePair(ir=np.clip(ir, 0.0, 1.0), vis_rgb=np.clip(vis, 0.0, 1.0),
                     identifier=ir_path.stem)


@dataclass
class DatasetManifest:
    """Matched pair listing over an ir/ and vis/ directory layout."""

    root: Path
    ir_dir: str = "ir"
    vis_dir: str = "vis"
    identifiers: List[str] = field(default_factory=list)

    @classmethod
    def discover(cls, root: str | Path, ir_dir: str = "ir", vis_dir: str = "vis") -> "DatasetManifest":
        root = Path(root)
        ir_root, vis_root = root / ir_dir, root / vis_dir
        for sub in (ir_root, vis_root):
            if not sub.is_dir():
                raise ValidationError(f"dataset directory not found: {sub}")
        ir_files = _stem_map(ir_root)
        vis_files = _stem_map(vis_root)
        matched = sorted(set(ir_files) & set(vis_files))
        if not matched:
            raise ValidationError(f"no matched pairs between {ir_root} and {vis_root}")
        unmatched = (set(ir_files) | set(vis_files)) - set(matched)
        if unmatched:
            log.warning("ignoring %d unmatched identifiers: %s",
                        len(unmatched), ", ".join(sorted(unmatched)[:5]))
        return cls(root=root, ir_dir=ir_dir, vis_dir=vis_dir, identifiers=matched)

    def pair_paths(self, identifier: str) -> Tuple[Path, Path]:
        ir = _stem_map(self.root / self.ir_dir)
        vis = _stem_map(self.root / self.vis_dir)
        if identifier not in ir or identifier not in vis:
            raise ValidationError(f"identifier {identifier!r} not present in both modalities")
        return ir[identifier], vis[identifier]

    def __len__(self) -> int:
        return len(self.identifiers)


def _stem_map(directory: Path) -> dict:
    mapping: dict = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if path.stem in mapping:
            raise ValidationError(
                f"identifier {path.stem!r} resolves to more than one file in {directory}"
            )
        mapping[path.stem] = path
    return mapping


class PairDataset:
    """In-memory list of loaded pairs."""

    def __init__(self, pairs: Sequence[ImagePair]):
        self.pairs = list(pairs)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "PairDataset":
        paths = [manifest.pair_paths(i) for i in manifest.identifiers]
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            pairs = list(pool.map(lambda p: load_pair(*p), paths))
        return cls(pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> ImagePair:
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)


# --- file output ---------------------------------------------------------------


def save_gray_png(path: str | Path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path))


def save_rgb_png(path: str | Path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path))


# --- synthetic pairs ------------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float, amplitude: float) -> np.ndarray:
    raw = rng.normal(0.0, 1.0, (size, size))
    smooth = gaussian_filter(raw, sigma)
    peak = np.abs(smooth).max()
    return amplitude * smooth / (peak + 1e-12)


def _object_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    if rng.random() < 0.5:
        ay, ax = rng.uniform(0.06, 0.18, 2) * size
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    hy, hx = rng.uniform(0.05, 0.16, 2) * size
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def render_synthetic_scene(rng: np.random.Generator, size: int = 160) -> Tuple[np.ndarray, np.ndarray]:
    """One shared-geometry scene: (ir, vis_rgb), each in [0, 1].

    Objects are hot and untextured in the infrared rendition, bright and
    textured in the visible one; backgrounds stay dark in both so thresholded
    object masks overlap across modalities.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    grad_dir = rng.uniform(-1.0, 1.0, 2)
    gradient = grad_dir[0] * xx + grad_dir[1] * yy
    gradient = (gradient - gradient.min()) / (np.ptp(gradient) + 1e-12)

    ir = 0.10 + 0.08 * gradient + _smooth_noise(rng, size, sigma=10.0, amplitude=0.04)
    vis = 0.15 + 0.12 * gradient + _smooth_noise(rng, size, sigma=6.0, amplitude=0.05)
    freq = rng.uniform(4.0, 9.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    vis = vis + 0.03 * np.sin(2 * np.pi * freq * (xx + yy) + phase)

    n_objects = int(rng.integers(3, 7))
    for _ in range(n_objects):
        mask = _object_mask(rng, size)
        ir_level = rng.uniform(0.60, 0.95)
        vis_level = rng.uniform(0.55, 0.90)
        ir[mask] = ir_level + 0.03 * gradient[mask]
        tex_freq = rng.uniform(8.0, 20.0)
        tex_phase = rng.uniform(0.0, 2 * np.pi)
        texture = 0.06 * np.sin(2 * np.pi * tex_freq * xx + tex_phase)
        vis[mask] = vis_level + texture[mask]

    ir = gaussian_filter(ir, 1.2) + rng.normal(0.0, 0.02, ir.shape)
    vis = gaussian_filter(vis, 0.5) + rng.normal(0.0, 0.03, vis.shape)
    ir = np.clip(ir, 0.0, 1.0)
    vis = np.clip(vis, 0.0, 1.0)

    cb = 0.5 + _smooth_noise(rng, size, sigma=18.0, amplitude=0.08)
    cr = 0.5 + _smooth_noise(rng, size, sigma=18.0, amplitude=0.08)
    vis_rgb = luma_chroma_to_rgb(vis, cb, cr)
    return ir.astype(np.float32), vis_rgb.astype(np.float32)


def generate_synthetic_pairs(out_dir: str | Path, n_pairs: int = 20, seed: int = 0,
                             size: int = 160) -> DatasetManifest:
    """Write n_pairs of deterministic synthetic pairs under out_dir/{ir,vis}."""
    if n_pairs < 1:
        raise ValidationError(f"n_pairs must be >= 1, got {n_pairs}")
    if size % 8 != 0:
        raise ValidationError(f"size must be a multiple of 8, got {size}")
    out_dir = Path(out_dir)
    (out_dir / "ir").mkdir(parents=True, exist_ok=True)
    (out_dir / "vis").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    identifiers = []
    for i in range(n_pairs):
        ir, vis_rgb = render_synthetic_scene(rng, size)
        identifier = f"pair_{i:03d}"
        save_gray_png(out_dir / "ir" / f"{identifier}.png", ir)
        save_rgb_png(out_dir / "vis" / f"{identifier}.png", vis_rgb)
        identifiers.append(identifier)
    return DatasetManifest(root=out_dir, identifiers=identifiers)
