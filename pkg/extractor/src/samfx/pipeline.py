"""Volume-to-embedding pipeline around a frozen 2D encoder.

Geometry: each depth slice is zero-padded to a centered square, resized
to the encoder input size k, encoded to a 256-channel grid at 1/16th
resolution, stacked along depth, resized back to the padded square,
cropped to the original in-plane dims, and reduced to the requested
channel count by grouped means.  Output spatial dims always equal the
input volume dims.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .mvf import read_mvf, write_mvf
from .vit import VARIANTS, load_encoder

# ImageNet statistics used by SAM's preprocessing, 0..255 scale
PIXEL_MEAN = (123.675, 116.28, 103.53)
PIXEL_STD = (58.395, 57.12, 57.375)


@dataclass
class ExtractorConfig:
    checkpoint: str
    variant: str = "vit_b"
    encoder_size: int = 512        # k
    device: str = "cpu"
    channels: int = 16             # output channel count after reduction
    batch_size: int = 4
    depth_chunk: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; options: {sorted(VARIANTS)}")
        if self.encoder_size % VARIANTS[self.variant].patch_size != 0:
            raise ValueError("encoder size must be divisible by the patch size")
        if self.channels < 1 or self.channels > VARIANTS[self.variant].out_chans:
            raise ValueError("channels must be in [1, 256]")
        if self.device.startswith("cuda") and not torch.cuda.is_available():
            raise RuntimeError("cuda requested but not available")


def plan_square(h: int, w: int, k: int):
    """Centered pad-to-square geometry; returns (side, pad_h, pad_w)."""
    side = max(h, w)
    if k < side:
        raise ValueError(f"encoder size {k} smaller than max(H, W) = {side}")
    return side, (side - h) // 2, (side - w) // 2


def normalize_volume(vol: np.ndarray) -> np.ndarray:
    """Min-max the volume to 0..255 (flat volumes map to zeros)."""
    lo = float(vol.min())
    hi = float(vol.max())
    if hi <= lo:
        return np.zeros_like(vol, dtype=np.float32)
    return ((vol - lo) * (255.0 / (hi - lo))).astype(np.float32)


def preprocess_slices(vol: np.ndarray, k: int) -> torch.Tensor:
    """(H, W, D) volume to (D, 3, k, k) encoder-ready tensor."""
    h, w, d = vol.shape
    side, pad_h, pad_w = plan_square(h, w, k)
    norm = normalize_volume(vol)
    slices = torch.from_numpy(np.ascontiguousarray(norm.transpose(2, 0, 1)))  # D H W
    padded = torch.zeros(d, side, side, dtype=torch.float32)
    padded[:, pad_h:pad_h + h, pad_w:pad_w + w] = slices
    up = F.interpolate(padded.unsqueeze(1), size=(k, k), mode="bilinear", align_corners=True)
    rgb = up.repeat(1, 3, 1, 1)
    mean = torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(PIXEL_STD).view(1, 3, 1, 1)
    return (rgb - mean) / std


def reduce_grouped_mean(feats: torch.Tensor, target: int) -> torch.Tensor:
    """Grouped mean over contiguous channel groups: (B, C, ...) ->
    (B, target, ...)."""
    C = feats.shape[1]
    if target == C:
        return feats
    if C % target == 0:
        g = C // target
        return feats.reshape(feats.shape[0], target, g, *feats.shape[2:]).mean(dim=2)
    bounds = [math.floor(i * C / target) for i in range(target + 1)]
    return torch.stack([feats[:, a:b].mean(dim=1) for a, b in zip(bounds, bounds[1:])], dim=1)


def extract_features(vol: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    """(H, W, D) volume to (channels, H, W, D) float32 embedding."""
    if vol.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {vol.shape}")
    h, w, d = vol.shape
    k = cfg.encoder_size
    side, pad_h, pad_w = plan_square(h, w, k)
    model = load_encoder(cfg.variant, cfg.checkpoint, k, device=cfg.device)

    batch = preprocess_slices(vol.astype(np.float32), k).to(cfg.device)
    grids = []
    with torch.inference_mode():
        for start in range(0, d, cfg.batch_size):
            grids.append(model(batch[start:start + cfg.batch_size]).cpu())
    grids = torch.cat(grids, dim=0)  # (D, 256, k/16, k/16)

    out = np.empty((cfg.channels, h, w, d), dtype=np.float32)
    with torch.inference_mode():
        for start in range(0, d, cfg.depth_chunk):
            chunk = grids[start:start + cfg.depth_chunk]
            up = F.interpolate(chunk, size=(side, side), mode="bilinear", align_corners=True)
            cropped = up[:, :, pad_h:pad_h + h, pad_w:pad_w + w]
            reduced = reduce_grouped_mean(cropped, cfg.channels)  # (dc, C', H, W)
            out[:, :, :, start:start + chunk.shape[0]] = (
                reduced.permute(1, 2, 3, 0).numpy().astype(np.float32)
            )
    if not np.all(np.isfinite(out)):
        raise RuntimeError("encoder produced non-finite features")
    return out


def extract_file(input_path, output_path, cfg: ExtractorConfig) -> None:
    """MVF volume in, MVF channel-first feature volume out."""
    vol = read_mvf(input_path)
    if vol.ndim != 3:
        raise ValueError(f"{input_path}: expected a 3D volume payload, got {vol.shape}")
    feats = extract_features(np.asarray(vol, dtype=np.float32), cfg)
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)
    write_mvf(output_path, feats)
