"""Preprocessing defenses: per-image transforms paired with a classifier.

Four traditional transforms (additive Gaussian noise, JPEG round-trip,
color-bit squeezing, median smoothing) plus the generator-reconstruction
defense. Each transform preserves shape and the unit pixel range; evaluation
pairs every defense with a classifier trained on images transformed the same
way.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import median_filter

from .common import model_checksum, seeded_generator
from .reconstruction import ReconstructionConfig, classify_with_argan

# Pinned JPEG codec settings: Pillow baseline sequential, 4:2:0 chroma
# subsampling. Recorded in report metadata for bit-stability across runs.
JPEG_CODEC_ID = "pillow-baseline-yuv420"
_JPEG_SUBSAMPLING = 2  # 4:2:0


class DefenseKind(str, Enum):
    GAUSSIAN_AUGMENTATION = "gaussian_augmentation"
    JPEG_COMPRESSION = "jpeg_compression"
    FEATURE_SQUEEZING = "feature_squeezing"
    MEDIAN_SMOOTHING = "median_smoothing"
    AR_GAN = "ar_gan"


@dataclass
class DefenseSpec:
    kind: DefenseKind
    sigma: float = 1.0
    quality: int = 50
    bit_depth: int = 4
    window: int = 3
    paired_classifier: object | None = None
    generator: object | None = None
    recon_config: ReconstructionConfig | None = None

    def __post_init__(self):
        self.kind = DefenseKind(self.kind)
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 1 <= self.quality <= 100:
            raise ValueError("quality must be in [1, 100]")
        if not 1 <= self.bit_depth <= 8:
            raise ValueError("bit_depth must be in [1, 8]")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 1")

    def params(self) -> dict:
        if self.kind == DefenseKind.GAUSSIAN_AUGMENTATION:
            return {"sigma": self.sigma}
        if self.kind == DefenseKind.JPEG_COMPRESSION:
            return {"quality": self.quality, "codec": JPEG_CODEC_ID}
        if self.kind == DefenseKind.FEATURE_SQUEEZING:
            return {"bit_depth": self.bit_depth}
        if self.kind == DefenseKind.MEDIAN_SMOOTHING:
            return {"window": self.window}
        cfg = self.recon_config or ReconstructionConfig()
        return {"gradient_steps": cfg.gradient_steps, "random_restarts": cfg.random_restarts,
                "step_size": cfg.step_size, "seed": cfg.seed}

    def spec_hash_parts(self) -> dict:
        parts = {"kind": self.kind.value, **self.params()}
        if self.kind == DefenseKind.AR_GAN and self.generator is not None:
            parts["generator_checksum"] = model_checksum(self.generator)
        return parts


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), True
    return x, False


def gaussian_augment(x: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    """Add i.i.d. N(0, sigma^2) noise per pixel, clipped back to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x.clone()
    noise = torch.randn(x.shape, generator=seeded_generator("gaussian", seed)) * sigma
    return (x + noise).clamp(0.0, 1.0)


def jpeg_compress(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Encode to baseline JPEG at the given quality and decode back."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    batch, single = _batched(x)
    out = torch.empty_like(batch)
    for i in range(batch.shape[0]):
        arr = (batch[i].numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=quality,
                                  subsampling=_JPEG_SUBSAMPLING)
        buf.seek(0)
        with Image.open(buf) as im:
            dec = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        out[i] = torch.from_numpy(dec.transpose(2, 0, 1).copy())
    return out[0] if single else out


def feature_squeeze(x: torch.Tensor, bit_depth: int) -> torch.Tensor:
    """Quantize each pixel to 2^b levels: round(x * (2^b - 1)) / (2^b - 1).

    Rounding is half-away-from-zero (floor(v + 0.5) for v >= 0), so results
    are bit-exact and a second squeeze is the identity.
    """
    if not 1 <= bit_depth <= 8:
        raise ValueError("bit_depth must be in [1, 8]")
    levels = float(2 ** bit_depth - 1)
    return torch.floor(x * levels + 0.5) / levels


def median_smooth(x: torch.Tensor, window: int) -> torch.Tensor:
    """Replace each pixel by the median of its window, per channel.

    Edges use reflection padding (mirror without repeating the edge pixel).
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    batch, single = _batched(x)
    arr = batch.numpy()
    out = np.empty_like(arr)
    for i in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            out[i, c] = median_filter(arr[i, c], size=window, mode="mirror")
    result = torch.from_numpy(out)
    return result[0] if single else result


def apply_transform(x: torch.Tensor, spec: DefenseSpec, seed: int = 0) -> torch.Tensor:
    """Apply the defense's input transform (identity classification deferred).

    Not valid for AR_GAN, whose transform is the reconstruction path.
    """
    if spec.kind == DefenseKind.GAUSSIAN_AUGMENTATION:
        return gaussian_augment(x, spec.sigma, seed)
    if spec.kind == DefenseKind.JPEG_COMPRESSION:
        return jpeg_compress(x, spec.quality)
    if spec.kind == DefenseKind.FEATURE_SQUEEZING:
        return feature_squeeze(x, spec.bit_depth)
    if spec.kind == DefenseKind.MEDIAN_SMOOTHING:
        return median_smooth(x, spec.window)
    raise ValueError(f"{spec.kind} has no pure input transform")


def apply_defense_pipeline(x: torch.Tensor, spec: DefenseSpec,
                           seed: int = 0) -> tuple[int, float]:
    """Transform a single (3, 32, 32) unit-range image and classify it.

    Returns (label, wall-clock delay in seconds). The AR_GAN kind runs the
    reconstruction path with the spec's generator and recon_config.
    """
    if spec.paired_classifier is None:
        raise ValueError("spec has no paired classifier")
    if spec.kind == DefenseKind.AR_GAN:
        if spec.generator is None:
            raise ValueError("AR_GAN spec needs a generator")
        label, _, delay = classify_with_argan(x, spec.generator, spec.paired_classifier,
                                              spec.recon_config or ReconstructionConfig())
        return label, delay
    t0 = time.perf_counter()
    transformed = apply_transform(x, spec, seed=seed)
    label = int(spec.paired_classifier.predict(transformed.unsqueeze(0))[0])
    return label, time.perf_counter() - t0
