"""Model architectures and versioned checkpoint I/O.

Three networks:

* ``ResNet9Classifier`` -- compact residual classifier (eight conv layers plus
  one linear layer) over unit-range 3x32x32 images, two output logits.
* ``ConvGenerator`` -- transposed-convolution image synthesizer mapping a
  latent vector to a signed-range 3x32x32 image (tanh output).
* ``ConvCritic`` -- strided-convolution scorer producing one unbounded scalar
  per image; no sigmoid and no batch normalization anywhere (hidden layers use
  per-sample layer normalization instead, which keeps the gradient penalty
  free of cross-sample coupling).

Builders are pure functions of (architecture, seed): weights are drawn from a
local ``torch.Generator`` so the global RNG state never leaks in.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import model_checksum, sha256_file

CHECKPOINT_FORMAT_VERSION = 1

CLASSIFIER_ARCH = "resnet9-v1"
GENERATOR_ARCH = "dcgan-gen-v1"
CRITIC_ARCH = "conv-critic-v1"

DEFAULT_LATENT_DIM = 100
DEFAULT_GEN_CHANNELS = 64
DEFAULT_CRITIC_CHANNELS = 64


class CheckpointError(RuntimeError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint format_version does not match this code."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint blob is corrupt or truncated (checksum mismatch)."""


def _conv_block(in_ch: int, out_ch: int, pool: bool = False) -> nn.Sequential:
    layers = [nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
              nn.BatchNorm2d(out_ch),
              nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(_conv_block(channels, channels),
                                   _conv_block(channels, channels))

    def forward(self, x):
        return self.block(x) + x


class ResNet9Classifier(nn.Module):
    """Nine-layer residual classifier: 8 convs (two in each residual block) + 1 linear."""

    architecture_id = CLASSIFIER_ARCH

    def __init__(self, n_classes: int = 2):
        super().__init__()
        self.n_classes = n_classes
        self.stem = _conv_block(3, 64)
        self.conv2 = _conv_block(64, 128, pool=True)
        self.res1 = _ResBlock(128)
        self.conv3 = _conv_block(128, 256, pool=True)
        self.conv4 = _conv_block(256, 512, pool=True)
        self.res2 = _ResBlock(512)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(512, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.stem(x)
        out = self.conv2(out)
        out = self.res1(out)
        out = self.conv3(out)
        out = self.conv4(out)
        out = self.res2(out)
        out = self.pool(out).flatten(1)
        return self.fc(out)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(x).argmax(dim=1)


class ConvGenerator(nn.Module):
    """Latent vector to signed-range 3x32x32 image (tanh output)."""

    architecture_id = GENERATOR_ARCH

    def __init__(self, latent_dim: int = DEFAULT_LATENT_DIM,
                 base_channels: int = DEFAULT_GEN_CHANNELS):
        super().__init__()
        if latent_dim <= 0:
            raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
        self.latent_dim = latent_dim
        self.base_channels = base_channels
        g = base_channels
        self.net = nn.Sequential(
            # (k, 1, 1) -> (4g, 4, 4)
            nn.ConvTranspose2d(latent_dim, 4 * g, 4, stride=1, padding=0, bias=False),
            nn.BatchNorm2d(4 * g), nn.ReLU(inplace=True),
            # -> (2g, 8, 8)
            nn.ConvTranspose2d(4 * g, 2 * g, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * g), nn.ReLU(inplace=True),
            # -> (g, 16, 16)
            nn.ConvTranspose2d(2 * g, g, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(g), nn.ReLU(inplace=True),
            # -> (3, 32, 32)
            nn.ConvTranspose2d(g, 3, 4, stride=2, padding=1, bias=False),
            nn.Tanh(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim == 2:
            z = z.view(z.shape[0], self.latent_dim, 1, 1)
        return self.net(z)


class ConvCritic(nn.Module):
    """Strided downsampler to a single unbounded score per image."""

    architecture_id = CRITIC_ARCH

    def __init__(self, base_channels: int = DEFAULT_CRITIC_CHANNELS):
        super().__init__()
        self.base_channels = base_channels
        c = base_channels
        # GroupNorm(1, ch) normalizes per sample over (C, H, W); no batch coupling.
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.GroupNorm(1, 2 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.GroupNorm(1, 4 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 1, 4, stride=1, padding=0),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).flatten(1).squeeze(1)


def _init_dcgan(module: nn.Module, gen: torch.Generator) -> None:
    """DCGAN-convention init: conv weights ~ N(0, 0.02), norm scales ~ N(1, 0.02)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data = torch.randn(m.weight.shape, generator=gen) * 0.02
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            m.weight.data = 1.0 + torch.randn(m.weight.shape, generator=gen) * 0.02
            m.bias.data.zero_()


def _init_fan_in(module: nn.Module, gen: torch.Generator) -> None:
    """He/fan-in scaled normal init for conv and linear weights."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            m.weight.data = torch.randn(m.weight.shape, generator=gen) * std
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.Linear):
            std = math.sqrt(2.0 / m.in_features)
            m.weight.data = torch.randn(m.weight.shape, generator=gen) * std
            m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


def build_classifier(seed: int, n_classes: int = 2) -> ResNet9Classifier:
    gen = torch.Generator().manual_seed(seed)
    model = ResNet9Classifier(n_classes=n_classes)
    _init_fan_in(model, gen)
    return model


def build_generator(latent_dim: int, seed: int,
                    base_channels: int = DEFAULT_GEN_CHANNELS) -> ConvGenerator:
    gen = torch.Generator().manual_seed(seed)
    model = ConvGenerator(latent_dim=latent_dim, base_channels=base_channels)
    _init_dcgan(model, gen)
    return model


def build_critic(seed: int, base_channels: int = DEFAULT_CRITIC_CHANNELS) -> ConvCritic:
    gen = torch.Generator().manual_seed(seed)
    model = ConvCritic(base_channels=base_channels)
    _init_dcgan(model, gen)
    return model


def count_layers(model: nn.Module) -> dict[str, int]:
    counts = {"conv": 0, "linear": 0, "batch_norm": 0}
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            counts["conv"] += 1
        elif isinstance(m, nn.Linear):
            counts["linear"] += 1
        elif isinstance(m, nn.modules.batchnorm._BatchNorm):
            counts["batch_norm"] += 1
    return counts


def _arch_config(model: nn.Module) -> dict:
    if isinstance(model, ResNet9Classifier):
        return {"n_classes": model.n_classes}
    if isinstance(model, ConvGenerator):
        return {"latent_dim": model.latent_dim, "base_channels": model.base_channels}
    if isinstance(model, ConvCritic):
        return {"base_channels": model.base_channels}
    raise CheckpointError(f"cannot checkpoint unknown model type {type(model).__name__}")


def _build_from_arch(architecture_id: str, arch_config: dict) -> nn.Module:
    if architecture_id == CLASSIFIER_ARCH:
        return ResNet9Classifier(**arch_config)
    if architecture_id == GENERATOR_ARCH:
        return ConvGenerator(**arch_config)
    if architecture_id == CRITIC_ARCH:
        return ConvCritic(**arch_config)
    raise IncompatibleCheckpointError(f"unknown architecture_id {architecture_id!r}")


def save_checkpoint(model: nn.Module, path: str | Path, metadata: dict | None = None) -> Path:
    """Write ``path`` (parameter blob) and ``path + '.json'`` (sidecar).

    The sidecar carries architecture_id, format_version, the blob's sha256 for
    integrity checks, and any training metadata (epoch, seed, loss curve).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "architecture_id": model.architecture_id,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch_config": _arch_config(model),
        "sha256": sha256_file(path),
        "model_checksum": model_checksum(model),
        "metadata": metadata or {},
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return path


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Load a checkpoint; returns (model in eval mode, sidecar metadata dict)."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise CheckpointError(f"checkpoint {path} (or its sidecar) not found")
    with open(sidecar_path) as f:
        sidecar = json.load(f)
    version = sidecar.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format_version {version} != supported {CHECKPOINT_FORMAT_VERSION}")
    if sha256_file(path) != sidecar["sha256"]:
        raise CheckpointIntegrityError(f"checkpoint blob {path} fails its integrity checksum")
    model = _build_from_arch(sidecar["architecture_id"], sidecar.get("arch_config", {}))
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except Exception as e:  # unreadable blob despite matching hash
        raise CheckpointIntegrityError(f"checkpoint blob {path} could not be loaded: {e}") from e
    model.eval()
    return model, sidecar


def softmax_probabilities(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=-1)
