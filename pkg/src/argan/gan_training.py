"""Generator/critic training with a gradient-penalty Wasserstein objective.

The critic loss is

    E[D(fake)] - E[D(real)] + lambda * E[(||grad_xhat D(xhat)||_2 - 1)^2]

where each penalty sample ``xhat = t * fake + (1 - t) * real`` blends a
generated and a real image with its own t drawn uniformly from [0, 1].
Raw critic scores are used throughout (the critic has no sigmoid). The
penalty term is differentiated through, so critic updates involve
second-order gradients.

Training alternates several critic steps per generator step and emits
generator checkpoints on a fixed epoch interval for each configured seed;
the best candidate is then picked by classification accuracy of its
reconstructions, not by reconstruction error.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .dataset import LabeledDataset, RangeTag
from .models import ConvCritic, ConvGenerator, build_critic, build_generator
from .reconstruction import ReconstructionConfig, reconstruct_batch

logger = logging.getLogger(__name__)

DEFAULT_GRADIENT_PENALTY_WEIGHT = 10.0


class TrainingDivergedError(RuntimeError):
    """Non-finite loss encountered; training aborted for this seed."""


@dataclass
class GanTrainConfig:
    gradient_penalty_weight: float = DEFAULT_GRADIENT_PENALTY_WEIGHT
    critic_steps_per_generator_step: int = 5
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    checkpoint_interval: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    latent_dim: int = 100
    base_channels: int = 64

    def __post_init__(self):
        if self.gradient_penalty_weight <= 0:
            raise ValueError("gradient_penalty_weight must be > 0")
        if self.critic_steps_per_generator_step < 1:
            raise ValueError("critic_steps_per_generator_step must be >= 1")


@dataclass
class GeneratorCheckpoint:
    """One emitted candidate: generator state plus provenance for tie-breaking."""

    generator: ConvGenerator
    critic: ConvCritic
    seed: int
    epoch: int
    order_index: int    # emission order across the whole run; earliest wins ties


def interpolate_samples(real: torch.Tensor, fake: torch.Tensor,
                        t: torch.Tensor | None = None,
                        rng: torch.Generator | None = None) -> torch.Tensor:
    """Blend ``t * fake + (1 - t) * real`` with one t per sample.

    Every pixel of the result lies on the segment between the two endpoint
    images (and hence within the convex hull of their per-pixel bounds).
    """
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have matching shapes")
    b = real.shape[0]
    if t is None:
        t = torch.rand(b, generator=rng)
    t = t.view(b, *([1] * (real.ndim - 1))).to(real.dtype)
    return t * fake + (1.0 - t) * real


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor,
                     t: torch.Tensor | None = None,
                     rng: torch.Generator | None = None) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Differentiable w.r.t. critic parameters (graph is retained through the
    gradient computation).
    """
    xhat = interpolate_samples(real.detach(), fake.detach(), t=t, rng=rng)
    xhat.requires_grad_(True)
    scores = critic(xhat)
    grads, = torch.autograd.grad(scores.sum(), xhat, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(real_batch: torch.Tensor, fake_batch: torch.Tensor, critic,
                penalty_weight: float = DEFAULT_GRADIENT_PENALTY_WEIGHT,
                t: torch.Tensor | None = None,
                rng: torch.Generator | None = None) -> tuple[torch.Tensor, dict]:
    """Full critic objective; returns (loss, components dict).

    Raises:
        TrainingDivergedError: if the loss is non-finite.
    """
    score_fake = critic(fake_batch).mean()
    score_real = critic(real_batch).mean()
    penalty = gradient_penalty(critic, real_batch, fake_batch, t=t, rng=rng)
    loss = score_fake - score_real + penalty_weight * penalty
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"critic loss non-finite (fake={score_fake.item():.4g}, "
            f"real={score_real.item():.4g}, penalty={penalty.item():.4g})")
    return loss, {"score_fake": score_fake.item(), "score_real": score_real.item(),
                  "penalty": penalty.item()}


def generator_loss(fake_batch: torch.Tensor, critic) -> torch.Tensor:
    return -critic(fake_batch).mean()


def _train_single_gan(images: torch.Tensor, config: GanTrainConfig, seed: int,
                      order_start: int, curve_path: Path | None):
    """Train one generator/critic pair; returns (checkpoints, curve rows)."""
    generator = build_generator(config.latent_dim, seed, config.base_channels)
    critic = build_critic(seed + 1, config.base_channels)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate,
                             betas=(config.adam_beta1, config.adam_beta2))
    opt_d = torch.optim.Adam(critic.parameters(), lr=config.learning_rate,
                             betas=(config.adam_beta1, config.adam_beta2))
    rng = torch.Generator().manual_seed(seed)

    def snapshot(epoch: int, order_index: int) -> GeneratorCheckpoint:
        gen_copy = ConvGenerator(config.latent_dim, config.base_channels)
        gen_copy.load_state_dict(generator.state_dict())
        gen_copy.eval()
        crit_copy = ConvCritic(config.base_channels)
        crit_copy.load_state_dict(critic.state_dict())
        crit_copy.eval()
        return GeneratorCheckpoint(gen_copy, crit_copy, seed, epoch, order_index)

    checkpoints = [snapshot(0, order_start)]
    curve_rows = []
    n = images.shape[0]
    steps_per_epoch = max(1, n // config.batch_size)

    for epoch in range(1, config.epochs + 1):
        perm = torch.randperm(n, generator=rng)
        epoch_losses, epoch_penalties = [], []
        for step in range(steps_per_epoch):
            idx = perm[(step * config.batch_size) % n:][:config.batch_size]
            real = images[idx]
            b = real.shape[0]
            try:
                for _ in range(config.critic_steps_per_generator_step):
                    z = torch.randn(b, config.latent_dim, generator=rng)
                    with torch.no_grad():
                        fake = generator(z)
                    loss_d, parts = critic_loss(real, fake, critic,
                                                config.gradient_penalty_weight, rng=rng)
                    opt_d.zero_grad()
                    loss_d.backward()
                    opt_d.step()
                    epoch_losses.append(loss_d.item())
                    epoch_penalties.append(parts["penalty"])
                z = torch.randn(b, config.latent_dim, generator=rng)
                loss_g = generator_loss(generator(z), critic)
                if not torch.isfinite(loss_g):
                    raise TrainingDivergedError(f"generator loss non-finite at epoch {epoch}")
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()
            except TrainingDivergedError as e:
                logger.error("seed %d diverged at epoch %d: %s; keeping prior checkpoints",
                             seed, epoch, e)
                return checkpoints, curve_rows
        curve_rows.append({"epoch": epoch,
                           "critic_loss": sum(epoch_losses) / len(epoch_losses),
                           "penalty_mean": sum(epoch_penalties) / len(epoch_penalties)})
        if epoch % config.checkpoint_interval == 0:
            checkpoints.append(snapshot(epoch, order_start + len(checkpoints)))

    if config.epochs and config.epochs % config.checkpoint_interval != 0:
        checkpoints.append(snapshot(config.epochs, order_start + len(checkpoints)))
    if curve_path is not None:
        curve_path.parent.mkdir(parents=True, exist_ok=True)
        with open(curve_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=("epoch", "critic_loss", "penalty_mean"))
            writer.writeheader()
            writer.writerows(curve_rows)
    return checkpoints, curve_rows


def train_gan(train_set: LabeledDataset, config: GanTrainConfig,
              curve_dir: str | Path | None = None) -> list[GeneratorCheckpoint]:
    """Train one GAN per configured seed on signed-range images.

    Emits the initial state plus a checkpoint every ``checkpoint_interval``
    epochs (and the final epoch). With ``epochs=0`` only initial checkpoints
    are returned. A diverging seed stops early and keeps its prior
    checkpoints. Deterministic given (config, data order).
    """
    if len(train_set) == 0:
        raise ValueError("train_set is empty")
    if train_set.range_tag != RangeTag.SIGNED:
        raise ValueError("train_gan expects signed-range images; convert first")
    checkpoints: list[GeneratorCheckpoint] = []
    for seed in config.seeds:
        curve_path = Path(curve_dir) / f"curve_seed{seed}.csv" if curve_dir else None
        ckpts, _ = _train_single_gan(train_set.images, config, seed,
                                     order_start=len(checkpoints), curve_path=curve_path)
        checkpoints.extend(ckpts)
    return checkpoints


def select_best_generator(checkpoints: list[GeneratorCheckpoint], classifier_1,
                          selection_set: LabeledDataset,
                          recon_config: ReconstructionConfig,
                          scores_out: list | None = None) -> GeneratorCheckpoint:
    """Pick the candidate whose reconstructions classifier_1 labels best.

    Every selection image is inverted through every candidate generator; the
    score is classification accuracy on the reconstructions (not residual
    error). Ties go to the earliest-emitted checkpoint.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if len(selection_set) == 0:
        raise ValueError("selection set is empty")
    unit = selection_set.to_range(RangeTag.UNIT)
    labels = unit.labels
    best = None
    best_score = -1.0
    for ckpt in checkpoints:
        recon_unit = reconstruct_batch(unit.images, ckpt.generator, recon_config).images_unit
        preds = classifier_1.predict(recon_unit)
        acc = (preds == labels).float().mean().item()
        if scores_out is not None:
            scores_out.append({"seed": ckpt.seed, "epoch": ckpt.epoch,
                               "order_index": ckpt.order_index, "accuracy": acc})
        logger.info("candidate seed=%d epoch=%d: reconstruction accuracy %.4f",
                    ckpt.seed, ckpt.epoch, acc)
        if best is None or acc > best_score or (acc == best_score and
                                                ckpt.order_index < best.order_index):
            best, best_score = ckpt, acc
    return best
