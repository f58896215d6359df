"""Latent-vector inversion of a frozen generator.

Given an input image x, finds z* minimizing ||G(z) - x||_2^2 by plain
fixed-step gradient descent with R independently seeded random restarts of L
steps each, keeping the restart with the smallest final residual. G(z*) is
the denoised stand-in that gets classified.

Per-restart initial latents are seeded from (config seed, content hash of x,
restart index), so a given image's trajectories do not depend on batch order
or on how many restarts run alongside them. The single-image API runs
restarts sequentially, which makes restart subsets bit-reproducible; the
batch API fuses images x restarts into one descent for throughput.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .common import seeded_generator, tensor_content_hash
from .dataset import LabeledDataset, RangeTag, convert_tensor_range

logger = logging.getLogger(__name__)

DEFAULT_GRADIENT_STEPS = 2250
DEFAULT_RANDOM_RESTARTS = 20
DEFAULT_STEP_SIZE = 0.01

# Reference operating point on the delay/accuracy trade-off (see sensitivity_sweep).
REFERENCE_OPERATING_POINT = (2250, 20)


class ReconstructionError(RuntimeError):
    """All restarts were discarded (non-finite trajectories)."""


@dataclass
class ReconstructionConfig:
    gradient_steps: int = DEFAULT_GRADIENT_STEPS      # L
    random_restarts: int = DEFAULT_RANDOM_RESTARTS    # R
    step_size: float = DEFAULT_STEP_SIZE
    latent_init_distribution: str = "standard_normal"
    seed: int = 0

    def __post_init__(self):
        if self.gradient_steps < 0:
            raise ValueError("gradient_steps must be >= 0")
        if self.random_restarts < 1:
            raise ValueError("random_restarts must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.latent_init_distribution != "standard_normal":
            raise ValueError("only standard_normal latent init is supported")

    @property
    def work_units(self) -> int:
        return self.gradient_steps * self.random_restarts


@dataclass
class ReconstructionResult:
    best_latent: torch.Tensor          # z*, shape (latent_dim,)
    reconstruction: torch.Tensor       # G(z*) converted to unit range
    reconstruction_raw: torch.Tensor   # G(z*) in the generator's native range
    residual: float                    # ||G(z*) - x||_2^2 in native range
    restart_residuals: list[float]     # final residual per restart (inf if discarded)
    work_units: int                    # L * R, independent of discards

    def __post_init__(self):
        finite = [r for r in self.restart_residuals if r != float("inf")]
        assert finite and min(finite) == self.residual
        assert self.residual >= 0.0


def _frozen_params(module: torch.nn.Module):
    saved = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    return saved


def _restore_params(saved) -> None:
    for p, flag in saved:
        p.requires_grad_(flag)


def _residuals(outputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return ((outputs - targets) ** 2).flatten(1).sum(dim=1)


def _descend(latents: torch.Tensor, targets: torch.Tensor, generator,
             steps: int, step_size: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Run fixed-step gradient descent on the squared-error residual.

    Returns (final latents, per-latent discard mask). Latents that turn
    non-finite are frozen at zero and marked discarded.
    """
    z = latents.clone()
    discarded = torch.zeros(z.shape[0], dtype=torch.bool)
    generator.eval()
    saved = _frozen_params(generator)
    try:
        for _ in range(steps):
            z_var = z.detach().requires_grad_(True)
            residual = _residuals(generator(z_var), targets).sum()
            grad, = torch.autograd.grad(residual, z_var)
            z = z_var.detach() - step_size * grad
            bad = ~torch.isfinite(z).flatten(1).all(dim=1)
            if bad.any():
                newly = bad & ~discarded
                if newly.any():
                    logger.warning("discarding %d non-finite restart trajectories",
                                   int(newly.sum()))
                discarded |= bad
                z[discarded] = 0.0
    finally:
        _restore_params(saved)
    return z.detach(), discarded


def _final_residuals(z: torch.Tensor, targets: torch.Tensor, generator,
                     discarded: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        res = _residuals(generator(z), targets)
    res = torch.where(torch.isfinite(res), res, torch.full_like(res, float("inf")))
    res[discarded] = float("inf")
    return res


def _init_latents(x: torch.Tensor, latent_dim: int, restarts: int, seed: int) -> torch.Tensor:
    content = tensor_content_hash(x)
    return torch.stack([
        torch.randn(latent_dim, generator=seeded_generator(seed, content, r))
        for r in range(restarts)
    ])


def reconstruct(x: torch.Tensor, generator, config: ReconstructionConfig,
                initial_latents: torch.Tensor | None = None) -> ReconstructionResult:
    """Invert the generator for a single input.

    Args:
        x: target in the generator's output space (signed range for images).
        generator: frozen module with a ``latent_dim`` attribute; called on
            (B, latent_dim) latents.
        config: descent parameters (L steps, R restarts, step size, seed).
        initial_latents: optional explicit (R, latent_dim) inits overriding
            the seeded standard-normal draw.

    Restarts run sequentially so their trajectories are independent of R:
    the residual over a restart superset can only improve on a subset's.

    Raises:
        ReconstructionError: if every restart trajectory went non-finite.
    """
    if initial_latents is not None:
        inits = initial_latents.clone().to(torch.float32)
        if inits.ndim != 2 or inits.shape[0] != config.random_restarts:
            raise ValueError("initial_latents must be (random_restarts, latent_dim)")
    else:
        inits = _init_latents(x, generator.latent_dim, config.random_restarts, config.seed)

    target = x.detach().unsqueeze(0).to(torch.float32)
    best_z, best_res = None, float("inf")
    restart_residuals = []
    for r in range(config.random_restarts):
        z, discarded = _descend(inits[r:r + 1], target, generator,
                                config.gradient_steps, config.step_size)
        res = _final_residuals(z, target, generator, discarded)[0].item()
        restart_residuals.append(res)
        if res < best_res:
            best_res, best_z = res, z[0]
    if best_z is None:
        raise ReconstructionError("all restarts discarded (non-finite residuals)")

    with torch.no_grad():
        raw = generator(best_z.unsqueeze(0))[0]
    return ReconstructionResult(
        best_latent=best_z,
        reconstruction=convert_tensor_range(raw, RangeTag.SIGNED, RangeTag.UNIT),
        reconstruction_raw=raw,
        residual=best_res,
        restart_residuals=restart_residuals,
        work_units=config.work_units,
    )


@dataclass
class BatchReconstruction:
    images_unit: torch.Tensor      # (N, 3, 32, 32) reconstructions in unit range
    residuals: torch.Tensor        # (N,) best residual per image (signed range)
    latents: torch.Tensor          # (N, latent_dim) best latent per image
    work_units_per_image: int


def reconstruct_batch(images_unit: torch.Tensor, generator,
                      config: ReconstructionConfig,
                      max_latent_batch: int = 256,
                      progress_label: str | None = None) -> BatchReconstruction:
    """Invert the generator for a batch of unit-range images.

    Fuses images x restarts into one descent (each latent's gradient only
    depends on its own output, so trajectories stay independent). Chunk size
    is capped at ``max_latent_batch`` latents.

    Raises:
        ReconstructionError: if any image loses all of its restarts.
    """
    n = images_unit.shape[0]
    r = config.random_restarts
    k = generator.latent_dim
    signed = convert_tensor_range(images_unit, RangeTag.UNIT, RangeTag.SIGNED)
    images_per_chunk = max(1, max_latent_batch // r)

    out_images = torch.empty_like(images_unit)
    out_residuals = torch.empty(n)
    out_latents = torch.empty(n, k)

    for start in range(0, n, images_per_chunk):
        chunk = signed[start:start + images_per_chunk]
        b = chunk.shape[0]
        inits = torch.stack([
            torch.randn(k, generator=seeded_generator(
                config.seed, tensor_content_hash(chunk[i]), restart))
            for i in range(b) for restart in range(r)
        ])
        targets = chunk.repeat_interleave(r, dim=0)
        z, discarded = _descend(inits, targets, generator,
                                config.gradient_steps, config.step_size)
        res = _final_residuals(z, targets, generator, discarded).view(b, r)
        best = res.argmin(dim=1)
        best_res = res.gather(1, best.unsqueeze(1)).squeeze(1)
        if torch.isinf(best_res).any():
            raise ReconstructionError(
                f"image(s) {start + torch.nonzero(torch.isinf(best_res)).flatten().tolist()} "
                "lost all restarts")
        z_best = z.view(b, r, k).gather(1, best.view(b, 1, 1).expand(b, 1, k)).squeeze(1)
        with torch.no_grad():
            raw = generator(z_best)
        out_images[start:start + b] = convert_tensor_range(raw, RangeTag.SIGNED, RangeTag.UNIT)
        out_residuals[start:start + b] = best_res
        out_latents[start:start + b] = z_best
        if progress_label:
            logger.info("%s: reconstructed %d/%d", progress_label, min(start + b, n), n)

    return BatchReconstruction(out_images.clamp(0.0, 1.0), out_residuals, out_latents,
                               config.work_units)


def classify_with_argan(x_unit: torch.Tensor, generator, classifier_2,
                        config: ReconstructionConfig) -> tuple[int, ReconstructionResult, float]:
    """Full single-image defense path: reconstruct, convert, classify.

    Args:
        x_unit: (3, 32, 32) unit-range image.

    Returns:
        (predicted label, ReconstructionResult, wall-clock delay in seconds).
        ``work_units`` on the result is the hardware-independent cost.
    """
    t0 = time.perf_counter()
    signed = convert_tensor_range(x_unit, RangeTag.UNIT, RangeTag.SIGNED)
    result = reconstruct(signed, generator, config)
    recon = result.reconstruction.clamp(0.0, 1.0)
    label = int(classifier_2.predict(recon.unsqueeze(0))[0])
    delay = time.perf_counter() - t0
    return label, result, delay


def sensitivity_sweep(test_set: LabeledDataset, generator, classifier_2,
                      l_grid: list[int], r_grid: list[int],
                      base_config: ReconstructionConfig | None = None,
                      csv_path: str | Path | None = None) -> list[dict]:
    """Delay/accuracy trade-off over the full (L, R) grid.

    Per-image delay is measured on the sequential single-image path. The row
    matching REFERENCE_OPERATING_POINT is flagged; its delay is reported, not
    asserted (hardware-dependent).
    """
    if not l_grid or not r_grid:
        raise ValueError("grids must be non-empty")
    base = base_config or ReconstructionConfig()
    unit = test_set.to_range(RangeTag.UNIT)
    rows = []
    for l_steps in l_grid:
        for restarts in r_grid:
            cfg = ReconstructionConfig(gradient_steps=l_steps, random_restarts=restarts,
                                       step_size=base.step_size, seed=base.seed)
            delays, correct = [], 0
            for i in range(len(unit)):
                label, _, delay = classify_with_argan(unit.images[i], generator,
                                                      classifier_2, cfg)
                delays.append(delay)
                correct += int(label == int(unit.labels[i]))
            rows.append({
                "gradient_steps": l_steps,
                "random_restarts": restarts,
                "work_units": cfg.work_units,
                "mean_delay_seconds": sum(delays) / len(delays),
                "accuracy": correct / len(unit),
                "reference_operating_point": (l_steps, restarts) == REFERENCE_OPERATING_POINT,
            })
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows
