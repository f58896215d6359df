import pytest
import torch
import torch.nn as nn

from argan.dataset import RangeTag, convert_tensor_range
from argan.reconstruction import (ReconstructionConfig, ReconstructionError,
                                  classify_with_argan, reconstruct, reconstruct_batch,
                                  sensitivity_sweep)


class LinearGenerator(nn.Module):
    """G(z) = A z for a full-column-rank A; least squares gives the oracle."""

    def __init__(self, a):
        super().__init__()
        self.a = nn.Parameter(torch.as_tensor(a, dtype=torch.float32),
                              requires_grad=False)
        self.latent_dim = self.a.shape[1]

    def forward(self, z):
        return z @ self.a.T


@pytest.fixture(scope="module")
def linear_gen():
    a = torch.randn(8, 3, generator=torch.Generator().manual_seed(0))
    return LinearGenerator(a)


class TestConfig:
    def test_defaults_match_operating_point(self):
        cfg = ReconstructionConfig()
        assert cfg.gradient_steps == 2250
        assert cfg.random_restarts == 20
        assert cfg.work_units == 45000

    def test_invariants(self):
        with pytest.raises(ValueError):
            ReconstructionConfig(gradient_steps=-1)
        with pytest.raises(ValueError):
            ReconstructionConfig(random_restarts=0)
        with pytest.raises(ValueError):
            ReconstructionConfig(step_size=0.0)


class TestLinearOracle:
    def test_matches_least_squares(self, linear_gen):
        x = torch.randn(8, generator=torch.Generator().manual_seed(1))
        a64 = linear_gen.a.double()
        z_opt, *_ = torch.linalg.lstsq(a64, x.double().unsqueeze(1))
        residual_opt = ((a64 @ z_opt).squeeze(1) - x.double()).pow(2).sum().item()
        cfg = ReconstructionConfig(gradient_steps=2000, random_restarts=3,
                                   step_size=0.01, seed=0)
        result = reconstruct(x, linear_gen, cfg)
        assert result.residual <= residual_opt + 1e-4

    def test_exact_init_zero_steps_zero_residual(self, linear_gen):
        z0 = torch.randn(3, generator=torch.Generator().manual_seed(2))
        x = linear_gen(z0.unsqueeze(0))[0].detach()
        cfg = ReconstructionConfig(gradient_steps=0, random_restarts=1, seed=0)
        result = reconstruct(x, linear_gen, cfg, initial_latents=z0.unsqueeze(0))
        assert result.residual == 0.0


class TestRestartSemantics:
    def test_restart_dominance_exact(self, linear_gen):
        x = torch.randn(8, generator=torch.Generator().manual_seed(3))
        r2 = reconstruct(x, linear_gen,
                         ReconstructionConfig(gradient_steps=50, random_restarts=2, seed=0))
        r4 = reconstruct(x, linear_gen,
                         ReconstructionConfig(gradient_steps=50, random_restarts=4, seed=0))
        # restarts are seeded per (seed, image hash, index): the first two
        # trajectories are identical, so the min over the superset dominates
        assert r4.restart_residuals[:2] == r2.restart_residuals
        assert r4.residual <= r2.residual

    def test_result_invariants(self, linear_gen):
        x = torch.randn(8, generator=torch.Generator().manual_seed(4))
        cfg = ReconstructionConfig(gradient_steps=30, random_restarts=3, seed=1)
        r = reconstruct(x, linear_gen, cfg)
        assert r.residual == min(r.restart_residuals)
        assert r.residual >= 0.0
        assert r.work_units == 90

    def test_deterministic(self, linear_gen):
        x = torch.randn(8, generator=torch.Generator().manual_seed(5))
        cfg = ReconstructionConfig(gradient_steps=40, random_restarts=2, seed=7)
        a = reconstruct(x, linear_gen, cfg)
        b = reconstruct(x, linear_gen, cfg)
        assert torch.equal(a.best_latent, b.best_latent)

    def test_all_restarts_discarded_errors(self):
        class ExplodingGenerator(nn.Module):
            latent_dim = 2

            def forward(self, z):
                return (z * 1e20).pow(3)

        cfg = ReconstructionConfig(gradient_steps=5, random_restarts=2, seed=0)
        with pytest.raises(ReconstructionError):
            reconstruct(torch.ones(2), ExplodingGenerator(), cfg)


class TestDescentBehavior:
    def test_final_residual_not_worse_than_initial_for_most_restarts(
            self, trained_generator, synth_splits):
        # fixed-step descent may overshoot on single steps, but with the
        # default step size at least 90% of restarts must end at or below
        # their initial residual
        test = synth_splits["test"]
        ok = total = 0
        for i in range(12):
            x = convert_tensor_range(test.images[i], RangeTag.UNIT, RangeTag.SIGNED)
            run = reconstruct(x, trained_generator,
                              ReconstructionConfig(gradient_steps=100, random_restarts=4,
                                                   step_size=0.01, seed=0))
            init = reconstruct(x, trained_generator,
                               ReconstructionConfig(gradient_steps=0, random_restarts=4,
                                                    step_size=0.01, seed=0))
            for after, before in zip(run.restart_residuals, init.restart_residuals):
                total += 1
                ok += int(after <= before)
        assert ok / total >= 0.90

    def test_batch_restart_count_independence(self, linear_gen):
        # per-image seeding keeps each image's restarts identical whether it
        # is reconstructed alone or in a batch
        xs = torch.randn(4, 8, generator=torch.Generator().manual_seed(6))
        cfg = ReconstructionConfig(gradient_steps=30, random_restarts=2, seed=0)
        batch = reconstruct_batch(
            convert_tensor_range(xs, RangeTag.SIGNED, RangeTag.UNIT), linear_gen, cfg)
        assert batch.images_unit.shape[0] == 4
        assert (batch.residuals >= 0).all()


class TestPipeline:
    def test_work_units_arithmetic(self):
        assert ReconstructionConfig(gradient_steps=2250,
                                    random_restarts=20).work_units == 45000

    def test_classify_returns_label_and_delay(self, trained_generator,
                                              small_classifier, synth_splits):
        x = synth_splits["test"].images[0]
        cfg = ReconstructionConfig(gradient_steps=40, random_restarts=2, seed=0)
        label, result, delay = classify_with_argan(x, trained_generator,
                                                   small_classifier, cfg)
        assert label in (0, 1)
        assert delay > 0.0
        assert result.work_units == 80
        assert result.reconstruction.min().item() >= -1e-6
        assert result.reconstruction.max().item() <= 1.0 + 1e-6

    def test_label_stable_under_tiny_noise(self, trained_generator, small_classifier,
                                           synth_splits):
        # batched pipeline on x vs x + noise (L-inf 1e-4) agrees on >= 99%
        test = synth_splits["test"].subset(range(100))
        cfg = ReconstructionConfig(gradient_steps=200, random_restarts=4,
                                   step_size=0.01, seed=0)
        noise_gen = torch.Generator().manual_seed(9)
        noise = (torch.rand(test.images.shape, generator=noise_gen) * 2 - 1) * 1e-4
        noisy = (test.images + noise).clamp(0.0, 1.0)
        clean = reconstruct_batch(test.images, trained_generator, cfg)
        perturbed = reconstruct_batch(noisy, trained_generator, cfg)
        labels_clean = small_classifier.predict(clean.images_unit)
        labels_noisy = small_classifier.predict(perturbed.images_unit)
        agreement = (labels_clean == labels_noisy).float().mean().item()
        assert agreement >= 0.99


class TestSensitivity:
    def test_grid_rows_and_flags(self, trained_generator, small_classifier,
                                 synth_splits, tmp_path):
        test = synth_splits["test"].subset(range(4))
        rows = sensitivity_sweep(test, trained_generator, small_classifier,
                                 l_grid=[10, 20], r_grid=[1, 2],
                                 csv_path=tmp_path / "sens.csv")
        assert len(rows) == 4
        work = [r["work_units"] for r in rows]
        assert work == [10, 20, 20, 40]
        # strictly increasing along each axis
        by_l = {r["gradient_steps"]: r for r in rows if r["random_restarts"] == 1}
        assert by_l[20]["work_units"] > by_l[10]["work_units"]
        assert not any(r["reference_operating_point"] for r in rows)
        header = (tmp_path / "sens.csv").read_text().splitlines()[0]
        assert header.startswith("gradient_steps,random_restarts,work_units,mean_delay")

    def test_reference_point_flagged(self, trained_generator, small_classifier,
                                     synth_splits):
        test = synth_splits["test"].subset(range(1))
        rows = sensitivity_sweep(test, trained_generator, small_classifier,
                                 l_grid=[2250], r_grid=[20],
                                 base_config=ReconstructionConfig(seed=0))
        assert rows[0]["reference_operating_point"]
        assert rows[0]["work_units"] == 45000

    def test_more_restarts_do_not_hurt(self, trained_generator, small_classifier,
                                       synth_splits):
        # min over a restart superset has <= residual; accuracy compared with a
        # one-sided 2-point tolerance for classifier noise
        test = synth_splits["test"].subset(range(32))
        rows = sensitivity_sweep(test, trained_generator, small_classifier,
                                 l_grid=[50], r_grid=[1, 4])
        acc = {r["random_restarts"]: r["accuracy"] for r in rows}
        assert acc[4] >= acc[1] - 0.02

    def test_empty_grid_errors(self, trained_generator, small_classifier, synth_splits):
        with pytest.raises(ValueError):
            sensitivity_sweep(synth_splits["test"].subset(range(1)), trained_generator,
                              small_classifier, l_grid=[], r_grid=[1])
