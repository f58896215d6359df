import torch
import torch.nn.functional as F
import pytest

from argan.models import (CHECKPOINT_FORMAT_VERSION, CheckpointIntegrityError,
                          IncompatibleCheckpointError, build_classifier, build_critic,
                          build_generator, count_layers, load_checkpoint, save_checkpoint,
                          softmax_probabilities)


class TestClassifier:
    def test_eight_convs_one_linear(self):
        counts = count_layers(build_classifier(0))
        assert counts["conv"] == 8
        assert counts["linear"] == 1

    def test_zero_image_finite_logits(self):
        clf = build_classifier(0).eval()
        logits = clf(torch.zeros(1, 3, 32, 32))
        assert logits.shape == (1, 2)
        assert torch.isfinite(logits).all()

    def test_softmax_sums_to_one(self):
        clf = build_classifier(1).eval()
        probs = softmax_probabilities(clf(torch.rand(4, 3, 32, 32)))
        assert (probs.sum(dim=1) - 1.0).abs().max().item() < 1e-6

    def test_builder_deterministic(self):
        a, b = build_classifier(3), build_classifier(3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = build_classifier(4)
        assert any(not torch.equal(pa, pc)
                   for pa, pc in zip(a.parameters(), c.parameters()))

    def test_input_gradient_matches_finite_differences(self):
        # measure-zero kinks aside, the analytic gradient must match central
        # differences; float64 + small step keeps the comparison clean
        clf = build_classifier(0).double().eval()
        gen = torch.Generator().manual_seed(20)
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64, generator=gen)
        y = torch.tensor([1])
        xv = x.clone().requires_grad_(True)
        grad, = torch.autograd.grad(F.cross_entropy(clf(xv), y), xv)
        h = 1e-5
        for _ in range(10):
            c = torch.randint(0, 3, (1,), generator=gen).item()
            i = torch.randint(0, 32, (1,), generator=gen).item()
            j = torch.randint(0, 32, (1,), generator=gen).item()
            xp, xm = x.clone(), x.clone()
            xp[0, c, i, j] += h
            xm[0, c, i, j] -= h
            with torch.no_grad():
                fd = (F.cross_entropy(clf(xp), y) - F.cross_entropy(clf(xm), y)).item() / (2 * h)
            an = grad[0, c, i, j].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            assert rel < 1e-3, f"coord ({c},{i},{j}): analytic {an} vs fd {fd}"


class TestGenerator:
    def test_output_contract(self):
        gen = build_generator(32, 0, base_channels=16).eval()
        out = gen(torch.randn(5, 32))
        assert tuple(out.shape) == (5, 3, 32, 32)
        assert out.min().item() >= -1.0 and out.max().item() <= 1.0

    def test_range_over_many_latents(self):
        gen = build_generator(16, 1, base_channels=16).eval()
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            out = gen(torch.randn(100, 16, generator=g))
            assert out.min().item() >= -1.0 and out.max().item() <= 1.0

    def test_deterministic(self):
        z = torch.randn(3, 64, generator=torch.Generator().manual_seed(5))
        a = build_generator(64, 2, base_channels=16).eval()
        b = build_generator(64, 2, base_channels=16).eval()
        with torch.no_grad():
            assert torch.equal(a(z), b(z))

    def test_invalid_latent_dim(self):
        with pytest.raises(ValueError):
            build_generator(0, 0)

    def test_continuity_smoke(self):
        # ratio ||G(z)-G(z')|| / ||z-z'|| stays under a loose calibrated bound
        gen = build_generator(64, 0, base_channels=32).eval()
        g = torch.Generator().manual_seed(7)
        worst = 0.0
        with torch.no_grad():
            for _ in range(20):
                z = torch.randn(1, 64, generator=g)
                dz = torch.randn(1, 64, generator=g) * 1e-3
                num = (gen(z + dz) - gen(z)).flatten().norm().item()
                worst = max(worst, num / dz.flatten().norm().item())
        assert worst < 50.0


class TestCritic:
    def test_scalar_output(self):
        crit = build_critic(0, base_channels=16).eval()
        out = crit(torch.rand(7, 3, 32, 32) * 2 - 1)
        assert out.shape == (7,)
        assert torch.isfinite(out).all()

    def test_no_batch_norm(self):
        assert count_layers(build_critic(0))["batch_norm"] == 0

    def test_input_gradient_matches_finite_differences(self):
        # pinned step 1e-3; seeds chosen away from activation kinks
        crit = build_critic(2).double().eval()
        gen_data = torch.Generator().manual_seed(1)
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64, generator=gen_data) * 2 - 1
        xv = x.clone().requires_grad_(True)
        grad, = torch.autograd.grad(crit(xv).sum(), xv)
        h = 1e-3
        gen = torch.Generator().manual_seed(11)
        for _ in range(10):
            c = torch.randint(0, 3, (1,), generator=gen).item()
            i = torch.randint(0, 32, (1,), generator=gen).item()
            j = torch.randint(0, 32, (1,), generator=gen).item()
            xp, xm = x.clone(), x.clone()
            xp[0, c, i, j] += h
            xm[0, c, i, j] -= h
            with torch.no_grad():
                fd = (crit(xp).sum() - crit(xm).sum()).item() / (2 * h)
            an = grad[0, c, i, j].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            assert rel < 1e-3, f"coord ({c},{i},{j}): analytic {an} vs fd {fd}"


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path):
        gen = build_generator(32, 0, base_channels=16).eval()
        probe = torch.randn(4, 32, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            before = gen(probe)
        save_checkpoint(gen, tmp_path / "g.pt", metadata={"epoch": 3, "seed": 0})
        loaded, sidecar = load_checkpoint(tmp_path / "g.pt")
        with torch.no_grad():
            after = loaded(probe)
        assert torch.equal(before, after)
        assert sidecar["metadata"]["epoch"] == 3

    def test_version_gate(self, tmp_path):
        import json
        clf = build_classifier(0)
        save_checkpoint(clf, tmp_path / "c.pt")
        sidecar_path = tmp_path / "c.pt.json"
        with open(sidecar_path) as f:
            sidecar = json.load(f)
        sidecar["format_version"] = CHECKPOINT_FORMAT_VERSION + 1
        with open(sidecar_path, "w") as f:
            json.dump(sidecar, f)
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(tmp_path / "c.pt")

    def test_truncated_blob_integrity_error(self, tmp_path):
        clf = build_classifier(0)
        path = save_checkpoint(clf, tmp_path / "c.pt")
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_classifier_round_trip(self, tmp_path):
        clf = build_classifier(5).eval()
        probe = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            before = clf(probe)
        save_checkpoint(clf, tmp_path / "c.pt")
        loaded, _ = load_checkpoint(tmp_path / "c.pt")
        with torch.no_grad():
            assert torch.equal(before, loaded(probe))
