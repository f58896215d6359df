import json

import pytest
import torch

from argan.dataset import generate_synthetic_dataset, split_dataset
from argan.framework import (FrameworkConfig, TrainingDivergedError, run_framework,
                             train_classifier)
from argan.gan_training import GanTrainConfig
from argan.reconstruction import ReconstructionConfig


@pytest.fixture(scope="module")
def tiny_splits():
    ds = generate_synthetic_dataset(40, seed=11)
    train, val, test = split_dataset(ds, seed=0)
    return {"train": train, "validation": val, "test": test}


def _tiny_configs():
    gan = GanTrainConfig(epochs=2, checkpoint_interval=1, seeds=(0,), latent_dim=16,
                         base_channels=16, batch_size=32,
                         critic_steps_per_generator_step=2)
    recon = ReconstructionConfig(gradient_steps=30, random_restarts=2, seed=0)
    fw = FrameworkConfig(classifier_epochs=2, retrain_epochs=1, quick_epochs=1,
                         selection_subset=8)
    return gan, recon, fw


class TestTrainClassifier:
    def test_zero_epochs_chance_level(self, synth_splits):
        model = train_classifier(synth_splits["train"], synth_splits["validation"],
                                 epochs=0, seed=0)
        val = synth_splits["validation"]
        acc = (model.predict(val.images) == val.labels).float().mean().item()
        assert 0.40 <= acc <= 0.60  # balanced two-class data, untrained net

    def test_overfits_ten_images(self, synth_splits):
        small = synth_splits["train"].subset(range(10))
        model = train_classifier(small, small, epochs=200, seed=0)
        acc = (model.predict(small.images) == small.labels).float().mean().item()
        assert acc == 1.0

    def test_divergence_guard(self, tiny_splits):
        with pytest.raises(TrainingDivergedError):
            train_classifier(tiny_splits["train"], tiny_splits["validation"],
                             epochs=4, seed=0, lr=1e20)


class TestRunFramework:
    def test_five_stages_and_label_preservation(self, tiny_splits, tmp_path):
        gan, recon, fw = _tiny_configs()
        state = run_framework(tiny_splits["train"], tiny_splits["validation"],
                              gan, recon, tmp_path, fw)
        stages = [r["stage"] for r in state.stage_log]
        assert stages == ["classifier_1", "gan_set", "selection",
                          "reconstruction", "classifier_2"]
        # reconstruction never relabels
        assert torch.equal(state.reconstructed_corpus.labels,
                           tiny_splits["train"].labels)
        assert len(state.reconstructed_corpus) == len(tiny_splits["train"])
        # timestamps strictly increase
        times = [r["completed_at"] for r in state.stage_log]
        assert all(b > a for a, b in zip(times, times[1:]))

    def test_resume_skips_completed_stages(self, tiny_splits, tmp_path):
        gan, recon, fw = _tiny_configs()
        first = run_framework(tiny_splits["train"], tiny_splits["validation"],
                              gan, recon, tmp_path, fw)
        log_before = (tmp_path / "stage_log.jsonl").read_text()
        second = run_framework(tiny_splits["train"], tiny_splits["validation"],
                               gan, recon, tmp_path, fw)
        # no stage re-ran: the persisted log is unchanged
        assert (tmp_path / "stage_log.jsonl").read_text() == log_before
        probe = tiny_splits["test"].images[:4]
        with torch.no_grad():
            assert torch.equal(first.classifier_2(probe), second.classifier_2(probe))

    def test_resume_after_selection_runs_rest(self, tiny_splits, tmp_path):
        gan, recon, fw = _tiny_configs()
        partial = run_framework(tiny_splits["train"], tiny_splits["validation"],
                                gan, recon, tmp_path, fw, stop_after="selection")
        assert partial.classifier_2 is None
        stages = {r["stage"] for r in partial.stage_log}
        assert stages == {"classifier_1", "gan_set", "selection"}
        log_lines = (tmp_path / "stage_log.jsonl").read_text().splitlines()
        full = run_framework(tiny_splits["train"], tiny_splits["validation"],
                             gan, recon, tmp_path, fw)
        new_lines = (tmp_path / "stage_log.jsonl").read_text().splitlines()
        # stages 1-3 were not re-run; exactly two stage records were added
        assert new_lines[:len(log_lines)] == log_lines
        assert len(new_lines) == len(log_lines) + 2
        assert full.classifier_2 is not None

    def test_corrupted_artifact_triggers_rerun(self, tiny_splits, tmp_path):
        gan, recon, fw = _tiny_configs()
        run_framework(tiny_splits["train"], tiny_splits["validation"],
                      gan, recon, tmp_path, fw)
        # truncate classifier_2's blob: checksum mismatch forces a re-run
        c2 = tmp_path / "classifier2.pt"
        c2.write_bytes(c2.read_bytes()[:100])
        state = run_framework(tiny_splits["train"], tiny_splits["validation"],
                              gan, recon, tmp_path, fw)
        assert state.classifier_2 is not None
        stages = [r["stage"] for r in state.stage_log]
        assert stages.count("classifier_2") == 2  # original + re-run record

    def test_content_hash_linkage_recorded(self, tiny_splits, tmp_path):
        import numpy as np
        gan, recon, fw = _tiny_configs()
        run_framework(tiny_splits["train"], tiny_splits["validation"],
                      gan, recon, tmp_path, fw)
        data = np.load(tmp_path / "reconstructed_corpus.npz")
        assert len(data["source_hashes"]) == len(tiny_splits["train"])
        assert len(data["recon_hashes"]) == len(tiny_splits["train"])
        expected = tiny_splits["train"].content_hashes()
        assert [str(h) for h in data["source_hashes"]] == expected

    def test_stage_log_carries_selection_scores(self, tiny_splits, tmp_path):
        gan, recon, fw = _tiny_configs()
        state = run_framework(tiny_splits["train"], tiny_splits["validation"],
                              gan, recon, tmp_path, fw)
        selection = next(r for r in state.stage_log if r["stage"] == "selection")
        scores = selection["metrics"]["candidate_scores"]
        assert len(scores) == 3  # initial + 2 epoch checkpoints
        assert all("accuracy" in s for s in scores)
