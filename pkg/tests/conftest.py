"""Shared fixtures. The expensive ones (trained models, the desk-scale
end-to-end run) are session-scoped so their cost is paid once."""

import json
from pathlib import Path

import pytest

from argan.config import validate_config
from argan.dataset import RangeTag, generate_synthetic_dataset, split_dataset
from argan.experiments import make_workspace, reproduce
from argan.framework import train_classifier
from argan.gan_training import GanTrainConfig, train_gan


@pytest.fixture(scope="session")
def synth_splits():
    ds = generate_synthetic_dataset(500, seed=7)
    train, val, test = split_dataset(ds, seed=42)
    return {"train": train, "validation": val, "test": test}


@pytest.fixture(scope="session")
def small_classifier(synth_splits):
    """Classifier trained 5 epochs on the synthetic train split."""
    return train_classifier(synth_splits["train"], synth_splits["validation"],
                            epochs=5, seed=0)


@pytest.fixture(scope="session")
def surrogate_classifier(synth_splits):
    """Independently seeded classifier for transfer-attack tests."""
    return train_classifier(synth_splits["train"], synth_splits["validation"],
                            epochs=5, seed=100)


@pytest.fixture(scope="session")
def gan_checkpoints(synth_splits):
    """One GAN trained 30 epochs with checkpoints every 10 (plus the initial state)."""
    cfg = GanTrainConfig(epochs=30, checkpoint_interval=10, seeds=(0,),
                         latent_dim=64, base_channels=32, batch_size=64)
    signed = synth_splits["train"].to_range(RangeTag.SIGNED)
    return train_gan(signed, cfg)


@pytest.fixture(scope="session")
def trained_generator(gan_checkpoints):
    return gan_checkpoints[-1].generator


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full desk-profile reproduction; the acceptance suite reads its artifacts."""
    import time
    out = tmp_path_factory.mktemp("desk")
    config, cfg_hash, _ = validate_config({"output_dir": str(out)}, profile="desk")
    ws = make_workspace(config, cfg_hash, out_dir=out)
    t0 = time.perf_counter()
    reproduce(ws)
    ws.duration_seconds = time.perf_counter() - t0
    return ws


def load_eval(ws, name: str) -> dict:
    with open(Path(ws.eval_dir) / f"{name}.json") as f:
        return json.load(f)
