"""Shared fixtures: small synthetic configurations that train in seconds."""

import pytest

from src.ccl_rec.config import RunConfig, SyntheticSpec, TrainConfig


def tiny_config(out_dir, **train_updates) -> RunConfig:
    train = dict(batch_size=16, epochs=1, n_p=2, n_n=2, n_z=24, seed=11)
    train.update(train_updates)
    return RunConfig(
        synthetic=SyntheticSpec(n_users=20, n_items=48, dim=4, latent_dim=2, exposures_per_user=12, seed=3),
        train=TrainConfig(**train),
        output={"dir": str(out_dir)},
    )


@pytest.fixture
def tiny(tmp_path):
    """Factory for tiny run configs writing under tmp_path."""
    def make(name: str = "run", **train_updates) -> RunConfig:
        return tiny_config(tmp_path / name, **train_updates)
    return make
