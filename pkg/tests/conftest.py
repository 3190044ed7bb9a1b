import pytest

from pairzsl.data import SyntheticSpec, generate_synthetic
from pairzsl.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small but non-trivial two-domain dataset (N_s=32, N_t=24)."""
    spec = SyntheticSpec(
        source_classes=4,
        target_classes=3,
        feature_dim=6,
        attribute_dim=5,
        samples_per_class=8,
        noise_scale=0.2,
        shift_scale=1.3,
        shift_offset=0.5,
        seed=7,
    )
    return generate_synthetic(spec)


@pytest.fixture()
def tiny_config():
    return TrainConfig(
        learning_rate=1e-3,
        max_iterations=30,
        batch_size=8,
        lambda_rec=1e-3,
        lambda_ent=1e-2,
        alignment_mode="dsbn",
        seed=3,
        hidden_units=8,
        log_every=1000,
    )
