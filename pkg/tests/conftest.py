import numpy as np
import pytest

from tntrigger.dataio import SyntheticConfig, generate_synthetic
from tntrigger.embedding import embed_batch


def random_sites(rng, n_events, n_sites, phys=3, positive=True):
    x = rng.uniform(0.05, 1.0, size=(n_events, n_sites, phys))
    if not positive:
        x = x * rng.choice([-1.0, 1.0], size=x.shape)
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synthetic():
    cfg = SyntheticConfig(n_background=400, signals={"A4l": ("four_lepton", 100)})
    return generate_synthetic(cfg, seed=11)


@pytest.fixture(scope="session")
def small_sites(small_synthetic):
    return embed_batch(small_synthetic.particles)


@pytest.fixture(scope="session")
def trained_bench():
    """A briefly trained SMPO plus a labeled evaluation set (a few seconds)."""
    from tntrigger.model import new_model
    from tntrigger.training import LossParams, TrainConfig, train

    train_ds = generate_synthetic(SyntheticConfig(n_background=4400, signals={}), seed=21)
    x = embed_batch(train_ds.particles)
    test_ds = generate_synthetic(
        SyntheticConfig(n_background=3000, signals={"A4l": ("four_lepton", 600)}), seed=22)
    cfg = TrainConfig(batch_size=256, learning_rate=2e-3, max_epochs=20, patience=20, seed=0)
    model, _ = train(new_model("19-1", bond=4, seed=0), x[:4000], x[4000:], cfg,
                     LossParams(50.0, 25.0))
    return model, embed_batch(test_ds.particles), np.asarray(test_ds.labels)
