import numpy as np
import pytest

from partco import synth


@pytest.fixture(scope="session")
def small_fine():
    """A small noise-free fine-grained dataset: (FeatureSet, manifest, truth)."""
    cfg = synth.preset("fine_grained", num_classes=6, old_classes=3, images_per_class=8,
                       noise_sigma=0.0, occlusion_prob=0.0, seed=3)
    return synth.generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
