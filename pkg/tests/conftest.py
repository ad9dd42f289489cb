import numpy as np
import pytest

from siamese_transfer import nn_core
from siamese_transfer import siamese_model as sm
from siamese_transfer.cli import default_synth_configs
from siamese_transfer.data_pipeline import synth_generate


def with_random_biases(params: sm.SiameseParams, rng, scale=0.1) -> sm.SiameseParams:
    layers = [nn_core.DenseLayer(l.weights, rng.normal(0.0, scale, l.biases.shape), l.activation)
              for l in params.layers]
    return params.with_layers(layers)


@pytest.fixture
def small_params():
    rng = np.random.default_rng(5)
    return with_random_biases(sm.init_siamese(5, input_dim=8, extractor_dims=(8, 4, 2),
                                              head_dims=(2, 1)), rng)


def transfer_scenario():
    """Source/target pair with a class-conditional domain shift (hard regime)."""
    cfgs = default_synth_configs()
    return synth_generate(cfgs["source"]), synth_generate(cfgs["target"])


@pytest.fixture(scope="session")
def scenario():
    return transfer_scenario()
