"""Seeded finite-difference checks for both pair losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from . import siamese_model as sm
from .errors import DegenerateDenominator

THRESHOLD = 1e-4
# central differences need every ReLU input this far from its kink
KINK_MARGIN = 1e-3


@dataclass
class GradcheckInstance:
    params: sm.SiameseParams
    features: np.ndarray
    batch: sm.PairBatch
    attempts: int


def _min_relu_margin(params: sm.SiameseParams, features: np.ndarray, batch: sm.PairBatch) -> float:
    ca = nn_core.forward(params.extractor, features[batch.index_a])
    cb = nn_core.forward(params.extractor, features[batch.index_b])
    ch = nn_core.forward(params.head, np.abs(ca[-1].post - cb[-1].post))
    relu = [c for layer, c in zip([*params.extractor, *params.extractor, *params.head],
                                  [*ca, *cb, *ch])
            if layer.activation is nn_core.Activation.RELU]
    return float(min(np.abs(c.pre).min() for c in relu))


def make_instance(seed: int, input_dim: int = 8, extractor_dims=(8, 4, 2),
                  head_dims=(2, 1), n_pairs: int = 8, max_attempts: int = 1000) -> GradcheckInstance:
    """Small seeded network, inputs and balanced pair batch at a smooth point.

    Biases get small random values so no pre-activation sits exactly on a
    ReLU kink; draws are repeated until all pre-activations clear
    ``KINK_MARGIN`` and the distance ratio is well defined.
    """
    seq = np.random.SeedSequence(seed)
    for attempt, child in enumerate(seq.spawn(max_attempts), start=1):
        rng = np.random.default_rng(child)
        base = sm.init_siamese(int(rng.integers(2**31)), input_dim, extractor_dims, head_dims)
        layers = [nn_core.DenseLayer(l.weights, rng.normal(0.0, 0.1, l.biases.shape), l.activation)
                  for l in base.layers]
        params = base.with_layers(layers)
        features = rng.standard_normal((2 * n_pairs, input_dim))
        half = n_pairs // 2
        batch = sm.PairBatch(np.arange(n_pairs), np.arange(n_pairs) + n_pairs,
                             np.array([True] * half + [False] * (n_pairs - half)))
        if _min_relu_margin(params, features, batch) < KINK_MARGIN:
            continue
        try:
            sm.distance_loss(sm.extract(params, features), batch)
        except DegenerateDenominator:
            continue
        return GradcheckInstance(params, features, batch, attempt)
    raise RuntimeError(f"no smooth instance found in {max_attempts} draws")


def check_losses(seed: int = 0, step: float = 1e-5, floor: float = 1e-8, **kwargs) -> dict[str, float]:
    """Max relative gradient error for batch BCE and for the distance loss."""
    inst = make_instance(seed, **kwargs)
    p, x, b = inst.params, inst.features, inst.batch
    bce = nn_core.finite_difference_check(
        lambda layers: sm.bce_loss_and_grad(p.with_layers(layers), x, b), p.layers, step, floor)
    dist = nn_core.finite_difference_check(
        lambda layers: sm.distance_loss_grad(p.with_layers(layers), x, b), p.layers, step, floor)
    return {"bce": bce, "distance": dist}
