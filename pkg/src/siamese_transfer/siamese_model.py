"""Twin network with an L1-merge decision head and two pair losses.

Both twins run the same extractor layers. The head sees ``|e_a - e_b|``
and ends in a sigmoid giving P(same class). Training uses batch-mean
binary cross-entropy; fine-tuning can add a second update per batch from
the distance-ratio loss ``(D + S) / (D - S)``, where S and D are the mean
Euclidean embedding distances over same-class and different-class pairs.
That second update touches extractor layers only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn_core
from .errors import DegenerateDenominator, InvalidBatchError, ShapeError
from .nn_core import Activation, DenseLayer, FreezeMask, LayerGrad, OptimizerState

PROB_CLAMP = 1e-7
DEGENERATE_GAP = 1e-6


@dataclass
class SiameseParams:
    extractor: list[DenseLayer]
    head: list[DenseLayer]

    @property
    def layers(self) -> list[DenseLayer]:
        return [*self.extractor, *self.head]

    @property
    def input_dim(self) -> int:
        return self.extractor[0].in_dim

    @property
    def n_extractor(self) -> int:
        return len(self.extractor)

    def with_layers(self, layers: Sequence[DenseLayer]) -> "SiameseParams":
        k = self.n_extractor
        return SiameseParams(list(layers[:k]), list(layers[k:]))

    def copy(self) -> "SiameseParams":
        return SiameseParams([l.copy() for l in self.extractor], [l.copy() for l in self.head])


def init_siamese(seed: int, input_dim: int = 64, extractor_dims: Sequence[int] = (64, 32, 16),
                 head_dims: Sequence[int] = (16, 1)) -> SiameseParams:
    """Default is 64 -> 64 -> 32 -> 16 (ReLU), then 16 -> 16 (ReLU) -> 1 (sigmoid)."""
    ext_dims = [input_dim, *extractor_dims]
    hd = [extractor_dims[-1], *head_dims]
    seeds = np.random.SeedSequence(seed).spawn(2)
    extractor = nn_core.init_params(ext_dims, int(seeds[0].generate_state(1)[0]))
    head_acts = [Activation.RELU] * (len(hd) - 2) + [Activation.SIGMOID]
    head = nn_core.init_params(hd, int(seeds[1].generate_state(1)[0]), head_acts)
    return SiameseParams(extractor, head)


@dataclass
class PairBatch:
    """Pairs of row indices into some feature matrix, with same-class flags."""

    index_a: np.ndarray
    index_b: np.ndarray
    same: np.ndarray
    allow_self_pairs: bool = False

    def __post_init__(self):
        self.index_a = np.asarray(self.index_a, dtype=np.int64)
        self.index_b = np.asarray(self.index_b, dtype=np.int64)
        self.same = np.asarray(self.same, dtype=bool)
        if not (self.index_a.shape == self.index_b.shape == self.same.shape) or self.index_a.ndim != 1:
            raise ShapeError("pair arrays must be 1-D with equal lengths")
        if not self.allow_self_pairs and np.any(self.index_a == self.index_b):
            raise InvalidBatchError("self-pair in batch")

    @classmethod
    def from_triples(cls, triples, allow_self_pairs=False) -> "PairBatch":
        triples = list(triples)
        if not triples:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool), allow_self_pairs)
        a, b, s = zip(*triples)
        return cls(np.array(a), np.array(b), np.array(s), allow_self_pairs)

    def __len__(self) -> int:
        return self.index_a.size

    @property
    def same_count(self) -> int:
        return int(self.same.sum())

    @property
    def different_count(self) -> int:
        return len(self) - self.same_count

    @property
    def targets(self) -> np.ndarray:
        return self.same.astype(np.float64)

    def triples(self) -> list[tuple[int, int, bool]]:
        return list(zip(self.index_a.tolist(), self.index_b.tolist(), self.same.tolist()))


def _check_features(params: SiameseParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"expected {params.input_dim} features, got {x.shape[-1]}")
    return x


def extract(params: SiameseParams, x: np.ndarray) -> np.ndarray:
    """Embedding of a feature vector (or each row of a batch)."""
    return nn_core.output(params.extractor, _check_features(params, x))


def head_probability(params: SiameseParams, merged: np.ndarray) -> np.ndarray:
    """Clamped head output for L1-merged embeddings, shape ``merged.shape[:-1]``."""
    p = nn_core.output(params.head, merged)[..., 0]
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def similarity(params: SiameseParams, x: np.ndarray, x_other: np.ndarray) -> np.ndarray | float:
    ea = extract(params, x)
    eb = extract(params, x_other)
    p = head_probability(params, np.abs(ea - eb))
    return float(p) if np.ndim(p) == 0 else p


def bce_loss(p, y):
    """Elementwise binary cross-entropy; ``p`` is clamped first."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def bce_loss_and_grad(params: SiameseParams, features: np.ndarray,
                      batch: PairBatch) -> tuple[float, list[LayerGrad]]:
    """Batch-mean BCE and its gradient over all layers (extractor, then head)."""
    if len(batch) == 0:
        raise InvalidBatchError("empty pair batch")
    features = _check_features(params, features)
    xa, xb = features[batch.index_a], features[batch.index_b]
    ca = nn_core.forward(params.extractor, xa)
    cb = nn_core.forward(params.extractor, xb)
    diff = ca[-1].post - cb[-1].post
    merged = np.abs(diff)
    ch = nn_core.forward(params.head, merged)
    # work from the logit: sigmoid(-z) gives 1 - p without cancellation
    # when the head is confident
    z = ch[-1].pre[:, 0]
    p_raw, q_raw = nn_core.activate(Activation.SIGMOID, np.stack([z, -z]))
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = np.clip(q_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = batch.targets
    n = len(batch)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(q))))

    # gradient through the clamped value times sigmoid'(z): p - y away from
    # the clamp, finite at it
    slope = p_raw * q_raw
    dz = (-y * slope / p + (1.0 - y) * slope / q) / n
    linear_head = [*params.head[:-1], DenseLayer(params.head[-1].weights, params.head[-1].biases,
                                                 Activation.IDENTITY)]
    head_grads, d_merged = nn_core.backward(linear_head, ch, dz[:, None])
    d_diff = d_merged * np.sign(diff)
    ga, _ = nn_core.backward(params.extractor, ca, d_diff)
    gb, _ = nn_core.backward(params.extractor, cb, -d_diff)
    return loss, [*nn_core.add_grads(ga, gb), *head_grads]


def _pair_distances(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((emb_a - emb_b) ** 2, axis=-1))


def _split_means(dist: np.ndarray, same: np.ndarray) -> tuple[float, float]:
    if not same.any() or same.all():
        raise InvalidBatchError("distance loss needs both same-class and different-class pairs")
    return float(dist[same].mean()), float(dist[~same].mean())


def distance_loss(embeddings: np.ndarray, batch: PairBatch) -> float:
    """``(D + S) / (D - S)`` over a batch of pairs of embedding rows.

    Raises :class:`DegenerateDenominator` when ``D - S <= 1e-6``.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    dist = _pair_distances(embeddings[batch.index_a], embeddings[batch.index_b])
    s, d = _split_means(dist, batch.same)
    if d - s <= DEGENERATE_GAP:
        raise DegenerateDenominator(s, d)
    return (d + s) / (d - s)


def distance_loss_grad(params: SiameseParams, features: np.ndarray,
                       batch: PairBatch) -> tuple[float, list[LayerGrad | None]]:
    """Distance-ratio loss and its gradient.

    The returned list covers ``params.layers``; head entries are ``None``
    because the loss never reads the head.
    """
    features = _check_features(params, features)
    ca = nn_core.forward(params.extractor, features[batch.index_a])
    cb = nn_core.forward(params.extractor, features[batch.index_b])
    diff = ca[-1].post - cb[-1].post
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    same = batch.same
    s, d = _split_means(dist, same)
    gap = d - s
    if gap <= DEGENERATE_GAP:
        raise DegenerateDenominator(s, d)
    loss = (d + s) / gap

    d_s = 2.0 * d / gap ** 2
    d_d = -2.0 * s / gap ** 2
    weight = np.where(same, d_s / same.sum(), d_d / (~same).sum())
    # d|u|/du = u/|u|, taken as 0 at u = 0
    safe = np.where(dist > 0.0, dist, 1.0)
    unit = np.where(dist[:, None] > 0.0, diff / safe[:, None], 0.0)
    d_diff = weight[:, None] * unit
    ga, _ = nn_core.backward(params.extractor, ca, d_diff)
    gb, _ = nn_core.backward(params.extractor, cb, -d_diff)
    return loss, [*nn_core.add_grads(ga, gb), *([None] * len(params.head))]


@dataclass
class StepConfig:
    use_distance_loss: bool = False
    frozen_layers: int = 0
    distance_learning_rate: float | None = None


@dataclass
class BatchMetrics:
    bce: float
    distance_loss: float | None = None
    distance_skipped: bool = False


def train_pair_batch(params: SiameseParams, features: np.ndarray, batch: PairBatch,
                     state: OptimizerState, config: StepConfig = StepConfig(),
                     distance_state: OptimizerState | None = None,
                     ) -> tuple[SiameseParams, BatchMetrics]:
    """One BCE update, then (optionally) one distance-loss update.

    The distance step recomputes embeddings with the post-BCE parameters
    and is skipped, with ``distance_skipped`` set, when the ratio's
    denominator is degenerate. The distance step uses ``distance_state``
    when given, otherwise it shares ``state`` with the BCE step.
    """
    if len(batch) == 0:
        raise InvalidBatchError("empty pair batch")
    mask = FreezeMask(config.frozen_layers)
    bce, grads = bce_loss_and_grad(params, features, batch)
    if not np.isfinite(bce):
        raise nn_core.NumericInstabilityError("BCE loss is not finite")
    params = params.with_layers(nn_core.apply_update(params.layers, grads, state, mask))
    metrics = BatchMetrics(bce=bce)
    if not config.use_distance_loss:
        return params, metrics
    try:
        dloss, dgrads = distance_loss_grad(params, features, batch)
    except DegenerateDenominator:
        metrics.distance_skipped = True
        return params, metrics
    metrics.distance_loss = dloss
    opt = state if distance_state is None else distance_state
    params = params.with_layers(nn_core.apply_update(
        params.layers, dgrads, opt, mask, config.distance_learning_rate))
    return params, metrics
