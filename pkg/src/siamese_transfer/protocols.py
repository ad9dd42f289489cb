"""Training loops, log-sum classification, UAR, and the transfer protocols.

Protocol names used in result rows:

``oodt``         train on source, classify target against source references
``idt``          leave-one-speaker-out training inside the target
``finetune``     fine-tune the source model on k adopted target speakers
``finetune_dl``  as ``finetune`` plus the distance-ratio step per batch
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn_core
from . import siamese_model as sm
from .data_pipeline import (
    EMOTIONS,
    Dataset,
    Normalizer,
    apply_normalizer,
    fit_normalizer,
    loso_folds,
    sample_pairs,
)
from .errors import ConfigError, InvalidInputError, InvalidReferenceError

log = logging.getLogger(__name__)

PROTOCOLS = ("oodt", "idt", "finetune", "finetune_dl")
FINETUNE_PROTOCOLS = ("finetune", "finetune_dl")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    distance_learning_rate: float | None = None
    distance_optimizer: str = "separate"
    epochs: int = 30
    batch_size: int = 32
    batches_per_epoch: int = 8
    patience: int = 10
    min_delta: float = 1e-4
    speaker_mode: str = "both"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.distance_learning_rate is not None and self.distance_learning_rate <= 0:
            raise ConfigError("distance_learning_rate must be positive")
        if self.distance_optimizer not in ("shared", "separate"):
            raise ConfigError("distance_optimizer must be shared or separate")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be an even number >= 2")
        if self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.speaker_mode not in ("both", "within", "cross"):
            raise ConfigError("speaker_mode must be one of both, within, cross")


def default_finetune_config() -> TrainConfig:
    return TrainConfig(epochs=50, batch_size=16, batches_per_epoch=2)


@dataclass
class NetworkConfig:
    extractor_dims: tuple[int, ...] = (64, 32, 16)
    head_dims: tuple[int, ...] = (16, 1)


@dataclass
class Model:
    params: sm.SiameseParams
    normalizer: Normalizer

    def prepare(self, dataset: Dataset) -> np.ndarray:
        return apply_normalizer(dataset, self.normalizer).features


@dataclass
class TrainLog:
    epochs_run: int = 0
    epoch_bce: list[float] = field(default_factory=list)
    distance_skips: int = 0
    distance_steps: int = 0


def train_siamese(params: sm.SiameseParams, features: Dataset, config: TrainConfig,
                  rng: np.random.Generator, frozen_layers: int = 0,
                  use_distance_loss: bool = False) -> tuple[sm.SiameseParams, TrainLog]:
    """Pair training on already-normalized ``features``.

    Each batch is a fresh balanced draw of ``batch_size`` pairs. Stops early
    when epoch-mean BCE has not improved by ``min_delta`` for ``patience``
    epochs.
    """
    config.validate()
    state = nn_core.OptimizerState.for_params(params.layers, config.learning_rate,
                                              config.beta1, config.beta2, config.epsilon)
    dstate = None
    if config.distance_optimizer == "separate":
        dstate = nn_core.OptimizerState.for_params(params.layers, config.learning_rate,
                                                   config.beta1, config.beta2, config.epsilon)
    step_cfg = sm.StepConfig(use_distance_loss, frozen_layers, config.distance_learning_rate)
    log_ = TrainLog()
    best, wait = math.inf, 0
    x = features.features
    for _ in range(config.epochs):
        losses = []
        for _ in range(config.batches_per_epoch):
            batch = sample_pairs(features, config.batch_size, rng, config.speaker_mode)
            params, metrics = sm.train_pair_batch(params, x, batch, state, step_cfg, dstate)
            losses.append(metrics.bce)
            log_.distance_skips += metrics.distance_skipped
            log_.distance_steps += metrics.distance_loss is not None
        epoch_loss = float(np.mean(losses))
        log_.epoch_bce.append(epoch_loss)
        log_.epochs_run += 1
        if epoch_loss < best - config.min_delta:
            best, wait = epoch_loss, 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    return params, log_


def uar(predictions, labels, classes: Sequence | None = None) -> float:
    """Unweighted average recall: mean over classes of per-class recall.

    Classes listed in ``classes`` (or seen in ``predictions``) that never
    occur in ``labels`` are left out of the mean with a warning.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise InvalidInputError("predictions and labels must be 1-D with equal lengths")
    if labels.size == 0:
        raise InvalidInputError("cannot score an empty prediction set")
    present = np.unique(labels)
    candidates = set(np.unique(predictions).tolist())
    if classes is not None:
        candidates |= set(classes)
    absent = sorted(c for c in candidates if c not in set(present.tolist()))
    if absent:
        warnings.warn(f"classes absent from labels excluded from UAR: {absent}", stacklevel=2)
    recalls = [np.mean(predictions[labels == c] == c) for c in present]
    return float(np.mean(recalls))


def _check_references(ref_labels: np.ndarray) -> None:
    missing = [EMOTIONS[c] for c in range(len(EMOTIONS)) if not np.any(ref_labels == c)]
    if missing:
        raise InvalidReferenceError(f"references lack classes: {', '.join(missing)}")


def log_sum_scores(similarities: np.ndarray, ref_labels: np.ndarray) -> np.ndarray:
    """Per-class sums of log-similarity.

    ``similarities`` has one row per query and one column per reference;
    the result has one column per entry of ``EMOTIONS``.
    """
    ref_labels = np.asarray(ref_labels)
    _check_references(ref_labels)
    onehot = (ref_labels[:, None] == np.arange(len(EMOTIONS))[None, :]).astype(np.float64)
    return np.log(similarities) @ onehot


def decide(scores: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the earliest class in ``EMOTIONS``."""
    return np.argmax(scores, axis=-1)


def class_scores(params: sm.SiameseParams, ref_features: np.ndarray, ref_labels: np.ndarray,
                 features: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Log-sum scores of each query against labeled references, shape (n, 4)."""
    ref_labels = np.asarray(ref_labels)
    _check_references(ref_labels)
    ref_emb = sm.extract(params, np.atleast_2d(ref_features))
    emb = sm.extract(params, np.atleast_2d(features))
    out = np.empty((emb.shape[0], len(EMOTIONS)))
    for start in range(0, emb.shape[0], chunk):
        e = emb[start:start + chunk]
        merged = np.abs(e[:, None, :] - ref_emb[None, :, :])
        sims = sm.head_probability(params, merged.reshape(-1, merged.shape[-1]))
        out[start:start + chunk] = log_sum_scores(sims.reshape(e.shape[0], -1), ref_labels)
    return out


def classify_many(params: sm.SiameseParams, ref_features: np.ndarray, ref_labels: np.ndarray,
                  features: np.ndarray) -> np.ndarray:
    return decide(class_scores(params, ref_features, ref_labels, features))


def classify(model: Model, references: Dataset, sample: np.ndarray) -> str:
    """Emotion of one raw feature vector, judged against labeled references."""
    x = (np.asarray(sample, dtype=np.float64) - model.normalizer.mean) / model.normalizer.std
    pred = classify_many(model.params, model.prepare(references), references.labels, x[None, :])
    return EMOTIONS[int(pred[0])]


def _cap_references(references: Dataset, cap: int | None, rng: np.random.Generator) -> Dataset:
    if cap is None or len(references) <= cap:
        return references
    # keep every class represented
    keep = [rng.choice(idx, size=max(1, round(cap * idx.size / len(references))), replace=False)
            for idx in references.class_index.values()]
    return references.subset(np.sort(np.concatenate(keep)))


def evaluate(model: Model, references: Dataset, test: Dataset) -> float:
    if len(test) == 0:
        raise InvalidInputError("empty test set")
    pred = classify_many(model.params, model.prepare(references), references.labels,
                         model.prepare(test))
    return uar(pred, test.labels)


def pretrain(source: Dataset, config: TrainConfig, seed: int,
             network: NetworkConfig = NetworkConfig()) -> tuple[Model, TrainLog]:
    """BCE-only pair training on the full source set."""
    _require_classes(source, "source")
    if len(source.speakers) < 2:
        raise InvalidInputError("source needs at least 2 speakers")
    normalizer = fit_normalizer(source)
    init_seed, train_seed = np.random.SeedSequence(seed).spawn(2)
    params = sm.init_siamese(int(init_seed.generate_state(1)[0]), source.n_features,
                             network.extractor_dims, network.head_dims)
    params, tlog = train_siamese(params, apply_normalizer(source, normalizer), config,
                                 np.random.default_rng(train_seed))
    return Model(params, normalizer), tlog


def train_oodt(source: Dataset, config: TrainConfig, seed: int = 0,
               network: NetworkConfig = NetworkConfig()) -> Model:
    return pretrain(source, config, seed, network)[0]


def _require_classes(dataset: Dataset, name: str) -> None:
    missing = [e for e in EMOTIONS if e not in dataset.class_index]
    if missing:
        raise InvalidInputError(f"{name} lacks classes: {', '.join(missing)}")


@dataclass
class AdoptedSet:
    indices: np.ndarray
    test_indices: np.ndarray
    speakers_used: tuple[str, ...]
    per_emotion_per_speaker: int = 1


def select_adopted(target: Dataset, k_speakers: int, rng: np.random.Generator,
                   per_emotion_per_speaker: int = 1) -> AdoptedSet:
    """Pick k speakers, then ``per_emotion_per_speaker`` samples of each emotion from each.

    Only speakers holding that many samples of every emotion are eligible.
    Everything not adopted becomes the test set.
    """
    if k_speakers < 1 or per_emotion_per_speaker < 1:
        raise InvalidInputError("k_speakers and per_emotion_per_speaker must be >= 1")
    eligible = []
    for spk in target.speakers:
        labels = target.labels[target.speaker_index[spk]]
        if all(np.sum(labels == c) >= per_emotion_per_speaker for c in range(len(EMOTIONS))):
            eligible.append(spk)
    if len(eligible) < k_speakers:
        raise InvalidInputError(
            f"only {len(eligible)} speakers have every emotion; {k_speakers} requested"
        )
    chosen = sorted(rng.choice(eligible, size=k_speakers, replace=False).tolist())
    picked = []
    for spk in chosen:
        idx = target.speaker_index[spk]
        for c in range(len(EMOTIONS)):
            pool = idx[target.labels[idx] == c]
            picked.extend(rng.choice(pool, size=per_emotion_per_speaker, replace=False).tolist())
    adopted = np.sort(np.array(picked, dtype=np.int64))
    test = np.setdiff1d(np.arange(len(target)), adopted)
    return AdoptedSet(adopted, test, tuple(chosen), per_emotion_per_speaker)


def fine_tune(model: Model, adopted: Dataset, frozen_layers: int, use_distance_loss: bool,
              config: TrainConfig, rng: np.random.Generator) -> tuple[Model, TrainLog]:
    """Continue pair training on the adopted target samples only.

    The source normalizer is kept. ``frozen_layers`` counts extractor
    layers from the input side.
    """
    n_ext = model.params.n_extractor
    if not 0 <= frozen_layers < n_ext:
        raise ConfigError(f"frozen_layers must be in [0, {n_ext - 1}], got {frozen_layers}")
    _require_classes(adopted, "adopted set")
    params, tlog = train_siamese(model.params.copy(), apply_normalizer(adopted, model.normalizer),
                                 config, rng, frozen_layers, use_distance_loss)
    return Model(params, model.normalizer), tlog


@dataclass
class ExperimentConfig:
    protocols: tuple[str, ...] = FINETUNE_PROTOCOLS
    source_tag: str = "source"
    target_tag: str = "target"
    frozen_layers: tuple[int, ...] = (0, 1, 2)
    adopted_speaker_counts: tuple[int, ...] = (2,)
    repetitions: int = 10
    per_emotion_per_speaker: int = 1
    master_seed: int = 0
    reference_cap: int | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=default_finetune_config)
    parallel: int = 1

    def validate(self, target: Dataset | None = None) -> None:
        unknown = [p for p in self.protocols if p not in PROTOCOLS]
        if unknown or not self.protocols:
            raise ConfigError(f"protocols must be drawn from {PROTOCOLS}, got {list(self.protocols)}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        n_ext = len(self.network.extractor_dims)
        bad = [f for f in self.frozen_layers if not 0 <= f < n_ext]
        if bad:
            raise ConfigError(f"frozen_layers must be in [0, {n_ext - 1}], got {bad}")
        if any(k < 1 for k in self.adopted_speaker_counts):
            raise ConfigError("adopted speaker counts must be >= 1")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if self.reference_cap is not None and self.reference_cap < len(EMOTIONS):
            raise ConfigError("reference_cap must be at least the number of classes")
        self.pretrain.validate()
        self.finetune.validate()
        if target is not None and self.adopted_speaker_counts:
            n = len(target.speakers)
            if max(self.adopted_speaker_counts) > n:
                raise ConfigError(f"adopted speaker count exceeds the {n} target speakers")


@dataclass
class TrialRow:
    protocol: str
    source: str
    target: str
    frozen_layers: int
    adopted_speakers: int
    repetition: int
    fold: str
    seed: int
    uar: float | None
    distance_loss_skips: int
    status: str = "ok"
    error: str = ""
    wall_time: float = field(default=0.0, compare=False)

    @property
    def loss_mode(self) -> str:
        return "distance" if self.protocol == "finetune_dl" else "bce"

    def sort_key(self):
        return (PROTOCOLS.index(self.protocol), self.frozen_layers, self.adopted_speakers,
                self.repetition, self.fold)


TRIAL_FIELDS = ("protocol", "loss_mode", "source", "target", "frozen_layers", "adopted_speakers",
                "repetition", "fold", "seed", "uar", "distance_loss_skips", "status", "error")
AGGREGATE_FIELDS = ("protocol", "loss_mode", "frozen_layers", "adopted_speakers",
                    "n_trials", "n_failed", "uar_mean", "uar_std")


@dataclass
class AggregateRow:
    protocol: str
    loss_mode: str
    frozen_layers: int
    adopted_speakers: int
    n_trials: int
    n_failed: int
    uar_mean: float | None
    uar_std: float | None


@dataclass
class ExperimentResult:
    trials: list[TrialRow]
    config: dict = field(default_factory=dict)

    def sorted(self) -> "ExperimentResult":
        return ExperimentResult(sorted(self.trials, key=TrialRow.sort_key), self.config)

    def aggregates(self) -> list[AggregateRow]:
        """Mean and sample std of UAR per (protocol, frozen, adopted) cell."""
        cells: dict[tuple, list[TrialRow]] = {}
        for row in sorted(self.trials, key=TrialRow.sort_key):
            cells.setdefault((row.protocol, row.frozen_layers, row.adopted_speakers), []).append(row)
        out = []
        for (protocol, frozen, k), rows in cells.items():
            vals = [r.uar for r in rows if r.status == "ok"]
            mean = float(np.mean(vals)) if vals else None
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
            out.append(AggregateRow(protocol, rows[0].loss_mode, frozen, k, len(rows),
                                    len(rows) - len(vals), mean, std))
        return out

    def mean_uar(self, protocol: str, **match) -> float:
        vals = [r.uar for r in self.trials if r.protocol == protocol and r.status == "ok"
                and all(getattr(r, k) == v for k, v in match.items())]
        if not vals:
            raise InvalidInputError(f"no successful {protocol} trials match {match}")
        return float(np.mean(vals))


def derive_seed(master: int, *keys: int) -> int:
    """Stable 32-bit seed for a trial, independent of execution order."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def _protocol_key(name: str) -> int:
    return PROTOCOLS.index(name)


def run_idt(target: Dataset, config: ExperimentConfig) -> ExperimentResult:
    """Leave-one-speaker-out training and scoring within the target."""
    rows = []
    for fold_no, (train_idx, test_idx) in enumerate(loso_folds(target)):
        speaker = target.speaker_ids[test_idx[0]]
        seed = derive_seed(config.master_seed, _protocol_key("idt"), fold_no)
        t0 = time.perf_counter()
        row = TrialRow("idt", config.target_tag, config.target_tag, 0, 0, fold_no, speaker,
                       seed, None, 0)
        try:
            train = target.subset(train_idx)
            model, _ = pretrain(train, config.pretrain, seed, config.network)
            refs = _cap_references(train, config.reference_cap, np.random.default_rng(seed))
            row.uar = evaluate(model, refs, target.subset(test_idx))
        except (InvalidInputError, ArithmeticError) as exc:
            row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
            log.warning("idt fold %s failed: %s", speaker, exc)
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
    return ExperimentResult(rows, {"experiment": to_dict(config)})


def _transfer_trial(source: Dataset, target: Dataset, model: Model, config: ExperimentConfig,
                    k: int, rep: int) -> list[TrialRow]:
    """OODT and fine-tuning rows for one (adopted count, repetition) draw."""
    seed = derive_seed(config.master_seed, 1, k, rep)
    adopt_ss, train_ss, ref_ss = np.random.SeedSequence(seed).spawn(3)
    base = dict(source=config.source_tag, target=config.target_tag, adopted_speakers=k,
                repetition=rep, fold="", seed=seed, uar=None, distance_loss_skips=0)
    rows = []
    try:
        adopted = select_adopted(target, k, np.random.default_rng(adopt_ss),
                                 config.per_emotion_per_speaker)
    except (InvalidInputError, ArithmeticError) as exc:
        err = f"{type(exc).__name__}: {exc}"
        return [TrialRow(p, frozen_layers=f, status="failed", error=err, **base)
                for p, f in _trial_cells(config)]
    adopted_ds = target.subset(adopted.indices)
    test_ds = target.subset(adopted.test_indices)

    for protocol, frozen in _trial_cells(config):
        t0 = time.perf_counter()
        row = TrialRow(protocol, frozen_layers=frozen, **base)
        try:
            if protocol == "oodt":
                refs = _cap_references(source, config.reference_cap, np.random.default_rng(ref_ss))
                row.uar = evaluate(model, refs, test_ds)
            else:
                # same training stream for every freeze level and loss mode
                tuned, tlog = fine_tune(model, adopted_ds, frozen, protocol == "finetune_dl",
                                        config.finetune, np.random.default_rng(train_ss))
                row.distance_loss_skips = tlog.distance_skips
                row.uar = evaluate(tuned, adopted_ds, test_ds)
        except (InvalidInputError, ArithmeticError) as exc:
            row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
            log.warning("%s trial k=%d rep=%d failed: %s", protocol, k, rep, exc)
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
    return rows


def _trial_cells(config: ExperimentConfig) -> list[tuple[str, int]]:
    cells = []
    if "oodt" in config.protocols:
        cells.append(("oodt", 0))
    for frozen in config.frozen_layers:
        for protocol in FINETUNE_PROTOCOLS:
            if protocol in config.protocols:
                cells.append((protocol, frozen))
    return cells


def _trial_task(args):
    return _transfer_trial(*args)


def run_experiment(config: ExperimentConfig, target: Dataset, source: Dataset | None = None,
                   model: Model | None = None) -> ExperimentResult:
    """Full sweep: adopted counts x repetitions x freeze levels x loss modes.

    The source model (trained once from the master seed unless ``model`` is
    given) is shared by all repetitions; each repetition redraws adopted
    speakers and samples.
    """
    config.validate(target)
    needs_source = any(p != "idt" for p in config.protocols)
    if needs_source and source is None:
        raise ConfigError("protocols oodt/finetune need a source dataset")
    rows: list[TrialRow] = []
    if needs_source:
        _require_classes(target, "target")
        if model is None:
            model, plog = pretrain(source, config.pretrain,
                                   derive_seed(config.master_seed, 0), config.network)
            log.info("pretrained on %d source samples for %d epochs",
                     len(source), plog.epochs_run)
        tasks = [(source, target, model, config, k, rep)
                 for k in config.adopted_speaker_counts for rep in range(config.repetitions)]
        if config.parallel > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=config.parallel) as pool:
                for trial_rows in pool.map(_trial_task, tasks):
                    rows.extend(trial_rows)
        else:
            for task in tasks:
                rows.extend(_trial_task(task))
    if "idt" in config.protocols:
        rows.extend(run_idt(target, config).trials)
    return ExperimentResult(rows, {"experiment": to_dict(config)}).sorted()


def to_dict(config) -> dict:
    """Plain nested dict of a config dataclass (tuples become lists)."""
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    return clean(asdict(config))


def save_model(model: Model, path) -> None:
    arrays = {"mean": model.normalizer.mean, "std": model.normalizer.std}
    for part, layers in (("extractor", model.params.extractor), ("head", model.params.head)):
        for i, layer in enumerate(layers):
            arrays[f"{part}_{i}_weights"] = layer.weights
            arrays[f"{part}_{i}_biases"] = layer.biases
            arrays[f"{part}_{i}_activation"] = np.array(layer.activation.value)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> Model:
    with np.load(path) as data:
        def layers(part):
            out, i = [], 0
            while f"{part}_{i}_weights" in data:
                out.append(nn_core.DenseLayer(data[f"{part}_{i}_weights"], data[f"{part}_{i}_biases"],
                                              str(data[f"{part}_{i}_activation"])))
                i += 1
            return out
        params = sm.SiameseParams(layers("extractor"), layers("head"))
        if not params.extractor or not params.head:
            raise InvalidInputError(f"{path} holds no model")
        return Model(params, Normalizer(data["mean"].copy(), data["std"].copy()))
