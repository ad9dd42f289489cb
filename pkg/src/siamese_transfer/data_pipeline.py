"""Datasets of labeled feature vectors: CSV I/O, scaling, pairs, folds, synthesis."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError
from .siamese_model import PairBatch

EMOTIONS = ("anger", "happiness", "sadness", "fear")
FEATURE_DIM = 64
FEATURE_COLUMNS = tuple(f"f{i:02d}" for i in range(FEATURE_DIM))
CSV_HEADER = ("sample_id", "speaker_id", "emotion", *FEATURE_COLUMNS)
STD_FLOOR = 1e-8

# Order of the 64 columns for openSMILE IS09-style exports: 16 low-level
# descriptors (+ deltas), each summarised by mean and standard deviation.
_LLDS = ("intensity", "zcr", "voice_prob", "f0", *(f"mfcc{i}" for i in range(1, 13)))
FEATURE_NAMES = tuple(
    f"{lld}{'_de' if delta else ''}_{stat}"
    for delta in (False, True)
    for lld in _LLDS
    for stat in ("mean", "std")
)


def emotion_index(label: str) -> int:
    try:
        return EMOTIONS.index(label.strip().lower())
    except ValueError:
        raise InvalidInputError(
            f"unknown emotion {label!r}; expected one of {', '.join(EMOTIONS)}"
        ) from None


@dataclass(frozen=True)
class Sample:
    sample_id: str
    speaker_id: str
    emotion: str
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of samples; ``labels`` are indices into ``EMOTIONS``."""

    sample_ids: tuple[str, ...]
    speaker_ids: tuple[str, ...]
    labels: np.ndarray
    features: np.ndarray
    normalizer: "Normalizer | None" = None
    speaker_index: dict = field(init=False, repr=False)
    class_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        n = len(self.sample_ids)
        if feats.ndim != 2 or feats.shape[0] != n or labels.shape != (n,) or len(self.speaker_ids) != n:
            raise InvalidInputError("dataset columns have inconsistent lengths")
        if not np.all(np.isfinite(feats)):
            raise InvalidInputError("non-finite feature values")
        if n and (labels.min() < 0 or labels.max() >= len(EMOTIONS)):
            raise InvalidInputError("label out of range")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "speaker_ids", tuple(self.speaker_ids))
        spk: dict[str, list[int]] = {}
        for i, s in enumerate(self.speaker_ids):
            spk.setdefault(s, []).append(i)
        object.__setattr__(self, "speaker_index", {k: np.array(v) for k, v in spk.items()})
        object.__setattr__(self, "class_index", {
            EMOTIONS[c]: np.flatnonzero(labels == c) for c in range(len(EMOTIONS))
            if np.any(labels == c)
        })

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "Dataset":
        samples = list(samples)
        if not samples:
            return cls((), (), np.zeros(0, dtype=np.int64), np.zeros((0, FEATURE_DIM)))
        return cls(
            tuple(s.sample_id for s in samples),
            tuple(s.speaker_id for s in samples),
            np.array([emotion_index(s.emotion) for s in samples]),
            np.stack([np.asarray(s.features, dtype=np.float64) for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def speakers(self) -> list[str]:
        return sorted(self.speaker_index)

    @property
    def speaker_array(self) -> np.ndarray:
        return np.array(self.speaker_ids, dtype=object)

    def sample(self, i: int) -> Sample:
        return Sample(self.sample_ids[i], self.speaker_ids[i], EMOTIONS[self.labels[i]],
                      self.features[i].copy())

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            tuple(self.sample_ids[i] for i in idx),
            tuple(self.speaker_ids[i] for i in idx),
            self.labels[idx],
            self.features[idx],
            self.normalizer,
        )


def load_csv(path: str | os.PathLike) -> Dataset:
    """Read a feature CSV with header ``sample_id,speaker_id,emotion,f00..f63``."""
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_rows(csv.reader(fh))


def loads_csv(text: str) -> Dataset:
    return _parse_rows(csv.reader(io.StringIO(text)))


def _parse_rows(reader) -> Dataset:
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", row=0) from None
    header = [h.strip() for h in header]
    missing = [c for c in CSV_HEADER if c not in header]
    if missing:
        raise ParseError(f"missing columns: {', '.join(missing)}", row=0)
    extra = [c for c in header if c not in CSV_HEADER]
    if extra:
        raise ParseError(f"unexpected columns: {', '.join(extra)}", row=0)
    col = {name: header.index(name) for name in CSV_HEADER}

    ids, speakers, labels, rows = [], [], [], []
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(
                f"expected {len(header)} fields ({FEATURE_DIM} features), got {len(row)}",
                row=lineno,
            )
        try:
            labels.append(emotion_index(row[col["emotion"]]))
        except InvalidInputError as exc:
            raise ParseError(str(exc), row=lineno, column="emotion") from None
        vec = np.empty(FEATURE_DIM)
        for j, name in enumerate(FEATURE_COLUMNS):
            cell = row[col[name]].strip()
            try:
                vec[j] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r}", row=lineno, column=name) from None
            if not math.isfinite(vec[j]):
                raise ParseError(f"non-finite value {cell!r}", row=lineno, column=name)
        ids.append(row[col["sample_id"]].strip())
        speakers.append(row[col["speaker_id"]].strip())
        rows.append(vec)
    if not rows:
        raise ParseError("no data rows", row=1)
    return Dataset(tuple(ids), tuple(speakers), np.array(labels), np.stack(rows))


def dumps_csv(dataset: Dataset) -> str:
    if dataset.n_features != FEATURE_DIM:
        raise InvalidInputError(f"CSV format holds {FEATURE_DIM} features, got {dataset.n_features}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for i in range(len(dataset)):
        writer.writerow([dataset.sample_ids[i], dataset.speaker_ids[i], EMOTIONS[dataset.labels[i]],
                         *(repr(float(v)) for v in dataset.features[i])])
    return buf.getvalue()


def write_csv(dataset: Dataset, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_csv(dataset), encoding="utf-8")


@dataclass(frozen=True, eq=False)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray


def fit_normalizer(dataset: Dataset) -> Normalizer:
    if len(dataset) < 2:
        raise InvalidInputError("normalizer fit needs at least 2 samples")
    std = dataset.features.std(axis=0)
    return Normalizer(dataset.features.mean(axis=0), np.where(std > STD_FLOOR, std, STD_FLOOR))


def apply_normalizer(dataset: Dataset, normalizer: Normalizer) -> Dataset:
    if normalizer.mean.shape != (dataset.n_features,):
        raise InvalidInputError("normalizer does not match feature dimension")
    feats = (dataset.features - normalizer.mean) / normalizer.std
    return Dataset(dataset.sample_ids, dataset.speaker_ids, dataset.labels, feats, normalizer)


PAIR_MODES = ("both", "within", "cross")


def sample_pairs(dataset: Dataset, n_pairs: int, rng: np.random.Generator,
                 speaker_mode: str = "both") -> PairBatch:
    """Balanced random pairs: ``n_pairs/2`` same-class, ``n_pairs/2`` different.

    Anchors are drawn uniformly from samples that have at least one valid
    partner; the partner is then uniform among valid partners. Self-pairs
    never occur. ``speaker_mode`` restricts partners to the anchor's own
    speaker (``"within"``) or to other speakers (``"cross"``).
    """
    if n_pairs <= 0 or n_pairs % 2:
        raise InvalidInputError("n_pairs must be a positive even number")
    if speaker_mode not in PAIR_MODES:
        raise ConfigError(f"speaker_mode must be one of {PAIR_MODES}")
    labels = dataset.labels
    spk = dataset.speaker_array
    n = len(dataset)
    same_label = labels[:, None] == labels[None, :]
    allowed = ~np.eye(n, dtype=bool)
    if speaker_mode == "within":
        allowed &= spk[:, None] == spk[None, :]
    elif speaker_mode == "cross":
        allowed &= spk[:, None] != spk[None, :]

    half = n_pairs // 2
    out_a, out_b, out_s = [], [], []
    for is_same in (True, False):
        candidates = allowed & (same_label if is_same else ~same_label)
        anchors = np.flatnonzero(candidates.any(axis=1))
        if anchors.size == 0:
            kind = "same-class" if is_same else "different-class"
            raise InvalidInputError(f"no feasible {kind} pairs in dataset")
        picks = rng.choice(anchors, size=half)
        rows = candidates[picks]
        # r-th valid partner of each anchor, r uniform
        r = rng.integers(0, rows.sum(axis=1))
        partners = (rows.cumsum(axis=1) > r[:, None]).argmax(axis=1)
        out_a.append(picks)
        out_b.append(partners)
        out_s.append(np.full(half, is_same))
    return PairBatch(np.concatenate(out_a), np.concatenate(out_b), np.concatenate(out_s))


def loso_folds(dataset: Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    """One (train, test) split per speaker, in sorted speaker order."""
    speakers = dataset.speakers
    if len(speakers) < 2:
        raise InvalidInputError("leave-one-speaker-out needs at least 2 speakers")
    all_idx = np.arange(len(dataset))
    folds = []
    for s in speakers:
        test = np.sort(dataset.speaker_index[s])
        train = np.setdiff1d(all_idx, test)
        folds.append((train, test))
    return folds


@dataclass
class SynthConfig:
    """Gaussian class clusters with per-speaker offsets.

    Class centers come from ``seed`` alone; speakers, offsets and noise come
    from ``sample_seed`` (defaults to ``seed``). Two domains that share
    ``seed`` therefore share class geometry. ``domain_shift`` is either a
    vector added to every sample or a scalar length along a direction
    drawn from ``seed``. ``class_shift_scale`` moves each class center by
    that length along its own seeded direction, so a domain can differ in
    class geometry and not only by translation.
    """

    speaker_count: int = 10
    samples_per_speaker_per_class: int = 5
    class_center_separation: float = 4.0
    speaker_offset_scale: float = 0.5
    noise_scale: float = 1.0
    domain_shift: float | Sequence[float] = 0.0
    class_shift_scale: float = 0.0
    seed: int = 0
    sample_seed: int | None = None
    n_features: int = FEATURE_DIM
    speaker_prefix: str = "spk"

    def validate(self) -> None:
        if self.speaker_count <= 0 or self.samples_per_speaker_per_class <= 0 or self.n_features <= 0:
            raise ConfigError("synthetic counts must be positive")
        if min(self.class_center_separation, self.speaker_offset_scale, self.noise_scale,
               self.class_shift_scale) < 0:
            raise ConfigError("synthetic scales must be nonnegative")
        if len(EMOTIONS) > self.n_features:
            raise ConfigError("need at least as many features as classes")
        if np.ndim(self.domain_shift) == 1 and len(self.domain_shift) != self.n_features:
            raise ConfigError("domain_shift vector must match n_features")


def synth_generate(config: SynthConfig) -> Dataset:
    config.validate()
    dim = config.n_features
    k = len(EMOTIONS)
    geo = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    # orthonormal directions scaled so every pair of centers is `separation` apart
    basis, _ = np.linalg.qr(geo.standard_normal((dim, k)))
    centers = basis.T * (config.class_center_separation / np.sqrt(2.0))
    shift_dir = geo.standard_normal(dim)
    shift_dir /= np.linalg.norm(shift_dir)
    if np.ndim(config.domain_shift) == 0:
        shift = float(config.domain_shift) * shift_dir
    else:
        shift = np.asarray(config.domain_shift, dtype=np.float64)
    class_dirs = geo.standard_normal((k, dim))
    class_dirs /= np.linalg.norm(class_dirs, axis=1, keepdims=True)
    centers = centers + config.class_shift_scale * class_dirs

    sample_seed = config.seed if config.sample_seed is None else config.sample_seed
    rng = np.random.default_rng(np.random.SeedSequence([sample_seed, 1]))
    m = config.samples_per_speaker_per_class
    width = len(str(config.speaker_count - 1))
    ids, speakers, labels, rows = [], [], [], []
    for s in range(config.speaker_count):
        spk = f"{config.speaker_prefix}{s:0{width}d}"
        offset = config.speaker_offset_scale * rng.standard_normal(dim)
        for c in range(k):
            noise = config.noise_scale * rng.standard_normal((m, dim))
            for j in range(m):
                ids.append(f"{spk}_{EMOTIONS[c]}_{j}")
                speakers.append(spk)
                labels.append(c)
                rows.append(centers[c] + offset + noise[j] + shift)
    return Dataset(tuple(ids), tuple(speakers), np.array(labels), np.stack(rows))
