import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from siamese_transfer.data_pipeline import (
    CSV_HEADER,
    FEATURE_NAMES,
    Dataset,
    SynthConfig,
    apply_normalizer,
    dumps_csv,
    fit_normalizer,
    load_csv,
    loads_csv,
    loso_folds,
    sample_pairs,
    synth_generate,
    write_csv,
)
from siamese_transfer.errors import ConfigError, InvalidInputError, ParseError


def _row(i, speaker="s1", emotion="anger", n=64):
    return ",".join([f"id{i}", speaker, emotion] + [str(0.5 * i + j) for j in range(n)])


HEADER = ",".join(CSV_HEADER)


def test_load_well_formed(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("\n".join([HEADER, _row(0), _row(1, "s2", "Fear"), _row(2, "s1", "SADNESS")]))
    ds = load_csv(path)
    assert len(ds) == 3
    assert ds.speaker_index["s1"].tolist() == [0, 2]
    assert ds.class_index["fear"].tolist() == [1]
    assert ds.features.shape == (3, 64)
    assert ds.features[1, 3] == 3.5


def test_load_wrong_arity():
    with pytest.raises(ParseError, match="row 1.*64 features"):
        loads_csv("\n".join([HEADER, _row(0, n=63)]))


def test_load_rejects_disgust():
    with pytest.raises(ParseError, match="emotion"):
        loads_csv("\n".join([HEADER, _row(0, emotion="disgust")]))


def test_load_non_numeric_names_cell():
    bad = _row(0).split(",")
    bad[10] = "abc"
    with pytest.raises(ParseError, match="row 1, column 'f07'"):
        loads_csv("\n".join([HEADER, ",".join(bad)]))


def test_load_missing_column():
    with pytest.raises(ParseError, match="missing columns: f63"):
        loads_csv(",".join(CSV_HEADER[:-1]) + "\n")


@pytest.mark.parametrize("text", ["", HEADER + "\n"])
def test_load_empty(text):
    with pytest.raises(ParseError):
        loads_csv(text)


def test_feature_names_cover_all_columns():
    assert len(FEATURE_NAMES) == 64 == len(set(FEATURE_NAMES))
    assert FEATURE_NAMES[0] == "intensity_mean" and FEATURE_NAMES[-1] == "mfcc12_de_std"


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_csv_round_trip(tmp_path_factory, seed):
    ds = synth_generate(SynthConfig(speaker_count=3, samples_per_speaker_per_class=2, seed=seed))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, path)
    back = load_csv(path)
    assert back.sample_ids == ds.sample_ids
    assert back.speaker_ids == ds.speaker_ids
    assert np.array_equal(back.labels, ds.labels)
    assert np.max(np.abs(back.features - ds.features)) <= 1e-12


def test_normalizer_standardizes():
    ds = synth_generate(SynthConfig(speaker_count=4, seed=3))
    out = apply_normalizer(ds, fit_normalizer(ds))
    assert np.abs(out.features.mean(axis=0)).max() < 1e-9
    assert np.abs(out.features.std(axis=0) - 1).max() < 1e-9


def test_normalizer_constant_feature():
    ds = synth_generate(SynthConfig(speaker_count=2, seed=0))
    feats = ds.features.copy()
    feats[:, 5] = 3.0
    ds = Dataset(ds.sample_ids, ds.speaker_ids, ds.labels, feats)
    norm = fit_normalizer(ds)
    assert norm.std[5] == 1e-8
    assert not apply_normalizer(ds, norm).features[:, 5].any()


def test_normalizer_preserves_target_shift():
    src = synth_generate(SynthConfig(speaker_count=4, seed=1))
    tgt = synth_generate(SynthConfig(speaker_count=4, seed=1, domain_shift=5.0))
    out = apply_normalizer(tgt, fit_normalizer(src))
    assert np.linalg.norm(out.features.mean(axis=0)) > 1.0


def test_normalizer_needs_two_samples():
    ds = synth_generate(SynthConfig(speaker_count=1, samples_per_speaker_per_class=1))
    with pytest.raises(InvalidInputError):
        fit_normalizer(ds.subset([0]))


def test_pairs_balanced_and_labelled():
    ds = synth_generate(SynthConfig(speaker_count=3, seed=2))
    b = sample_pairs(ds, 10, np.random.default_rng(0))
    assert (b.same_count, b.different_count) == (5, 5)
    assert np.all((ds.labels[b.index_a] == ds.labels[b.index_b]) == b.same)
    assert not np.any(b.index_a == b.index_b)


def test_pairs_deterministic():
    ds = synth_generate(SynthConfig(speaker_count=3, seed=2))
    a = sample_pairs(ds, 50, np.random.default_rng(9)).triples()
    b = sample_pairs(ds, 50, np.random.default_rng(9)).triples()
    assert a == b


def test_pairs_uniform_over_classes():
    ds = synth_generate(SynthConfig(speaker_count=5, samples_per_speaker_per_class=5, seed=4))
    b = sample_pairs(ds, 1000, np.random.default_rng(123))
    counts = np.bincount(ds.labels[b.index_a[b.same]], minlength=4)
    assert np.all(counts > 0)
    assert stats.chisquare(counts).pvalue > 0.01
    anchors = np.bincount(b.index_a, minlength=len(ds))
    assert stats.chisquare(anchors).pvalue > 0.01


@pytest.mark.parametrize("mode", ["within", "cross"])
def test_pairs_speaker_mode(mode):
    ds = synth_generate(SynthConfig(speaker_count=3, seed=2))
    b = sample_pairs(ds, 200, np.random.default_rng(1), mode)
    spk = ds.speaker_array
    same_speaker = spk[b.index_a] == spk[b.index_b]
    assert same_speaker.all() if mode == "within" else not same_speaker.any()


def test_pairs_infeasible():
    ds = synth_generate(SynthConfig(speaker_count=1, samples_per_speaker_per_class=1))
    with pytest.raises(InvalidInputError):
        sample_pairs(ds, 4, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        sample_pairs(ds, 3, np.random.default_rng(0))


def test_pairs_avoid_singleton_class_for_same_pairs():
    ds = synth_generate(SynthConfig(speaker_count=2, samples_per_speaker_per_class=1, seed=0))
    keep = [i for i in range(len(ds)) if not (ds.labels[i] == 0 and ds.speaker_ids[i] == "spk1")]
    ds = ds.subset(keep)
    b = sample_pairs(ds, 100, np.random.default_rng(0))
    assert 0 not in set(ds.labels[b.index_a[b.same]].tolist())


def test_loso_24_speakers():
    ds = synth_generate(SynthConfig(speaker_count=24, samples_per_speaker_per_class=1))
    assert len(loso_folds(ds)) == 24


@settings(max_examples=20, deadline=None)
@given(speakers=st.integers(2, 12), per=st.integers(1, 3))
def test_loso_partitions(speakers, per):
    ds = synth_generate(SynthConfig(speaker_count=speakers, samples_per_speaker_per_class=per))
    folds = loso_folds(ds)
    everything = np.arange(len(ds))
    seen = []
    for train, test in folds:
        assert not np.intersect1d(train, test).size
        assert np.array_equal(np.union1d(train, test), everything)
        test_speakers = {ds.speaker_ids[i] for i in test}
        assert len(test_speakers) == 1
        assert not test_speakers & {ds.speaker_ids[i] for i in train}
        seen.extend(test.tolist())
    assert sorted(seen) == everything.tolist()


def test_loso_single_speaker():
    ds = synth_generate(SynthConfig(speaker_count=1))
    with pytest.raises(InvalidInputError):
        loso_folds(ds)


def test_synth_no_noise_identical_within_class():
    ds = synth_generate(SynthConfig(speaker_count=3, noise_scale=0, speaker_offset_scale=0))
    for c in range(4):
        rows = ds.features[ds.labels == c]
        assert np.array_equal(rows, np.broadcast_to(rows[0], rows.shape))


def test_synth_center_separation():
    ds = synth_generate(SynthConfig(speaker_count=1, noise_scale=0, speaker_offset_scale=0,
                                    class_center_separation=3.0))
    centers = np.stack([ds.features[ds.labels == c][0] for c in range(4)])
    d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    assert d[np.triu_indices(4, 1)] == pytest.approx(3.0)


def test_synth_zero_shift_reproduces():
    a = synth_generate(SynthConfig(seed=5, domain_shift=0.0))
    b = synth_generate(SynthConfig(seed=5))
    assert np.array_equal(a.features, b.features) and a.sample_ids == b.sample_ids


def test_synth_shift_moves_mean():
    a = synth_generate(SynthConfig(seed=5))
    b = synth_generate(SynthConfig(seed=5, domain_shift=4.0))
    assert np.linalg.norm((b.features - a.features).mean(axis=0)) == pytest.approx(4.0)


def test_synth_vector_shift():
    shift = np.zeros(64)
    shift[3] = 2.0
    a = synth_generate(SynthConfig(seed=5))
    b = synth_generate(SynthConfig(seed=5, domain_shift=shift.tolist()))
    assert np.allclose(b.features - a.features, shift)


def test_synth_validation():
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(speaker_count=0))
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(noise_scale=-1))


def _one_nn_uar(train, test):
    d = np.linalg.norm(test.features[:, None] - train.features[None], axis=-1)
    pred = train.labels[np.argmin(d, axis=1)]
    return np.mean([np.mean(pred[test.labels == c] == c) for c in range(4)])


def test_synth_well_separated_one_nn_oracle():
    ds = synth_generate(SynthConfig(speaker_count=6, class_center_separation=20.0,
                                    noise_scale=0.5, speaker_offset_scale=0.5, seed=7))
    train, test = loso_folds(ds)[0]
    assert _one_nn_uar(ds.subset(train), ds.subset(test)) > 0.95


def test_dataset_is_immutable():
    ds = synth_generate(SynthConfig(speaker_count=2))
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


def test_dumps_requires_64_features():
    ds = synth_generate(SynthConfig(speaker_count=2, n_features=8))
    with pytest.raises(InvalidInputError):
        dumps_csv(ds)
