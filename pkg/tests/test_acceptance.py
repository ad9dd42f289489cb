"""Acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line with the measured quantity, so
``pytest tests/test_acceptance.py`` doubles as a readable report.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from siamese_transfer import cli, gradcheck
from siamese_transfer import siamese_model as sm
from siamese_transfer.data_pipeline import SynthConfig, loso_folds, synth_generate
from siamese_transfer.errors import DegenerateDenominator
from siamese_transfer.nn_core import OptimizerState, apply_update
from siamese_transfer.protocols import (
    ExperimentConfig,
    TrainConfig,
    fine_tune,
    pretrain,
    run_experiment,
    run_idt,
    select_adopted,
    uar,
)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def random_batch(rng, n_pairs=12, dim=16):
    emb = rng.normal(size=(2 * n_pairs, dim))
    same = np.zeros(n_pairs, dtype=bool)
    same[: n_pairs // 2] = True
    rng.shuffle(same)
    return emb, sm.PairBatch(np.arange(n_pairs), np.arange(n_pairs) + n_pairs, same)


def test_gradient_fidelity(report):
    start = time.perf_counter()
    worst = {"bce": 0.0, "distance": 0.0}
    for seed in range(10):
        for name, err in gradcheck.check_losses(seed, step=1e-5).items():
            worst[name] = max(worst[name], err)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 10.0
    report("gradient fidelity", ok,
           f"max rel err bce {worst['bce']:.2e}, distance {worst['distance']:.2e} "
           f"(10 seeds, extractor 8-4-2), {elapsed:.2f}s")


def structured_batch(rng, n_pairs=12, dim=16):
    """Pairs whose same-class partners sit closer than different-class ones."""
    anchors = rng.normal(size=(n_pairs, dim))
    same = np.zeros(n_pairs, dtype=bool)
    same[: n_pairs // 2] = True
    rng.shuffle(same)
    spread = np.where(same, 0.5, 2.0)[:, None]
    partners = anchors + spread * rng.normal(size=(n_pairs, dim))
    emb = np.vstack([anchors, partners])
    return emb, sm.PairBatch(np.arange(n_pairs), np.arange(n_pairs) + n_pairs, same)


def test_distance_loss_scale_invariance(report):
    rng = np.random.default_rng(0)
    worst, evaluated = 0.0, 0
    for _ in range(100):
        emb, batch = structured_batch(rng)
        base = sm.distance_loss(emb, batch)
        for c in (0.1, 1.0, 10.0):
            worst = max(worst, abs(sm.distance_loss(c * emb, batch) - base))
        evaluated += 1
    # unstructured noise batches have D close to S and a large, badly
    # conditioned ratio; rounding of c*E alone moves L by ~eps*L^2, so
    # these are held to a relative bound instead
    worst_rel, noise_rng = 0.0, np.random.default_rng(10)
    for _ in range(100):
        emb, batch = random_batch(noise_rng)
        try:
            base = sm.distance_loss(emb, batch)
        except DegenerateDenominator:
            continue
        for c in (0.1, 10.0):
            worst_rel = max(worst_rel, abs(sm.distance_loss(c * emb, batch) - base) / base)
    ok = evaluated == 100 and worst < 1e-9 and worst_rel < 1e-12
    report("distance loss scale invariance", ok,
           f"max |L(cE) - L(E)| = {worst:.2e} over {evaluated} batches x 3 scales; "
           f"noise batches max relative {worst_rel:.1e}")


def test_distance_loss_lower_bound(report):
    rng = np.random.default_rng(1)
    kept, below_one, mismatched = 0, 0, 0
    for i in range(1000):
        emb, batch = random_batch(rng, n_pairs=8, dim=4)
        if i % 4 == 0:
            # collapse the same-class pairs so S = 0 cases are exercised
            emb[batch.index_b[batch.same]] = emb[batch.index_a[batch.same]]
        dist = np.linalg.norm(emb[batch.index_a] - emb[batch.index_b], axis=1)
        s, d = dist[batch.same].mean(), dist[~batch.same].mean()
        if not d > s:
            continue
        try:
            loss = sm.distance_loss(emb, batch)
        except DegenerateDenominator:
            continue
        kept += 1
        below_one += loss < 1.0
        mismatched += (loss - 1.0 < 1e-9) != (s < 1e-10)
    report("distance loss lower bound", kept > 0 and below_one == 0 and mismatched == 0,
           f"{kept} batches with D > S, {below_one} below 1, {mismatched} iff violations")


def test_head_isolation(report):
    rng = np.random.default_rng(2)
    params = sm.init_siamese(2)
    head0 = [(l.weights.copy(), l.biases.copy()) for l in params.head]
    state = OptimizerState.for_params(params.layers)
    steps = 0
    while steps < 100:
        x = rng.normal(size=(16, 64))
        same = np.array([True] * 4 + [False] * 4)
        batch = sm.PairBatch(np.arange(8), np.arange(8) + 8, same)
        try:
            _, grads = sm.distance_loss_grad(params, x, batch)
        except DegenerateDenominator:
            continue
        params = params.with_layers(apply_update(params.layers, grads, state))
        steps += 1
    ok = all(np.array_equal(w, l.weights) and np.array_equal(b, l.biases)
             for (w, b), l in zip(head0, params.head))
    moved = not np.array_equal(params.extractor[0].weights, sm.init_siamese(2).extractor[0].weights)
    report("head isolation", ok and moved, f"head bit-identical after {steps} distance updates, "
           f"extractor changed: {moved}")


def test_symmetry(report):
    rng = np.random.default_rng(3)
    params = sm.init_siamese(3)
    x, y = rng.normal(size=(1000, 64)), rng.normal(size=(1000, 64))
    worst = float(np.max(np.abs(sm.similarity(params, x, y) - sm.similarity(params, y, x))))
    report("similarity symmetry", worst <= 1e-12, f"max asymmetry {worst:.1e} over 1000 pairs")


@pytest.mark.parametrize("frozen", [1, 2])
def test_freeze_contract(report, scenario, frozen):
    source, target = scenario
    model, _ = pretrain(source, TrainConfig(epochs=5, batches_per_epoch=4), 0)
    adopted = target.subset(select_adopted(target, 2, np.random.default_rng(0)).indices)
    tuned, log = fine_tune(model, adopted, frozen, True, TrainConfig(epochs=50, batch_size=16,
                                                                      batches_per_epoch=2),
                           np.random.default_rng(1))
    same = all(np.array_equal(tuned.params.extractor[i].weights, model.params.extractor[i].weights)
               and np.array_equal(tuned.params.extractor[i].biases, model.params.extractor[i].biases)
               for i in range(frozen))
    report(f"freeze contract (frozen={frozen})", same and log.epochs_run > 0,
           f"{frozen} layer(s) bit-identical after {log.epochs_run} epochs")


def counting_uar(pred, labels):
    recalls = []
    for c in sorted(set(labels)):
        idx = [i for i, l in enumerate(labels) if l == c]
        recalls.append(sum(pred[i] == c for i in idx) / len(idx))
    return sum(recalls) / len(recalls)


def test_uar_oracle(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(20, 201))
        labels = rng.integers(4, size=n)
        labels[:4] = np.arange(4)
        pred = rng.integers(4, size=n)
        worst = max(worst, abs(uar(pred, labels) - counting_uar(pred.tolist(), labels.tolist())))
    chance = uar(np.random.default_rng(0).integers(4, size=4000), np.repeat(np.arange(4), 1000))
    ok = worst <= 1e-12 and abs(chance - 0.25) <= 0.05
    report("UAR oracle equivalence", ok,
           f"max |uar - oracle| {worst:.1e} over 200 vectors, chance UAR {chance:.4f}")


def test_loso_integrity(report):
    problems = []
    for n in range(5, 25):
        ds = synth_generate(SynthConfig(speaker_count=n, samples_per_speaker_per_class=2, seed=n))
        folds = list(loso_folds(ds))
        if len(folds) != n:
            problems.append(f"{n} speakers -> {len(folds)} folds")
        for speaker, (train_idx, test_idx) in zip(ds.speakers, folds):
            if speaker in {ds.speaker_ids[i] for i in train_idx}:
                problems.append(f"{speaker} leaked into its own training set")
            if {ds.speaker_ids[i] for i in test_idx} != {speaker}:
                problems.append(f"fold {speaker} tests other speakers")
    report("LOSO integrity", not problems, "; ".join(problems) or "5-24 speakers, no leakage")


def test_directional_transfer(report, scenario):
    source, target = scenario
    start = time.perf_counter()
    cfg = ExperimentConfig(protocols=("oodt", "finetune", "finetune_dl"), frozen_layers=(0,),
                           adopted_speaker_counts=(2,), repetitions=10, master_seed=0)
    res = run_experiment(cfg, target, source)
    elapsed = time.perf_counter() - start
    oodt, ft, dl = (res.mean_uar(p) for p in ("oodt", "finetune", "finetune_dl"))
    ok = oodt < ft and ft <= dl + 0.01 and dl - oodt >= 0.05 and elapsed < 300
    report("directional transfer", ok,
           f"OODT {oodt:.3f}, FT {ft:.3f}, FT-DL {dl:.3f} (gain {100 * (dl - oodt):.1f} pts), "
           f"{elapsed:.1f}s")


def test_chance_floor_and_ceiling(report):
    chance = run_idt(synth_generate(SynthConfig(class_center_separation=0.0, seed=0)),
                     ExperimentConfig()).mean_uar("idt")
    ceiling = run_idt(synth_generate(SynthConfig(class_center_separation=12.0, seed=0)),
                      ExperimentConfig()).mean_uar("idt")
    ok = abs(chance - 0.25) <= 0.07 and ceiling > 0.9
    report("chance floor and ceiling", ok, f"IDT UAR separation 0: {chance:.3f}, "
           f"separation 12: {ceiling:.3f}")


def test_end_to_end_determinism(report, tmp_path, monkeypatch):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data)]) == 0
    digests = []
    for run in ("run1", "run2"):
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        rc = cli.main(["experiment", "--source", str(data / "source.csv"),
                       "--target", str(data / "target.csv"), "--seed", "0", "--out", "results"])
        assert rc == 0
        digests.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                        for p in sorted(Path("results").iterdir())})
    ok = digests[0] == digests[1] and len(digests[0]) == 4
    report("end-to-end determinism", ok,
           f"{len(digests[0])} result files byte-identical across two runs: {digests[0] == digests[1]}")
