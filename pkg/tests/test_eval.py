"""Probe tests: the k-NN rule against a brute-force oracle, tie-break
determinism, linear-probe sanity on separable/permuted/collapsed features,
and the EvalReport packaging invariants."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixsiam.augment import AugmentConfig
from mixsiam.data import SyntheticConfig, make_synthetic
from mixsiam.errors import ConfigError, ShapeError
from mixsiam.eval import (
    EvalReport,
    ProbeConfig,
    eval_datasets,
    evaluate,
    extract_features,
    knn_predict,
    knn_probe,
    linear_probe,
    params_checksum,
    random_baseline_report,
    write_per_class_csv,
    write_report,
)
from mixsiam.model import EncoderSpec, PredictorSpec, init
from mixsiam.train import DatasetConfig, TrainConfig, config_from_dict


def tiny_config(**overrides):
    base = dict(
        dataset=DatasetConfig(classes=2, per_class=6, size=8, seed=5),
        encoder=EncoderSpec.tiny(),
        predictor=PredictorSpec.tiny(),
        augment=AugmentConfig(output_size=8, seed=11),
        batch_size=4,
        epochs=2,
        seed=11,
        precision=64,
    )
    base.update(overrides)
    return TrainConfig(**base)


def blobs(seed, per_class=20, classes=3, dim=6, spread=0.1):
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for c in range(classes):
        center = np.zeros(dim)
        center[c] = 5.0
        feats.append(center + spread * rng.standard_normal((per_class, dim)))
        labels.append(np.full(per_class, c))
    return np.concatenate(feats), np.concatenate(labels)


# -- k-NN rule ---------------------------------------------------------------


def test_knn_hand_worked_instance():
    train = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9], [-1.0, 0.0]])
    labels = np.array([0, 0, 1, 1, 2])
    queries = np.array([[1.0, 0.05], [0.05, 1.0]])
    # top-3 for the first query: both class-0 points plus one class-1 point
    assert knn_predict(train, labels, queries, k=3).tolist() == [0, 1]
    assert knn_predict(train, labels, queries, k=1).tolist() == [0, 1]
    # k=5 sees two votes each for 0 and 1; the tie goes to class 0
    assert knn_predict(train, labels, queries, k=5).tolist() == [0, 0]


def test_knn_vote_tie_prefers_smallest_class():
    train = np.array([[1.0, 0.0], [0.0, 1.0]])
    query = np.array([[1.0, 1.0]])
    assert knn_predict(train, np.array([0, 1]), query, k=2).tolist() == [0]
    assert knn_predict(train, np.array([1, 0]), query, k=2).tolist() == [0]
    assert knn_predict(train, np.array([2, 1]), query, k=2).tolist() == [1]


def test_knn_similarity_tie_keeps_training_order():
    # two identical training rows with different labels: the earlier row
    # wins the k=1 neighborhood
    train = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    query = np.array([[2.0, 0.0]])
    assert knn_predict(train, np.array([0, 1, 2]), query, k=1).tolist() == [0]
    assert knn_predict(train, np.array([1, 0, 2]), query, k=1).tolist() == [1]


def knn_oracle(train, labels, queries, k, classes):
    tn = train / np.linalg.norm(train, axis=1, keepdims=True)
    preds = []
    for q in queries:
        sims = tn @ (q / np.linalg.norm(q))
        order = sorted(range(len(labels)), key=lambda i: (-sims[i], i))[:k]
        counts = [0] * classes
        for i in order:
            counts[labels[i]] += 1
        preds.append(max(range(classes), key=lambda c: (counts[c], -c)))
    return preds


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_knn_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    train = rng.standard_normal((30, 4))
    labels = rng.integers(0, 3, size=30)
    queries = rng.standard_normal((10, 4))
    k = int(rng.integers(1, 12))
    got = knn_predict(train, labels, queries, k=k, class_count=3)
    assert got.tolist() == knn_oracle(train, labels, queries, k, 3)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_knn_self_neighbors_reproduce_labels(seed):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((15, 5))
    labels = rng.integers(0, 4, size=15)
    assert knn_probe(feats, labels, feats, labels, k=1) == 1.0


def test_knn_rejects_bad_inputs():
    feats = np.ones((3, 2))
    labels = np.array([0, 1, 0])
    with pytest.raises(ConfigError, match="empty"):
        knn_predict(np.empty((0, 2)), np.empty(0, dtype=int), feats)
    with pytest.raises(ConfigError, match="empty"):
        knn_predict(feats, labels, np.empty((0, 2)))
    with pytest.raises(ConfigError, match="k="):
        knn_predict(feats, labels, feats, k=0)
    with pytest.raises(ConfigError, match="k="):
        knn_predict(feats, labels, feats, k=4)
    with pytest.raises(ShapeError):
        knn_predict(feats, np.array([0, 1]), feats, k=1)
    with pytest.raises(ShapeError):
        knn_predict(np.ones(3), labels, feats, k=1)


# -- linear probe ------------------------------------------------------------


def test_probes_solve_separable_blobs():
    train_f, train_y = blobs(seed=0)
    test_f, test_y = blobs(seed=1, per_class=10)
    assert knn_probe(train_f, train_y, test_f, test_y, k=5) >= 0.99
    acc, preds = linear_probe(train_f, train_y, test_f, test_y, class_count=3,
                              probe=ProbeConfig(linear_epochs=10))
    assert acc >= 0.99
    assert preds.shape == (30,)


def test_probes_near_chance_on_uninformative_features():
    # pure-noise features carry no label signal, so both probes should sit
    # near the 1/3 chance rate (the margin allows for small-sample noise)
    rng = np.random.default_rng(2)
    train_f = rng.standard_normal((60, 6))
    train_y = rng.integers(0, 3, size=60)
    test_f = rng.standard_normal((60, 6))
    test_y = rng.integers(0, 3, size=60)
    assert knn_probe(train_f, train_y, test_f, test_y, k=5) < 0.55
    acc, _ = linear_probe(train_f, train_y, test_f, test_y, class_count=3,
                          probe=ProbeConfig(linear_epochs=10))
    assert acc < 0.55


def test_probes_on_collapsed_features_pick_one_class():
    train_f = np.ones((10, 4))
    train_y = np.array([0, 0, 1, 1, 2, 2, 2, 1, 0, 1])
    test_f = np.ones((6, 4))
    test_y = np.array([0, 1, 2, 0, 1, 2])
    preds = knn_predict(train_f, train_y, test_f, k=5)
    assert len(set(preds.tolist())) == 1
    acc, lpreds = linear_probe(train_f, train_y, test_f, test_y, class_count=3,
                               probe=ProbeConfig(linear_epochs=5))
    assert len(set(lpreds.tolist())) == 1
    assert acc == float(np.mean(test_y == lpreds[0]))


def test_linear_probe_is_deterministic():
    train_f, train_y = blobs(seed=4, per_class=8)
    test_f, test_y = blobs(seed=5, per_class=4)
    a = linear_probe(train_f, train_y, test_f, test_y, 3)
    b = linear_probe(train_f, train_y, test_f, test_y, 3)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_probe_config_validation():
    with pytest.raises(ConfigError):
        ProbeConfig(k=0)
    with pytest.raises(ConfigError):
        ProbeConfig(linear_lr=0.0)
    with pytest.raises(ConfigError):
        ProbeConfig(linear_epochs=0)


# -- feature extraction ------------------------------------------------------


def test_extract_features_shape_and_determinism():
    ds = make_synthetic(SyntheticConfig(classes=2, per_class=4, size=8, seed=5))
    params = init(EncoderSpec.tiny(), PredictorSpec.tiny(), seed=1, dtype=np.float64)
    before = params_checksum(params)
    a, ya = extract_features(params, ds, output_size=8)
    b, yb = extract_features(params, ds, output_size=8)
    assert a.shape == (8, 8)
    assert np.array_equal(a, b)
    assert np.array_equal(ya, ds.labels()) and np.array_equal(ya, yb)
    assert params_checksum(params) == before  # eval mode never writes


def test_extract_features_independent_of_batch_size():
    ds = make_synthetic(SyntheticConfig(classes=2, per_class=6, size=8, seed=5))
    params = init(EncoderSpec.tiny(), PredictorSpec.tiny(), seed=1, dtype=np.float64)
    a, _ = extract_features(params, ds, output_size=8, batch_size=3)
    b, _ = extract_features(params, ds, output_size=8, batch_size=128)
    assert np.array_equal(a, b)


def test_extract_features_resizes_when_needed():
    ds = make_synthetic(SyntheticConfig(classes=2, per_class=3, size=12, seed=5))
    params = init(EncoderSpec.tiny(), PredictorSpec.tiny(), seed=1, dtype=np.float64)
    feats, labels = extract_features(params, ds, output_size=8)
    assert feats.shape == (6, 8)
    assert labels.shape == (6,)
    assert np.all(np.isfinite(feats))


# -- packaged evaluation -----------------------------------------------------


def small_eval_setup():
    cfg = tiny_config()
    train_ds = make_synthetic(SyntheticConfig(classes=2, per_class=6, size=8, seed=5))
    test_ds = make_synthetic(SyntheticConfig(classes=2, per_class=3, size=8, seed=6))
    params = init(cfg.encoder, cfg.predictor, seed=cfg.seed, dtype=cfg.dtype)
    probe = ProbeConfig(k=5, linear_epochs=3)
    return cfg, train_ds, test_ds, params, probe


def test_evaluate_report_invariants():
    cfg, train_ds, test_ds, params, probe = small_eval_setup()
    before = params_checksum(params)
    report = evaluate(params, cfg, train_ds, test_ds, probe)
    assert params_checksum(params) == before

    for value in (report.knn_top1, report.linear_top1):
        assert 0.0 <= value <= 1.0
    assert report.embedding_std >= 0.0
    assert set(report.per_class_accuracy) == {0, 1}

    total = sum(v["count"] for v in report.per_class_accuracy.values())
    assert total == len(test_ds)
    for probe_name, top1 in (("knn", report.knn_top1), ("linear", report.linear_top1)):
        weighted = sum(v["count"] * v[probe_name]
                       for v in report.per_class_accuracy.values()) / total
        assert weighted == pytest.approx(top1, abs=1e-12)

    # the config snapshot is the full, loadable config
    assert config_from_dict(report.config) == cfg


def test_random_baseline_report_runs():
    cfg, train_ds, test_ds, _, probe = small_eval_setup()
    report = random_baseline_report(cfg, train_ds, test_ds, probe)
    assert 0.0 <= report.knn_top1 <= 1.0


def test_report_files(tmp_path):
    cfg, train_ds, test_ds, params, probe = small_eval_setup()
    report = evaluate(params, cfg, train_ds, test_ds, probe)

    jpath = tmp_path / "report.json"
    write_report(report, jpath)
    loaded = json.loads(jpath.read_text())
    assert loaded["knn_top1"] == report.knn_top1
    assert set(loaded["per_class_accuracy"]) == {"0", "1"}
    assert loaded["config"]["lambda"] == cfg.lam

    cpath = tmp_path / "per_class.csv"
    write_per_class_csv(report, cpath)
    lines = cpath.read_text().splitlines()
    assert lines[0] == "class,count,knn,linear"
    assert len(lines) == 3
    cls, count, knn_acc, lin_acc = lines[1].split(",")
    assert int(cls) == 0
    assert float(knn_acc) == report.per_class_accuracy[0]["knn"]


def test_eval_datasets_synthetic_holdout():
    dcfg = DatasetConfig(classes=2, per_class=6, size=8, seed=5)
    train, test = eval_datasets(dcfg)
    assert len(train) == 12
    assert len(test) == 6
    assert test.class_count == train.class_count
    # the held-out draw really is fresh data, not a re-draw of train
    train_pix = {r.pixels.tobytes() for r in train.records}
    assert all(r.pixels.tobytes() not in train_pix for r in test.records)


# -- chance-level and baseline oracles ----------------------------------------


def test_knn_chance_level_on_random_features():
    # With featureless (pure noise) inputs and balanced classes the k-NN
    # probe has no signal to exploit: accuracy must sit at the 1/classes
    # chance line.  10 classes, N >= 1000 keeps the noise band tight.
    rng = np.random.default_rng(7)
    classes, per_class = 10, 120
    n = classes * per_class
    train = rng.normal(size=(n, 16))
    test = rng.normal(size=(n, 16))
    labels = np.repeat(np.arange(classes), per_class)
    acc = knn_probe(train, labels, test, labels, k=20)
    assert abs(acc - 1.0 / classes) < 0.05


def test_linear_probe_on_raw_pixels_is_a_valid_baseline():
    # Flattened pixels are a legitimate feature matrix: the probe makes no
    # assumption about where features come from.  This run is the baseline
    # a learned representation is compared against.
    train, test = eval_datasets(DatasetConfig(classes=3, per_class=10, size=8, seed=5))
    Xtr = np.stack([r.pixels.reshape(-1) for r in train.records])
    Xte = np.stack([r.pixels.reshape(-1) for r in test.records])
    acc, preds = linear_probe(Xtr, train.labels(), Xte, test.labels(),
                              class_count=3, probe=ProbeConfig(linear_epochs=5))
    assert 0.0 <= acc <= 1.0
    assert preds.shape == (len(test),)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_linear_probe_aborts_on_non_finite_loss():
    from mixsiam.errors import TrainingAborted

    X = np.array([[1.0, np.inf], [0.0, 1.0]])
    y = np.array([0, 1])
    with pytest.raises(TrainingAborted, match="non-finite"):
        linear_probe(X, y, X, y, class_count=2,
                     probe=ProbeConfig(linear_epochs=1))
