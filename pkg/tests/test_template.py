import numpy as np
import pytest

from scaforge import template
from scaforge.simulate import SimConfig, simulate
from scaforge.template import (TemplateClassifier, fit_templates,
                               normalize_log_rows, predict_log_proba)


def test_two_class_means_recovered():
    rng = np.random.default_rng(0)
    samples = np.concatenate([rng.normal(0.0, 1e-6, size=(50, 1)),
                              rng.normal(10.0, 1e-6, size=(50, 1))])
    labels = np.array([0] * 50 + [1] * 50, dtype=np.uint8)
    model = fit_templates(samples, labels)
    assert model.class_means[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert model.class_means[1, 0] == pytest.approx(10.0, abs=1e-6)
    assert model.seen_mask[0] and model.seen_mask[1]


def test_unseen_classes_get_global_mean():
    samples = np.array([[4.0], [6.0]])
    labels = np.array([7, 7], dtype=np.uint8)
    model = fit_templates(samples, labels)
    assert model.seen_mask.sum() == 1
    unseen = np.delete(np.arange(256), 7)
    assert np.all(model.class_means[unseen, 0] == 5.0)
    assert model.class_means[7, 0] == 5.0  # class mean happens to equal global


def test_pooled_variance_hand_fixture():
    # class 0: {1,2,3} mean 2, squared residuals 1+0+1 = 2
    # class 1: {10,12,14} mean 12, squared residuals 4+0+4 = 8
    # pooled over all 6 points: (2+8)/6 = 5/3
    samples = np.array([[1.0], [2.0], [3.0], [10.0], [12.0], [14.0]])
    labels = np.array([0, 0, 0, 1, 1, 1], dtype=np.uint8)
    model = fit_templates(samples, labels)
    assert model.pooled_var[0] == pytest.approx(5.0 / 3.0, rel=1e-12)


def test_priors_smoothed_and_normalized():
    samples = np.array([[0.0], [0.0], [1.0]])
    labels = np.array([3, 3, 5], dtype=np.uint8)
    model = fit_templates(samples, labels)
    priors = np.exp(model.class_log_prior)
    assert priors.sum() == pytest.approx(1.0, abs=1e-12)
    assert priors[3] == pytest.approx(3.0 / 259.0)
    assert priors[0] == pytest.approx(1.0 / 259.0)  # unseen, nonzero


def test_fit_requires_two_traces():
    with pytest.raises(ValueError):
        fit_templates(np.zeros((1, 3)), np.zeros(1, dtype=np.uint8))


def test_well_separated_classes_classified():
    rng = np.random.default_rng(1)
    train = np.concatenate([rng.normal(0.0, 1.0, size=(100, 1)),
                            rng.normal(10.0, 1.0, size=(100, 1))])
    train_labels = np.array([0] * 100 + [1] * 100, dtype=np.uint8)
    model = fit_templates(train, train_labels)
    test = np.concatenate([rng.normal(0.0, 1.0, size=(200, 1)),
                           rng.normal(10.0, 1.0, size=(200, 1))])
    test_labels = np.array([0] * 200 + [1] * 200)
    pred = predict_log_proba(model, test).argmax(axis=1)
    assert np.mean(pred == test_labels) >= 0.99


def test_identical_means_uniform_priors_give_uniform_rows():
    samples = np.full((256, 1), 5.0)
    labels = np.arange(256, dtype=np.uint8)
    model = fit_templates(samples, labels)
    rows = predict_log_proba(model, np.array([[5.0], [5.0]]))
    assert np.allclose(rows, np.log(1.0 / 256.0), atol=1e-12)


def test_rows_are_normalized():
    rng = np.random.default_rng(2)
    samples = rng.normal(size=(300, 6))
    labels = rng.integers(0, 256, size=300).astype(np.uint8)
    model = fit_templates(samples, labels)
    rows = predict_log_proba(model, rng.normal(size=(40, 6)))
    lse = np.log(np.exp(rows).sum(axis=1))
    assert np.all(np.abs(lse) < 1e-9)


def test_scale_invariance():
    rng = np.random.default_rng(3)
    samples = rng.normal(size=(400, 5))
    labels = rng.integers(0, 256, size=400).astype(np.uint8)
    model = fit_templates(samples, labels)
    probes = rng.normal(size=(20, 5))
    base = predict_log_proba(model, probes)

    c = 3.7
    scaled = template.TemplateModel(class_means=model.class_means * c,
                                    pooled_var=model.pooled_var * c * c,
                                    class_log_prior=model.class_log_prior,
                                    seen_mask=model.seen_mask)
    assert np.allclose(predict_log_proba(scaled, probes * c), base, atol=1e-9)


def test_zero_noise_value_leakage_is_perfectly_classified():
    cfg = SimConfig(trace_len=10, leak_points=[2, 7], leak_model="value",
                    amplitude=1.0, noise_sigma=0.0, key_mode="fixed",
                    key=bytes(range(16)), byte_index=2, seed=21)
    tset = simulate(cfg, 2000)
    cols = tset.samples[:, [2, 7]]
    model = fit_templates(cols, tset.labels)
    pred = predict_log_proba(model, cols).argmax(axis=1)
    assert np.mean(pred == tset.labels) == 1.0


def test_predict_dimension_mismatch():
    model = fit_templates(np.zeros((4, 3)), np.zeros(4, dtype=np.uint8))
    with pytest.raises(ValueError):
        predict_log_proba(model, np.zeros((2, 5)))


def test_predict_deterministic_after_fit():
    rng = np.random.default_rng(4)
    samples = rng.normal(size=(100, 4))
    labels = rng.integers(0, 256, size=100).astype(np.uint8)
    clf = TemplateClassifier().fit(samples, labels)
    probes = rng.normal(size=(10, 4))
    assert np.array_equal(clf.predict_log_proba(probes), clf.predict_log_proba(probes))


def test_normalize_log_rows_handles_extremes():
    rows = normalize_log_rows(np.array([[1000.0, -1000.0], [0.0, 0.0]]))
    assert rows[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert rows[1, 0] == pytest.approx(np.log(0.5))
