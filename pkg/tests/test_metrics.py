import csv

import numpy as np
import pytest

from ggb.data import NUM_PALETTE_CLASSES, SyntheticDataset
from ggb.metrics import (SSIM_HEADER, SsimParams, TooFewImagesError, evaluate, inception_score_from_probs,
                         proxy_inception_score, ssim, to_unit_range, train_proxy_classifier)
from ggb.oracles import gaussian_window, reference_ssim


def test_kernel_matches_loop_window():
    np.testing.assert_allclose(SsimParams().kernel(), gaussian_window(11, 1.5), atol=1e-15)


def test_ssim_matches_reference():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        a, b = rng.uniform(0, 1, size=(2, 3, 16, 16))
        worst = max(worst, abs(ssim(a, b) - reference_ssim(a, b)))
    assert worst < 1e-7


def test_ssim_correlated_pair_matches_reference():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, size=(3, 20, 24))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-7
    assert ssim(a, b) > 0.5


def test_ssim_self_and_symmetry():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, size=(2, 3, 16, 16))
    assert abs(ssim(a, a) - 1.0) < 1e-9
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


@pytest.mark.parametrize("ca,cb", [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5)])
def test_ssim_constant_images(ca, cb):
    c1 = 0.01**2
    a, b = np.full((3, 12, 12), ca), np.full((3, 12, 12), cb)
    assert abs(ssim(a, b) - (2 * ca * cb + c1) / (ca**2 + cb**2 + c1)) < 1e-9


def test_ssim_rejects_bad_input():
    with pytest.raises(ValueError, match="differ"):
        ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 15)))
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_unit_range():
    np.testing.assert_array_equal(to_unit_range(np.array([-1.0, 0.0, 1.0])), [0.0, 0.5, 1.0])


def test_is_uniform_is_one():
    assert inception_score_from_probs(np.full((20, 5), 0.2))[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("k", [2, 5, 8])
def test_is_balanced_one_hot_is_k(k):
    probs = np.eye(k)[np.arange(10 * k) % k]
    assert inception_score_from_probs(probs)[0] == pytest.approx(k, rel=1e-12)


def test_is_permutation_invariant(rng):
    probs = rng.dirichlet(np.ones(6), size=40)
    base = inception_score_from_probs(probs)[0]
    assert inception_score_from_probs(probs[rng.permutation(40)])[0] == pytest.approx(base, rel=1e-12)
    assert inception_score_from_probs(probs[:, rng.permutation(6)])[0] == pytest.approx(base, rel=1e-12)


def test_is_splits_and_minimum():
    probs = np.eye(4)[np.arange(48) % 4]
    mean, std = inception_score_from_probs(probs, splits=4)
    assert mean == pytest.approx(4.0) and std == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(TooFewImagesError):
        inception_score_from_probs(probs[:9])
    with pytest.raises(TooFewImagesError):
        inception_score_from_probs(probs, splits=5)  # 48 < 50


@pytest.fixture(scope="module")
def clf():
    return train_proxy_classifier(SyntheticDataset(64, 32, seed=5), steps=30, seed=1)


def test_classifier_probabilities(clf):
    imgs = SyntheticDataset(12, 32, seed=9, split="test").batch(range(12)).y
    p = clf.predict_proba(imgs)
    assert p.shape == (12, NUM_PALETTE_CLASSES)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(TooFewImagesError):
        proxy_inception_score(imgs[:5], clf)


def test_classifier_save_load(clf, tmp_path):
    from ggb.metrics import ProxyClassifier

    clf.save(tmp_path / "c.npz")
    back = ProxyClassifier.load(tmp_path / "c.npz")
    imgs = SyntheticDataset(4, 32, seed=9).batch(range(4)).x
    np.testing.assert_array_equal(back.predict_proba(imgs), clf.predict_proba(imgs))


def test_copy_target_scores_one(tmp_path, clf):
    test_set = SyntheticDataset(20, 32, seed=3, split="test")
    rep = evaluate(lambda b: b.y, test_set, clf, out_dir=tmp_path, batch_size=7)
    assert rep.mean_ssim == pytest.approx(1.0, abs=1e-9)
    assert rep.num_samples == 20 and np.isfinite(rep.proxy_is)
    with open(tmp_path / "ssim_per_sample.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["sample_id"]) for r in rows] == list(range(20))
    text = (tmp_path / "report.txt").read_text()
    assert "proxy-IS" in text and SSIM_HEADER in text


def test_csv_mean_equals_report(tmp_path):
    test_set = SyntheticDataset(15, 32, seed=3, split="test")
    rep = evaluate(lambda b: b.x, test_set, out_dir=tmp_path)
    with open(tmp_path / "ssim_per_sample.csv") as fh:
        vals = [float(r["ssim"]) for r in csv.DictReader(fh)]
    assert abs(np.mean(vals) - rep.mean_ssim) < 1e-9
    assert np.isnan(rep.proxy_is)


def test_evaluation_repeatable(clf):
    test_set = SyntheticDataset(10, 32, seed=4, split="test")
    a = evaluate(lambda b: b.x, test_set, clf)
    b = evaluate(lambda b: b.x, test_set, clf)
    assert a.per_sample == b.per_sample and a.proxy_is == b.proxy_is


def test_empty_test_set():
    with pytest.raises(ValueError, match="empty"):
        evaluate(lambda b: b.y, SyntheticDataset(0, 32, seed=0))
