import math

import numpy as np
import pytest

from oracles import auroc_pairwise_oracle

from mirage.backends import MockClassifier, MockPerceptualDistance
from mirage.errors import UndefinedMetricError, ValidationError
from mirage.metrics import (ClassDistribution, LabeledScores, auroc, ic_lpips,
                            image_auroc, inception_score, pixel_auroc)


class TestAuroc:
    def test_perfect_separation(self):
        data = LabeledScores(scores=[0.1, 0.2, 0.8, 0.9], labels=[0, 0, 1, 1])
        assert auroc(data) == 1.0

    def test_spec_example(self):
        data = LabeledScores(scores=[0.1, 0.4, 0.35, 0.8], labels=[0, 0, 1, 1])
        assert auroc(data) == pytest.approx(0.75, abs=1e-12)

    def test_pure_ties(self):
        data = LabeledScores(scores=[0.5] * 6, labels=[0, 1, 0, 1, 0, 1])
        assert auroc(data) == pytest.approx(0.5, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auroc(LabeledScores(scores=[0.1, 0.2], labels=[1, 1]))

    def test_matches_pairwise_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(4, 60))
            scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            got = auroc(LabeledScores(scores=scores, labels=labels))
            want = auroc_pairwise_oracle(scores.tolist(), labels.tolist())
            assert got == pytest.approx(want, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.random(40)
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        base = auroc(LabeledScores(scores=scores, labels=labels))
        for transform in (lambda s: 3 * s + 2, np.exp, lambda s: s ** 3):
            assert auroc(LabeledScores(scores=transform(scores), labels=labels)) \
                == pytest.approx(base, abs=1e-12)

    def test_complement_under_negation(self):
        rng = np.random.default_rng(2)
        scores = rng.random(30)  # continuous, no ties
        labels = rng.integers(0, 2, size=30)
        labels[0], labels[1] = 0, 1
        a = auroc(LabeledScores(scores=scores, labels=labels))
        b = auroc(LabeledScores(scores=-scores, labels=labels))
        assert a + b == pytest.approx(1.0, abs=1e-12)


class TestPixelAuroc:
    def test_maps_equal_masks(self):
        rng = np.random.default_rng(0)
        masks = [(rng.random((4, 4)) < 0.5).astype(float) for _ in range(3)]
        assert pixel_auroc(masks, [m.astype(np.uint8) for m in masks]) == 1.0

    def test_inverted_maps(self):
        rng = np.random.default_rng(1)
        masks = [(rng.random((4, 4)) < 0.5).astype(float) for _ in range(3)]
        assert pixel_auroc([1 - m for m in masks],
                           [m.astype(np.uint8) for m in masks]) == 0.0

    def test_small_fixture_matches_flatten_oracle(self):
        maps = [np.array([[0.1, 0.9], [0.4, 0.3]]),
                np.array([[0.8, 0.2], [0.6, 0.5]])]
        gts = [np.array([[0, 1], [0, 0]], dtype=np.uint8),
               np.array([[1, 0], [1, 1]], dtype=np.uint8)]
        scores = np.concatenate([m.ravel() for m in maps])
        labels = np.concatenate([g.ravel() for g in gts])
        want = auroc_pairwise_oracle(scores.tolist(), labels.tolist())
        assert pixel_auroc(maps, gts) == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            pixel_auroc([np.ones((2, 2))], [np.zeros((3, 3), dtype=np.uint8)])


class TestImageAuroc:
    def test_higher_peaks_win(self):
        anomalous = [np.full((4, 4), 0.2) + np.eye(4) * 0.7 for _ in range(2)]
        normal = [np.full((4, 4), 0.3) for _ in range(2)]
        assert image_auroc(anomalous + normal, [1, 1, 0, 0]) == 1.0

    def test_identical_maps_give_half(self):
        maps = [np.full((4, 4), 0.4) for _ in range(4)]
        assert image_auroc(maps, [1, 0, 1, 0]) == 0.5

    def test_four_image_fixture_matches_max_oracle(self):
        rng = np.random.default_rng(3)
        maps = [rng.random((3, 3)) for _ in range(4)]
        labels = [0, 1, 0, 1]
        want = auroc_pairwise_oracle([m.max() for m in maps], labels)
        assert image_auroc(maps, labels) == pytest.approx(want, abs=1e-12)


class TestInceptionScore:
    def test_identical_distributions_give_one(self):
        d = ClassDistribution([0.2, 0.3, 0.5])
        assert inception_score([d] * 7) == pytest.approx(1.0, abs=1e-9)

    def test_two_one_hots_two_classes(self):
        dists = [ClassDistribution([1.0, 0.0]), ClassDistribution([0.0, 1.0])]
        assert inception_score(dists) == pytest.approx(2.0, abs=1e-9)

    def test_k_uniform_one_hots_give_k(self):
        for k in (2, 3, 5):
            dists = [ClassDistribution(np.eye(k)[i]) for i in range(k)]
            assert inception_score(dists) == pytest.approx(k, abs=1e-6)

    def test_always_at_least_one(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            probs = rng.random((6, 5))
            probs /= probs.sum(axis=1, keepdims=True)
            dists = [ClassDistribution(p) for p in probs]
            assert inception_score(dists) >= 1.0 - 1e-12

    def test_distribution_validation(self):
        with pytest.raises(ValidationError):
            ClassDistribution([0.5, 0.6])
        with pytest.raises(ValidationError):
            ClassDistribution([1.1, -0.1])
        with pytest.raises(ValidationError):
            inception_score([])


class _FixedDistance:
    def __init__(self, table):
        self.table = table

    def distance(self, a, b):
        return self.table[(int(a[0, 0, 0] * 10), int(b[0, 0, 0] * 10))]


class TestIcLpips:
    def _img(self, key):
        return np.full((2, 2, 3), key / 10.0)

    def test_identical_cluster_zero(self):
        img = self._img(3)
        assert ic_lpips([[img, img.copy(), img.copy()]],
                        MockPerceptualDistance()) == 0.0

    def test_fixed_distances_mean(self):
        table = {(1, 2): 0.2, (1, 3): 0.4, (2, 3): 0.6}
        cluster = [self._img(1), self._img(2), self._img(3)]
        assert ic_lpips([cluster], _FixedDistance(table)) == pytest.approx(0.4, abs=1e-9)

    def test_order_invariance_within_cluster(self):
        rng = np.random.default_rng(5)
        cluster = [rng.random((4, 4, 3)) for _ in range(4)]
        d = MockPerceptualDistance()
        a = ic_lpips([cluster], d)
        b = ic_lpips([list(reversed(cluster))], d)
        assert a == pytest.approx(b, abs=1e-12)

    def test_singleton_cluster_rejected(self):
        with pytest.raises(ValidationError):
            ic_lpips([[self._img(1)]], MockPerceptualDistance())

    def test_mean_over_clusters(self):
        d = MockPerceptualDistance()
        c1 = [np.zeros((2, 2, 3)), np.ones((2, 2, 3))]  # distance 1.0
        c2 = [np.zeros((2, 2, 3)), np.zeros((2, 2, 3))]  # distance 0.0
        assert ic_lpips([c1, c2], d) == pytest.approx(0.5, abs=1e-12)


class TestMockBackends:
    def test_classifier_is_deterministic_distribution(self):
        clf = MockClassifier(num_classes=7, seed=0)
        img = np.random.default_rng(0).random((32, 32, 3))
        p1 = clf.class_distribution(img)
        p2 = clf.class_distribution(img)
        assert np.array_equal(p1, p2)
        assert p1.shape == (7,)
        assert p1.sum() == pytest.approx(1.0, abs=1e-9)
        assert (p1 >= 0).all()

    def test_classifier_varies_across_images(self):
        clf = MockClassifier(num_classes=5, seed=0)
        rng = np.random.default_rng(1)
        a = clf.class_distribution(rng.random((16, 16, 3)))
        b = clf.class_distribution(rng.random((16, 16, 3)))
        assert not np.allclose(a, b)

    def test_perceptual_distance_properties(self):
        d = MockPerceptualDistance()
        rng = np.random.default_rng(2)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        assert d.distance(a, a) == 0.0
        assert d.distance(a, b) == pytest.approx(d.distance(b, a), abs=1e-15)
        assert d.distance(a, b) > 0
