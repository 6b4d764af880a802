"""Tests for FID/FVD/IS and classification metrics against independent oracles."""

import itertools

import numpy as np
import pytest

from echopath.metrics import (
    COV_EPS,
    FeatureSet,
    MetricError,
    MetricsReport,
    classification_metrics,
    cut_clips,
    frechet_distance,
    fvd16,
    inception_score,
    sqrtm_product,
)


def brute_force_auroc(scores, labels) -> float:
    """Pairwise win rate over all positive-negative pairs; ties count half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p, n in itertools.product(pos, neg):
        if p > n:
            wins += 1.0
        elif p == n:
            wins += 0.5
    return wins / (len(pos) * len(neg))


def random_spd(dim: int, rng) -> np.ndarray:
    a = rng.normal(size=(dim, dim))
    return a @ a.T + 0.1 * np.eye(dim)


class TestFrechetDistance:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(200, 8))
        a = FeatureSet(feats, "ext")
        b = FeatureSet(feats.copy(), "ext")
        assert frechet_distance(a, b) < 1e-6

    def test_1d_gaussian_closed_form(self):
        # means 0 and 3, unit variance: distance (0-3)^2 + (1-1)^2 = 9
        rng = np.random.default_rng(1)
        a = FeatureSet(rng.normal(0.0, 1.0, size=(100_000, 1)), "ext")
        b = FeatureSet(rng.normal(3.0, 1.0, size=(100_000, 1)), "ext")
        assert abs(frechet_distance(a, b) - 9.0) < 0.2

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = FeatureSet(rng.normal(size=(64, 6)), "ext")
        b = FeatureSet(rng.normal(1.0, 2.0, size=(80, 6)), "ext")
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8

    def test_matrix_sqrt_reconstruction(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            dim = int(rng.integers(2, 9))
            ca, cb = random_spd(dim, rng), random_spd(dim, rng)
            root = sqrtm_product(ca, cb)
            prod = ca @ cb
            err = np.linalg.norm(root @ root - prod) / np.linalg.norm(prod)
            assert err < 1e-6

    def test_extractor_mismatch(self):
        a = FeatureSet(np.zeros((4, 2)), "ext_a")
        b = FeatureSet(np.zeros((4, 2)), "ext_b")
        with pytest.raises(MetricError):
            frechet_distance(a, b)

    def test_too_few_samples(self):
        a = FeatureSet(np.zeros((1, 2)), "ext")
        b = FeatureSet(np.zeros((4, 2)), "ext")
        with pytest.raises(MetricError):
            frechet_distance(a, b)

    def test_non_finite_rejected(self):
        with pytest.raises(MetricError):
            FeatureSet(np.array([[np.inf, 0.0]]), "ext")


class TestFvd16:
    @staticmethod
    def mean_extractor(clip: np.ndarray) -> np.ndarray:
        return clip.reshape(clip.shape[0], -1).mean(axis=1)

    def test_identical_sets_zero(self):
        rng = np.random.default_rng(4)
        videos = [rng.random((32, 4, 4)) for _ in range(10)]
        assert fvd16(videos, [v.copy() for v in videos], self.mean_extractor, "m") < 1e-6

    def test_single_clip_collapse(self):
        rng = np.random.default_rng(5)
        real = [rng.random((16, 4, 4)) for _ in range(12)]
        fake = [rng.random((16, 4, 4)) + 0.3 for _ in range(12)]
        via_fvd = fvd16(real, fake, self.mean_extractor, "m")
        fs = lambda vids: FeatureSet(
            np.stack([self.mean_extractor(v) for v in vids]), "m"
        )
        via_fid = frechet_distance(fs(real), fs(fake))
        assert abs(via_fvd - via_fid) < 1e-12

    def test_short_video_rejected(self):
        with pytest.raises(MetricError):
            fvd16([np.zeros((8, 2, 2))], [np.zeros((16, 2, 2))], self.mean_extractor, "m")

    def test_clip_cutting_deterministic(self):
        video = np.arange(40).reshape(40, 1, 1)
        clips = cut_clips(video)
        assert len(clips) == 2
        assert clips[0][0, 0, 0] == 0 and clips[1][0, 0, 0] == 16


class TestInceptionScore:
    def test_uniform_rows_give_one(self):
        p = np.full((100, 4), 0.25)
        mean, std = inception_score(p, splits=5)
        assert abs(mean - 1.0) < 1e-6
        assert std < 1e-12

    def test_one_hot_uniform_gives_k(self):
        rows = np.tile(np.eye(4), (100, 1))
        mean, std = inception_score(rows, splits=1)
        assert abs(mean - 4.0) < 1e-6
        # interleaved rows keep every sequential split balanced
        mean10, std10 = inception_score(rows, splits=10)
        assert abs(mean10 - 4.0) < 1e-6 and std10 < 1e-9

    def test_permutation_invariant_at_one_split(self):
        rng = np.random.default_rng(6)
        p = rng.dirichlet(np.ones(5), size=50)
        m1, _ = inception_score(p, splits=1)
        m2, _ = inception_score(p[rng.permutation(50)], splits=1)
        assert abs(m1 - m2) < 1e-12

    def test_always_at_least_one(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = rng.dirichlet(np.ones(3), size=30)
            mean, _ = inception_score(p, splits=3)
            assert mean >= 1.0 - 1e-12

    def test_invalid_rows(self):
        with pytest.raises(MetricError):
            inception_score(np.array([[0.5, 0.6]]))
        with pytest.raises(MetricError):
            inception_score(np.array([[-0.1, 1.1]]))
        with pytest.raises(MetricError):
            inception_score(np.zeros((0, 2)))


class TestClassificationMetrics:
    def test_perfect_separation(self):
        acc, f1, auroc = classification_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert acc == 1.0 and f1 == 1.0 and auroc == 1.0

    def test_constant_scores_tie_averaged(self):
        acc, f1, auroc = classification_metrics([0.7] * 6, [1, 0, 1, 0, 1, 0])
        assert auroc == 0.5

    def test_worked_example(self):
        # pairs: (0.9,0.8) win, (0.9,0.1) win, (0.3,0.8) loss, (0.3,0.1) win -> 0.75
        _, _, auroc = classification_metrics([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
        assert abs(auroc - 0.75) < 1e-12

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(200):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            # quantized scores force plenty of ties
            scores = np.round(rng.random(n) * 4) / 4
            _, _, auroc = classification_metrics(scores, labels)
            assert abs(auroc - brute_force_auroc(scores, labels)) < 1e-12

    def test_single_class_raises(self):
        with pytest.raises(MetricError):
            classification_metrics([0.1, 0.9], [1, 1])

    def test_accuracy_threshold(self):
        acc, _, _ = classification_metrics([0.6, 0.4, 0.5], [1, 0, 1])
        # 0.5 threshold is inclusive for the positive side
        assert acc == 1.0


class TestMetricsReport:
    def test_json_round_trip(self, tmp_path):
        rep = MetricsReport(fid=1.5, is_mean=2.0, warning="desk extractors", metadata={"w": 5})
        rep.save(tmp_path / "report.json")
        loaded = MetricsReport.load(tmp_path / "report.json")
        assert loaded.fid == 1.5 and loaded.metadata == {"w": 5}
        assert "desk" in loaded.warning
