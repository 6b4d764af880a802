"""Generative-quality and classification metrics.

Distribution distances are computed over features from pluggable extractors;
at desk scale the extractors come from the toy-trained classifier, so absolute
values are NOT comparable to results obtained with standard pretrained
backbones. Reports carry an explicit warning field whenever such extractors
are used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "FeatureSet",
    "MetricsReport",
    "frechet_distance",
    "fvd16",
    "cut_clips",
    "inception_score",
    "classification_metrics",
]

FVD_CLIP_LEN = 16
COV_EPS = 1e-6


class MetricError(ValueError):
    """Raised for ill-posed metric inputs (mismatched extractors, bad rows)."""


@dataclass(frozen=True)
class FeatureSet:
    """N x D matrix of extracted features plus the extractor's identity."""

    features: np.ndarray
    extractor_id: str
    clip_len: Optional[int] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        if feats.ndim != 2:
            raise MetricError("features must be an (N, D) matrix")
        if not np.all(np.isfinite(feats)):
            raise MetricError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]


def _mean_cov(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    return mu, cov


def sqrtm_product(cov_a: np.ndarray, cov_b: np.ndarray) -> np.ndarray:
    """Matrix square root of cov_a @ cov_b, real part of the Schur-based root."""
    prod = cov_a @ cov_b
    root, _ = scipy.linalg.sqrtm(prod, disp=False)
    if np.iscomplexobj(root):
        root = root.real
    return root


def frechet_distance(real: FeatureSet, fake: FeatureSet) -> float:
    """Frechet distance ||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2)).

    Both feature sets must come from the same extractor and have at least two
    rows. Covariances get a COV_EPS ridge before the matrix square root to
    stabilize near-singular cases.
    """
    if real.extractor_id != fake.extractor_id:
        raise MetricError(
            f"extractor mismatch: {real.extractor_id!r} vs {fake.extractor_id!r}"
        )
    if real.features.shape[1] != fake.features.shape[1]:
        raise MetricError("feature dimensionality mismatch")
    if real.n < 2 or fake.n < 2:
        raise MetricError("need at least 2 samples per set for covariances")
    mu_r, cov_r = _mean_cov(real.features)
    mu_f, cov_f = _mean_cov(fake.features)
    eye = np.eye(cov_r.shape[0])
    cov_r = cov_r + COV_EPS * eye
    cov_f = cov_f + COV_EPS * eye
    covmean = sqrtm_product(cov_r, cov_f)
    diff = mu_r - mu_f
    fd = float(diff @ diff + np.trace(cov_r) + np.trace(cov_f) - 2.0 * np.trace(covmean))
    return max(fd, 0.0)


def cut_clips(video: np.ndarray, clip_len: int = FVD_CLIP_LEN) -> list[np.ndarray]:
    """Deterministic non-overlapping clips starting at frame 0."""
    n = video.shape[0]
    if n < clip_len:
        raise MetricError(f"video of {n} frames is shorter than a {clip_len}-frame clip")
    return [video[i : i + clip_len] for i in range(0, n - clip_len + 1, clip_len)]


def fvd16(
    real_videos: Sequence[np.ndarray],
    fake_videos: Sequence[np.ndarray],
    extractor: Callable[[np.ndarray], np.ndarray],
    extractor_id: str,
) -> float:
    """Frechet distance over features of deterministic 16-frame clips."""

    def featurize(videos) -> FeatureSet:
        rows = []
        for v in videos:
            for clip in cut_clips(np.asarray(v)):
                rows.append(np.asarray(extractor(clip), dtype=np.float64).reshape(-1))
        return FeatureSet(np.stack(rows), extractor_id, clip_len=FVD_CLIP_LEN)

    return frechet_distance(featurize(real_videos), featurize(fake_videos))


def inception_score(probs: np.ndarray, splits: int = 1) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std) over splits.

    Rows must be nonnegative and sum to 1 within 1e-6. Splits partition rows
    sequentially in the given order; with the default ``splits=1`` the score is
    invariant to row permutations.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise MetricError("probs must be a nonempty (N, K) matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise MetricError("rows must be nonnegative and sum to 1 within 1e-6")
    if not 1 <= splits <= p.shape[0]:
        raise MetricError("splits must lie in [1, N]")
    scores = []
    bounds = np.linspace(0, p.shape[0], splits + 1).astype(int)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        part = p[lo:hi]
        marginal = part.mean(axis=0)
        ratio = np.divide(part, marginal[None, :], out=np.ones_like(part), where=part > 0)
        kl = np.where(part > 0, part * np.log(ratio), 0.0).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def _rank_with_ties(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def classification_metrics(
    scores: Sequence[float], labels: Sequence[int]
) -> tuple[float, float, float]:
    """(accuracy at 0.5, F1 of the positive class, rank-based AUROC).

    AUROC is the Mann-Whitney statistic with ties averaged; it is undefined
    (and raises) when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1 or len(s) == 0:
        raise MetricError("scores and labels must be equal-length 1-D sequences")
    if not set(np.unique(y)) <= {0, 1}:
        raise MetricError("labels must be binary 0/1")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: both classes must be present")

    pred = (s >= 0.5).astype(np.int64)
    acc = float((pred == y).mean())
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    f1 = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0

    ranks = _rank_with_ties(s)
    auroc = float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    return acc, f1, auroc


@dataclass
class MetricsReport:
    """Structured record of one experiment's generative and downstream metrics."""

    fid: float = float("nan")
    fvd16: float = float("nan")
    is_mean: float = float("nan")
    is_std: float = float("nan")
    acc: float = float("nan")
    f1: float = float("nan")
    auroc: float = float("nan")
    extractor_id: str = ""
    warning: str = ""
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @staticmethod
    def load(path: Path | str) -> "MetricsReport":
        return MetricsReport(**json.loads(Path(path).read_text()))

    def rows_defined(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if not (isinstance(v, float) and np.isnan(v))}


DESK_EXTRACTOR_WARNING = (
    "features come from the toy-trained classifier, not a standard pretrained "
    "backbone; absolute FID/FVD/IS values are not comparable across harnesses"
)
