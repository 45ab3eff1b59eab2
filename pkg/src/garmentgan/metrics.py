"""Generation metrics over classifier features: IS, FID, precision/recall.

The feature extractor is the in-repo evaluation classifier trunk (256-d), so
absolute values are comparable only within this repo; see README.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist
from scipy.special import xlogy


class MetricError(ValueError):
    pass


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.n < 2:
            raise MetricError("feature statistics need n >= 2 samples")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricError("covariance shape does not match the mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise MetricError("covariance must be symmetric")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.cov).all()):
            raise MetricError("non-finite feature statistics")

    @classmethod
    def from_features(cls, features) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise MetricError("need a (n >= 2) x d feature matrix")
        cov = np.cov(features, rowvar=False)
        cov = np.atleast_2d((cov + cov.T) / 2.0)
        return cls(mean=features.mean(axis=0), cov=cov, n=features.shape[0])


def extract_features(images, extractor, batch_size: int = 64) -> np.ndarray:
    """Row-per-image penultimate activations of ``extractor``."""
    feature_fn = extractor.features if hasattr(extractor, "features") else extractor
    chunks = []
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(feature_fn(images[start:start + batch_size]).cpu().numpy())
    return np.concatenate(chunks, axis=0)


def inception_score(class_probs) -> float:
    """exp of the mean KL between per-sample posteriors and their marginal."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise MetricError("class_probs must be a n x K matrix")
    if (p < -1e-9).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise MetricError("class probability rows must be normalized")
    p = np.clip(p, 0.0, None)
    marginal = p.mean(axis=0)
    kl = (xlogy(p, p) - xlogy(p, marginal[None, :])).sum(axis=1)
    return float(np.exp(kl.mean()))


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    tol = 1e-6 * max(1.0, float(np.abs(values).max(initial=0.0)))
    if (values < -tol).any():
        raise MetricError(
            f"matrix square root failed: eigenvalue {values.min():.3e} below -{tol:.1e}")
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    if stats_a.mean.size != stats_b.mean.size:
        raise MetricError("feature dimensions differ")
    diff = float(((stats_a.mean - stats_b.mean) ** 2).sum())
    root_a = _sqrt_psd(stats_a.cov)
    inner = _sqrt_psd(root_a @ stats_b.cov @ root_a)
    value = diff + float(np.trace(stats_a.cov) + np.trace(stats_b.cov)
                         - 2.0 * np.trace(inner))
    if not np.isfinite(value):
        raise MetricError("non-finite FID")
    return value


def _knn_radii(features: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    n = features.shape[0]
    radii = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        block = cdist(features[start:start + chunk], features)
        block.sort(axis=1)
        radii[start:start + chunk] = block[:, k]  # col 0 is the self-distance
    return radii


def _fraction_covered(points: np.ndarray, centers: np.ndarray,
                      radii: np.ndarray, chunk: int = 512) -> float:
    covered = 0
    for start in range(0, points.shape[0], chunk):
        dist = cdist(points[start:start + chunk], centers)
        covered += int((dist <= radii[None, :]).any(axis=1).sum())
    return covered / points.shape[0]


def precision_recall(feats_real, feats_fake, k: int = 3):
    """k-NN manifold estimator: balls of radius = k-th neighbor distance."""
    real = np.asarray(feats_real, dtype=np.float64)
    fake = np.asarray(feats_fake, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise MetricError("feature matrices must be 2-d with equal width")
    if not 1 <= k < min(real.shape[0], fake.shape[0]):
        raise MetricError(f"k={k} outside 1..min(n_real, n_fake)-1")
    radii_real = _knn_radii(real, k)
    radii_fake = _knn_radii(fake, k)
    precision = _fraction_covered(fake, real, radii_real)
    recall = _fraction_covered(real, fake, radii_fake)
    return precision, recall


@dataclass
class MetricsReport:
    is_mean: float
    fid: float
    precision: float
    recall: float
    n_real: int
    n_fake: int
    extractor_id: str = "eval-classifier-trunk"

    def __post_init__(self):
        if not (0.0 <= self.precision <= 1.0 and 0.0 <= self.recall <= 1.0):
            raise MetricError("precision/recall outside [0, 1]")
        if self.fid < -1e-6:
            raise MetricError(f"fid {self.fid} below the numerical floor")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def compute_metrics_report(real_images, fake_images, classifier,
                           k: int = 3, batch_size: int = 64) -> MetricsReport:
    """Full report for a (real, generated) image-set pair."""
    feats_real = extract_features(real_images, classifier, batch_size)
    feats_fake = extract_features(fake_images, classifier, batch_size)
    fit_p, shape_p = classifier.predict_probs(fake_images, batch_size=batch_size)
    joint = (fit_p[:, :, None] * shape_p[:, None, :]).reshape(fit_p.shape[0], -1)
    precision, recall = precision_recall(feats_real, feats_fake, k=k)
    return MetricsReport(
        is_mean=inception_score(joint),
        fid=fid(FeatureStats.from_features(feats_real),
                FeatureStats.from_features(feats_fake)),
        precision=precision,
        recall=recall,
        n_real=feats_real.shape[0],
        n_fake=feats_fake.shape[0],
    )
