"""Auxiliary fit/shape classifier: conditional-accuracy judge and feature trunk.

A small from-scratch residual CNN replaces a pretrained backbone; the desk
dataset is cleanly separable so no transfer initialization is needed. The
256-d trunk features double as the perceptual/metric feature space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io as gio
from .synthdata import (FIT_LEVELS, SHAPE_CLASSES, ArrayDataset,
                        UnmeasurableImageError, oracle_fit, oracle_shape)

logger = logging.getLogger(__name__)

CLASSIFIER_KIND = "eval-classifier"


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = (nn.Conv2d(in_ch, out_ch, 1, stride=stride)
                     if (in_ch != out_ch or stride != 1) else nn.Identity())

    def forward(self, x):
        y = F.relu(self.conv1(x))
        return F.relu(self.conv2(y) + self.skip(x))


@dataclass
class EvalNetConfig:
    resolution: int = 64
    channels: tuple = (32, 64, 128, 256)
    feature_dim: int = 256
    fit_classes: int = FIT_LEVELS
    shape_classes: int = SHAPE_CLASSES
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.1
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")


class EvalClassifier(nn.Module):
    """Residual trunk with one softmax head per attribute."""

    def __init__(self, cfg: EvalNetConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(3, cfg.channels[0], 3, padding=1)
        blocks = []
        for i in range(1, len(cfg.channels)):
            blocks.append(ResBlock(cfg.channels[i - 1], cfg.channels[i], stride=2))
        self.blocks = nn.Sequential(*blocks)
        self.to_features = nn.Linear(cfg.channels[-1], cfg.feature_dim)
        self.fit_head = nn.Linear(cfg.feature_dim, cfg.fit_classes)
        self.shape_head = nn.Linear(cfg.feature_dim, cfg.shape_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.resolution:
            raise ValueError(f"expected {self.cfg.resolution}px input, got {x.shape[-1]}")
        y = F.relu(self.stem(x))
        y = self.blocks(y)
        y = y.mean(dim=(2, 3))
        return F.relu(self.to_features(y))

    def forward(self, x):
        feats = self.features(x)
        return self.fit_head(feats), self.shape_head(feats)

    def predict_probs(self, images, batch_size: int = 64):
        """Normalized (fit, shape) probability rows as numpy arrays."""
        images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        fit_chunks, shape_chunks = [], []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                fit_logits, shape_logits = self(images[start:start + batch_size])
                fit_chunks.append(F.softmax(fit_logits, dim=1).cpu().numpy())
                shape_chunks.append(F.softmax(shape_logits, dim=1).cpu().numpy())
        return np.concatenate(fit_chunks), np.concatenate(shape_chunks)


def classify(classifier: EvalClassifier, images):
    return classifier.predict_probs(images)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth / target, cols: prediction

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be >= 0")

    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def _accuracy(logit_head, feats, labels) -> float:
    return float((logit_head(feats).argmax(dim=1) == labels).float().mean())


def train_eval_classifier(train_set: ArrayDataset, cfg: EvalNetConfig = None):
    """Joint two-head cross-entropy training; returns (classifier, report)."""
    cfg = cfg or EvalNetConfig(resolution=train_set.images.shape[-1])
    degenerate = []
    for name, labels, count in (("fit", train_set.fit, cfg.fit_classes),
                                ("shape", train_set.shape_class, cfg.shape_classes)):
        present = np.unique(labels)
        if present.size < count:
            logger.warning("%s classes missing from training data: %s", name,
                           sorted(set(range(count)) - set(present.tolist())))
            degenerate.append(name)

    torch.manual_seed(cfg.seed)
    model = EvalClassifier(cfg).to(cfg.device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    n = len(train_set)
    order_rng = torch.Generator().manual_seed(cfg.seed + 1)
    n_holdout = max(1, int(round(n * cfg.holdout_fraction)))
    perm = torch.randperm(n, generator=order_rng)
    holdout_idx, train_idx = perm[:n_holdout], perm[n_holdout:]

    images = torch.as_tensor(train_set.images, dtype=torch.float32)
    fit_labels = torch.as_tensor(train_set.fit)
    shape_labels = torch.as_tensor(train_set.shape_class)

    model.train()
    for epoch in range(cfg.epochs):
        perm = train_idx[torch.randperm(train_idx.numel(), generator=order_rng)]
        for start in range(0, perm.numel(), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if idx.numel() < 2:
                continue
            opt.zero_grad(set_to_none=True)
            fit_logits, shape_logits = model(images[idx])
            loss = F.cross_entropy(fit_logits, fit_labels[idx]) \
                + F.cross_entropy(shape_logits, shape_labels[idx])
            loss.backward()
            opt.step()
        logger.info("eval-classifier epoch %d loss %.4f", epoch, float(loss.detach()))

    model.eval()
    with torch.no_grad():
        feats = torch.cat([model.features(images[holdout_idx][i:i + cfg.batch_size])
                           for i in range(0, holdout_idx.numel(), cfg.batch_size)])
        report = {
            "holdout_fit_accuracy": _accuracy(model.fit_head, feats,
                                              fit_labels[holdout_idx]),
            "holdout_shape_accuracy": _accuracy(model.shape_head, feats,
                                                shape_labels[holdout_idx]),
            "degenerate_heads": degenerate,
            "n_train": int(train_idx.numel()),
            "n_holdout": int(holdout_idx.numel()),
        }
    return model, report


def save_classifier(path: str, model: EvalClassifier, report: dict = None):
    from dataclasses import asdict
    gio.save_container(path, {
        "config": asdict(model.cfg),
        "state": model.state_dict(),
        "report": report or {},
    }, kind=CLASSIFIER_KIND)


def load_classifier(path: str) -> EvalClassifier:
    payload = gio.load_container(path, expected_kind=CLASSIFIER_KIND)
    cfg_data = dict(payload["config"])
    cfg_data["channels"] = tuple(cfg_data["channels"])
    model = EvalClassifier(EvalNetConfig(**cfg_data))
    model.load_state_dict(payload["state"])
    model.eval()
    return model


class OracleClassifier:
    """Geometry-oracle adapter with the classifier prediction protocol."""

    def __init__(self, fit_classes: int = FIT_LEVELS,
                 shape_classes: int = SHAPE_CLASSES):
        self.fit_classes = fit_classes
        self.shape_classes = shape_classes

    def predict_probs(self, images, batch_size: int = None):
        images = np.asarray(torch.as_tensor(images).detach().cpu().numpy())
        fit_p = np.zeros((images.shape[0], self.fit_classes))
        shape_p = np.zeros((images.shape[0], self.shape_classes))
        for i, image in enumerate(images):
            try:
                fit_p[i, oracle_fit(image)] = 1.0
                shape_p[i, oracle_shape(image)] = 1.0
            except UnmeasurableImageError:
                fit_p[i] = 1.0 / self.fit_classes
                shape_p[i] = 1.0 / self.shape_classes
        return fit_p, shape_p


def make_generator_sampler(generator, cond_spec, label_probs=None):
    """(attribute, value, n, rng) -> images, marginalizing other attributes."""

    def sampler(attribute: str, value: int, n: int, rng: torch.Generator):
        kwargs = {attribute: torch.full((n,), value, dtype=torch.int64)}
        for name, _, size in cond_spec.blocks():
            if name == attribute:
                continue
            if label_probs and name in label_probs:
                probs = torch.as_tensor(label_probs[name], dtype=torch.float64)
                kwargs[name] = torch.multinomial(probs, n, replacement=True,
                                                 generator=rng)
            else:
                kwargs[name] = torch.randint(0, size, (n,), generator=rng)
        if cond_spec.d_u:
            kwargs["c_u"] = torch.rand(n, cond_spec.d_u, generator=rng) * 2 - 1
        c = cond_spec.make(batch_size=n, **kwargs)
        z = torch.randn(n, generator.cfg.latent_dim, generator=rng)
        with torch.no_grad():
            return generator.generate(z, c)

    sampler.attributes = tuple(name for name, _, _ in cond_spec.blocks())
    return sampler


def conditional_accuracy(sampler, classifier, n_per_class: int, seed: int,
                         attributes=None, batch_size: int = 64) -> dict:
    """Agreement between generation targets and classifier predictions.

    ``sampler(attribute, value, n, rng) -> images``; returns per-attribute
    accuracy and target-vs-prediction confusion matrices.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if attributes is None:
        attributes = getattr(sampler, "attributes", ("fit", "shape"))
    sizes = {"fit": FIT_LEVELS, "shape": SHAPE_CLASSES}
    rng = torch.Generator().manual_seed(seed)
    out = {}
    for attribute in attributes:
        k = sizes[attribute]
        counts = np.zeros((k, k), dtype=np.int64)
        for value in range(k):
            done = 0
            while done < n_per_class:
                take = min(batch_size, n_per_class - done)
                images = sampler(attribute, value, take, rng)
                fit_p, shape_p = classifier.predict_probs(images)
                preds = (fit_p if attribute == "fit" else shape_p).argmax(axis=1)
                for pred in preds:
                    counts[value, pred] += 1
                done += take
        matrix = ConfusionMatrix(counts)
        out[attribute] = {"accuracy": matrix.accuracy(), "confusion": matrix}
    return out
