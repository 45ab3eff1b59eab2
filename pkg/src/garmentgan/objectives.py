"""Training losses in minimization form.

The adversarial pair realizes the non-saturating logistic loss via softplus:
the discriminator minimizes softplus(d_fake) + softplus(-d_real), the
generator minimizes softplus(-d_fake). Supervised classifier terms are
cross-entropies on real (trains C) and generated (trains G) images; the
encoder term is the unsquared L2 reconstruction of the continuous code; R1 is
the usual gradient penalty on real inputs. Totals:

    total_d = gan_d + gamma * cls_real + r1_gamma * r1
    total_g = gan_g + gamma * cls_fake + beta * enc
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

_PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    gamma: float = 1.0
    beta: float = 0.1
    r1_gamma: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class LossReport:
    """Per-term loss values; tensors while differentiating, floats in logs."""

    mode: str = "supervised"
    gan_g: object = None
    gan_d: object = None
    cls_real: object = None
    cls_fake: object = None
    enc: object = None
    r1: object = None
    total_g: object = None
    total_d: object = None

    TERMS = ("gan_g", "gan_d", "cls_real", "cls_fake", "enc", "r1",
             "total_g", "total_d")

    def detached(self) -> "LossReport":
        out = LossReport(mode=self.mode)
        for name in self.TERMS:
            value = getattr(self, name)
            if value is not None:
                if torch.is_tensor(value):
                    value = value.detach()
                setattr(out, name, float(value))
        return out

    def all_finite(self) -> bool:
        import math
        for name in self.TERMS:
            value = getattr(self, name)
            if value is None:
                continue
            value = float(value)
            if math.isnan(value) or math.isinf(value):
                return False
        return True


def _check_scores(scores: torch.Tensor, name: str):
    if scores.numel() == 0:
        raise ValueError(f"{name} batch is empty")
    if not torch.isfinite(scores).all():
        raise ValueError(f"{name} contains non-finite scores")


def loss_gan_d(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    _check_scores(d_real, "d_real")
    _check_scores(d_fake, "d_fake")
    return F.softplus(d_fake).mean() + F.softplus(-d_real).mean()


def loss_gan_g(d_fake: torch.Tensor) -> torch.Tensor:
    _check_scores(d_fake, "d_fake")
    return F.softplus(-d_fake).mean()


def _cross_entropy(probs: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    if probs.shape != onehot.shape:
        raise ValueError(f"probs {tuple(probs.shape)} vs labels {tuple(onehot.shape)}")
    sums = probs.sum(dim=1)
    if ((sums - 1.0).abs() > 1e-5).any() or (probs < -1e-6).any():
        raise ValueError("probability rows must be normalized and non-negative")
    p_true = (probs * onehot).sum(dim=1)
    if (p_true < _PROB_FLOOR).any():
        logger.warning("true-class probability below %.0e floored", _PROB_FLOOR)
        p_true = p_true.clamp_min(_PROB_FLOOR)
    return -torch.log(p_true).mean()


def loss_cls_real(probs: torch.Tensor, c_s: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class on real images."""
    return _cross_entropy(probs, c_s)


def loss_cls_fake(probs: torch.Tensor, c_target: torch.Tensor) -> torch.Tensor:
    """Same functional form, against the generation target label."""
    return _cross_entropy(probs, c_target)


def loss_enc(c_u: torch.Tensor, c_u_hat: torch.Tensor) -> torch.Tensor:
    """Mean euclidean norm (unsquared) of the code reconstruction residual."""
    if c_u.shape != c_u_hat.shape or c_u.ndim != 2 or c_u.shape[1] < 1:
        raise ValueError(
            f"code batches must match with d_u >= 1, got {tuple(c_u.shape)} "
            f"vs {tuple(c_u_hat.shape)}")
    return (c_u - c_u_hat).norm(dim=1).mean()


def r1_penalty(d_scores: torch.Tensor, real_images: torch.Tensor) -> torch.Tensor:
    """Half the mean squared gradient norm of the scores w.r.t. real pixels."""
    grads = torch.autograd.grad(d_scores.sum(), real_images, create_graph=True)[0]
    return 0.5 * grads.flatten(1).square().sum(dim=1).mean()


def _require(report: LossReport, name: str):
    value = getattr(report, name)
    if value is None:
        raise ValueError(f"{report.mode} totals require the {name} term")
    return value


def total_g(report: LossReport, weights: LossWeights):
    total = _require(report, "gan_g")
    if report.mode == "semi_supervised":
        total = total + weights.gamma * _require(report, "cls_fake")
        total = total + weights.beta * _require(report, "enc")
    return total


def total_d(report: LossReport, weights: LossWeights):
    total = _require(report, "gan_d")
    if report.mode == "semi_supervised":
        total = total + weights.gamma * _require(report, "cls_real")
    if report.r1 is not None:
        total = total + weights.r1_gamma * report.r1
    return total
