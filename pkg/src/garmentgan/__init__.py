"""Fit/shape-conditioned garment GAN toolkit.

Submodules: synthdata (procedural dataset + oracles), augment (ADA pipeline),
conditions/nets (condition vectors, generator, discriminator), objectives
(losses), trainer (optimization loop + checkpoints), latent (centroids,
boundaries, inversion, style mixing), metrics (IS/FID/precision-recall),
evalnet (auxiliary fit/shape classifier), cli (command suite).
"""

__version__ = "0.1.0"

from .conditions import ConditionSpec
from .objectives import LossReport, LossWeights
from .trainer import TrainConfig

__all__ = ["ConditionSpec", "LossReport", "LossWeights", "TrainConfig",
           "__version__"]
