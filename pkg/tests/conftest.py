import os

import numpy as np
import pytest
import torch

os.environ.setdefault(
    "GARMENTGAN_DESK_CACHE",
    os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                 ".desk_cache"))

from garmentgan import trainer as trn
from garmentgan.synthdata import ArrayDataset, GarmentParams, render_silhouette

torch.set_num_threads(max(1, os.cpu_count() or 1))


def render_set(resolution=32, per_cell=2, seed=0):
    """Small in-memory labeled set rendered straight to arrays (no disk)."""
    rng = np.random.default_rng(seed)
    images, fits, shapes, ids = [], [], [], []
    for fit in range(5):
        for shape in range(6):
            for i in range(per_cell):
                params = GarmentParams(fit, shape, float(rng.random()),
                                       float(0.4 + 0.6 * rng.random()),
                                       int(rng.integers(0, 2**62)))
                images.append(render_silhouette(params, resolution).image)
                fits.append(fit)
                shapes.append(shape)
                ids.append(f"f{fit}s{shape}_{i}")
    return ArrayDataset(images=np.stack(images), fit=np.array(fits),
                        shape_class=np.array(shapes), ids=ids)


@pytest.fixture(scope="session")
def tiny_dataset():
    return render_set(resolution=32, per_cell=2, seed=0)


def tiny_config(**overrides):
    base = dict(mode="supervised", condition_on="fit+shape", resolution=32,
                channels=(32, 32, 16, 16), latent_dim=16, w_dim=16,
                feature_dim=64, batch_size=4, total_steps=2, seed=3)
    base.update(overrides)
    return trn.TrainConfig(**base)


@pytest.fixture()
def tiny_state(tiny_dataset):
    return trn.init_state(tiny_config(), tiny_dataset)
