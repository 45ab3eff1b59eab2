import numpy as np
import pytest
import torch

from garmentgan.augment import AugmentationConfig, augment
from tests.conftest import render_set


@pytest.fixture(scope="module")
def batch():
    ds = render_set(resolution=32, per_cell=1, seed=4)
    return torch.from_numpy(ds.images[:16])


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


class TestConfig:
    def test_rejects_unknown_family(self):
        with pytest.raises(ValueError):
            AugmentationConfig(families=("scale", "warp"))

    def test_rejects_empty_families(self):
        with pytest.raises(ValueError):
            AugmentationConfig(families=())

    def test_rejects_nonpositive_maxima(self):
        with pytest.raises(ValueError):
            AugmentationConfig(max_brightness=0.0)


class TestAugment:
    def test_p_zero_is_identity(self, batch):
        out = augment(batch, 0.0, AugmentationConfig(), gen())
        assert torch.equal(out, batch)
        assert out is not batch  # fresh tensor, inputs never mutated

    def test_p_out_of_range(self, batch):
        for p in (-0.1, 1.1):
            with pytest.raises(ValueError):
                augment(batch, p, AugmentationConfig(), gen())

    def test_brightness_only_constant_offset(self, batch):
        cfg = AugmentationConfig(families=("brightness",), max_brightness=0.3)
        out = augment(batch, 1.0, cfg, gen(1))
        for i in range(batch.shape[0]):
            delta = out[i] - batch[i]
            inside = (out[i] > -1.0) & (out[i] < 1.0)
            assert inside.any()
            offset = delta[inside].median()
            assert -0.3 <= float(offset) <= 0.3
            # every pixel is clamp(x + offset): reconstruct and compare
            assert torch.allclose(out[i], (batch[i] + offset).clamp(-1, 1),
                                  atol=1e-6)

    def test_deterministic_for_fixed_stream(self, batch):
        cfg = AugmentationConfig()
        a = augment(batch, 0.5, cfg, gen(7))
        b = augment(batch, 0.5, cfg, gen(7))
        assert torch.equal(a, b)

    def test_untriggered_rows_bit_identical(self, batch):
        cfg = AugmentationConfig()
        out = augment(batch, 0.3, cfg, gen(3))
        unchanged = [i for i in range(batch.shape[0])
                     if torch.equal(out[i], batch[i])]
        changed = [i for i in range(batch.shape[0]) if i not in unchanged]
        assert unchanged and changed  # p=0.3 on 16 images hits both cases

    def test_output_clamped(self, batch):
        cfg = AugmentationConfig()
        out = augment(batch, 1.0, cfg, gen(11))
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0
        assert not torch.equal(out, batch)

    def test_each_family_alone_runs(self, batch):
        for family in ("scale", "rotate", "brightness", "contrast"):
            out = augment(batch, 1.0, AugmentationConfig(families=(family,)), gen(5))
            assert out.shape == batch.shape
            assert not torch.equal(out, batch)

    def test_gradients_flow_through(self, batch):
        x = batch.clone().requires_grad_(True)
        out = augment(x, 1.0, AugmentationConfig(), gen(9))
        out.square().mean().backward()
        assert x.grad is not None
        assert torch.isfinite(x.grad).all()
        assert float(x.grad.abs().sum()) > 0

    def test_stream_advances_identically_regardless_of_p(self, batch):
        # the draw schedule is fixed, so later consumers see the same stream
        g1, g2 = gen(13), gen(13)
        augment(batch, 0.0, AugmentationConfig(), g1)
        augment(batch, 1.0, AugmentationConfig(), g2)
        assert torch.equal(torch.rand(4, generator=g1), torch.rand(4, generator=g2))
