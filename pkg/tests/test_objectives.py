import math

import pytest
import torch

from garmentgan import objectives as obj

ATOL = 1e-6


def t(*values):
    return torch.tensor(values, dtype=torch.float64)


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


class TestGanLosses:
    def test_d_zero_scores(self):
        assert float(obj.loss_gan_d(t(0.0), t(0.0))) == pytest.approx(
            2 * math.log(2), abs=ATOL)

    def test_d_saturation_limit(self):
        assert float(obj.loss_gan_d(t(40.0), t(-40.0))) == pytest.approx(0.0, abs=1e-6)

    def test_d_hand_case(self):
        expected = softplus(-1.0) + softplus(-2.0)  # ~0.44019
        assert float(obj.loss_gan_d(t(2.0), t(-1.0))) == pytest.approx(expected, abs=ATOL)
        assert expected == pytest.approx(0.44019, abs=1e-5)

    def test_g_zero_score(self):
        assert float(obj.loss_gan_g(t(0.0))) == pytest.approx(math.log(2), abs=ATOL)

    def test_g_limit(self):
        assert float(obj.loss_gan_g(t(40.0))) == pytest.approx(0.0, abs=1e-6)

    def test_g_hand_case(self):
        expected = (softplus(-1.0) + softplus(1.0)) / 2  # ~0.81326
        assert float(obj.loss_gan_g(t(1.0, -1.0))) == pytest.approx(expected, abs=ATOL)
        assert expected == pytest.approx(0.81326, abs=1e-5)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            obj.loss_gan_g(torch.empty(0))
        with pytest.raises(ValueError):
            obj.loss_gan_d(torch.empty(0), t(0.0))

    def test_generator_always_receives_signal(self):
        # d(loss_gan_g)/d(score) < 0 everywhere: non-saturating pairing
        for value in (-30.0, -5.0, -1.0, 0.0, 1.0, 5.0, 30.0):
            score = torch.tensor([value], dtype=torch.float64, requires_grad=True)
            obj.loss_gan_g(score).backward()
            assert float(score.grad) < 0.0

    def test_permutation_invariance(self):
        g = torch.Generator().manual_seed(0)
        scores = torch.randn(32, generator=g).double()
        perm = torch.randperm(32, generator=g)
        assert float(obj.loss_gan_g(scores)) == pytest.approx(
            float(obj.loss_gan_g(scores[perm])), abs=1e-12)
        other = torch.randn(32, generator=g).double()
        assert float(obj.loss_gan_d(scores, other)) == pytest.approx(
            float(obj.loss_gan_d(scores[perm], other[perm])), abs=1e-12)


def onehot(idx, k=5):
    return torch.nn.functional.one_hot(torch.tensor(idx), k).double()


class TestClassifierLosses:
    @pytest.mark.parametrize("loss", [obj.loss_cls_real, obj.loss_cls_fake])
    def test_uniform(self, loss):
        probs = torch.full((3, 5), 0.2, dtype=torch.float64)
        assert float(loss(probs, onehot([0, 2, 4]))) == pytest.approx(
            -math.log(0.2), abs=ATOL)

    @pytest.mark.parametrize("loss", [obj.loss_cls_real, obj.loss_cls_fake])
    def test_certain(self, loss):
        probs = onehot([1, 3])
        assert float(loss(probs, onehot([1, 3]))) == pytest.approx(0.0, abs=ATOL)

    @pytest.mark.parametrize("loss", [obj.loss_cls_real, obj.loss_cls_fake])
    def test_half(self, loss):
        probs = torch.tensor([[0.5, 0.5, 0.0, 0.0, 0.0]], dtype=torch.float64)
        assert float(loss(probs, onehot([0]))) == pytest.approx(math.log(2), abs=ATOL)

    def test_matches_bruteforce_cross_entropy(self):
        g = torch.Generator().manual_seed(1)
        raw = torch.rand(64, 7, generator=g).double() + 1e-3
        probs = raw / raw.sum(dim=1, keepdim=True)
        labels = torch.randint(0, 7, (64,), generator=g)
        expected = -sum(math.log(float(probs[i, labels[i]])) for i in range(64)) / 64
        value = float(obj.loss_cls_real(
            probs, torch.nn.functional.one_hot(labels, 7).double()))
        assert value == pytest.approx(expected, abs=1e-9)

    def test_zero_probability_floored(self, caplog):
        probs = torch.tensor([[1.0, 0.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
        with caplog.at_level("WARNING"):
            value = float(obj.loss_cls_real(probs, onehot([1])))
        assert value == pytest.approx(-math.log(1e-12), abs=1e-3)
        assert "floored" in caplog.text

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            obj.loss_cls_real(torch.full((2, 5), 0.5).double(), onehot([0, 1]))


class TestEncoderLoss:
    def test_identity(self):
        c = t(0.3, -0.7).reshape(1, 2)
        assert float(obj.loss_enc(c, c.clone())) == 0.0

    def test_three_four_five(self):
        c = torch.tensor([[0.6, -0.8]], dtype=torch.float64)
        assert float(obj.loss_enc(c, torch.zeros(1, 2).double())) == pytest.approx(
            1.0, abs=ATOL)

    def test_batch_mean(self):
        c = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        c_hat = torch.tensor([[0.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert float(obj.loss_enc(c, c_hat)) == pytest.approx(1.0, abs=ATOL)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            obj.loss_enc(torch.zeros(2, 2), torch.zeros(2, 3))


class TestR1:
    def test_constant_discriminator(self):
        x = torch.randn(4, 3, 8, 8, requires_grad=True)
        scores = (x * 0.0).flatten(1).sum(dim=1) + 5.0
        assert float(obj.r1_penalty(scores, x)) == pytest.approx(0.0, abs=ATOL)

    def test_linear_discriminator(self):
        g = torch.Generator().manual_seed(2)
        a = torch.randn(3 * 8 * 8, generator=g).double()
        x = torch.randn(6, 3, 8, 8, generator=g).double().requires_grad_(True)
        scores = x.flatten(1) @ a
        expected = 0.5 * float(a.square().sum())
        assert float(obj.r1_penalty(scores, x)) == pytest.approx(expected, rel=1e-9)

    def test_nonnegative(self):
        g = torch.Generator().manual_seed(3)
        x = torch.randn(4, 3, 8, 8, generator=g, requires_grad=True)
        scores = torch.tanh(x.flatten(1)).square().sum(dim=1)
        assert float(obj.r1_penalty(scores, x).detach()) >= 0.0


class TestTotals:
    def test_weighted_sum_example(self):
        report = obj.LossReport(mode="semi_supervised", gan_g=0.69,
                                cls_fake=1.61, enc=1.0)
        weights = obj.LossWeights(gamma=1.0, beta=0.1)
        assert obj.total_g(report, weights) == pytest.approx(0.69 + 1.61 + 0.10,
                                                             abs=ATOL)

    def test_zero_weights_reduce_to_gan(self):
        report = obj.LossReport(mode="semi_supervised", gan_g=0.7, gan_d=1.4,
                                cls_real=2.0, cls_fake=3.0, enc=4.0, r1=0.5)
        weights = obj.LossWeights(gamma=0.0, beta=0.0, r1_gamma=0.0)
        assert obj.total_g(report, weights) == pytest.approx(0.7, abs=ATOL)
        assert obj.total_d(report, weights) == pytest.approx(1.4, abs=ATOL)

    def test_zero_enc_leaves_total_unchanged(self):
        weights = obj.LossWeights(gamma=1.0, beta=0.1)
        with_enc = obj.LossReport(mode="semi_supervised", gan_g=0.5,
                                  cls_fake=1.0, enc=0.0)
        without_beta = obj.total_g(with_enc, obj.LossWeights(gamma=1.0, beta=0.0))
        assert obj.total_g(with_enc, weights) == pytest.approx(without_beta, abs=ATOL)

    def test_supervised_ignores_cls_terms(self):
        report = obj.LossReport(mode="supervised", gan_g=0.6, gan_d=1.2, r1=2.0)
        weights = obj.LossWeights(gamma=1.0, beta=0.1, r1_gamma=0.5)
        assert obj.total_g(report, weights) == pytest.approx(0.6, abs=ATOL)
        assert obj.total_d(report, weights) == pytest.approx(1.2 + 1.0, abs=ATOL)

    def test_missing_required_term(self):
        weights = obj.LossWeights()
        with pytest.raises(ValueError):
            obj.total_g(obj.LossReport(mode="semi_supervised", gan_g=0.5,
                                       cls_fake=None, enc=1.0), weights)
        with pytest.raises(ValueError):
            obj.total_d(obj.LossReport(mode="supervised", gan_d=None), weights)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            obj.LossWeights(gamma=-0.1)
