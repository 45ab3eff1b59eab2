import numpy as np
import pytest
import torch

from garmentgan import evalnet as en
from garmentgan.synthdata import GarmentParams, render_silhouette
from tests.conftest import render_set


@pytest.fixture(scope="module")
def small_set():
    return render_set(resolution=32, per_cell=6, seed=5)


@pytest.fixture(scope="module")
def trained(small_set):
    cfg = en.EvalNetConfig(resolution=32, channels=(16, 32, 64), feature_dim=64,
                           epochs=4, seed=2)
    return en.train_eval_classifier(small_set, cfg)


class TestTraining:
    def test_learns_above_chance(self):
        # desk-scale accuracy (>= 0.95 per head) is asserted in acceptance;
        # here a 300-image set just has to clear chance decisively
        ds = render_set(resolution=32, per_cell=10, seed=5)
        cfg = en.EvalNetConfig(resolution=32, channels=(32, 64, 128),
                               feature_dim=64, epochs=16, batch_size=16, seed=2)
        _, report = en.train_eval_classifier(ds, cfg)
        assert report["holdout_fit_accuracy"] >= 0.5      # chance 0.2
        assert report["holdout_shape_accuracy"] >= 0.3    # chance 0.167
        assert report["degenerate_heads"] == []

    def test_deterministic_per_seed(self, small_set):
        cfg = en.EvalNetConfig(resolution=32, channels=(8, 16), feature_dim=32,
                               epochs=1, seed=4)
        m1, _ = en.train_eval_classifier(small_set, cfg)
        m2, _ = en.train_eval_classifier(small_set, cfg)
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)

    def test_zero_lr_stays_at_chance(self, small_set):
        cfg = en.EvalNetConfig(resolution=32, channels=(8, 16), feature_dim=32,
                               epochs=1, seed=4, learning_rate=0.0,
                               holdout_fraction=0.5)
        _, report = en.train_eval_classifier(small_set, cfg)
        assert report["holdout_fit_accuracy"] == pytest.approx(0.2, abs=0.08)
        assert report["holdout_shape_accuracy"] == pytest.approx(1 / 6, abs=0.08)

    def test_missing_class_flagged(self, small_set):
        import copy
        ds = copy.deepcopy(small_set)
        keep = ds.fit != 4
        ds.images, ds.fit, ds.shape_class = (ds.images[keep], ds.fit[keep],
                                             ds.shape_class[keep])
        ds.ids = [i for i, k in zip(ds.ids, keep) if k]
        cfg = en.EvalNetConfig(resolution=32, channels=(8, 16), feature_dim=32,
                               epochs=1, seed=4)
        _, report = en.train_eval_classifier(ds, cfg)
        assert report["degenerate_heads"] == ["fit"]


class TestClassify:
    def test_rows_normalized(self, trained, small_set):
        model, _ = trained
        fit_p, shape_p = en.classify(model, small_set.images[:9])
        assert fit_p.shape == (9, 5) and shape_p.shape == (9, 6)
        assert np.allclose(fit_p.sum(axis=1), 1.0, atol=1e-6)
        assert np.allclose(shape_p.sum(axis=1), 1.0, atol=1e-6)

    def test_deterministic(self, trained, small_set):
        model, _ = trained
        a = en.classify(model, small_set.images[:4])
        b = en.classify(model, small_set.images[:4])
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_resolution_mismatch(self, trained):
        model, _ = trained
        with pytest.raises(ValueError):
            model.predict_probs(np.zeros((2, 3, 64, 64), dtype=np.float32))


class TestConfusionMatrix:
    def test_accuracy_is_trace_over_total(self):
        counts = np.array([[8, 2], [3, 7]])
        matrix = en.ConfusionMatrix(counts)
        brute = sum(counts[i, i] for i in range(2)) / counts.sum()
        assert matrix.accuracy() == pytest.approx(brute)

    def test_row_sums(self):
        matrix = en.ConfusionMatrix(np.array([[5, 0], [1, 4]]))
        assert matrix.row_sums().tolist() == [5, 5]

    def test_validation(self):
        with pytest.raises(ValueError):
            en.ConfusionMatrix(np.array([[1, 2, 3]]))
        with pytest.raises(ValueError):
            en.ConfusionMatrix(np.array([[1, -1], [0, 2]]))


def oracle_render_sampler(attribute, value, n, rng):
    """Stub generator: real renders of the requested target class."""
    images = []
    for i in range(n):
        fit = value if attribute == "fit" else int(torch.randint(0, 5, (1,), generator=rng))
        shape = value if attribute == "shape" else int(torch.randint(0, 6, (1,), generator=rng))
        hue = float(torch.rand(1, generator=rng))
        length = 0.4 + 0.6 * float(torch.rand(1, generator=rng))
        seed = int(torch.randint(0, 2**31, (1,), generator=rng))
        images.append(render_silhouette(
            GarmentParams(fit, shape, hue, length, seed), 32).image)
    return torch.from_numpy(np.stack(images))


class TestConditionalAccuracy:
    def test_oracle_stub_is_exactly_one(self):
        result = en.conditional_accuracy(oracle_render_sampler,
                                         en.OracleClassifier(),
                                         n_per_class=3, seed=0)
        assert result["fit"]["accuracy"] == 1.0
        assert result["shape"]["accuracy"] == 1.0

    def test_confusion_row_sums_equal_n_per_class(self):
        result = en.conditional_accuracy(oracle_render_sampler,
                                         en.OracleClassifier(),
                                         n_per_class=4, seed=1)
        for attribute in ("fit", "shape"):
            assert (result[attribute]["confusion"].row_sums() == 4).all()

    def test_accuracy_matches_brute_recount(self):
        result = en.conditional_accuracy(oracle_render_sampler,
                                         en.OracleClassifier(),
                                         n_per_class=2, seed=2)
        for attribute in ("fit", "shape"):
            matrix = result[attribute]["confusion"].counts
            assert result[attribute]["accuracy"] == pytest.approx(
                np.trace(matrix) / matrix.sum())

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError):
            en.conditional_accuracy(oracle_render_sampler, en.OracleClassifier(),
                                    n_per_class=0, seed=0)

    def test_deterministic_per_seed(self, trained):
        model, _ = trained
        a = en.conditional_accuracy(oracle_render_sampler, model, 2, seed=3)
        b = en.conditional_accuracy(oracle_render_sampler, model, 2, seed=3)
        assert np.array_equal(a["fit"]["confusion"].counts,
                              b["fit"]["confusion"].counts)


class TestPersistence:
    def test_save_load_round_trip(self, trained, small_set, tmp_path):
        model, report = trained
        path = str(tmp_path / "clf.ggc")
        en.save_classifier(path, model, report)
        loaded = en.load_classifier(path)
        a = model.predict_probs(small_set.images[:3])
        b = loaded.predict_probs(small_set.images[:3])
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestGeneratorSampler:
    def test_sampler_produces_requested_batch(self, tiny_state):
        sampler = en.make_generator_sampler(tiny_state.generator_ema,
                                            tiny_state.cond)
        rng = torch.Generator().manual_seed(0)
        images = sampler("fit", 2, 5, rng)
        assert images.shape == (5, 3, 32, 32)
        assert sampler.attributes == ("fit", "shape")
