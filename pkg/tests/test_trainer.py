import copy
import csv
import os

import pytest
import torch

from garmentgan import io as gio
from garmentgan import trainer as trn
from tests.conftest import render_set, tiny_config


def batch_from(dataset, n=4):
    return (torch.from_numpy(dataset.images[:n]),
            torch.from_numpy(dataset.fit[:n]),
            torch.from_numpy(dataset.shape_class[:n]))


class TestTrainConfig:
    def test_mode_defaults(self):
        sup = trn.TrainConfig(mode="supervised", resolution=32,
                              channels=(32, 32, 16, 16))
        assert sup.mapping_depth == 2 and sup.d_u == 0
        semi = trn.TrainConfig(mode="semi_supervised", resolution=32,
                               channels=(32, 32, 16, 16))
        assert semi.mapping_depth == 8 and semi.d_u == 2

    def test_semi_requires_du(self):
        with pytest.raises(ValueError):
            trn.TrainConfig(mode="semi_supervised", d_u=0, resolution=32,
                            channels=(32, 32, 16, 16))

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_config(batch_size=1)
        with pytest.raises(ValueError):
            tiny_config(learning_rate=-1e-3)
        with pytest.raises(ValueError):
            trn.AdaConfig(target_rt=1.5)

    def test_condition_spec_dimension(self):
        cfg = tiny_config(condition_on="fit")
        assert cfg.condition_spec().dim == 5  # F only
        assert tiny_config(condition_on="fit+shape").condition_spec().dim == 11

    def test_round_trips_through_dict(self):
        cfg = tiny_config(mode="semi_supervised", condition_on="shape", d_u=3)
        again = trn.TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg


class TestAdaUpdate:
    def config(self):
        return tiny_config(ada=trn.AdaConfig(enabled=True, target_rt=0.6,
                                             adjust_step=0.005, interval=4))

    def test_increase_above_target(self):
        scores = torch.tensor([1.0] * 9 + [-1.0])  # mean sign 0.8
        new = trn.ada_update(scores, trn.AdaState(p=0.5), self.config())
        assert new.p == pytest.approx(0.505)
        assert new.r_t_estimate == pytest.approx(0.8)

    def test_clamped_at_zero(self):
        scores = torch.tensor([-1.0] * 10)
        new = trn.ada_update(scores, trn.AdaState(p=0.0), self.config())
        assert new.p == 0.0

    def test_tie_decreases(self):
        scores = torch.tensor([1.0] * 8 + [-1.0] * 2)  # mean sign exactly 0.6
        new = trn.ada_update(scores, trn.AdaState(p=0.5), self.config())
        assert new.p == pytest.approx(0.495)

    def test_clamped_at_one(self):
        scores = torch.tensor([1.0] * 10)
        new = trn.ada_update(scores, trn.AdaState(p=0.999), self.config())
        assert new.p == 1.0

    def test_disabled_errors(self):
        cfg = tiny_config(ada=trn.AdaConfig(enabled=False))
        with pytest.raises(ValueError):
            trn.ada_update(torch.ones(4), trn.AdaState(), cfg)


class TestTrainStep:
    def test_parameters_change(self, tiny_dataset, tiny_state):
        g_before = [p.detach().clone() for p in tiny_state.generator.parameters()]
        d_before = [p.detach().clone() for p in tiny_state.discriminator.parameters()]
        trn.train_step(batch_from(tiny_dataset), tiny_state)
        assert any(not torch.equal(a, b) for a, b in
                   zip(g_before, tiny_state.generator.parameters()))
        assert any(not torch.equal(a, b) for a, b in
                   zip(d_before, tiny_state.discriminator.parameters()))

    def test_zero_lr_leaves_parameters(self, tiny_dataset):
        state = trn.init_state(tiny_config(learning_rate=0.0), tiny_dataset)
        before = [p.detach().clone() for p in state.generator.parameters()]
        before += [p.detach().clone() for p in state.discriminator.parameters()]
        report = trn.train_step(batch_from(tiny_dataset), state)
        after = list(state.generator.parameters()) + list(
            state.discriminator.parameters())
        assert all(torch.equal(a, b) for a, b in zip(before, after))
        assert report.all_finite()
        assert report.gan_d is not None and report.gan_g is not None

    def test_twin_runs_identical(self, tiny_dataset):
        def run():
            state, history = trn.fit(tiny_dataset, tiny_config(total_steps=4))
            return [(r.total_g, r.total_d) for r in history]

        assert run() == run()

    def test_semi_supervised_terms_present(self, tiny_dataset):
        cfg = tiny_config(mode="semi_supervised", condition_on="shape", d_u=2,
                          mapping_depth=2)
        state = trn.init_state(cfg, tiny_dataset)
        report = trn.train_step(batch_from(tiny_dataset), state)
        for term in ("gan_g", "gan_d", "cls_real", "cls_fake", "enc", "r1"):
            assert getattr(report, term) is not None

    def test_ema_tracks_generator(self, tiny_dataset, tiny_state):
        ema_before = [p.detach().clone()
                      for p in tiny_state.generator_ema.parameters()]
        trn.train_step(batch_from(tiny_dataset), tiny_state)
        assert any(not torch.equal(a, b) for a, b in
                   zip(ema_before, tiny_state.generator_ema.parameters()))


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tiny_dataset, tiny_state, tmp_path):
        trn.train_step(batch_from(tiny_dataset), tiny_state)
        path = str(tmp_path / "state.ckpt")
        trn.save_checkpoint(path, tiny_state)
        loaded = trn.load_checkpoint(path)
        for a, b in zip(tiny_state.generator.state_dict().values(),
                        loaded.generator.state_dict().values()):
            assert torch.equal(a, b)
        for a, b in zip(tiny_state.discriminator.state_dict().values(),
                        loaded.discriminator.state_dict().values()):
            assert torch.equal(a, b)
        assert loaded.step == tiny_state.step
        assert loaded.ada == tiny_state.ada

    def test_truncated_file_detected(self, tiny_state, tmp_path):
        path = str(tmp_path / "state.ckpt")
        trn.save_checkpoint(path, tiny_state)
        data = open(path, "rb").read()
        open(path, "wb").write(data[:-20])
        with pytest.raises(gio.ContainerChecksumError):
            trn.load_checkpoint(path)

    def test_version_mismatch_detected(self, tiny_state, tmp_path):
        path = str(tmp_path / "state.ckpt")
        trn.save_checkpoint(path, tiny_state)
        data = bytearray(open(path, "rb").read())
        data[len(gio.MAGIC)] = 99  # bump the version field
        open(path, "wb").write(bytes(data))
        with pytest.raises(gio.ContainerVersionError):
            trn.load_checkpoint(path)

    def test_resume_reproduces_trajectory(self, tiny_dataset, tmp_path):
        full_state, full_history = trn.fit(tiny_dataset, tiny_config(total_steps=6))

        half_state, first_half = trn.fit(tiny_dataset, tiny_config(total_steps=3))
        path = str(tmp_path / "half.ckpt")
        trn.save_checkpoint(path, half_state)
        resumed = trn.load_checkpoint(path)
        resumed.config.total_steps = 6
        _, second_half = trn.fit(tiny_dataset, resumed.config, state=resumed)

        spliced = first_half + second_half
        assert len(spliced) == len(full_history)
        for a, b in zip(full_history, spliced):
            for term in a.TERMS:
                va, vb = getattr(a, term), getattr(b, term)
                assert (va is None) == (vb is None)
                if va is not None:
                    assert va == vb  # bit-exact float equality


class TestFit:
    def test_empty_dataset_rejected(self, tiny_dataset):
        empty = copy.deepcopy(tiny_dataset)
        empty.images = empty.images[:0]
        empty.fit = empty.fit[:0]
        empty.shape_class = empty.shape_class[:0]
        empty.ids = []
        with pytest.raises(ValueError):
            trn.fit(empty, tiny_config())

    def test_single_class_rejected(self):
        ds = render_set(resolution=32, per_cell=1, seed=1)
        keep = ds.fit == 2
        ds.images, ds.fit, ds.shape_class = (
            ds.images[keep], ds.fit[keep], ds.shape_class[keep])
        ds.ids = [i for i, k in zip(ds.ids, keep) if k]
        with pytest.raises(ValueError):
            trn.fit(ds, tiny_config(condition_on="fit"))

    def test_ada_disabled_keeps_p_zero(self, tiny_dataset):
        cfg = tiny_config(total_steps=5, ada=trn.AdaConfig(enabled=False))
        state, _ = trn.fit(tiny_dataset, cfg)
        assert state.ada.p == 0.0 and state.ada.r_t_estimate == 0.0

    def test_ada_p_stays_in_unit_interval(self, tiny_dataset):
        cfg = tiny_config(total_steps=8,
                          ada=trn.AdaConfig(enabled=True, adjust_step=0.9,
                                            interval=1))
        state, _ = trn.fit(tiny_dataset, cfg)
        assert 0.0 <= state.ada.p <= 1.0

    def test_history_finite_and_csv_written(self, tiny_dataset, tmp_path):
        cfg = tiny_config(total_steps=3)
        _, history = trn.fit(tiny_dataset, cfg, out_dir=str(tmp_path))
        assert all(r.all_finite() for r in history)
        with open(tmp_path / "losses.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "term", "value"]
        steps = {int(r[0]) for r in rows[1:]}
        assert steps == {1, 2, 3}
        assert os.path.exists(tmp_path / "checkpoint-final.ckpt")

    def test_label_distribution_follows_dataset(self, tiny_dataset):
        state = trn.init_state(tiny_config(), tiny_dataset)
        assert state.label_probs["fit"] == pytest.approx([0.2] * 5)
        assert state.label_probs["shape"] == pytest.approx([1 / 6] * 6)
