"""Alternating GAN optimization with ADA control, EMA generator, checkpoints.

Every source of randomness flows through named torch.Generator streams
(init/data/latent/condition/augment), all of which are persisted in
checkpoints, so a training trajectory is a pure function of (seed, dataset)
and resuming from a checkpoint reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import io as gio
from . import objectives as obj
from .augment import AugmentationConfig, augment
from .conditions import ConditionSpec
from .nets import (Discriminator, DiscriminatorConfig, Generator,
                   GeneratorConfig, channels_for_resolution)
from .synthdata import FIT_LEVELS, SHAPE_CLASSES, ArrayDataset

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
MODES = ("supervised", "semi_supervised")
CONDITION_CHOICES = ("fit", "shape", "fit+shape")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, report):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report


@dataclass
class AdaConfig:
    enabled: bool = True
    target_rt: float = 0.6
    adjust_step: float = 0.005
    interval: int = 4

    def __post_init__(self):
        if not 0.0 < self.target_rt < 1.0:
            raise ValueError("target_rt must be in (0, 1)")
        if self.adjust_step <= 0 or self.interval < 1:
            raise ValueError("adjust_step must be > 0 and interval >= 1")


@dataclass
class AdaState:
    p: float = 0.0
    r_t_estimate: float = 0.0


def ada_update(recent_real_scores: torch.Tensor, ada: AdaState,
               config: "TrainConfig") -> AdaState:
    """Overfitting heuristic: mean sign of real scores vs. the target rate."""
    if not config.ada.enabled:
        raise ValueError("ada_update called with augmentation disabled")
    r_t = float(torch.sign(recent_real_scores.detach()).double().mean())
    step = config.ada.adjust_step
    p = ada.p + step if r_t > config.ada.target_rt else ada.p - step
    return AdaState(p=float(np.clip(p, 0.0, 1.0)), r_t_estimate=r_t)


@dataclass
class TrainConfig:
    mode: str = "supervised"
    condition_on: str = "fit+shape"
    resolution: int = 64
    latent_dim: int = 64
    w_dim: int = 64
    mapping_depth: int = None       # default: 2 supervised, 8 semi-supervised
    channels: tuple = None          # generator schedule, coarse-to-fine
    d_u: int = None                 # default: 0 supervised, 2 semi-supervised
    feature_dim: int = 256
    learning_rate: float = 0.0025
    batch_size: int = 32
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    total_steps: int = 10000
    weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    ada: AdaConfig = field(default_factory=AdaConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    ema_decay: float = 0.999
    mapping_lr_mul: float = 0.01
    device: str = "cpu"
    snapshot_interval: int = 0      # 0: only the final checkpoint
    grid_interval: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.condition_on not in CONDITION_CHOICES:
            raise ValueError(f"condition_on must be one of {CONDITION_CHOICES}")
        if self.mapping_depth is None:
            self.mapping_depth = 2 if self.mode == "supervised" else 8
        if self.d_u is None:
            self.d_u = 0 if self.mode == "supervised" else 2
        if self.mode == "supervised" and self.d_u != 0:
            raise ValueError("supervised mode uses d_u = 0")
        if self.mode == "semi_supervised" and self.d_u < 1:
            raise ValueError("semi-supervised mode requires d_u >= 1")
        if self.channels is None:
            self.channels = channels_for_resolution(self.resolution)
        self.channels = tuple(self.channels)
        # learning_rate 0 is allowed as a degenerate diagnostic config.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def condition_spec(self) -> ConditionSpec:
        return ConditionSpec(
            fit_classes=FIT_LEVELS if "fit" in self.condition_on else 0,
            shape_classes=SHAPE_CLASSES if "shape" in self.condition_on else 0,
            d_u=self.d_u)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["weights"] = obj.LossWeights(**data["weights"])
        data["ada"] = AdaConfig(**data["ada"])
        aug = dict(data["augmentation"])
        aug["families"] = tuple(aug["families"])
        data["augmentation"] = AugmentationConfig(**aug)
        data["channels"] = tuple(data["channels"])
        return cls(**data)


_STREAM_NAMES = ("data", "latent", "condition", "augment")


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    generator_ema: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    streams: dict
    ada: AdaState
    label_probs: dict
    step: int = 0
    pending_real_scores: list = field(default_factory=list)

    @property
    def cond(self) -> ConditionSpec:
        return self.config.condition_spec()


def _label_distribution(config: TrainConfig, dataset: ArrayDataset) -> dict:
    """Empirical distribution of the conditioned labels in the train set."""
    probs = {}
    if "fit" in config.condition_on:
        counts = np.bincount(dataset.fit, minlength=FIT_LEVELS).astype(np.float64)
        probs["fit"] = (counts / counts.sum()).tolist()
    if "shape" in config.condition_on:
        counts = np.bincount(dataset.shape_class, minlength=SHAPE_CLASSES).astype(np.float64)
        probs["shape"] = (counts / counts.sum()).tolist()
    return probs


def init_state(config: TrainConfig, train_set: ArrayDataset = None) -> TrainState:
    cond = config.condition_spec()
    torch.manual_seed(config.seed)
    gen_cfg = GeneratorConfig(
        resolution=config.resolution, latent_dim=config.latent_dim,
        w_dim=config.w_dim, mapping_depth=config.mapping_depth,
        channels=config.channels, cond=cond, mapping_lr_mul=config.mapping_lr_mul)
    disc_cond = cond if config.mode == "semi_supervised" else ConditionSpec(
        cond.fit_classes, cond.shape_classes, 0)
    disc_cfg = DiscriminatorConfig(
        resolution=config.resolution,
        channels=tuple(reversed(config.channels)),
        feature_dim=config.feature_dim, mode=config.mode, cond=disc_cond)

    device = torch.device(config.device)
    generator = Generator(gen_cfg).to(device)
    discriminator = Discriminator(disc_cfg).to(device)
    generator_ema = copy.deepcopy(generator)
    for p in generator_ema.parameters():
        p.requires_grad_(False)

    opt_kwargs = dict(lr=config.learning_rate,
                      betas=(config.adam_beta1, config.adam_beta2),
                      eps=config.adam_eps)
    g_params = list(generator.parameters()) + discriminator.generator_phase_parameters()
    opt_g = torch.optim.Adam(g_params, **opt_kwargs)
    opt_d = torch.optim.Adam(discriminator.discriminator_phase_parameters(), **opt_kwargs)

    streams = {}
    for i, name in enumerate(_STREAM_NAMES):
        streams[name] = torch.Generator().manual_seed(config.seed * 7919 + i + 1)

    label_probs = _label_distribution(config, train_set) if train_set is not None else {}
    return TrainState(config=config, generator=generator, generator_ema=generator_ema,
                      discriminator=discriminator, opt_g=opt_g, opt_d=opt_d,
                      streams=streams, ada=AdaState(), label_probs=label_probs)


def _ema_update(ema: Generator, live: Generator, decay: float):
    with torch.no_grad():
        for p_ema, p in zip(ema.parameters(), live.parameters()):
            p_ema.mul_(decay).add_(p, alpha=1.0 - decay)


def _sample_batch(state: TrainState, n: int):
    config = state.config
    z = torch.randn(n, config.latent_dim, generator=state.streams["latent"])
    c = state.cond.sample(n, state.streams["condition"],
                          label_probs=state.label_probs or None)
    device = next(state.generator.parameters()).device
    return z.to(device), c.to(device)


def _real_condition(state: TrainState, fit, shape):
    kwargs = {}
    if "fit" in state.config.condition_on:
        kwargs["fit"] = fit
    if "shape" in state.config.condition_on:
        kwargs["shape"] = shape
    if state.cond.d_u:
        # Real images carry no continuous code; only used in supervised mode.
        raise RuntimeError("real conditions are only built in supervised mode")
    return state.cond.make(batch_size=len(fit), **kwargs)


def _cls_loss(state: TrainState, probs: dict, c: torch.Tensor, which) -> torch.Tensor:
    split = state.cond.split(c)
    total = None
    for name in probs:
        term = which(probs[name], split[name])
        total = term if total is None else total + term
    return total


def train_step(real_batch, state: TrainState, config: TrainConfig = None) -> obj.LossReport:
    """One discriminator update followed by one generator update."""
    config = config or state.config
    images, fit, shape = real_batch
    device = next(state.generator.parameters()).device
    images = torch.as_tensor(images, dtype=torch.float32, device=device)
    n = images.shape[0]
    semi = config.mode == "semi_supervised"
    p_aug = state.ada.p if config.ada.enabled else 0.0
    aug = lambda x: augment(x, p_aug, config.augmentation, state.streams["augment"])

    report = obj.LossReport(mode=config.mode)

    # --- discriminator phase
    state.generator.zero_grad(set_to_none=True)
    state.discriminator.zero_grad(set_to_none=True)
    z, c_fake = _sample_batch(state, n)
    with torch.no_grad():
        x_fake = state.generator.generate(z, c_fake)
    x_real = aug(images).detach().requires_grad_(True)
    x_fake_aug = aug(x_fake)

    if semi:
        feats_real = state.discriminator.features(x_real)
        d_real = state.discriminator.score_head(feats_real).squeeze(1)
        d_fake = state.discriminator.score(x_fake_aug)
        c_real = state.cond.make(
            fit=fit if "fit" in config.condition_on else None,
            shape=shape if "shape" in config.condition_on else None,
            c_u=torch.zeros(n, state.cond.d_u), batch_size=n).to(device)
        probs = state.discriminator.classify(x_real, feats=feats_real)
        report.cls_real = _cls_loss(state, probs, c_real, obj.loss_cls_real)
    else:
        c_real = _real_condition(state, fit, shape).to(device)
        d_real = state.discriminator.score(x_real, c_real)
        d_fake = state.discriminator.score(x_fake_aug, c_fake)

    report.gan_d = obj.loss_gan_d(d_real, d_fake)
    if config.weights.r1_gamma > 0:
        report.r1 = obj.r1_penalty(d_real, x_real)
    d_total = obj.total_d(report, config.weights)
    d_total.backward()
    state.opt_d.step()
    state.pending_real_scores.append(d_real.detach().cpu())

    # --- generator phase
    state.generator.zero_grad(set_to_none=True)
    state.discriminator.zero_grad(set_to_none=True)
    z2, c2 = _sample_batch(state, n)
    x_gen = aug(state.generator.generate(z2, c2))
    if semi:
        feats = state.discriminator.features(x_gen)
        report.gan_g = obj.loss_gan_g(
            state.discriminator.score_head(feats).squeeze(1))
        probs = state.discriminator.classify(x_gen, feats=feats)
        report.cls_fake = _cls_loss(state, probs, c2, obj.loss_cls_fake)
        c_u = state.cond.split(c2)["c_u"]
        report.enc = obj.loss_enc(c_u, state.discriminator.encode(x_gen, feats=feats))
    else:
        report.gan_g = obj.loss_gan_g(state.discriminator.score(x_gen, c2))
    g_total = obj.total_g(report, config.weights)
    g_total.backward()
    state.opt_g.step()
    _ema_update(state.generator_ema, state.generator, config.ema_decay)

    report.total_d = d_total
    report.total_g = g_total
    out = report.detached()
    if not out.all_finite():
        raise TrainingDivergedError(state.step, out)
    return out


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, state: TrainState):
    payload = {
        "config": state.config.to_dict(),
        "step": state.step,
        "generator": state.generator.state_dict(),
        "generator_ema": state.generator_ema.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "ada": {"p": state.ada.p, "r_t_estimate": state.ada.r_t_estimate},
        "label_probs": state.label_probs,
        "rng": {name: gen.get_state() for name, gen in state.streams.items()},
        "pending_real_scores": [t for t in state.pending_real_scores],
    }
    gio.save_container(path, payload, kind=CHECKPOINT_KIND)


def load_checkpoint(path: str) -> TrainState:
    payload = gio.load_container(path, expected_kind=CHECKPOINT_KIND)
    config = TrainConfig.from_dict(payload["config"])
    state = init_state(config)
    state.generator.load_state_dict(payload["generator"])
    state.generator_ema.load_state_dict(payload["generator_ema"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.ada = AdaState(**payload["ada"])
    state.label_probs = payload["label_probs"]
    state.step = int(payload["step"])
    state.pending_real_scores = list(payload["pending_real_scores"])
    for name, packed in payload["rng"].items():
        state.streams[name].set_state(packed)
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _dataset_covers_conditioning(config: TrainConfig, dataset: ArrayDataset):
    if len(dataset) == 0:
        raise ValueError("train set is empty")
    if "fit" in config.condition_on and np.unique(dataset.fit).size < 2:
        raise ValueError("train set covers fewer than 2 fit classes")
    if "shape" in config.condition_on and np.unique(dataset.shape_class).size < 2:
        raise ValueError("train set covers fewer than 2 shape classes")


def sample_grid_images(state: TrainState, per_value: int = 4) -> torch.Tensor:
    """EMA samples sweeping the first conditioned attribute, for snapshots."""
    cond = state.cond
    name, _, size = cond.blocks()[0]
    gen = torch.Generator().manual_seed(state.config.seed + 4242)
    rows = []
    for value in range(size):
        z = torch.randn(per_value, state.config.latent_dim, generator=gen)
        kwargs = {name: torch.full((per_value,), value)}
        for other, _, osize in cond.blocks():
            if other != name:
                kwargs[other] = torch.randint(0, osize, (per_value,), generator=gen)
        if cond.d_u:
            kwargs["c_u"] = torch.rand(per_value, cond.d_u, generator=gen) * 2 - 1
        c = cond.make(batch_size=per_value, **kwargs)
        with torch.no_grad():
            rows.append(state.generator_ema.generate(z, c))
    return torch.cat(rows, dim=0)


def fit(train_set: ArrayDataset, config: TrainConfig, out_dir: str = None,
        state: TrainState = None, log_every: int = 100):
    """Run train_step to config.total_steps; returns (state, loss history)."""
    if state is None:
        _dataset_covers_conditioning(config, train_set)
        state = init_state(config, train_set)
    else:
        config = state.config
        _dataset_covers_conditioning(config, train_set)

    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = gio.LossCsvWriter(os.path.join(out_dir, "losses.csv"))

    images = torch.as_tensor(train_set.images, dtype=torch.float32)
    fit_labels = torch.as_tensor(train_set.fit)
    shape_labels = torch.as_tensor(train_set.shape_class)
    n = len(train_set)

    history = []
    try:
        while state.step < config.total_steps:
            idx = torch.randint(0, n, (config.batch_size,),
                                generator=state.streams["data"])
            batch = (images[idx], fit_labels[idx], shape_labels[idx])
            report = train_step(batch, state)
            state.step += 1
            history.append(report)
            if writer is not None:
                writer.write_report(state.step, report)

            if config.ada.enabled and state.step % config.ada.interval == 0 \
                    and state.pending_real_scores:
                scores = torch.cat(state.pending_real_scores)
                state.ada = ada_update(scores, state.ada, config)
                state.pending_real_scores = []

            if state.step % log_every == 0:
                logger.info("step %d: total_g=%.4f total_d=%.4f ada_p=%.3f",
                            state.step, report.total_g, report.total_d, state.ada.p)
            if out_dir is not None:
                if config.snapshot_interval and state.step % config.snapshot_interval == 0:
                    save_checkpoint(
                        os.path.join(out_dir, f"checkpoint-{state.step:07d}.ckpt"), state)
                if config.grid_interval and state.step % config.grid_interval == 0:
                    gio.save_image_grid(
                        sample_grid_images(state),
                        os.path.join(out_dir, f"samples-{state.step:07d}.png"),
                        n_cols=4)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoint-final.ckpt"), state)
    finally:
        if writer is not None:
            writer.close()
    return state, history
