"""Desk-scale experiment profiles and a reproducible artifact cache.

The acceptance suite (and anyone reproducing it) trains two desk models: a
supervised fit+shape run and a semi-supervised shape run. On a CUDA machine
the profile is 64px with conditional-accuracy thresholds 0.80/0.70; the CPU
fallback is 32px with thresholds 0.70/0.60. Artifacts are cached under
$GARMENTGAN_DESK_CACHE (default ./.desk_cache) keyed by resolution, so
repeated pytest runs re-use one training pass.

Pre-build everything with:  python3 -m garmentgan.desk --stage all
"""

from __future__ import annotations

import argparse
import logging
import os

import torch

from . import trainer as trn
from .evalnet import EvalNetConfig, load_classifier, save_classifier, train_eval_classifier
from .synthdata import DatasetManifest, build_synthetic_dataset, load_dataset

logger = logging.getLogger(__name__)

ENV_CACHE = "GARMENTGAN_DESK_CACHE"

PROFILES = {
    "gpu": {
        "resolution": 64,
        "channels": (256, 128, 64, 32, 16),
        "total_steps": 10000,
        "fit_threshold": 0.80,
        "shape_threshold": 0.70,
        "device": "cuda",
    },
    "cpu": {
        "resolution": 32,
        "channels": (128, 64, 32, 16),
        "total_steps": 10000,
        "fit_threshold": 0.70,
        "shape_threshold": 0.60,
        "device": "cpu",
    },
}

DATASET_SEED = 100
PER_CELL = 100
TRAIN_FRACTION = 0.9
SUPERVISED_SEED = 7
SEMISUP_SEED = 9
CLASSIFIER_SEED = 11


def active_profile() -> dict:
    return PROFILES["gpu" if torch.cuda.is_available() else "cpu"]


def cache_root() -> str:
    return os.environ.get(ENV_CACHE, os.path.join(os.getcwd(), ".desk_cache"))


def paths(profile: dict = None) -> dict:
    profile = profile or active_profile()
    root = cache_root()
    res = profile["resolution"]
    return {
        "root": root,
        "dataset": os.path.join(root, f"data{res}"),
        "classifier": os.path.join(root, f"classifier{res}.ggc"),
        "supervised": os.path.join(root, f"supervised{res}"),
        "semisup": os.path.join(root, f"semisup{res}"),
    }


def supervised_config(profile: dict = None) -> trn.TrainConfig:
    profile = profile or active_profile()
    return trn.TrainConfig(
        mode="supervised", condition_on="fit+shape",
        resolution=profile["resolution"], channels=profile["channels"],
        total_steps=profile["total_steps"], batch_size=32,
        seed=SUPERVISED_SEED, device=profile["device"],
        snapshot_interval=2500, grid_interval=2500)


def semisupervised_config(profile: dict = None) -> trn.TrainConfig:
    profile = profile or active_profile()
    # ADA off here: brightness/contrast jitter directly fights the encoder's
    # reconstruction of appearance codes, and the desk set is large enough.
    return trn.TrainConfig(
        mode="semi_supervised", condition_on="shape", d_u=2, mapping_depth=8,
        resolution=profile["resolution"], channels=profile["channels"],
        total_steps=profile["total_steps"], batch_size=32,
        seed=SEMISUP_SEED, device=profile["device"],
        ada=trn.AdaConfig(enabled=False),
        snapshot_interval=2500, grid_interval=2500)


def ensure_dataset(profile: dict = None) -> str:
    profile = profile or active_profile()
    where = paths(profile)["dataset"]
    if not os.path.exists(os.path.join(where, "manifest.jsonl")):
        logger.info("rendering desk dataset at %dpx -> %s", profile["resolution"], where)
        build_synthetic_dataset(PER_CELL, profile["resolution"], DATASET_SEED, where)
    return where


def load_desk_dataset(profile: dict = None):
    manifest = DatasetManifest.load(ensure_dataset(profile))
    return load_dataset(manifest, TRAIN_FRACTION)


def ensure_classifier(profile: dict = None):
    profile = profile or active_profile()
    path = paths(profile)["classifier"]
    if not os.path.exists(path):
        train_set, _ = load_desk_dataset(profile)
        logger.info("training eval classifier at %dpx", profile["resolution"])
        cfg = EvalNetConfig(resolution=profile["resolution"], seed=CLASSIFIER_SEED,
                            device=profile["device"])
        model, report = train_eval_classifier(train_set, cfg)
        logger.info("classifier holdout accuracy: %s", report)
        save_classifier(path, model, report)
    return load_classifier(path)


def _ensure_run(run_dir: str, config: trn.TrainConfig, profile: dict) -> str:
    final = os.path.join(run_dir, "checkpoint-final.ckpt")
    if not os.path.exists(final):
        train_set, _ = load_desk_dataset(profile)
        logger.info("training %s run (%d steps) -> %s",
                    config.mode, config.total_steps, run_dir)
        trn.fit(train_set, config, out_dir=run_dir)
    return final


def ensure_supervised(profile: dict = None) -> str:
    profile = profile or active_profile()
    return _ensure_run(paths(profile)["supervised"], supervised_config(profile), profile)


def ensure_semisupervised(profile: dict = None) -> str:
    profile = profile or active_profile()
    return _ensure_run(paths(profile)["semisup"], semisupervised_config(profile), profile)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--stage", default="all",
                        choices=("dataset", "classifier", "supervised",
                                 "semisup", "all"))
    args = parser.parse_args(argv)
    stages = {
        "dataset": [ensure_dataset],
        "classifier": [ensure_classifier],
        "supervised": [ensure_supervised],
        "semisup": [ensure_semisupervised],
        "all": [ensure_dataset, ensure_classifier, ensure_supervised,
                ensure_semisupervised],
    }[args.stage]
    for stage in stages:
        stage()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
