"""Operator command suite: dataset/train/generate/project/analyze/evaluate.

Every command writes into a fresh timestamped run directory under the output
root (flag --out or $GARMENTGAN_OUT_ROOT) with the resolved configuration
copied in. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import itertools
import json
import os
import sys

import numpy as np
import torch

from . import io as gio
from . import latent as lat
from . import metrics as met
from . import trainer as trn
from . import evalnet
from .augment import AugmentationConfig
from .objectives import LossWeights
from .synthdata import (FIT_LEVELS, SHAPE_CLASSES, DatasetManifest,
                        build_synthetic_dataset, load_dataset, load_png)

ENV_OUT_ROOT = "GARMENTGAN_OUT_ROOT"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config file (sectioned key/value INI)
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA = {
    "train": {
        "mode": str, "condition_on": str, "resolution": int, "latent_dim": int,
        "w_dim": int, "mapping_depth": int, "channels": "ints", "d_u": int,
        "feature_dim": int, "learning_rate": float, "batch_size": int,
        "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
        "total_steps": int, "seed": int, "ema_decay": float,
        "mapping_lr_mul": float, "device": str, "snapshot_interval": int,
        "grid_interval": int,
    },
    "weights": {"gamma": float, "beta": float, "r1_gamma": float},
    "ada": {"enabled": bool, "target_rt": float, "adjust_step": float,
            "interval": int},
    "augmentation": {"families": "strs", "max_scale": float,
                     "max_rotate_deg": float, "max_brightness": float,
                     "max_contrast": float},
    "dataset": {"manifest": str, "train_fraction": float},
}


def _convert(value: str, kind):
    if kind is bool:
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean {value!r}")
    if kind == "ints":
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    if kind == "strs":
        return tuple(v for v in value.replace(" ", "").split(",") if v)
    return kind(value)


def parse_run_config(path: str) -> dict:
    """INI file -> {'train': TrainConfig kwargs, 'dataset': {...}}."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config file {path}")
    out = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        schema = _CONFIG_SCHEMA[section]
        values = {}
        for key, raw in parser[section].items():
            if key not in schema:
                raise UsageError(f"unknown config key {key!r} in [{section}]")
            values[key] = _convert(raw, schema[key])
        out[section] = values
    return out


def build_train_config(parsed: dict) -> trn.TrainConfig:
    kwargs = dict(parsed.get("train", {}))
    if "weights" in parsed:
        kwargs["weights"] = LossWeights(**parsed["weights"])
    if "ada" in parsed:
        kwargs["ada"] = trn.AdaConfig(**parsed["ada"])
    if "augmentation" in parsed:
        kwargs["augmentation"] = AugmentationConfig(**parsed["augmentation"])
    return trn.TrainConfig(**kwargs)


def write_resolved_config(run_dir: str, config: trn.TrainConfig, dataset: dict):
    parser = configparser.ConfigParser()
    data = config.to_dict()
    sections = {
        "train": {k: data[k] for k in _CONFIG_SCHEMA["train"] if k in data},
        "weights": data["weights"],
        "ada": data["ada"],
        "augmentation": data["augmentation"],
        "dataset": dataset,
    }
    for name, values in sections.items():
        parser[name] = {
            key: ",".join(str(v) for v in value) if isinstance(value, (tuple, list))
            else str(value)
            for key, value in values.items()}
    with open(os.path.join(run_dir, "config.ini"), "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Condition specs:  fit=3,shape=1,cu=0.5:-0.2   (* sweeps all values)
# ---------------------------------------------------------------------------

_CU_SWEEP = np.linspace(-1.0, 1.0, 5)


def parse_condition_spec(spec: str, cond) -> list:
    """Expand a condition spec string into concrete condition dicts."""
    sizes = cond.block_sizes()
    fields = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "=" not in part:
            raise UsageError(f"bad condition fragment {part!r}")
        key, value = part.split("=", 1)
        key = key.strip().lower()
        if key not in ("fit", "shape", "cu"):
            raise UsageError(f"unknown condition attribute {key!r}")
        fields[key] = value.strip()

    axes = []
    for name in ("fit", "shape"):
        if name not in sizes:
            if name in fields:
                raise UsageError(f"model is not conditioned on {name}")
            continue
        value = fields.get(name, "*")
        if value == "*":
            axes.append([(name, v) for v in range(sizes[name])])
        else:
            v = int(value)
            if not 0 <= v < sizes[name]:
                raise UsageError(f"{name}={v} outside 0..{sizes[name] - 1}")
            axes.append([(name, v)])
    if cond.d_u:
        value = fields.get("cu", "0" + ":0" * (cond.d_u - 1))
        if value == "*":
            axes.append([("cu", tuple([float(x)] + [0.0] * (cond.d_u - 1)))
                         for x in _CU_SWEEP])
        else:
            parts = [float(x) for x in value.split(":")]
            if len(parts) != cond.d_u:
                raise UsageError(f"cu needs {cond.d_u} colon-separated values")
            axes.append([("cu", tuple(parts))])
    elif "cu" in fields:
        raise UsageError("model has no continuous code")
    return [dict(combo) for combo in itertools.product(*axes)]


def _condition_tensor(cond, combos, repeat):
    kwargs = {}
    if "fit" in cond.block_sizes():
        kwargs["fit"] = torch.tensor([c["fit"] for c in combos for _ in range(repeat)])
    if "shape" in cond.block_sizes():
        kwargs["shape"] = torch.tensor([c["shape"] for c in combos for _ in range(repeat)])
    if cond.d_u:
        kwargs["c_u"] = torch.tensor([list(c["cu"]) for c in combos for _ in range(repeat)],
                                     dtype=torch.float32)
    return cond.make(batch_size=len(combos) * repeat, **kwargs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _make_run_dir(out_root: str, command: str, run_dir: str = None) -> str:
    if run_dir is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        run_dir = os.path.join(out_root, f"{command}-{stamp}")
    os.makedirs(run_dir, exist_ok=False)
    return run_dir


def _load_checkpoint(path: str) -> trn.TrainState:
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    return trn.load_checkpoint(path)


def _load_classifier(path: str):
    if not os.path.exists(path):
        raise UsageError(f"classifier not found: {path}")
    return evalnet.load_classifier(path)


def cmd_dataset(args) -> int:
    if args.action == "synth":
        if args.cell_table:
            with open(args.cell_table) as fh:
                table = np.asarray(json.load(fh), dtype=np.int64)
        else:
            table = args.per_cell
        manifest = build_synthetic_dataset(table, args.res, args.seed, args.out)
        print(f"wrote {len(manifest)} images to {args.out}")
        return 0
    manifest = DatasetManifest.load(args.manifest)
    counts = manifest.class_counts
    print(f"manifest: {args.manifest}")
    print(f"resolution: {manifest.resolution}  entries: {len(manifest)}")
    header = "shape\\fit " + " ".join(f"{f:>6d}" for f in range(FIT_LEVELS))
    print(header)
    for s in range(SHAPE_CLASSES):
        print(f"{s:>9d} " + " ".join(f"{counts[f, s]:>6d}" for f in range(FIT_LEVELS)))
    return 0


def cmd_train(args) -> int:
    parsed = parse_run_config(args.config)
    config = build_train_config(parsed)
    dataset_cfg = parsed.get("dataset", {})
    manifest_dir = args.data or dataset_cfg.get("manifest")
    if not manifest_dir:
        raise UsageError("no dataset: pass --data or set [dataset] manifest")
    fraction = dataset_cfg.get("train_fraction", 0.9)

    run_dir = _make_run_dir(args.out, "train", args.run_dir)
    write_resolved_config(run_dir, config,
                          {"manifest": manifest_dir, "train_fraction": fraction})
    train_set, _ = load_dataset(DatasetManifest.load(manifest_dir), fraction)
    state, _ = trn.fit(train_set, config, out_dir=run_dir)
    print(f"trained {state.step} steps -> {run_dir}")
    return 0


def cmd_generate(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    cond = state.cond
    combos = parse_condition_spec(args.condition, cond)
    run_dir = _make_run_dir(args.out, "generate", args.run_dir)

    rng = torch.Generator().manual_seed(args.seed)
    z = torch.randn(len(combos) * args.count, state.config.latent_dim, generator=rng)
    c = _condition_tensor(cond, combos, args.count)
    generator = state.generator_ema if args.ema else state.generator
    with torch.no_grad():
        images = generator.generate(z, c)
    gio.save_image_grid(images, os.path.join(run_dir, "grid.png"), n_cols=args.count)
    with open(os.path.join(run_dir, "metadata.jsonl"), "w") as fh:
        for i, combo in enumerate(c_ for c_ in combos for _ in range(args.count)):
            record = {"index": i, "seed": args.seed, **{
                k: (list(v) if isinstance(v, tuple) else v) for k, v in combo.items()}}
            fh.write(json.dumps(record) + "\n")
    print(f"wrote {images.shape[0]} samples -> {run_dir}")
    return 0


def cmd_project(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    classifier = _load_classifier(args.classifier)
    if not os.path.exists(args.image):
        raise UsageError(f"image not found: {args.image}")
    target = torch.from_numpy(load_png(args.image)).unsqueeze(0)
    if target.shape[-1] != state.config.resolution:
        raise UsageError(
            f"image is {target.shape[-1]}px, checkpoint expects {state.config.resolution}px")

    run_dir = _make_run_dir(args.out, "project", args.run_dir)
    cfg = lat.ProjectionConfig(steps=args.steps, learning_rate=args.lr,
                               per_block=args.per_block, seed=args.seed)
    result = lat.project_image(state.generator_ema, target, classifier, cfg)
    lat.save_projection(os.path.join(run_dir, "projection.ggc"), result)
    gio.save_image_grid(torch.cat([target, result.reconstruction]),
                        os.path.join(run_dir, "target_vs_recon.png"), n_cols=2)
    with open(os.path.join(run_dir, "trajectory.csv"), "w") as fh:
        fh.write("step,perceptual,pixel\n")
        for step, perc, pix in result.trajectory:
            fh.write(f"{step},{perc!r},{pix!r}\n")
    print(f"projected -> {run_dir} (final pixel L2 {result.pixel_l2_final.mean():.4f})")
    return 0


def _attribute_values(attribute: str) -> int:
    return {"fit": FIT_LEVELS, "shape": SHAPE_CLASSES}[attribute]


def cmd_analyze(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    generator = state.generator_ema
    cond = state.cond
    run_dir = _make_run_dir(args.out, f"analyze-{args.action}", args.run_dir)

    if args.action == "centroids":
        centroids = []
        for name, _, size in cond.blocks():
            for value in range(size):
                centroids.append(lat.mean_class_vector(
                    generator, name, value, n=args.samples, seed=args.seed))
        lat.save_centroids(os.path.join(run_dir, "centroids.ggc"), centroids)
        with torch.no_grad():
            images = generator.synthesize(
                torch.stack([c.mu_w for c in centroids]))
        gio.save_image_grid(images, os.path.join(run_dir, "centroid_images.png"))
        print(f"wrote {len(centroids)} centroids -> {run_dir}")
        return 0

    if args.action in ("distances", "ordinality"):
        centroids = lat.load_centroids(args.centroids)
        chosen = [c for c in centroids if c.attribute == args.attribute]
        chosen.sort(key=lambda c: c.value)
        matrix = lat.class_distance_matrix(chosen)
        labels = [c.class_id for c in chosen]
        gio.write_matrix_csv(os.path.join(run_dir, "distances.csv"), matrix,
                             row_labels=labels, col_labels=labels)
        if args.action == "ordinality":
            score = lat.ordinality_score(matrix, list(range(len(chosen))))
            with open(os.path.join(run_dir, "ordinality.json"), "w") as fh:
                json.dump({"attribute": args.attribute, "score": score}, fh)
            print(f"ordinality({args.attribute}) = {score:.4f} -> {run_dir}")
        else:
            print(f"distance matrix -> {run_dir}")
        return 0

    if args.action == "boundary":
        payload = gio.load_container(args.projections)
        w = payload["w"]
        labels = payload["labels"].numpy()
        model = lat.fit_linear_boundary(list(w), labels, reg_c=args.reg_c,
                                        attribute=args.attribute)
        lat.save_boundary(os.path.join(run_dir, "boundary.ggc"), model)
        print(f"boundary train accuracy {model.train_accuracy:.3f} -> {run_dir}")
        return 0

    if args.action == "neighbors":
        payload = gio.load_container(args.projections)
        w = payload["w"]
        ids = payload["ids"]
        candidates = list(zip(ids, list(w)))
        query = dict(candidates)[args.query]
        ranked = lat.nearest_neighbors(query, candidates, k=args.k)
        with open(os.path.join(run_dir, "neighbors.csv"), "w") as fh:
            fh.write("id,distance\n")
            for ident, dist in ranked:
                fh.write(f"{ident},{dist!r}\n")
        print(f"top-{args.k} neighbors of {args.query} -> {run_dir}")
        return 0

    if args.action == "stylemix":
        centroids = lat.load_centroids(args.centroids)
        projection = lat.load_projection(args.projection)
        w = projection.w_opt
        if w.ndim == 3:
            raise UsageError("stylemix expects a shared-w projection")
        blocks = (tuple(int(b) for b in args.blocks.split(","))
                  if args.blocks else lat.coarse_blocks(generator.n_blocks))
        attribute = args.attribute
        rows = [projection.reconstruction]
        for value in range(_attribute_values(attribute)):
            rows.append(lat.recondition(w, (attribute, value), blocks,
                                        generator, centroids))
        gio.save_image_grid(torch.cat(rows), os.path.join(run_dir, "stylemix.png"),
                            n_cols=w.shape[0])
        print(f"style-mix sweep over {attribute} -> {run_dir}")
        return 0

    raise UsageError(f"unknown analyze action {args.action!r}")


def cmd_evaluate(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    classifier = _load_classifier(args.classifier)
    run_dir = _make_run_dir(args.out, "evaluate", args.run_dir)

    train_set, _ = load_dataset(DatasetManifest.load(args.data), args.train_fraction)
    rng = torch.Generator().manual_seed(args.seed)
    fakes = []
    with torch.no_grad():
        remaining = args.samples
        while remaining > 0:
            take = min(64, remaining)
            z = torch.randn(take, state.config.latent_dim, generator=rng)
            c = state.cond.sample(take, rng, label_probs=state.label_probs or None)
            fakes.append(state.generator_ema.generate(z, c))
            remaining -= take
    fakes = torch.cat(fakes)

    report = met.compute_metrics_report(train_set.images, fakes, classifier, k=args.k)
    with open(os.path.join(run_dir, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    log_path = os.path.join(args.out, "metrics_log.csv")
    new_log = not os.path.exists(log_path)
    with open(log_path, "a") as fh:
        if new_log:
            fh.write("checkpoint_step,is_mean,fid,precision,recall,n_real,n_fake\n")
        fh.write(f"{state.step},{report.is_mean!r},{report.fid!r},"
                 f"{report.precision!r},{report.recall!r},"
                 f"{report.n_real},{report.n_fake}\n")

    sampler = evalnet.make_generator_sampler(state.generator_ema, state.cond,
                                             label_probs=state.label_probs)
    accuracy = evalnet.conditional_accuracy(sampler, classifier,
                                            n_per_class=args.per_class,
                                            seed=args.seed)
    summary = {}
    for attribute, entry in accuracy.items():
        matrix = entry["confusion"]
        summary[attribute] = entry["accuracy"]
        gio.write_matrix_csv(
            os.path.join(run_dir, f"confusion_{attribute}.csv"), matrix.counts)
        _save_confusion_heatmap(
            matrix.counts, os.path.join(run_dir, f"confusion_{attribute}.png"),
            title=f"target vs predicted {attribute}")
    with open(os.path.join(run_dir, "conditional_accuracy.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"IS {report.is_mean:.3f}  FID {report.fid:.3f}  "
          f"precision {report.precision:.3f}  recall {report.recall:.3f}")
    for attribute, value in summary.items():
        print(f"conditional accuracy ({attribute}): {value:.3f}")
    print(f"reports -> {run_dir}")
    return 0


def _save_confusion_heatmap(counts, path: str, title: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(counts, cmap="viridis")
    ax.set_xlabel("predicted")
    ax.set_ylabel("target")
    ax.set_title(title)
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_reference(args) -> int:
    parser = build_parser()
    print(parser.format_help())
    subactions = [a for a in parser._actions
                  if isinstance(a, argparse._SubParsersAction)]
    for action in subactions:
        for name, sub in action.choices.items():
            print(f"\n## {name}\n")
            print(sub.format_help())
    print("\n## config file keys (INI)\n")
    for section, schema in _CONFIG_SCHEMA.items():
        print(f"[{section}]")
        for key, kind in schema.items():
            kind_name = kind if isinstance(kind, str) else kind.__name__
            print(f"  {key}: {kind_name}")
    print(f"\nenvironment: {ENV_OUT_ROOT} sets the default output root")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_out(parser):
    parser.add_argument("--out", default=os.environ.get(ENV_OUT_ROOT, "runs"),
                        help="output root (default $GARMENTGAN_OUT_ROOT or ./runs)")
    parser.add_argument("--run-dir", default=None,
                        help="exact run directory (default: timestamped)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="garmentgan",
                     description="fit/shape-conditioned garment GAN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="build or inspect datasets")
    dsub = p.add_subparsers(dest="action", required=True)
    synth = dsub.add_parser("synth", help="render a synthetic dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--per-cell", type=int, default=100)
    synth.add_argument("--cell-table", default=None,
                       help="JSON file with a fit x shape count table")
    synth.add_argument("--res", type=int, default=64)
    synth.add_argument("--seed", type=int, default=0)
    inspect = dsub.add_parser("inspect", help="print manifest statistics")
    inspect.add_argument("--manifest", required=True)

    p = sub.add_parser("train", help="train a model from an INI config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="dataset dir (overrides config)")
    _add_out(p)

    p = sub.add_parser("generate", help="sample a conditioned image grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", default="",
                   help="e.g. fit=3,shape=1,cu=0.5:-0.2 (* sweeps)")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ema", dest="ema", action="store_false")
    _add_out(p)

    p = sub.add_parser("project", help="invert one image into W")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classifier", required=True,
                   help="eval-classifier container (perceptual features)")
    p.add_argument("--image", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--per-block", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)

    p = sub.add_parser("analyze", help="latent-space analyses")
    asub = p.add_subparsers(dest="action", required=True)
    for action in ("centroids", "distances", "ordinality", "boundary",
                   "neighbors", "stylemix"):
        ap = asub.add_parser(action)
        ap.add_argument("--checkpoint", required=True)
        _add_out(ap)
        if action == "centroids":
            ap.add_argument("--samples", type=int, default=10000)
            ap.add_argument("--seed", type=int, default=0)
        if action in ("distances", "ordinality", "stylemix"):
            ap.add_argument("--centroids", required=True)
            ap.add_argument("--attribute", default="fit", choices=("fit", "shape"))
        if action == "boundary":
            ap.add_argument("--projections", required=True,
                            help="container with per-image w and labels")
            ap.add_argument("--attribute", default="fit")
            ap.add_argument("--reg-c", type=float, default=1.0)
        if action == "neighbors":
            ap.add_argument("--projections", required=True)
            ap.add_argument("--query", required=True)
            ap.add_argument("-k", type=int, default=5)
        if action == "stylemix":
            ap.add_argument("--projection", required=True)
            ap.add_argument("--blocks", default=None,
                            help="comma-separated block indices (default coarse half)")

    p = sub.add_parser("evaluate", help="metrics + conditional accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("-k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)

    sub.add_parser("reference", help="print the full flag/config reference")
    return parser


_COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "generate": cmd_generate,
    "project": cmd_project,
    "analyze": cmd_analyze,
    "evaluate": cmd_evaluate,
    "reference": cmd_reference,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface as exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
