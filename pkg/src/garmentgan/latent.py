"""Latent-space geometry: centroids, ordinality, boundaries, inversion, mixing.

All operations act on immutable generator snapshots. Projection optimizes a
shared style code per target image (per-block codes optional) starting from
the mean style vector, tracking the best-seen state so its snapshot
trajectory is non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import spearmanr

from . import io as gio
from .conditions import ConditionSpec

CENTROIDS_KIND = "class-centroids"
BOUNDARY_KIND = "boundary-model"
PROJECTION_KIND = "projection-result"


@dataclass
class ClassCentroid:
    attribute: str
    value: int
    mu_w: torch.Tensor
    n_samples: int

    def __post_init__(self):
        self.mu_w = torch.as_tensor(self.mu_w, dtype=torch.float32).reshape(-1)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not torch.isfinite(self.mu_w).all():
            raise ValueError("centroid must be finite")

    @property
    def class_id(self) -> str:
        return f"{self.attribute}={self.value}"


def _condition_batch(cond: ConditionSpec, attribute: str, value: int, n: int,
                     rng: torch.Generator) -> torch.Tensor:
    sizes = cond.block_sizes()
    if attribute not in sizes or not 0 <= value < sizes[attribute]:
        raise ValueError(f"invalid class {attribute}={value} for this model")
    kwargs = {attribute: torch.full((n,), value, dtype=torch.int64)}
    for name, _, size in cond.blocks():
        if name != attribute:
            kwargs[name] = torch.randint(0, size, (n,), generator=rng)
    if cond.d_u:
        kwargs["c_u"] = torch.rand(n, cond.d_u, generator=rng) * 2 - 1
    return cond.make(batch_size=n, **kwargs)


def mean_class_vector(generator, attribute: str, value: int, n: int,
                      seed: int, batch_size: int = 512) -> ClassCentroid:
    """Average style code of ``n`` random latents conditioned on one class."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cond = generator.cond
    rng = torch.Generator().manual_seed(seed)
    total = torch.zeros(generator.cfg.w_dim, dtype=torch.float64)
    with torch.no_grad():
        done = 0
        while done < n:
            take = min(batch_size, n - done)
            z = torch.randn(take, generator.cfg.latent_dim, generator=rng)
            c = _condition_batch(cond, attribute, value, take, rng)
            total += generator.map_latent(z, c).double().sum(dim=0)
            done += take
    return ClassCentroid(attribute=attribute, value=value,
                         mu_w=(total / n).float(), n_samples=n)


def class_distance_matrix(centroids) -> np.ndarray:
    if len(centroids) < 2:
        raise ValueError("need at least 2 centroids")
    dims = {c.mu_w.numel() for c in centroids}
    if len(dims) != 1:
        raise ValueError("centroid dimensions differ")
    stack = torch.stack([c.mu_w for c in centroids]).double()
    return torch.cdist(stack, stack).numpy()


def ordinality_score(matrix, ordinal_class_order) -> float:
    """Mean Spearman correlation, per anchor, of |level gap| vs. distance.

    Each anchor is compared against the classes after it in the declared
    order (the upper-triangle rows of the distance table); anchors with fewer
    than two successors carry no rank information and are skipped.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    order = list(ordinal_class_order)
    if len(order) < 3:
        raise ValueError("ordinality needs at least 3 ordered classes")
    rhos = []
    for i in range(len(order) - 2):
        gaps = np.arange(1, len(order) - i)
        dists = np.array([matrix[order[i], order[j]]
                          for j in range(i + 1, len(order))])
        rho = spearmanr(gaps, dists).statistic
        if np.isnan(rho):  # constant distances: no order information
            rho = 0.0
        rhos.append(float(rho))
    return float(np.mean(rhos))


# ---------------------------------------------------------------------------
# Linear boundaries
# ---------------------------------------------------------------------------


@dataclass
class BoundaryModel:
    normal: np.ndarray
    bias: float
    attribute: str = ""
    train_accuracy: float = 0.0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(-1)
        if np.linalg.norm(self.normal) == 0:
            raise ValueError("boundary normal must be nonzero")


def fit_linear_boundary(points, labels, reg_c: float = 1.0,
                        iterations: int = 2000, attribute: str = "") -> BoundaryModel:
    """Soft-margin hinge-loss linear classifier by full-batch subgradient.

    Deterministic Pegasos-style schedule on bias-augmented inputs; labels are
    any two distinct values, mapped to +/-1 in sorted order.
    """
    x = np.asarray(
        [p.numpy() if torch.is_tensor(p) else p for p in points], dtype=np.float64)
    raw = np.asarray(labels)
    classes = np.unique(raw)
    if classes.size != 2:
        raise ValueError(f"need exactly 2 label values, got {classes.size}")
    if reg_c <= 0:
        raise ValueError("reg_c must be > 0")
    y = np.where(raw == classes[1], 1.0, -1.0)

    xa = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    n = xa.shape[0]
    lam = 1.0 / (reg_c * n)
    w = np.zeros(xa.shape[1])
    for t in range(1, iterations + 1):
        viol = y * (xa @ w) < 1.0
        grad = lam * w - (y[viol, None] * xa[viol]).sum(axis=0) / n
        w -= grad / (lam * t)

    normal, bias = w[:-1], float(w[-1])
    if np.linalg.norm(normal) == 0:  # degenerate data, e.g. all points equal
        normal = np.full(x.shape[1], 1e-12)
    predictions = np.where(x @ normal + bias >= 0, 1.0, -1.0)
    return BoundaryModel(normal=normal, bias=bias, attribute=attribute,
                         train_accuracy=float((predictions == y).mean()))


def boundary_distance(w, model: BoundaryModel) -> float:
    w = np.asarray(w.numpy() if torch.is_tensor(w) else w, dtype=np.float64).reshape(-1)
    return float((w @ model.normal + model.bias) / np.linalg.norm(model.normal))


def nearest_neighbors(query, candidates, k: int):
    """Ascending euclidean distances among (id, vector) pairs; ties by id."""
    if not 1 <= k <= len(candidates):
        raise ValueError(f"k={k} outside 1..{len(candidates)}")
    q = np.asarray(query.numpy() if torch.is_tensor(query) else query,
                   dtype=np.float64).reshape(-1)
    scored = []
    for ident, vec in candidates:
        v = np.asarray(vec.numpy() if torch.is_tensor(vec) else vec,
                       dtype=np.float64).reshape(-1)
        scored.append((float(np.linalg.norm(v - q)), ident))
    scored.sort(key=lambda pair: (pair[0], str(pair[1])))
    return [(ident, dist) for dist, ident in scored[:k]]


# ---------------------------------------------------------------------------
# Projection (GAN inversion) and style mixing
# ---------------------------------------------------------------------------


@dataclass
class ProjectionConfig:
    steps: int = 300
    learning_rate: float = 0.05
    pixel_weight: float = 1.0
    per_block: bool = False
    w_avg_samples: int = 10000
    seed: int = 0


@dataclass
class ProjectionResult:
    w_opt: torch.Tensor           # (B, w_dim) or (B, n_blocks, w_dim)
    trajectory: list              # (step, perceptual, pixel) batch means
    reconstruction: torch.Tensor  # (B, 3, H, W)
    pixel_l2_initial: np.ndarray  # per image
    pixel_l2_final: np.ndarray
    per_block: bool = False

    def __post_init__(self):
        steps = [entry[0] for entry in self.trajectory]
        if steps != sorted(steps):
            raise ValueError("trajectory steps must be increasing")


def mean_style_vector(generator, n: int = 10000, seed: int = 0,
                      batch_size: int = 512) -> torch.Tensor:
    """Mean w over random latents and conditions (the projection origin)."""
    cond = generator.cond
    rng = torch.Generator().manual_seed(seed)
    total = torch.zeros(generator.cfg.w_dim, dtype=torch.float64)
    with torch.no_grad():
        done = 0
        while done < n:
            take = min(batch_size, n - done)
            z = torch.randn(take, generator.cfg.latent_dim, generator=rng)
            c = cond.sample(take, rng)
            total += generator.map_latent(z, c).double().sum(dim=0)
            done += take
    return (total / n).float()


def _synthesize_styles(generator, w: torch.Tensor) -> torch.Tensor:
    if w.ndim == 3:
        return generator.synthesize(list(w.unbind(dim=1)))
    return generator.synthesize(w)


def project_image(generator, targets: torch.Tensor, feature_extractor,
                  cfg: ProjectionConfig = None,
                  w_init: torch.Tensor = None) -> ProjectionResult:
    """Optimize style codes so the generator reproduces ``targets``.

    ``targets`` is (B, 3, H, W) in [-1, 1]; ``feature_extractor`` maps image
    batches to feature rows (the eval-classifier trunk in this repo).
    Snapshots are taken at 0/25/50/100% of steps and record the best state
    seen so far.
    """
    cfg = cfg or ProjectionConfig()
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    targets = torch.as_tensor(targets, dtype=torch.float32)
    if targets.ndim == 3:
        targets = targets.unsqueeze(0)
    if targets.shape[-1] != generator.cfg.resolution:
        raise ValueError("target resolution does not match the generator")
    n = targets.shape[0]

    for p in generator.parameters():
        p.requires_grad_(False)

    if w_init is None:
        w_init = mean_style_vector(generator, cfg.w_avg_samples, cfg.seed)
    w_init = torch.as_tensor(w_init, dtype=torch.float32)
    if w_init.ndim == 1:
        w_init = w_init.unsqueeze(0).expand(n, -1)
    if cfg.per_block and w_init.ndim == 2:
        w_init = w_init.unsqueeze(1).expand(n, generator.n_blocks, -1)
    w = w_init.detach().clone().requires_grad_(True)

    feature_fn = (feature_extractor.features
                  if hasattr(feature_extractor, "features") else feature_extractor)
    with torch.no_grad():
        target_feats = feature_fn(targets).detach()

    opt = torch.optim.Adam([w], lr=cfg.learning_rate)
    snap_steps = sorted({int(round(f * cfg.steps)) for f in (0.0, 0.25, 0.5, 1.0)})

    def evaluate(w_now):
        images = _synthesize_styles(generator, w_now)
        pixel_per_image = (images - targets).flatten(1).square().mean(dim=1)
        perceptual = (feature_fn(images) - target_feats).square().mean(dim=1)
        return images, perceptual, pixel_per_image

    best = {"loss": None, "w": w.detach().clone(), "perceptual": None, "pixel": None,
            "images": None}
    trajectory = []

    def maybe_snapshot(step):
        if step in snap_steps:
            trajectory.append((step, float(best["perceptual"].mean()),
                               float(best["pixel"].mean())))

    for step in range(cfg.steps + 1):
        images, perceptual, pixel = evaluate(w)
        total = (perceptual + cfg.pixel_weight * pixel).mean()
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite projection loss at step {step}")
        if best["loss"] is None or float(total) < best["loss"]:
            best.update(loss=float(total), w=w.detach().clone(),
                        perceptual=perceptual.detach(), pixel=pixel.detach(),
                        images=images.detach())
        maybe_snapshot(step)
        if step == cfg.steps:
            break
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

    with torch.no_grad():
        init_pixel = (_synthesize_styles(generator, w_init) - targets) \
            .flatten(1).square().mean(dim=1)
    pixel_l2_initial = np.sqrt(init_pixel.numpy() * targets[0].numel())
    pixel_l2_final = np.sqrt(best["pixel"].numpy() * targets[0].numel())
    return ProjectionResult(
        w_opt=best["w"], trajectory=trajectory, reconstruction=best["images"],
        pixel_l2_initial=pixel_l2_initial, pixel_l2_final=pixel_l2_final,
        per_block=cfg.per_block)


def style_mix(w_src: torch.Tensor, w_tgt: torch.Tensor, block_indices,
              n_blocks: int):
    """Per-block style list: w_tgt at the given blocks, w_src elsewhere."""
    indices = set(int(i) for i in block_indices)
    for i in indices:
        if not 0 <= i < n_blocks:
            raise ValueError(f"block index {i} outside 0..{n_blocks - 1}")
    return [w_tgt if i in indices else w_src for i in range(n_blocks)]


def coarse_blocks(n_blocks: int):
    """Default hand-picked mixing layers: the coarsest half (geometry)."""
    return tuple(range((n_blocks + 1) // 2))


def recondition(w_projected: torch.Tensor, target_class, block_indices,
                generator, centroids) -> torch.Tensor:
    """Mix the projected code with the target-class centroid and synthesize."""
    key = target_class if isinstance(target_class, str) \
        else f"{target_class[0]}={target_class[1]}"
    lookup = {c.class_id: c for c in centroids}
    if key not in lookup:
        raise KeyError(f"no centroid for class {key}")
    w = w_projected if w_projected.ndim == 2 else w_projected.unsqueeze(0)
    mu = lookup[key].mu_w.unsqueeze(0).expand_as(w)
    styles = style_mix(w, mu, block_indices, generator.n_blocks)
    with torch.no_grad():
        return generator.synthesize(styles)


# ---------------------------------------------------------------------------
# Serialization (same container family as checkpoints)
# ---------------------------------------------------------------------------


def save_centroids(path: str, centroids):
    gio.save_container(path, {
        "centroids": [{"attribute": c.attribute, "value": c.value,
                       "mu_w": c.mu_w, "n_samples": c.n_samples}
                      for c in centroids],
    }, kind=CENTROIDS_KIND)


def load_centroids(path: str):
    payload = gio.load_container(path, expected_kind=CENTROIDS_KIND)
    return [ClassCentroid(**rec) for rec in payload["centroids"]]


def save_boundary(path: str, model: BoundaryModel):
    gio.save_container(path, {
        "normal": torch.as_tensor(model.normal),
        "bias": model.bias,
        "attribute": model.attribute,
        "train_accuracy": model.train_accuracy,
    }, kind=BOUNDARY_KIND)


def load_boundary(path: str) -> BoundaryModel:
    payload = gio.load_container(path, expected_kind=BOUNDARY_KIND)
    return BoundaryModel(normal=payload["normal"].numpy(), bias=payload["bias"],
                         attribute=payload["attribute"],
                         train_accuracy=payload["train_accuracy"])


def save_projection(path: str, result: ProjectionResult):
    gio.save_container(path, {
        "w_opt": result.w_opt,
        "trajectory": [(int(s), float(p), float(x)) for s, p, x in result.trajectory],
        "reconstruction": result.reconstruction,
        "pixel_l2_initial": torch.as_tensor(result.pixel_l2_initial),
        "pixel_l2_final": torch.as_tensor(result.pixel_l2_final),
        "per_block": result.per_block,
    }, kind=PROJECTION_KIND)


def load_projection(path: str) -> ProjectionResult:
    payload = gio.load_container(path, expected_kind=PROJECTION_KIND)
    return ProjectionResult(
        w_opt=payload["w_opt"],
        trajectory=[tuple(entry) for entry in payload["trajectory"]],
        reconstruction=payload["reconstruction"],
        pixel_l2_initial=payload["pixel_l2_initial"].numpy(),
        pixel_l2_final=payload["pixel_l2_final"].numpy(),
        per_block=payload["per_block"])
