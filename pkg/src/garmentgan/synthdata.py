"""Procedural garment-silhouette dataset with a geometric ground-truth oracle.

Images follow a fixed canvas convention: white background, a gray vertical
"body" reference column of half-width ``resolution / 8`` centered
horizontally, and a chromatic garment polygon drawn over it. The garment's
half-width at the waist anchor row, divided by the body half-width, falls in
one of five disjoint ratio bands (the ordinal *fit* level), and its width
profile down the torso follows one of six template families (the categorical
*shape* class). Hue and vertical extent are free nuisance factors.

Rasterization is coverage-exact per row (the chromatic mass of a row equals
the true garment width), which is what lets the oracles recover fit and shape
with zero error on rendered images at any supported resolution.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

FIT_LEVELS = 5
SHAPE_CLASSES = 6

SHAPE_NAMES = ("straight", "flared", "tapered", "body_hugging", "cocoon", "fitted")
FIT_NAMES = ("skinny", "slim", "regular", "loose", "oversized")

# Waist-ratio band edges, in units of body half-width. Band f is
# [FIT_BAND_EDGES[f], FIT_BAND_EDGES[f+1]); bands are disjoint so fit is
# machine-measurable.
FIT_BAND_EDGES = (1.0, 1.15, 1.3, 1.5, 1.75, 2.2)

SUPPORTED_RESOLUTIONS = (32, 64, 128)

# Fraction of garment height above the waist anchor row.
_WAIST_FRAC = 0.3
_TOP_FRAC = 0.08
_MAX_EXTENT_FRAC = 0.85

_GARMENT_SATURATION = 0.75
_GARMENT_VALUE = 0.65
_BODY_GRAY = 0.2  # on [0, 1]

# Minimum per-pixel chroma (max-min channel, [0,1] scale) for a pixel to
# count as garment when locating garment rows.
_CHROMA_THRESHOLD = 0.25


class UnmeasurableImageError(ValueError):
    """Raised when an oracle finds no garment on the canvas."""


@dataclass(frozen=True)
class GarmentParams:
    """Generative factors of one silhouette."""

    fit_level: int
    shape_class: int
    hue: float
    length: float
    seed: int

    def __post_init__(self):
        if not 0 <= self.fit_level < FIT_LEVELS:
            raise ValueError(f"fit_level {self.fit_level} outside 0..{FIT_LEVELS - 1}")
        if not 0 <= self.shape_class < SHAPE_CLASSES:
            raise ValueError(f"shape_class {self.shape_class} outside 0..{SHAPE_CLASSES - 1}")
        if not 0.0 <= self.hue <= 1.0:
            raise ValueError(f"hue {self.hue} outside [0, 1]")
        if not 0.4 <= self.length <= 1.0:
            raise ValueError(f"length {self.length} outside [0.4, 1.0]")


@dataclass
class LabeledImage:
    image: np.ndarray  # C x H x W, float32 in [-1, 1]
    fit_level: int
    shape_class: int
    id: str


def shape_profile(shape_class: int, u):
    """Half-width multiplier of shape template at offset ``u`` from the waist.

    ``u`` is (row - waist_row) / garment_rows, roughly in [-0.3, 0.7]; every
    template equals 1 at u=0 so the waist width is owned by the fit level.
    """
    u = np.asarray(u, dtype=np.float64)
    if shape_class == 0:  # straight: constant
        return np.ones_like(u)
    if shape_class == 1:  # flared: linearly widening
        return 1.0 + 0.8 * u
    if shape_class == 2:  # tapered: linearly narrowing
        return 1.0 - 0.55 * u
    if shape_class == 3:  # body-hugging: pinched at the waist
        return 1.0 + 0.8 * u * u
    if shape_class == 4:  # cocoon: barrel bulge below the waist
        return 1.0 + 0.9 * u * (0.7 - u)
    if shape_class == 5:  # fitted: straight bodice, flaring lower segment
        return 1.0 + 1.3 * np.maximum(0.0, u - 0.2)
    raise ValueError(f"shape_class {shape_class} outside 0..{SHAPE_CLASSES - 1}")


def body_half_width(resolution: int) -> float:
    return resolution / 8.0


def _waist_ratio(fit_level: int, seed: int) -> float:
    # Jitter inside the middle of the band keeps classes separated and the
    # oracle's band lookup away from the edges.
    lo, hi = FIT_BAND_EDGES[fit_level], FIT_BAND_EDGES[fit_level + 1]
    rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(0x9E3779B97F4A7C15))
    t = 0.35 + 0.3 * rng.random()
    return lo + t * (hi - lo)


def _garment_rows(resolution: int, length: float):
    top = int(round(_TOP_FRAC * resolution))
    n_rows = int(round(length * _MAX_EXTENT_FRAC * resolution))
    return top, n_rows


def _waist_row(top: int, n_rows: int) -> int:
    return top + int(round(_WAIST_FRAC * (n_rows - 1)))


def _coverage(resolution: int, center: float, half_width: float) -> np.ndarray:
    """Fraction of each pixel column covered by [center-hw, center+hw]."""
    x = np.arange(resolution, dtype=np.float64)
    left, right = center - half_width, center + half_width
    return np.clip(np.minimum(x + 1.0, right) - np.maximum(x, left), 0.0, 1.0)


def render_silhouette(params: GarmentParams, resolution: int) -> LabeledImage:
    """Render one silhouette; deterministic in (params, resolution)."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"resolution {resolution} not in {SUPPORTED_RESOLUTIONS}")

    canvas = np.ones((resolution, resolution, 3), dtype=np.float64)  # white, [0,1]
    center = resolution / 2.0
    body_hw = body_half_width(resolution)
    top, n_rows = _garment_rows(resolution, params.length)
    waist = _waist_row(top, n_rows)

    # Body column only where the garment does not occlude it; garment edges
    # must blend against pure white for the oracle's subpixel width recovery.
    body_cov = _coverage(resolution, center, body_hw)
    for row in range(resolution):
        if top <= row < top + n_rows:
            continue
        canvas[row] = canvas[row] - body_cov[:, None] * (1.0 - _BODY_GRAY)

    color = np.array(
        colorsys.hsv_to_rgb(params.hue % 1.0, _GARMENT_SATURATION, _GARMENT_VALUE)
    )
    waist_hw = _waist_ratio(params.fit_level, params.seed) * body_hw
    rows = np.arange(top, top + n_rows)
    u = (rows - waist) / float(n_rows)
    half_widths = waist_hw * shape_profile(params.shape_class, u)
    for row, hw in zip(rows, half_widths):
        cov = _coverage(resolution, center, hw)[:, None]
        canvas[row] = cov * color[None, :] + (1.0 - cov) * canvas[row]

    image = (canvas.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)
    ident = (
        f"f{params.fit_level}s{params.shape_class}"
        f"_h{params.hue:.3f}_l{params.length:.3f}_x{params.seed:x}"
    )
    return LabeledImage(image=image, fit_level=params.fit_level,
                        shape_class=params.shape_class, id=ident)


def _to_unit_hwc(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3xHxW image, got shape {arr.shape}")
    return (arr.transpose(1, 2, 0) + 1.0) / 2.0


def garment_width_profile(image):
    """Measure per-row garment width by recovering subpixel coverage.

    Returns (rows, widths): the contiguous garment row indices and the
    chromatic-mass width (in pixels) of each. Raises UnmeasurableImageError
    when no chromatic pixel exists.
    """
    hwc = np.clip(_to_unit_hwc(image), 0.0, 1.0)
    chroma = hwc.max(axis=2) - hwc.min(axis=2)
    garment_rows = np.where((chroma > _CHROMA_THRESHOLD).any(axis=1))[0]
    if garment_rows.size == 0:
        raise UnmeasurableImageError("no garment pixels detected")
    top, bottom = garment_rows[0], garment_rows[-1]
    rows = np.arange(top, bottom + 1)

    widths = np.empty(rows.size, dtype=np.float64)
    for i, row in enumerate(rows):
        px = hwc[row]
        ref = px[np.argmax(chroma[row])]  # most-saturated pixel ~ pure color
        denom = 1.0 - ref.min()
        if denom <= 1e-6:
            widths[i] = 0.0
            continue
        alpha = np.clip((1.0 - px.min(axis=1)) / denom, 0.0, 1.0)
        widths[i] = alpha.sum()
    return rows, widths


def measure_waist_ratio(image) -> float:
    """Garment-to-body half-width ratio at the waist anchor row."""
    rows, widths = garment_width_profile(image)
    waist = _waist_row(int(rows[0]), rows.size)
    waist_width = widths[waist - rows[0]]
    if waist_width <= 0.0:
        raise UnmeasurableImageError("no garment mass at the waist row")
    resolution = np.asarray(image).shape[-1]
    return (waist_width / 2.0) / body_half_width(resolution)


def oracle_fit(image) -> int:
    """Fit band implied by the measured waist width ratio."""
    ratio = measure_waist_ratio(image)
    band = int(np.searchsorted(FIT_BAND_EDGES, ratio, side="right")) - 1
    return int(np.clip(band, 0, FIT_LEVELS - 1))


def oracle_shape(image) -> int:
    """Nearest width-profile template of the measured garment outline."""
    rows, widths = garment_width_profile(image)
    waist = _waist_row(int(rows[0]), rows.size)
    waist_width = widths[waist - rows[0]]
    if waist_width <= 0.0:
        raise UnmeasurableImageError("no garment mass at the waist row")
    u = (rows - waist) / float(rows.size)
    q = widths / waist_width
    residuals = [
        float(((q - shape_profile(k, u)) ** 2).sum()) for k in range(SHAPE_CLASSES)
    ]
    return int(np.argmin(residuals))


# ---------------------------------------------------------------------------
# Dataset construction, manifest IO, loading
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.jsonl"
HEADER_NAME = "manifest.header.json"


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)  # (path, fit, shape, id)
    resolution: int = 64
    class_counts: np.ndarray = None  # F x S
    root: str = "."

    def __post_init__(self):
        if self.class_counts is None:
            self.class_counts = np.zeros((FIT_LEVELS, SHAPE_CLASSES), dtype=np.int64)

    def __len__(self):
        return len(self.entries)

    def validate(self):
        counts = np.zeros((FIT_LEVELS, SHAPE_CLASSES), dtype=np.int64)
        for path, fit, shape, _ in self.entries:
            counts[fit, shape] += 1
        if not np.array_equal(counts, self.class_counts):
            raise ValueError("class_counts inconsistent with entries")

    def save(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
            for path, fit, shape, ident in self.entries:
                fh.write(json.dumps(
                    {"path": path, "fit": int(fit), "shape": int(shape), "id": ident}
                ) + "\n")
        with open(os.path.join(out_dir, HEADER_NAME), "w") as fh:
            json.dump(
                {
                    "resolution": int(self.resolution),
                    "fit_levels": FIT_LEVELS,
                    "shape_classes": SHAPE_CLASSES,
                    "class_counts": self.class_counts.tolist(),
                },
                fh,
                indent=2,
            )

    @classmethod
    def load(cls, directory: str) -> "DatasetManifest":
        with open(os.path.join(directory, HEADER_NAME)) as fh:
            header = json.load(fh)
        entries = []
        with open(os.path.join(directory, MANIFEST_NAME)) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                fit, shape = int(rec["fit"]), int(rec["shape"])
                if not (0 <= fit < FIT_LEVELS and 0 <= shape < SHAPE_CLASSES):
                    raise ValueError(f"unknown label value in manifest entry {rec}")
                entries.append((rec["path"], fit, shape, rec["id"]))
        manifest = cls(
            entries=entries,
            resolution=int(header["resolution"]),
            class_counts=np.asarray(header["class_counts"], dtype=np.int64),
            root=directory,
        )
        manifest.validate()
        return manifest


def save_png(image: np.ndarray, path: str):
    """C x H x W in [-1, 1] -> 8-bit RGB PNG."""
    hwc = np.clip((np.asarray(image).transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    Image.fromarray(np.round(hwc).astype(np.uint8), mode="RGB").save(path)


def load_png(path: str) -> np.ndarray:
    """8-bit image file -> C x H x W float32 in [-1, 1] (RGB)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def normalize_cell_table(n_per_cell) -> np.ndarray:
    if np.isscalar(n_per_cell):
        return np.full((FIT_LEVELS, SHAPE_CLASSES), int(n_per_cell), dtype=np.int64)
    if isinstance(n_per_cell, dict):
        table = np.zeros((FIT_LEVELS, SHAPE_CLASSES), dtype=np.int64)
        for (fit, shape), count in n_per_cell.items():
            table[fit, shape] = count
        return table
    table = np.asarray(n_per_cell, dtype=np.int64)
    if table.shape != (FIT_LEVELS, SHAPE_CLASSES):
        raise ValueError(f"cell table must be {FIT_LEVELS}x{SHAPE_CLASSES}, got {table.shape}")
    return table


def build_synthetic_dataset(n_per_cell, resolution: int, seed: int,
                            out_dir: str) -> DatasetManifest:
    """Render a labeled dataset to ``out_dir`` (PNGs + JSONL manifest)."""
    table = normalize_cell_table(n_per_cell)
    if (table < 0).any():
        raise ValueError("cell counts must be >= 0")
    if table.sum() == 0:
        raise ValueError("at least one cell count must be positive")

    image_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(image_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(image_dir, os.W_OK):
        raise OSError(f"output directory {image_dir} is not writable")

    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(resolution=resolution, class_counts=table.copy(),
                               root=out_dir)
    for fit in range(FIT_LEVELS):
        for shape in range(SHAPE_CLASSES):
            for idx in range(table[fit, shape]):
                params = GarmentParams(
                    fit_level=fit,
                    shape_class=shape,
                    hue=float(rng.random()),
                    length=float(0.4 + 0.6 * rng.random()),
                    seed=int(rng.integers(0, 2**63 - 1)),
                )
                labeled = render_silhouette(params, resolution)
                ident = f"f{fit}s{shape}_{idx:05d}"
                rel_path = os.path.join("images", f"{ident}.png")
                save_png(labeled.image, os.path.join(out_dir, rel_path))
                manifest.entries.append((rel_path, fit, shape, ident))
    manifest.save(out_dir)
    return manifest


def _load_entry_image(manifest: DatasetManifest, path: str) -> np.ndarray:
    full = path if os.path.isabs(path) else os.path.join(manifest.root, path)
    if not os.path.exists(full):
        raise FileNotFoundError(f"manifest entry not found: {full}")
    image = load_png(full)
    _, h, w = image.shape
    if h != w:
        # Packshot convention: pad the narrow dimension with white.
        size = max(h, w)
        padded = np.ones((3, size, size), dtype=np.float32)
        off_h, off_w = (size - h) // 2, (size - w) // 2
        padded[:, off_h:off_h + h, off_w:off_w + w] = image
        image = padded
    if image.shape[1] != manifest.resolution:
        pil = Image.fromarray(
            np.round((image.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8))
        pil = pil.resize((manifest.resolution, manifest.resolution), Image.BILINEAR)
        image = (np.asarray(pil, dtype=np.float32) / 127.5 - 1.0).transpose(2, 0, 1)
    return image


@dataclass
class ArrayDataset:
    """In-memory labeled image set (desk scale)."""

    images: np.ndarray      # N x 3 x H x W float32 in [-1, 1]
    fit: np.ndarray         # N int64
    shape_class: np.ndarray  # N int64
    ids: list

    def __len__(self):
        return self.images.shape[0]

    def cell_counts(self) -> np.ndarray:
        counts = np.zeros((FIT_LEVELS, SHAPE_CLASSES), dtype=np.int64)
        np.add.at(counts, (self.fit, self.shape_class), 1)
        return counts


def load_dataset(manifest: DatasetManifest, train_fraction: float):
    """Deterministic stratified (fit, shape)-cell split into train/test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction {train_fraction} outside (0, 1)")
    if isinstance(manifest, str):
        manifest = DatasetManifest.load(manifest)

    by_cell = {}
    for entry in manifest.entries:
        by_cell.setdefault((entry[1], entry[2]), []).append(entry)

    train_entries, test_entries = [], []
    for cell in sorted(by_cell):
        entries = sorted(by_cell[cell], key=lambda e: e[3])
        n_train = int(round(len(entries) * train_fraction))
        train_entries.extend(entries[:n_train])
        test_entries.extend(entries[n_train:])

    def materialize(entries):
        images = np.stack(
            [_load_entry_image(manifest, e[0]) for e in entries]
        ) if entries else np.zeros((0, 3, manifest.resolution, manifest.resolution),
                                   dtype=np.float32)
        return ArrayDataset(
            images=images,
            fit=np.array([e[1] for e in entries], dtype=np.int64),
            shape_class=np.array([e[2] for e in entries], dtype=np.int64),
            ids=[e[3] for e in entries],
        )

    return materialize(train_entries), materialize(test_entries)
