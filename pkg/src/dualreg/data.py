"""Registration-pair generation and loading.

Pipeline per pair: sample the shape once (OS) or twice (TS), apply a random
ground-truth transform to the reference side, crop each side independently
(partial-to-partial), then add clipped Gaussian noise. Everything is a pure
function of (shape id, seed, config), so a manifest of seeds reproduces a
dataset byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from . import plyio
from .geometry import RigidTransform, random_transform
from .validation import check_points, check_rng

MANIFEST_FORMAT = "dualreg-manifest"
MANIFEST_VERSION = 1

SAMPLING_MODES = ("os", "ts")
CROP_MANNERS = ("prnet", "rpmnet", "none")
SPLITS = ("train", "val", "test")

# Axisymmetric categories dropped when ingesting an external benchmark tree,
# where the ground-truth rotation is ill-posed.
AXISYMMETRIC_CATEGORIES = (
    "bottle",
    "bowl",
    "cone",
    "cup",
    "flower_pot",
    "lamp",
    "tent",
    "vase",
)

_SPLIT_OFFSET = {"train": 0, "val": 1, "test": 2}


class IngestError(RuntimeError):
    """Raised when shape files cannot be read."""


class ManifestError(ValueError):
    """Raised on manifest version mismatch or parse failure."""


@dataclass
class DataConfig:
    """Dataset generation settings (per-pair and shape-sourcing)."""

    shapes: str = "procedural"
    n_surface_samples: int = 2048
    train_shapes: int = 64
    val_shapes: int = 16
    test_shapes: int = 16
    excluded_categories: tuple = AXISYMMETRIC_CATEGORIES
    mode: str = "ts"
    n_points: int = 1024
    crop_manner: str = "rpmnet"
    keep_fraction: float = 0.7
    noise_sigma: float = 0.0
    noise_clip: float = 0.05
    max_angle: float = 45.0
    max_translation: float = 0.5
    train_pairs: int = 64
    val_pairs: int = 16
    test_pairs: int = 16
    seed: int = 0

    def __post_init__(self):
        self.excluded_categories = tuple(self.excluded_categories)
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"mode must be one of {SAMPLING_MODES}, got {self.mode!r}")
        if self.crop_manner not in CROP_MANNERS:
            raise ValueError(f"crop_manner must be one of {CROP_MANNERS}, got {self.crop_manner!r}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")

    def shape_count(self, split: str) -> int:
        return {"train": self.train_shapes, "val": self.val_shapes, "test": self.test_shapes}[split]

    def pair_count(self, split: str) -> int:
        return {"train": self.train_pairs, "val": self.val_pairs, "test": self.test_pairs}[split]


@dataclass
class Shape:
    shape_id: str
    points: np.ndarray


@dataclass
class RegistrationPair:
    """Source/reference clouds plus ground truth and provenance."""

    source: np.ndarray
    reference: np.ndarray
    gt: RigidTransform
    sampling_mode: str
    crop_manner: str
    noise_sigma: float
    seed: int
    shape_id: str = ""


@dataclass
class DatasetManifest:
    split: str
    seed: int
    shapes: str
    shape_seed: int
    shape_count: int
    n_surface_samples: int
    excluded_categories: tuple
    pair_config: dict
    records: list = field(default_factory=list)
    version: int = MANIFEST_VERSION


# ---------------------------------------------------------------------------
# Procedural shapes

def _normalize_shape(points: np.ndarray) -> np.ndarray:
    """Center on the bounding-box midpoint and scale so max |coord| == 1."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    centered = points - (lo + hi) / 2.0
    scale = np.abs(centered).max()
    return centered / scale


def _sample_aabb_surface(rng, n, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    face_areas = np.array(
        [ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[2], ext[0] * ext[1], ext[0] * ext[1]]
    )
    faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    pts = lo + rng.uniform(0.0, 1.0, size=(n, 3)) * ext
    axes = faces // 2
    pts[np.arange(n), axes] = np.where(faces % 2 == 0, lo[axes], hi[axes])
    return pts


def _strictly_inside(points, lo, hi, eps=1e-9):
    return np.all((points > lo + eps) & (points < hi - eps), axis=1)


def _make_box(rng, n):
    he = rng.uniform(0.3, 1.0, size=3)
    return _sample_aabb_surface(rng, n, -he, he)


def _make_open_cylinder(rng, n):
    radius = rng.uniform(0.3, 1.0)
    half_height = rng.uniform(0.4, 1.0)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    z = rng.uniform(-half_height, half_height, size=n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])


def _make_l_bracket(rng, n):
    # Two overlapping axis-aligned slabs forming an L; surface points of the
    # union are surface points of either box not strictly inside the other.
    length = rng.uniform(0.8, 1.2)
    width = rng.uniform(0.3, 0.6)
    thick = rng.uniform(0.15, 0.3)
    height = rng.uniform(0.6, 1.0)
    box_a = (np.array([0.0, 0.0, 0.0]), np.array([length, width, thick]))
    box_b = (np.array([0.0, 0.0, 0.0]), np.array([thick, width, height]))
    area_a = np.prod(box_a[1] - box_a[0]) / thick  # rough weighting by extent
    area_b = np.prod(box_b[1] - box_b[0]) / thick
    out = []
    collected = 0
    while collected < n:
        batch = max(n, 256)
        pick_a = rng.uniform(size=batch) < area_a / (area_a + area_b)
        pts = np.empty((batch, 3))
        n_a = int(pick_a.sum())
        if n_a:
            pts[pick_a] = _sample_aabb_surface(rng, n_a, *box_a)
        if batch - n_a:
            pts[~pick_a] = _sample_aabb_surface(rng, batch - n_a, *box_b)
        rejected = np.where(pick_a, _strictly_inside(pts, *box_b), _strictly_inside(pts, *box_a))
        kept = pts[~rejected]
        out.append(kept)
        collected += kept.shape[0]
    return np.concatenate(out)[:n]


def _make_convex_hull(rng, n):
    base = rng.normal(size=(rng.integers(12, 30), 3))
    hull = ConvexHull(base)
    tris = base[hull.simplices]
    edge1 = tris[:, 1] - tris[:, 0]
    edge2 = tris[:, 2] - tris[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(edge1, edge2), axis=1)
    pick = rng.choice(len(tris), size=n, p=areas / areas.sum())
    u = np.sqrt(rng.uniform(size=(n, 1)))
    v = rng.uniform(size=(n, 1))
    pts = (1 - u) * tris[pick, 0] + u * (1 - v) * tris[pick, 1] + u * v * tris[pick, 2]
    return pts


_SHAPE_MAKERS = (
    ("box", _make_box),
    ("cylinder", _make_open_cylinder),
    ("bracket", _make_l_bracket),
    ("hull", _make_convex_hull),
)


def _procedural_shapes(split, count, n_samples, seed):
    shapes = []
    for i in range(count):
        kind, maker = _SHAPE_MAKERS[i % len(_SHAPE_MAKERS)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_OFFSET[split], i]))
        pts = _normalize_shape(maker(rng, n_samples))
        shapes.append(Shape(shape_id=f"procedural/{split}/{i:03d}_{kind}", points=pts))
    return shapes


def load_shapes(
    path: str,
    split: str,
    *,
    count: int | None = None,
    n_surface_samples: int = 2048,
    seed: int = 0,
    excluded_categories=AXISYMMETRIC_CATEGORIES,
) -> list:
    """Load shapes for a split, normalized into the unit cube.

    ``path`` is either the token "procedural" (parameterized primitives) or a
    directory laid out as <path>/<category>/<split>/*.ply.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if path == "procedural":
        if count is None:
            count = {"train": 64, "val": 16, "test": 16}[split]
        return _procedural_shapes(split, count, n_surface_samples, seed)

    if not os.path.isdir(path):
        raise IngestError(f"shape directory not found: {path}")
    excluded = set(excluded_categories)
    shapes = []
    for category in sorted(os.listdir(path)):
        cat_dir = os.path.join(path, category)
        if not os.path.isdir(cat_dir) or category in excluded:
            continue
        split_dir = os.path.join(cat_dir, split)
        if not os.path.isdir(split_dir):
            continue
        for fname in sorted(os.listdir(split_dir)):
            if not fname.endswith(".ply"):
                continue
            fpath = os.path.join(split_dir, fname)
            try:
                pts = plyio.read_ply(fpath)
            except (OSError, ValueError) as exc:
                raise IngestError(f"failed to read shape file {fpath}: {exc}") from exc
            shapes.append(Shape(shape_id=f"{category}/{split}/{fname}", points=_normalize_shape(pts)))
    if not shapes:
        raise IngestError(f"no shapes found under {path} for split {split!r}")
    return shapes


# ---------------------------------------------------------------------------
# Pair construction

def sample_pair(shape_points, mode: str, n: int, rng):
    """Draw the pre-transform clouds: one shared subset (OS) or two (TS)."""
    pts = check_points(shape_points, "shape")
    rng = check_rng(rng)
    if mode not in SAMPLING_MODES:
        raise ValueError(f"mode must be one of {SAMPLING_MODES}, got {mode!r}")
    if n > pts.shape[0]:
        raise ValueError(f"requested {n} points but shape has only {pts.shape[0]}")
    idx_a = rng.choice(pts.shape[0], size=n, replace=False)
    if mode == "os":
        sub = pts[idx_a]
        return sub, sub
    idx_b = rng.choice(pts.shape[0], size=n, replace=False)
    return pts[idx_a], pts[idx_b]


def crop_partial(points, manner: str, keep_fraction: float, rng, *, return_info: bool = False):
    """Keep a contiguous spatial region of the cloud.

    prnet: the ceil(keep_fraction * N) points nearest a random viewpoint on a
    radius-2 sphere around the centroid. rpmnet: the points on one side of a
    random plane, offset so exactly ceil(keep_fraction * N) survive.
    """
    pts = check_points(points)
    rng = check_rng(rng)
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return (points, {}) if return_info else points
    n = pts.shape[0]
    m = math.ceil(keep_fraction * n)
    if m < 3:
        raise ValueError(f"crop would keep {m} < 3 points")

    if manner == "prnet":
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        viewpoint = pts.mean(axis=0) + 2.0 * direction
        dist = np.linalg.norm(pts - viewpoint, axis=1)
        keep = np.sort(np.argpartition(dist, m - 1)[:m])
        info = {"viewpoint": viewpoint}
    elif manner == "rpmnet":
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        proj = pts @ normal
        keep = np.sort(np.argpartition(-proj, m - 1)[:m])
        info = {"normal": normal, "offset": float(proj[keep].min())}
    else:
        raise ValueError(f"unknown crop manner {manner!r}")
    cropped = pts[keep]
    return (cropped, info) if return_info else cropped


def add_noise(points, sigma: float, clip: float, rng):
    """Add i.i.d. per-coordinate Gaussian noise, clipped to [-clip, clip]."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if clip <= 0.0:
        raise ValueError("clip must be > 0")
    if sigma == 0.0:
        return points
    pts = check_points(points)
    noise = np.clip(check_rng(rng).normal(0.0, sigma, size=pts.shape), -clip, clip)
    return pts + noise


def make_pair(shape: Shape, cfg: DataConfig, rng, *, seed: int = 0) -> RegistrationPair:
    """Generate one registration pair from a shape. Consumes rng draws in a
    fixed order so the result is a pure function of (shape, cfg, rng state).
    """
    rng = check_rng(rng)
    base_a, base_b = sample_pair(shape.points, cfg.mode, cfg.n_points, rng)
    gt = random_transform(rng, cfg.max_angle, cfg.max_translation)
    source = base_a
    reference = gt.apply(base_b)
    if cfg.crop_manner != "none" and cfg.keep_fraction < 1.0:
        source = crop_partial(source, cfg.crop_manner, cfg.keep_fraction, rng)
        reference = crop_partial(reference, cfg.crop_manner, cfg.keep_fraction, rng)
    source = add_noise(source, cfg.noise_sigma, cfg.noise_clip, rng)
    reference = add_noise(reference, cfg.noise_sigma, cfg.noise_clip, rng)
    return RegistrationPair(
        source=source,
        reference=reference,
        gt=gt,
        sampling_mode=cfg.mode,
        crop_manner=cfg.crop_manner,
        noise_sigma=cfg.noise_sigma,
        seed=seed,
        shape_id=shape.shape_id,
    )


def _pair_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _pair_fields(cfg: DataConfig) -> dict:
    keys = (
        "mode",
        "n_points",
        "crop_manner",
        "keep_fraction",
        "noise_sigma",
        "noise_clip",
        "max_angle",
        "max_translation",
    )
    return {k: getattr(cfg, k) for k in keys}


def build_dataset(cfg: DataConfig, split: str):
    """Generate all pairs for a split; returns (pairs, manifest)."""
    shapes = load_shapes(
        cfg.shapes,
        split,
        count=cfg.shape_count(split) if cfg.shapes == "procedural" else None,
        n_surface_samples=cfg.n_surface_samples,
        seed=cfg.seed,
        excluded_categories=cfg.excluded_categories,
    )
    manifest = DatasetManifest(
        split=split,
        seed=cfg.seed,
        shapes=cfg.shapes,
        shape_seed=cfg.seed,
        shape_count=len(shapes),
        n_surface_samples=cfg.n_surface_samples,
        excluded_categories=tuple(cfg.excluded_categories),
        pair_config=_pair_fields(cfg),
    )
    pairs = []
    for i in range(cfg.pair_count(split)):
        seed = _pair_seed(cfg.seed, i)
        shape = shapes[i % len(shapes)]
        pair = make_pair(shape, cfg, np.random.default_rng(seed), seed=seed)
        pairs.append(pair)
        manifest.records.append(
            {
                "index": i,
                "shape_id": shape.shape_id,
                "seed": seed,
                "mode": cfg.mode,
                "crop": cfg.crop_manner,
                "noise_sigma": cfg.noise_sigma,
                "split": split,
            }
        )
    return pairs, manifest


def pairs_from_manifest(manifest: DatasetManifest, shapes_root: str | None = None):
    """Regenerate the exact pairs a manifest describes."""
    cfg = DataConfig(
        shapes=shapes_root or manifest.shapes,
        n_surface_samples=manifest.n_surface_samples,
        excluded_categories=tuple(manifest.excluded_categories),
        seed=manifest.shape_seed,
        **manifest.pair_config,
    )
    shapes = load_shapes(
        cfg.shapes,
        manifest.split,
        count=manifest.shape_count if cfg.shapes == "procedural" else None,
        n_surface_samples=cfg.n_surface_samples,
        seed=manifest.shape_seed,
        excluded_categories=cfg.excluded_categories,
    )
    by_id = {s.shape_id: s for s in shapes}
    pairs = []
    for rec in manifest.records:
        shape = by_id.get(rec["shape_id"])
        if shape is None:
            raise ManifestError(f"manifest references unknown shape {rec['shape_id']!r}")
        rec_cfg = dataclasses.replace(
            cfg, mode=rec["mode"], crop_manner=rec["crop"], noise_sigma=rec["noise_sigma"]
        )
        pairs.append(make_pair(shape, rec_cfg, np.random.default_rng(rec["seed"]), seed=rec["seed"]))
    return pairs


# ---------------------------------------------------------------------------
# Manifest IO

def write_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": manifest.version,
        "split": manifest.split,
        "seed": manifest.seed,
        "shapes": manifest.shapes,
        "shape_seed": manifest.shape_seed,
        "shape_count": manifest.shape_count,
        "n_surface_samples": manifest.n_surface_samples,
        "excluded_categories": list(manifest.excluded_categories),
        "pair_config": manifest.pair_config,
        "pairs": manifest.records,
    }
    with open(path, "w", encoding="ascii") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def read_manifest(path) -> DatasetManifest:
    try:
        with open(path, "r", encoding="ascii") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(
            f"{path}: manifest version {doc.get('version')} unsupported (expected {MANIFEST_VERSION})"
        )
    return DatasetManifest(
        split=doc["split"],
        seed=doc["seed"],
        shapes=doc["shapes"],
        shape_seed=doc["shape_seed"],
        shape_count=doc["shape_count"],
        n_surface_samples=doc["n_surface_samples"],
        excluded_categories=tuple(doc["excluded_categories"]),
        pair_config=doc["pair_config"],
        records=doc["pairs"],
        version=doc["version"],
    )
