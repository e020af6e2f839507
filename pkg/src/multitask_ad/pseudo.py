"""Pseudo-anomaly synthesis.

Two families are produced for every training image:

* augmented: a k-means superpixel of the image is perturbed by a random
  sequence of local operations (intensity shift, noise, warping, opacity
  artifact, structural defect);
* generated: a union of random ellipses is in-painted with a procedural fill
  (value-noise texture, intensity shift and blurred content), standing in
  for generative in-painting. Externally produced images can be ingested
  instead.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import load_image, save_image, save_mask
from .moe import ConfigError

log = logging.getLogger(__name__)

MIN_CLUSTER_PIXELS = 16
OPERATIONS = ("intensity", "noise", "distortion", "opacity", "defect")


# ---------------------------------------------------------------------------
# k-means superpixels


def _pixel_features(image: np.ndarray, alpha: float) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    h, w = gray.shape
    yy, xx = np.mgrid[0:h, 0:w]
    ys = yy / max(h - 1, 1)
    xs = xx / max(w - 1, 1)
    return np.stack([gray.ravel(), alpha * xs.ravel(), alpha * ys.ravel()], axis=1)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def kmeans_superpixels(image: np.ndarray, k: int, rng: np.random.Generator, alpha: float = 0.5,
                       max_iter: int = 50, history: list | None = None) -> np.ndarray:
    """Cluster pixels on (intensity, alpha*x, alpha*y) with Lloyd's algorithm.

    Seeding is k-means++. Empty clusters are re-seeded at the point farthest
    from its center. If ``history`` is a list, the within-cluster sum of
    squares after every iteration is appended to it. Returns an ``(H, W)``
    integer label map with every label in ``0..k-1`` used.
    """
    x = _pixel_features(image, alpha)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(1))

    labels = None
    for _ in range(max_iter):
        dist = _sq_dists(x, centers)
        new = dist.argmin(1)
        for j in range(k):
            if not np.any(new == j):
                # farthest point among clusters that keep at least one member
                own = dist[np.arange(n), new].copy()
                sizes = np.bincount(new, minlength=k)
                own[sizes[new] < 2] = -np.inf
                far = int(own.argmax())
                new[far] = j
                centers[j] = x[far]
        for j in range(k):
            centers[j] = x[new == j].mean(0)
        if history is not None:
            history.append(float(((x - centers[new]) ** 2).sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return labels.reshape(np.asarray(image).shape[:2])


# ---------------------------------------------------------------------------
# Augmentation-based anomalies


@dataclass
class AugmentConfig:
    k_range: tuple[int, int] = (3, 8)
    alpha: float = 0.5
    max_ops: int = 3
    shift: tuple[float, float] = (0.15, 0.40)
    noise_sigma: tuple[float, float] = (0.05, 0.15)
    distortion_px: tuple[float, float] = (1.0, 4.0)
    opacity: tuple[float, float] = (0.3, 0.8)
    defect: tuple[float, float] = (0.4, 0.9)


@dataclass
class AugmentationRecipe:
    seed: int
    k: int
    cluster: int
    alpha: float
    ops: list[dict] = field(default_factory=list)
    bbox: list[int] | None = None  # y0, x0, y1, x1 of the chosen cluster

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationRecipe":
        return cls(**json.loads(text))


def _bbox(mask: np.ndarray) -> list[int]:
    ys, xs = np.nonzero(mask)
    return [int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1]


def _sample_op(name: str, cfg: AugmentConfig, rng: np.random.Generator) -> dict:
    if name == "intensity":
        return {"op": name, "shift": float(rng.uniform(*cfg.shift) * rng.choice([-1.0, 1.0]))}
    if name == "noise":
        return {"op": name, "sigma": float(rng.uniform(*cfg.noise_sigma))}
    if name == "distortion":
        return {"op": name, "amplitude": float(rng.uniform(*cfg.distortion_px)),
                "period": float(rng.uniform(4.0, 16.0)), "phase": float(rng.uniform(0, 2 * np.pi))}
    if name == "opacity":
        return {"op": name, "opacity": float(rng.uniform(*cfg.opacity)), "value": float(rng.choice([0.0, 1.0]))}
    if name == "defect":
        return {"op": name, "strength": float(rng.uniform(*cfg.defect)), "angle": float(rng.uniform(0, np.pi)),
                "spacing": float(rng.uniform(3.0, 8.0)), "width": float(rng.uniform(0.8, 2.0)),
                "value": float(rng.choice([0.0, 1.0]))}
    raise ValueError(name)


def apply_ops(image: np.ndarray, mask: np.ndarray, ops: list[dict], rng: np.random.Generator) -> np.ndarray:
    """Apply operations in order, touching only pixels where ``mask`` is set."""
    out = np.array(image, dtype=np.float64)
    m = np.asarray(mask, bool)
    h, w = m.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for op in ops:
        kind = op["op"]
        if kind == "intensity":
            out[m] += op["shift"]
        elif kind == "noise":
            n = rng.normal(0.0, 1.0, size=(h, w))
            out[m] += op["sigma"] * n[m][:, None] if out.ndim == 3 else op["sigma"] * n[m]
        elif kind == "distortion":
            y0, x0, y1, x1 = _bbox(m)
            a, per, ph = op["amplitude"], op["period"], op["phase"]
            sy = np.clip(np.rint(yy + a * np.sin(2 * np.pi * xx / per + ph)), y0, y1 - 1).astype(int)
            sx = np.clip(np.rint(xx + a * np.sin(2 * np.pi * yy / per + ph)), x0, x1 - 1).astype(int)
            src = out[sy, sx]
            out[m] = src[m]
        elif kind == "opacity":
            o = op["opacity"]
            out[m] = (1 - o) * out[m] + o * op["value"]
        elif kind == "defect":
            ang = op["angle"]
            proj = xx * np.cos(ang) + yy * np.sin(ang)
            stripe = (np.mod(proj, op["spacing"]) < op["width"]) & m
            s = op["strength"]
            out[stripe] = (1 - s) * out[stripe] + s * op["value"]
        else:
            raise ValueError(f"unknown operation {kind!r}")
        np.clip(out, 0.0, 1.0, out=out)
    return out.astype(np.float32)


def _recipe_streams(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def synthesize_augmented(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Returns ``(augmented, mask, recipe)``."""
    seed = int(rng.integers(2**63))
    r_k, r_km, r_ops, r_noise = _recipe_streams(seed)
    h, w = np.asarray(image).shape[:2]
    for _ in range(20):
        k = int(r_k.integers(cfg.k_range[0], cfg.k_range[1] + 1))
        labels = kmeans_superpixels(image, min(k, h * w), r_km, cfg.alpha)
        sizes = np.bincount(labels.ravel(), minlength=k)
        eligible = np.flatnonzero(sizes >= MIN_CLUSTER_PIXELS)
        if eligible.size:
            break
    else:
        raise ValueError("no cluster with enough pixels")
    cluster = int(r_ops.choice(eligible))
    n_ops = int(r_ops.integers(1, cfg.max_ops + 1))
    names = [OPERATIONS[i] for i in r_ops.permutation(len(OPERATIONS))[:n_ops]]
    ops = [_sample_op(nm, cfg, r_ops) for nm in names]
    mask = labels == cluster
    recipe = AugmentationRecipe(seed, k, cluster, cfg.alpha, ops, _bbox(mask))
    return apply_ops(image, mask, ops, r_noise), mask, recipe


def apply_recipe(image: np.ndarray, recipe: AugmentationRecipe):
    """Replay a recipe; gives the same result as the call that produced it."""
    _, r_km, _, r_noise = _recipe_streams(recipe.seed)
    h, w = np.asarray(image).shape[:2]
    labels = kmeans_superpixels(image, min(recipe.k, h * w), r_km, recipe.alpha)
    mask = labels == recipe.cluster
    return apply_ops(image, mask, recipe.ops, r_noise), mask


# ---------------------------------------------------------------------------
# Generation-based anomalies


@dataclass
class EllipseConfig:
    max_count: int = 5
    axes_px: tuple[float, float] = (2.0, 12.0)
    area_fraction: tuple[float, float] = (0.01, 0.25)
    opacity: tuple[float, float] = (0.4, 0.9)
    feather_px: int = 2
    max_attempts: int = 100


@dataclass
class EllipseMaskSpec:
    count: int
    centers: list[tuple[float, float]]  # (y, x)
    axes: list[tuple[float, float]]  # (along x before rotation, along y)
    rotations: list[float]
    bounds: tuple[int, int, int, int] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def rasterize_ellipse(h: int, w: int, center, axes, rotation: float) -> np.ndarray:
    cy, cx = center
    a, b = axes
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(rotation), np.sin(rotation)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0 + 1e-9


def otsu_threshold(gray: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing the between-class variance of the intensity histogram."""
    hist, edges = np.histogram(gray, bins=bins, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (m0 * w0[-1] - w0 * m0[-1]) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    # the objective is flat across an empty gap between modes: take the middle of the plateau
    best = np.flatnonzero(between >= between.max() * (1 - 1e-12))
    return float((edges[best[0] + 1] + edges[best[-1] + 1]) / 2)


def organ_bounds(image: np.ndarray, threshold: float | None = None) -> tuple[int, int, int, int] | None:
    """Bounding box of foreground pixels (Otsu threshold by default), or None for a flat image."""
    img = np.asarray(image)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    if threshold is None:
        if np.ptp(gray) == 0:
            return None
        threshold = otsu_threshold(gray)
    fg = gray > threshold
    if not fg.any():
        return None
    y0, x0, y1, x1 = _bbox(fg)
    return (y0, x0, y1, x1)


def make_ellipse_mask(h: int, w: int, bounds, rng: np.random.Generator, cfg: EllipseConfig):
    """Union of 1..max_count random ellipses whose centers lie in ``bounds`` (y0, x0, y1, x1)."""
    if bounds is not None:
        y0, x0, y1, x1 = bounds
        if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
            raise ConfigError(f"bounds {bounds} empty or outside {h}x{w}")
    else:
        y0, x0, y1, x1 = 0, 0, h, w
    lo, hi = cfg.area_fraction
    for _ in range(cfg.max_attempts):
        count = int(rng.integers(1, cfg.max_count + 1))
        centers, axes, rots = [], [], []
        mask = np.zeros((h, w), bool)
        for _ in range(count):
            c = (float(rng.uniform(y0, y1 - 1)), float(rng.uniform(x0, x1 - 1)))
            ax = (float(rng.uniform(*cfg.axes_px)), float(rng.uniform(*cfg.axes_px)))
            rot = float(rng.uniform(0, np.pi))
            mask |= rasterize_ellipse(h, w, c, ax, rot)
            centers.append(c)
            axes.append(ax)
            rots.append(rot)
        if lo <= mask.mean() <= hi:
            return mask, EllipseMaskSpec(count, centers, axes, rots, tuple(bounds) if bounds else None)
    raise ConfigError(f"no ellipse mask within area bounds {cfg.area_fraction} after {cfg.max_attempts} attempts")


def value_noise(h: int, w: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    lattice = rng.random((cells + 1, cells + 1))
    return ndimage.zoom(lattice, (h / (cells + 1), w / (cells + 1)), order=1, mode="nearest")[:h, :w]


def feather(mask: np.ndarray, width: int) -> np.ndarray:
    """1 inside the mask, falling linearly to 0 over ``width`` pixels outside it."""
    mask = np.asarray(mask, bool)
    if width <= 0:
        return mask.astype(np.float64)
    dist = ndimage.distance_transform_edt(~mask)
    return np.clip(1.0 - dist / (width + 1), 0.0, 1.0)


def synthesize_generated(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, cfg: EllipseConfig,
                         opacity: float | None = None) -> np.ndarray:
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("generated anomaly needs a nonempty mask")
    img = np.asarray(image, dtype=np.float64)
    h, w = mask.shape
    cells = int(rng.integers(2, 17))
    texture = value_noise(h, w, cells, rng)
    level = rng.uniform(0.0, 1.0)
    texture = np.clip(level + (texture - 0.5) * rng.uniform(0.3, 1.0), 0.0, 1.0)
    shift = rng.uniform(0.15, 0.4) * rng.choice([-1.0, 1.0])
    sigma = rng.uniform(1.0, 3.0)
    if img.ndim == 3:
        texture = texture[:, :, None]
        blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
    else:
        blurred = ndimage.gaussian_filter(img, sigma=sigma)
    weights = rng.dirichlet(np.ones(3))
    fill = weights[0] * texture + weights[1] * np.clip(img + shift, 0, 1) + weights[2] * blurred
    o = rng.uniform(*cfg.opacity) if opacity is None else opacity
    alpha = o * feather(mask, cfg.feather_px)
    if img.ndim == 3:
        alpha = alpha[:, :, None]
    out = (1.0 - alpha) * img + alpha * fill
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Corpora on disk

AUG, GEN = "aug", "gen"


def ingest_external_generated(directory: str | Path, originals: list[str] | None, target_size: int):
    """Collect ``<name>.gen.<ext>`` files, keyed by original name.

    Files that do not follow the convention, or whose name is not among
    ``originals``, are skipped with a warning.
    """
    registry: dict[str, np.ndarray] = {}
    directory = Path(directory)
    if not directory.is_dir():
        return registry
    wanted = set(originals) if originals is not None else None
    for f in sorted(directory.iterdir()):
        if not f.is_file():
            continue
        stem = f.name.split(".")
        if len(stem) < 3 or stem[-2] != GEN or "mask" in f.name:
            if f.suffix.lower() in (".png", ".pgm", ".ppm"):
                log.warning("skipping %s: not a <name>.gen image", f.name)
            continue
        name = ".".join(stem[:-2])
        if wanted is not None and name not in wanted:
            log.warning("skipping %s: no matching original", f.name)
            continue
        registry[name] = load_image(f, target_size)
    return registry


def synthesize_corpus(images: np.ndarray, names: list[str], out_dir: str | Path, seed: int,
                      aug_cfg: AugmentConfig, ell_cfg: EllipseConfig,
                      external: dict[str, np.ndarray] | None = None) -> int:
    """Write one augmented and one generated variant (plus mask and recipe) per image.

    Image ``i`` uses seed ``seed ^ i``. Names found in ``external`` skip
    procedural generation. Returns the number of images written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for i, (img, name) in enumerate(zip(images, names)):
        rng = np.random.default_rng(seed ^ i)
        aug, aug_mask, recipe = synthesize_augmented(img, aug_cfg, rng)
        save_image(out_dir / f"{name}.{AUG}.png", aug)
        save_mask(out_dir / f"{name}.{AUG}_mask.png", aug_mask)
        (out_dir / f"{name}.{AUG}.json").write_text(recipe.to_json() + "\n")
        written += 1
        if external is not None and name in external:
            continue
        h, w = img.shape[:2]
        mask, spec = make_ellipse_mask(h, w, organ_bounds(img), rng, ell_cfg)
        gen = synthesize_generated(img, mask, rng, ell_cfg)
        save_image(out_dir / f"{name}.{GEN}.png", gen)
        save_mask(out_dir / f"{name}.{GEN}_mask.png", mask)
        (out_dir / f"{name}.{GEN}.json").write_text(spec.to_json() + "\n")
        written += 1
    return written


def pseudo_pair(image: np.ndarray, seed: int, aug_cfg: AugmentConfig, ell_cfg: EllipseConfig):
    """In-memory equivalent of one :func:`synthesize_corpus` entry: ``(augmented, generated)``."""
    rng = np.random.default_rng(seed)
    aug, _, _ = synthesize_augmented(image, aug_cfg, rng)
    h, w = image.shape[:2]
    mask, _ = make_ellipse_mask(h, w, organ_bounds(image), rng, ell_cfg)
    return aug, synthesize_generated(image, mask, rng, ell_cfg)


def load_corpus(corpus_dir: str | Path, names: list[str], kind: str, target_size: int) -> np.ndarray | None:
    """Stack ``<name>.<kind>.png`` for every name; None if any is missing."""
    corpus_dir = Path(corpus_dir)
    paths = [corpus_dir / f"{n}.{kind}.png" for n in names]
    if not all(p.exists() for p in paths):
        return None
    return np.stack([load_image(p, target_size) for p in paths])
