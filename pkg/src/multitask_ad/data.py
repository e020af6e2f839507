"""Image I/O, patch grids, dataset manifests and the procedural toy dataset."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

log = logging.getLogger(__name__)

NORMAL, ANOMALOUS, UNLABELED = 0, 1, -1
SPLITS = ("train", "val", "test")


class DimensionError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


def load_image(path: str | Path, target_size: int) -> np.ndarray:
    """Read a raster file as a float32 ``(target_size, target_size, 3)`` array in [0, 1].

    Resizing is bilinear; grayscale inputs are replicated to three channels.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise ImageFormatError(f"{path}: zero-dimension image")
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                scale = 65535.0 if arr.max() > 255 else 255.0
                im = PILImage.fromarray(np.clip(arr / scale * 255.0, 0, 255).astype(np.uint8))
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB") if im.mode in ("RGBA", "P", "CMYK", "YCbCr") else im.convert("L")
            if im.size != (target_size, target_size):
                im = im.resize((target_size, target_size), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(np.clip(arr, 0.0, 1.0), dtype=np.float32)


def load_mask(path: str | Path, target_size: int) -> np.ndarray:
    """Binary mask (nonzero = anomalous), nearest-neighbour resized."""
    with PILImage.open(path) as im:
        im = im.convert("L")
        if im.size != (target_size, target_size):
            im = im.resize((target_size, target_size), PILImage.NEAREST)
        return np.asarray(im) > 0


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path, format="PNG")


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    PILImage.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


@dataclass
class PatchSequence:
    patches: np.ndarray  # (N, P*P*C), row-major patch order
    grid_rows: int
    grid_cols: int
    patch_size: int
    channels: int

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Split an ``(H, W, C)`` image into non-overlapping ``P x P`` patches.

    Patch ``i`` covers grid cell ``(i // cols, i % cols)``; its pixels are
    flattened row-major with channels last.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    patches = image.reshape(rows, p, cols, p, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * c)
    return PatchSequence(patches, rows, cols, p, c)


def unpatchify(seq: PatchSequence) -> np.ndarray:
    p, c = seq.patch_size, seq.channels
    n = seq.patches.shape[0]
    if n != seq.grid_rows * seq.grid_cols or seq.patches.shape[1] != p * p * c:
        raise DimensionError(
            f"patch array {seq.patches.shape} inconsistent with grid "
            f"{seq.grid_rows}x{seq.grid_cols}, P={p}, C={c}"
        )
    return (
        seq.patches.reshape(seq.grid_rows, seq.grid_cols, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(seq.grid_rows * p, seq.grid_cols * p, c)
    )


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, N, P*P*C)`` with the same layout as :func:`patchify`."""
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    return images.reshape(b, rows, p, cols, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, rows * cols, p * p * c)


def unpatchify_batch(patches: np.ndarray, grid_rows: int, grid_cols: int, patch_size: int, channels: int) -> np.ndarray:
    b = patches.shape[0]
    p = patch_size
    return (
        patches.reshape(b, grid_rows, grid_cols, p, p, channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, grid_rows * p, grid_cols * p, channels)
    )


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class Record:
    path: Path
    label: int = UNLABELED
    mask_path: Path | None = None


@dataclass
class DatasetManifest:
    split: str
    records: list[Record] = field(default_factory=list)

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "train" and any(r.label == ANOMALOUS for r in self.records):
            raise ValueError("train manifest may only contain normal or unlabeled records")

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.records]

    def has_labels(self) -> bool:
        return bool(self.records) and all(r.label in (NORMAL, ANOMALOUS) for r in self.records)


def _label_text(label: int) -> str:
    return {NORMAL: "0", ANOMALOUS: "1"}.get(label, "")


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    """One record per line: ``path,label[,mask]``; paths relative to the manifest file."""
    manifest.validate()
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# split={manifest.split}\n")
        writer = csv.writer(fh, lineterminator="\n")
        for r in manifest.records:
            row = [_relative(r.path, root), _label_text(r.label)]
            if r.mask_path is not None:
                row.append(_relative(r.mask_path, root))
            writer.writerow(row)


def _relative(p: Path, root: Path) -> str:
    p = Path(p)
    try:
        return Path(p).resolve().relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


def read_manifest(path: str | Path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    header_split = None
    records = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for row in csv.reader(lines):
        if not row or not row[0].strip():
            continue
        if row[0].startswith("#"):
            if "split=" in row[0]:
                header_split = row[0].split("split=", 1)[1].strip()
            continue
        img = root / row[0].strip()
        label_txt = row[1].strip() if len(row) > 1 else ""
        label = int(label_txt) if label_txt else UNLABELED
        if label not in (NORMAL, ANOMALOUS, UNLABELED):
            raise ValueError(f"{path}: bad label {label_txt!r}")
        mask = root / row[2].strip() if len(row) > 2 and row[2].strip() else None
        records.append(Record(img, label, mask))
    manifest = DatasetManifest(split or header_split or "test", records)
    manifest.validate()
    return manifest


def load_manifest_images(manifest: DatasetManifest, target_size: int) -> np.ndarray:
    if not manifest.records:
        return np.zeros((0, target_size, target_size, 3), dtype=np.float32)
    return np.stack([load_image(r.path, target_size) for r in manifest.records])


# ---------------------------------------------------------------------------
# Toy dataset


@dataclass
class ToyConfig:
    image_size: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    anomaly_fraction_val: float = 0.5
    anomaly_fraction_test: float = 0.5
    disc_radius: tuple[float, float] = (0.30, 0.40)  # fraction of image size
    disc_jitter: float = 0.04
    noise_sigma: float = 0.02
    blob_delta: tuple[float, float] = (0.18, 0.32)
    blob_area: tuple[float, float] = (0.02, 0.20)  # fraction of image area
    stripe_amplitude: float = 0.12
    intensity_jitter: float = 0.08  # per-image tissue brightness offset
    stripe_cycles: tuple[float, float] = (3.0, 6.0)  # periods across the image
    background_amplitude: float = 0.12  # per-image smooth background shading
    background_jitter: float = 0.03  # per-image background level offset


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled lattice noise in [0, 1]."""
    grid = rng.random((cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size, endpoint=False)
    i = np.floor(t).astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    a = grid[i][:, i] * (1 - f)[None, :] + grid[i][:, i + 1] * f[None, :]
    b = grid[i + 1][:, i] * (1 - f)[None, :] + grid[i + 1][:, i + 1] * f[None, :]
    return a * (1 - f)[:, None] + b * f[:, None]


def toy_normal(rng: np.random.Generator, cfg: ToyConfig) -> np.ndarray:
    """A grayscale "organ": disc with oriented striped texture and an inner band, on a dark background.

    Values stay in [0.1, 0.8] so planted anomalies never clip back onto the original.
    """
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    cy = 0.5 + rng.uniform(-cfg.disc_jitter, cfg.disc_jitter)
    cx = 0.5 + rng.uniform(-cfg.disc_jitter, cfg.disc_jitter)
    r = rng.uniform(*cfg.disc_radius)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    inside = 1.0 / (1.0 + np.exp((d - r) * s / 1.5))
    texture = _smooth_noise(rng, s, 4)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(*cfg.stripe_cycles)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    level = 0.45 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
    base = level + 0.12 * (texture - 0.5) + cfg.stripe_amplitude * stripes
    band_y = cy + rng.uniform(-0.05, 0.05)
    band = np.exp(-(((yy - band_y) / 0.05) ** 2)) * (d < r)
    tissue = base + 0.12 * band
    background = (0.2 + rng.uniform(-cfg.background_jitter, cfg.background_jitter)
                  + cfg.background_amplitude * (_smooth_noise(rng, s, 3) - 0.5))
    img = background + inside * (tissue - background)
    img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.1, 0.8)


def plant_blob(rng: np.random.Generator, image: np.ndarray, cfg: ToyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Insert a deviant-intensity, deviant-texture blob. Returns (anomalous, mask)."""
    s = cfg.image_size
    lo, hi = cfg.blob_area
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    for _ in range(1000):
        frac = rng.uniform(lo, hi)
        area = frac * s * s
        aspect = rng.uniform(0.6, 1.6)
        a = np.sqrt(area / (np.pi * aspect))
        b = a * aspect
        theta = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.3 * s, 0.7 * s, size=2)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        wobble = 1.0 + 0.15 * (_smooth_noise(rng, s, 3) - 0.5)
        mask = (u / a) ** 2 + (v / b) ** 2 <= wobble
        got = mask.mean()
        if lo <= got <= hi:
            break
    else:  # pragma: no cover - bounds are generous
        raise RuntimeError("could not place blob within area bounds")
    delta = rng.uniform(*cfg.blob_delta) * rng.choice([-1.0, 1.0])
    amp = 0.4 * abs(delta)
    texture = amp * (_smooth_noise(rng, s, 12) - 0.5) * 2 * 0.5
    out = image.copy()
    out[mask] = np.clip(image[mask] + delta + texture[mask], 0.0, 1.0)
    return out, mask


def toy_sample(rng: np.random.Generator, cfg: ToyConfig, anomalous: bool):
    """Returns ``(normal, image, mask)``; for normals ``image is normal`` and mask is empty."""
    normal = toy_normal(rng, cfg)
    if not anomalous:
        return normal, normal, np.zeros_like(normal, dtype=bool)
    img, mask = plant_blob(rng, normal, cfg)
    return normal, img, mask


def make_toy_dataset(out_dir: str | Path, cfg: ToyConfig | None = None, seed: int = 7) -> dict[str, Path]:
    """Write the toy benchmark to ``out_dir``; returns manifest paths per split.

    Deterministic given ``seed``: every image draws from its own child seed.
    """
    cfg = cfg or ToyConfig()
    out_dir = Path(out_dir)
    paths = {}
    root_seq = np.random.SeedSequence(seed)
    split_seqs = dict(zip(SPLITS, root_seq.spawn(3)))
    counts = {"train": (cfg.n_train, 0.0), "val": (cfg.n_val, cfg.anomaly_fraction_val),
              "test": (cfg.n_test, cfg.anomaly_fraction_test)}
    for split in SPLITS:
        n, frac = counts[split]
        n_anom = int(round(n * frac))
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        records = []
        for i, child in enumerate(split_seqs[split].spawn(n)):
            rng = np.random.default_rng(child)
            anomalous = i >= n - n_anom
            _, img, mask = toy_sample(rng, cfg, anomalous)
            name = f"{split}_{i:04d}"
            img_path = out_dir / split / f"{name}.png"
            save_image(img_path, img)
            mask_path = None
            if split != "train":
                mask_path = out_dir / split / f"{name}_mask.png"
                save_mask(mask_path, mask)
            label = ANOMALOUS if anomalous else NORMAL
            records.append(Record(img_path, label, mask_path))
        manifest = DatasetManifest(split, records)
        paths[split] = out_dir / f"{split}.txt"
        write_manifest(paths[split], manifest)
    log.info("toy dataset written to %s", out_dir)
    return paths

