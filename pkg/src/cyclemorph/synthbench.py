"""Ground-truthed synthetic registration pairs.

The fixed image is a textured multi-ellipse phantom with a label map.  The
moving image is the fixed image warped by a smooth random field, so the true
correspondence is known exactly: moving voxel ``q`` corresponds to fixed
point ``q + phi_true(q)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io
from .metrics import batch, batch_field, folding_percentage, sample_field, warp_labels
from .trainer import PairDataset
from .warp import spatial_transform


class FieldGenerationError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    shape: tuple = (64, 64)
    n_pairs: int = 10
    amplitude: float = 4.0
    sigma: float = 8.0
    n_blobs: int = 8
    n_landmarks: int = 12
    seed: int = 0
    contrast: bool = False
    noise: float = 0.0  # std of independent Gaussian noise added to each image of a pair
    max_retries: int = 20

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) not in (2, 3) or min(self.shape) < 3:
            raise ValueError(f"shape must be 2-D or 3-D with extents >= 3, got {self.shape}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.amplitude < 0 or self.sigma <= 0:
            raise ValueError("amplitude must be >= 0 and sigma > 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self) | {"shape": list(self.shape)}


def random_smooth_field(shape, amplitude: float, sigma: float, rng: np.random.Generator,
                        max_retries: int = 20) -> np.ndarray:
    """Gaussian-smoothed white noise scaled to a maximum vector length ``amplitude``.

    Redrawn until the field has no folding.
    """
    shape = tuple(shape)
    nd = len(shape)
    if amplitude == 0:
        return np.zeros((nd,) + shape, dtype=np.float32)
    for _ in range(max_retries):
        phi = np.stack([gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect") for _ in range(nd)])
        peak = np.linalg.norm(phi, axis=0).max()
        if peak == 0:
            continue
        phi = (phi * (amplitude / peak)).astype(np.float32)
        if folding_percentage(phi) == 0:
            return phi
    raise FieldGenerationError(
        f"no fold-free field after {max_retries} draws at amplitude {amplitude}, sigma {sigma}; "
        "use a smaller amplitude or a larger sigma")


def render_phantom(shape, n_blobs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Textured ellipses on a faint textured background; returns (image in [0,1], labels)."""
    shape = tuple(shape)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    labels = np.zeros(shape, dtype=np.int32)
    base = np.full(shape, 0.2)
    for k in range(1, n_blobs + 1):
        centre = [rng.uniform(0.15 * n, 0.85 * n) for n in shape]
        radii = [rng.uniform(0.08 * n, 0.25 * n) for n in shape]
        r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii))
        inside = r2 <= 1.0
        labels[inside] = k
        base[inside] = rng.uniform(0.3, 1.0)
    # fine texture everywhere, so that intensity similarity constrains the field off the edges too
    texture = gaussian_filter(rng.standard_normal(shape), 1.5)
    texture /= texture.std() + 1e-12
    img = gaussian_filter(base, 1.0) * (1.0 + 0.3 * texture) + 0.05 * texture
    img = np.clip(img, 0.0, None)
    img /= img.max()
    return img.astype(np.float32), labels


@dataclass
class SynthPair:
    moving: np.ndarray
    fixed: np.ndarray
    phi_true: np.ndarray
    labels_moving: np.ndarray
    labels_fixed: np.ndarray
    landmarks_moving: np.ndarray
    landmarks_fixed: np.ndarray


def make_pair(cfg: SynthConfig, rng: np.random.Generator) -> SynthPair:
    fixed, labels_fixed = render_phantom(cfg.shape, cfg.n_blobs, rng)
    phi = random_smooth_field(cfg.shape, cfg.amplitude, cfg.sigma, rng, cfg.max_retries)
    moving = spatial_transform(batch(fixed), batch_field(phi)).numpy()[0, 0]
    if cfg.contrast:
        moving = moving ** rng.uniform(0.7, 1.4)
    if cfg.noise:
        # acquisition noise differs between the two scans, so no field matches them exactly
        fixed = np.clip(fixed + rng.normal(0.0, cfg.noise, fixed.shape), 0.0, 1.0).astype(np.float32)
        moving = np.clip(moving + rng.normal(0.0, cfg.noise, moving.shape), 0.0, 1.0)
    labels_moving = warp_labels(labels_fixed, phi)
    hi = np.array(cfg.shape, dtype=np.float64) - 1
    lm_moving = rng.uniform(0.1, 0.9, size=(cfg.n_landmarks, len(cfg.shape))) * hi
    lm_fixed = np.clip(lm_moving + sample_field(phi, lm_moving), 0, hi)
    return SynthPair(moving.astype(np.float32), fixed, phi, labels_moving, labels_fixed, lm_moving, lm_fixed)


def generate(cfg: SynthConfig) -> list[SynthPair]:
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_pairs)
    # each pair owns its stream, so the result does not depend on the thread count
    with ThreadPoolExecutor(io.worker_count()) as pool:
        return list(pool.map(lambda c: make_pair(cfg, np.random.Generator(np.random.PCG64(c))), children))


PAIR_FILES = ("moving.dtf", "fixed.dtf", "phi_true.dtf", "labels_moving.dtf", "labels_fixed.dtf",
              "landmarks_moving.csv", "landmarks_fixed.csv")


def write_benchmark(cfg: SynthConfig, out_dir, pairs: list[SynthPair] | None = None) -> dict:
    """Write ``pairs/NNNN/*`` and ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    pairs = generate(cfg) if pairs is None else pairs
    checksums = {}
    for i, p in enumerate(pairs):
        d = out_dir / "pairs" / f"{i:04d}"
        io.save_dtf(d / "moving.dtf", p.moving)
        io.save_dtf(d / "fixed.dtf", p.fixed)
        io.save_dtf(d / "phi_true.dtf", p.phi_true)
        io.save_dtf(d / "labels_moving.dtf", p.labels_moving)
        io.save_dtf(d / "labels_fixed.dtf", p.labels_fixed)
        io.save_landmarks(d / "landmarks_moving.csv", p.landmarks_moving)
        io.save_landmarks(d / "landmarks_fixed.csv", p.landmarks_fixed)
        for name in PAIR_FILES:
            checksums[f"pairs/{i:04d}/{name}"] = io.sha256_file(d / name)
    manifest = {"config": cfg.to_dict(), "n_pairs": len(pairs), "checksums": checksums}
    io.write_json(out_dir / "manifest.json", manifest)
    return manifest


def load_pair(pair_dir) -> tuple[np.ndarray, np.ndarray, dict]:
    d = Path(pair_dir)
    moving = io.load_dtf(d / "moving.dtf")
    fixed = io.load_dtf(d / "fixed.dtf")
    extras = {}
    for key in ("phi_true", "labels_moving", "labels_fixed"):
        if (d / f"{key}.dtf").exists():
            arr = io.load_dtf(d / f"{key}.dtf")
            extras[key] = arr.astype(np.int32) if key.startswith("labels") else arr
    for key in ("landmarks_moving", "landmarks_fixed"):
        if (d / f"{key}.csv").exists():
            extras[key] = io.load_landmarks(d / f"{key}.csv")
    return moving, fixed, extras


def load_benchmark(root) -> PairDataset:
    dirs = sorted(p for p in (Path(root) / "pairs").iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no pairs under {root}/pairs")
    moving, fixed, extras = [], [], []
    for d in dirs:
        m, f, e = load_pair(d)
        moving.append(m)
        fixed.append(f)
        extras.append(e)
    return PairDataset(moving, fixed, extras)


def to_dataset(pairs: list[SynthPair]) -> PairDataset:
    extras = [{"phi_true": p.phi_true, "labels_moving": p.labels_moving, "labels_fixed": p.labels_fixed,
               "landmarks_moving": p.landmarks_moving, "landmarks_fixed": p.landmarks_fixed} for p in pairs]
    return PairDataset([p.moving for p in pairs], [p.fixed for p in pairs], extras)
