"""Global-then-local registration for images larger than one network pass.

A global network registers a block-averaged copy of the pair; its field is
upsampled to full resolution.  A local network then refines overlapping
patches of (globally deformed moving, fixed).  Patch fields are fused into one
local field, composed with the global field, and the moving image is
resampled once with the result.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .io import worker_count
from .metrics import as_image, batch, batch_field
from .regnet import RegNet
from .trainer import PairDataset
from .warp import COMPOSE, compose_fields, downsample_image, rescale_field, spatial_transform


@dataclass
class MultiscaleConfig:
    subsample: tuple = (2, 2)
    patch: int = 64
    strides: tuple | None = None
    fusion: str = "uniform"
    composition: str = COMPOSE

    def __post_init__(self):
        if isinstance(self.subsample, int):
            self.subsample = (self.subsample,) * 2
        self.subsample = tuple(int(f) for f in self.subsample)
        if self.strides is None:
            # overlap of 3/4 p on the first two axes and 7/8 p on the third
            p = self.patch
            self.strides = (p // 4, p // 4, p // 8) if len(self.subsample) == 3 else (p // 4,) * len(self.subsample)
        self.strides = tuple(int(s) for s in self.strides)
        if any(s < 1 or s > self.patch for s in self.strides):
            raise ValueError(f"patch strides must lie in [1, {self.patch}], got {self.strides}")
        if self.fusion not in ("uniform", "cosine"):
            raise ValueError(f"fusion must be 'uniform' or 'cosine', got {self.fusion!r}")

    def to_dict(self) -> dict:
        return asdict(self) | {"subsample": list(self.subsample), "strides": list(self.strides)}


def global_stage(net: RegNet, moving, fixed, cfg: MultiscaleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Full-resolution global field (lattice ``(ndim, *S)``) and the moving image warped by it."""
    m, f = as_image(moving), as_image(fixed)
    factors = cfg.subsample[: m.ndim]
    mb, fb = batch(m), batch(f)
    mc = downsample_image(mb, factors).numpy()
    fc = downsample_image(fb, factors).numpy()
    phi = net.predict(mc, fc)
    phi = rescale_field(phi, m.shape).numpy()
    warped = spatial_transform(mb, phi).numpy()
    return phi[0], warped[0, 0]


@dataclass(frozen=True)
class Patch:
    offset: tuple

    def slices(self, p: int) -> tuple:
        return tuple(slice(o, o + p) for o in self.offset)


def patch_offsets(extent: int, p: int, stride: int) -> list[int]:
    if p > extent:
        raise ValueError(f"patch edge {p} exceeds extent {extent}")
    offs = list(range(0, extent - p + 1, stride))
    if offs[-1] != extent - p:
        offs.append(extent - p)  # last patch shifted inward
    return offs


def extract_patches(shape: Sequence[int], cfg: MultiscaleConfig, strides=None) -> list[Patch]:
    """Raster-ordered patch offsets tiling the lattice."""
    strides = strides or cfg.strides
    per_axis = [patch_offsets(n, cfg.patch, s) for n, s in zip(shape, strides)]
    return [Patch(tuple(o)) for o in itertools.product(*per_axis)]


def fusion_window(p: int, nd: int, kind: str) -> np.ndarray:
    if kind == "uniform":
        return np.ones((p,) * nd)
    w1 = np.sin(np.pi * (np.arange(p) + 0.5) / p)
    w = np.ones(())
    for _ in range(nd):
        w = np.multiply.outer(w, w1)
    return w


def fuse(fields: Sequence[np.ndarray], patches: Sequence[Patch], shape, cfg: MultiscaleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Weighted average of per-patch fields; returns (fused field, weight sum)."""
    nd = len(shape)
    acc = np.zeros((nd,) + tuple(shape))
    wsum = np.zeros(tuple(shape))
    win = fusion_window(cfg.patch, nd, cfg.fusion)
    for phi, patch in zip(fields, patches):
        sl = patch.slices(cfg.patch)
        acc[(slice(None),) + sl] += win * phi
        wsum[sl] += win
    if np.any(wsum <= 0):
        raise ValueError("patches do not cover the lattice")
    return acc / wsum, wsum


def local_stage(net: RegNet, moving, fixed, cfg: MultiscaleConfig) -> np.ndarray:
    """Fused local field over the whole lattice from overlapping patch predictions."""
    m, f = as_image(moving), as_image(fixed)
    patches = extract_patches(m.shape, cfg)

    def run(patch):
        sl = patch.slices(cfg.patch)
        return net.predict(batch(m[sl]), batch(f[sl]))[0].astype(np.float64)

    with ThreadPoolExecutor(worker_count()) as pool:
        fields = list(pool.map(run, patches))
    fused, _ = fuse(fields, patches, m.shape, cfg)
    return fused


@dataclass
class MultiscaleResult:
    deformed: np.ndarray
    phi_final: np.ndarray
    phi_global: np.ndarray
    phi_local: np.ndarray
    intermediate: np.ndarray


def register_multiscale(net_global: RegNet, net_local: RegNet, moving, fixed, cfg: MultiscaleConfig) -> MultiscaleResult:
    m, f = as_image(moving), as_image(fixed)
    phi_global, intermediate = global_stage(net_global, m, f, cfg)
    phi_local = local_stage(net_local, intermediate, f, cfg)
    phi_final = compose_fields(batch_field(phi_global), batch_field(phi_local), cfg.composition).numpy()
    # the only resampling of the moving image that reaches the output
    deformed = spatial_transform(batch(m), phi_final).numpy()[0, 0]
    return MultiscaleResult(deformed, phi_final[0], phi_global, phi_local.astype(np.float32), intermediate)


def local_training_set(net_global: RegNet, dataset: PairDataset, cfg: MultiscaleConfig, strides=None) -> PairDataset:
    """Patch pairs (globally deformed moving, fixed) for training the local network."""
    moving, fixed = [], []
    for m, f in zip(dataset.moving, dataset.fixed):
        _, warped = global_stage(net_global, m, f, cfg)
        for patch in extract_patches(m.shape, cfg, strides):
            sl = patch.slices(cfg.patch)
            moving.append(np.ascontiguousarray(warped[sl], dtype=np.float32))
            fixed.append(np.ascontiguousarray(f[sl], dtype=np.float32))
    return PairDataset(moving, fixed)
