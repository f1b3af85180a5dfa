"""Differentiable image warping and displacement-field algebra.

Images are ``(N, C, *spatial)`` and displacement fields ``(N, ndim, *spatial)``
in voxel units; component ``d`` displaces along spatial axis ``d``.  The warp
samples ``X`` at ``p + phi(p)``, clamping sample coordinates to the lattice.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .tensorcore import ShapeError, Tensor, as_tensor, record_op

COMPOSE = "compose"
PLAIN_SUM = "sum"


def _check_pair(op, x: Tensor, phi: Tensor):
    nd = phi.ndim - 2
    if (nd not in (1, 2, 3) or phi.shape[1] != nd or x.ndim != phi.ndim
            or x.shape[0] != phi.shape[0] or x.shape[2:] != phi.shape[2:]):
        raise ShapeError(op, x.shape, phi.shape, detail="image (N,C,*S) and field (N,ndim,*S) must share a lattice")


def _corners(phi: np.ndarray):
    """Per-axis lower index, fractional weight and in-bounds mask of the sample points."""
    spatial = phi.shape[2:]
    lo, frac, inside = [], [], []
    for d, n in enumerate(spatial):
        shape = [1] * len(spatial)
        shape[d] = n
        c = np.arange(n, dtype=np.float64).reshape(shape) + phi[:, d].astype(np.float64)
        inside.append((c >= 0) & (c <= n - 1))
        c = np.clip(c, 0, n - 1)
        i0 = np.minimum(np.floor(c), max(n - 2, 0)).astype(np.intp)
        lo.append(i0)
        frac.append(c - i0)
    return lo, frac, inside


def spatial_transform(x, phi) -> Tensor:
    """Multilinear resampling of ``x`` at ``p + phi(p)`` with edge clamping.

    Differentiable in both ``x`` and ``phi``; the gradient for a displacement
    component is zero where its sample coordinate was clamped.
    """
    x, phi = as_tensor(x), as_tensor(phi)
    _check_pair("spatial_transform", x, phi)
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    nd = len(spatial)
    npix = int(np.prod(spatial))
    lo, frac, inside = _corners(phi.data)
    xf = x.data.reshape(n, c, npix)
    corners = []
    out = np.zeros((n, c, npix), dtype=np.float64)
    for bits in itertools.product((0, 1), repeat=nd):
        idx = [np.minimum(lo[d] + b, spatial[d] - 1) for d, b in enumerate(bits)]
        flat = np.ravel_multi_index(idx, spatial).reshape(n, 1, npix)
        w = [frac[d] if b else 1.0 - frac[d] for d, b in enumerate(bits)]
        weight = np.prod(w, axis=0).reshape(n, 1, npix)
        vals = np.take_along_axis(xf, flat, axis=2)
        out += weight * vals
        corners.append((bits, flat, w, vals))

    def bw(g):
        g = g.reshape(n, c, npix).astype(np.float64)
        gx = gphi = None
        if x.requires_grad:
            acc = np.zeros(n * c * npix, dtype=np.float64)
            base = (np.arange(n * c) * npix).reshape(n, c, 1)
            for bits, flat, w, _ in corners:
                weight = np.prod(w, axis=0).reshape(n, 1, npix)
                acc += np.bincount((base + flat).ravel(), weights=(g * weight).ravel(), minlength=n * c * npix)
            gx = acc.reshape(x.shape)
        if phi.requires_grad:
            gphi = np.zeros((n, nd, npix), dtype=np.float64)
            for bits, _, w, vals in corners:
                gv = (g * vals).sum(axis=1)
                for d in range(nd):
                    dw = np.ones((n,) + spatial)
                    for e in range(nd):
                        if e != d:
                            dw = dw * w[e]
                    sign = 1.0 if bits[d] else -1.0
                    gphi[:, d] += sign * (dw * inside[d]).reshape(n, npix) * gv
            gphi = gphi.reshape(phi.shape)
        return gx, gphi

    return record_op("spatial_transform", out.reshape(x.shape), (x, phi), bw)


def apply_multichannel(x, phi) -> Tensor:
    """Warp every channel of ``x`` with one shared field."""
    return spatial_transform(x, phi)


def compose_fields(phi_a, phi_b, mode: str = COMPOSE) -> Tensor:
    """Field equivalent to warping by ``phi_a`` first and then by ``phi_b``.

    ``compose``: ``phi_b(v) + phi_a(v + phi_b(v))``.  ``sum``: ``phi_a + phi_b``.
    """
    phi_a, phi_b = as_tensor(phi_a), as_tensor(phi_b)
    if phi_a.shape != phi_b.shape:
        raise ShapeError("compose_fields", phi_a.shape, phi_b.shape)
    if mode == PLAIN_SUM:
        return phi_a + phi_b
    if mode != COMPOSE:
        raise ValueError(f"unknown composition mode {mode!r}")
    return phi_b + spatial_transform(phi_a, phi_b)


# --------------------------------------------------------------------------
# resampling; both operations are separable linear maps


def _linear_matrix(n: int, m: int) -> np.ndarray:
    """Linear interpolation from n to m samples, pixel-centre aligned, edge clamped."""
    mat = np.zeros((m, n))
    pos = np.clip((np.arange(m) + 0.5) * n / m - 0.5, 0, n - 1)
    i0 = np.minimum(np.floor(pos).astype(int), max(n - 2, 0))
    t = pos - i0
    i1 = np.minimum(i0 + 1, n - 1)
    np.add.at(mat, (np.arange(m), i0), 1 - t)
    np.add.at(mat, (np.arange(m), i1), t)
    return mat


def _block_matrix(n: int, f: int) -> np.ndarray:
    mat = np.zeros((n // f, n))
    for j in range(n // f):
        mat[j, j * f:(j + 1) * f] = 1.0 / f
    return mat


def _apply_axis_matrices(op: str, x: Tensor, mats: Sequence[np.ndarray], scale=None) -> Tensor:
    def run(a, ms, transpose=False):
        a = a.astype(np.float64)
        for d, m in enumerate(ms):
            m = m.T if transpose else m
            a = np.moveaxis(np.tensordot(m, a, axes=([1], [d + 2])), 0, d + 2)
        return a

    val = run(x.data, mats)
    if scale is not None:
        val = val * scale

    def bw(g):
        if scale is not None:
            g = g * scale
        return (run(g, mats, transpose=True),)

    return record_op(op, val, (x,), bw)


def _target_factors(op, src: Sequence[int], dst: Sequence[int]):
    if len(src) != len(dst):
        raise ShapeError(op, src, dst)
    for s, t in zip(src, dst):
        if t <= 0 or (t % s and s % t):
            raise ValueError(f"{op}: extent {s} -> {t} is not an integral scale")
    return [t / s for s, t in zip(src, dst)]


def rescale_field(phi, target: Sequence[int]) -> Tensor:
    """Resample a field onto ``target`` extents, converting displacements to target voxels."""
    phi = as_tensor(phi)
    spatial = phi.shape[2:]
    factors = _target_factors("rescale_field", spatial, tuple(target))
    mats = [_linear_matrix(s, t) for s, t in zip(spatial, target)]
    scale = np.array(factors).reshape(1, -1, *([1] * len(spatial)))
    return _apply_axis_matrices("rescale_field", phi, mats, scale)


def resize_image(x, target: Sequence[int]) -> Tensor:
    """Multilinear resampling of an image onto ``target`` extents."""
    x = as_tensor(x)
    _target_factors("resize_image", x.shape[2:], tuple(target))
    return _apply_axis_matrices("resize_image", x, [_linear_matrix(s, t) for s, t in zip(x.shape[2:], target)])


def downsample_image(x, factors) -> Tensor:
    """Block-average downsampling by an integer factor per spatial axis."""
    x = as_tensor(x)
    spatial = x.shape[2:]
    if isinstance(factors, int):
        factors = [factors] * len(spatial)
    if len(factors) != len(spatial):
        raise ShapeError("downsample_image", spatial, tuple(factors))
    for n, f in zip(spatial, factors):
        if f < 1 or n % f:
            raise ValueError(f"downsample_image: extent {n} not divisible by factor {f}")
    return _apply_axis_matrices("downsample_image", x, [_block_matrix(n, f) for n, f in zip(spatial, factors)])
