"""Evaluation metrics for registration results.

Functions here take plain lattice arrays: images ``(*S)``, label maps
``(*S)`` of non-negative integers, fields ``(ndim, *S)``.  A leading batch
axis of length one is accepted and dropped.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .warp import COMPOSE, compose_fields, spatial_transform

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def as_field(phi) -> np.ndarray:
    phi = np.asarray(getattr(phi, "data", phi), dtype=np.float64)
    if phi.ndim >= 3 and phi.shape[0] == 1 and phi.shape[1] == phi.ndim - 2:
        phi = phi[0]
    if phi.shape[0] != phi.ndim - 1:
        raise ValueError(f"expected a (ndim, *spatial) field, got shape {phi.shape}")
    return phi


def as_image(img) -> np.ndarray:
    img = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if img.ndim in (4, 5) and img.shape[:2] == (1, 1):
        img = img[0, 0]
    return img


def batch(img) -> np.ndarray:
    """Lattice image -> ``(1, 1, *S)``."""
    return np.asarray(img, dtype=np.float32)[None, None]


def batch_field(phi) -> np.ndarray:
    return np.asarray(phi, dtype=np.float32)[None]


def jacobian_determinant(phi, literal: bool = False) -> np.ndarray:
    """Determinant of the Jacobian of ``v -> v + phi(v)`` (central differences).

    ``literal=True`` drops the identity and uses the field gradient alone.
    """
    phi = as_field(phi)
    nd = phi.shape[0]
    if any(s < 3 for s in phi.shape[1:]):
        raise ValueError(f"lattice {phi.shape[1:]} too small for central differences (need >= 3 per axis)")
    jac = np.empty(phi.shape[1:] + (nd, nd))
    for c in range(nd):
        grads = np.gradient(phi[c])
        grads = [grads] if nd == 1 else list(grads)
        for a in range(nd):
            jac[..., c, a] = grads[a] + (0.0 if literal else float(c == a))
    return np.linalg.det(jac)


def folding_percentage(phi, literal: bool = False) -> float:
    """Percentage of interior voxels whose Jacobian determinant is <= 0."""
    det = jacobian_determinant(phi, literal)
    interior = det[tuple(slice(1, -1) for _ in range(det.ndim))]
    return 100.0 * np.count_nonzero(interior <= 0) / interior.size


def dice(a, b, labels=None) -> dict:
    """Per-label Dice; labels absent from both maps map to None."""
    a = np.asarray(a).astype(np.int64)
    b = np.asarray(b).astype(np.int64)
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    if labels is None:
        labels = sorted((set(np.unique(a).tolist()) | set(np.unique(b).tolist())) - {0})
    out = {}
    for lab in labels:
        ia, ib = a == lab, b == lab
        tp = np.count_nonzero(ia & ib)
        fp = np.count_nonzero(ia & ~ib)
        fn = np.count_nonzero(~ia & ib)
        denom = 2 * tp + fp + fn
        out[int(lab)] = None if denom == 0 else 2 * tp / denom
    return out


def mean_dice(scores: dict) -> float | None:
    vals = [v for v in scores.values() if v is not None]
    return float(np.mean(vals)) if vals else None


def warp_labels(labels, phi) -> np.ndarray:
    """Nearest-neighbour sampling of a label map at ``v + phi(v)``, edge clamped."""
    labels = np.asarray(labels)
    phi = as_field(phi)
    if labels.shape != phi.shape[1:]:
        raise ValueError(f"label map {labels.shape} and field {phi.shape} differ in lattice")
    idx = []
    for d, n in enumerate(labels.shape):
        grid = np.arange(n).reshape([-1 if i == d else 1 for i in range(labels.ndim)])
        idx.append(np.clip(np.floor(grid + phi[d] + 0.5), 0, n - 1).astype(np.intp))
    return labels[tuple(idx)]


def sample_field(phi, points) -> np.ndarray:
    """Multilinear (edge-clamped) field values at arbitrary points ``(N, ndim)``."""
    phi = as_field(phi)
    pts = np.asarray(points, dtype=np.float64)
    nd = phi.shape[0]
    spatial = phi.shape[1:]
    out = np.zeros((len(pts), nd))
    lo, frac = [], []
    for d in range(nd):
        c = np.clip(pts[:, d], 0, spatial[d] - 1)
        i0 = np.minimum(np.floor(c), max(spatial[d] - 2, 0)).astype(int)
        lo.append(i0)
        frac.append(c - i0)
    for bits in np.ndindex(*(2,) * nd):
        w = np.ones(len(pts))
        idx = []
        for d, b in enumerate(bits):
            w *= frac[d] if b else 1 - frac[d]
            idx.append(np.minimum(lo[d] + b, spatial[d] - 1))
        out += w[:, None] * phi[(slice(None),) + tuple(idx)].T
    return out


def warp_points(points, phi) -> np.ndarray:
    """Map fixed-space points to moving space: ``p + phi(p)``."""
    pts = np.asarray(points, dtype=np.float64)
    return pts + sample_field(phi, pts)


def tre(a, b, spacing=1.0) -> float:
    """Mean Euclidean distance between corresponding landmarks, scaled by voxel spacing."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"landmark sets differ: {a.shape} vs {b.shape}")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (a.shape[1],))
    if np.any(spacing <= 0):
        raise ValueError("voxel spacing must be positive")
    return float(np.mean(np.linalg.norm((a - b) * spacing, axis=1)))


def nmse(a, b) -> float:
    a, b = as_image(a), as_image(b)
    ref = float(np.sum(b * b))
    if ref == 0:
        raise ValueError("nmse undefined for an all-zero reference image")
    return float(np.sum((a - b) ** 2) / ref)


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all full windows (uniform weights, population statistics)."""
    a, b = as_image(a), as_image(b)
    if any(s < window for s in a.shape):
        raise ValueError(f"image {a.shape} smaller than SSIM window {window}")
    mu_a, mu_b = uniform_filter(a, window), uniform_filter(b, window)
    var_a = uniform_filter(a * a, window) - mu_a ** 2
    var_b = uniform_filter(b * b, window) - mu_b ** 2
    cov = uniform_filter(a * b, window) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    r = window // 2
    return float(s[tuple(slice(r, n - r) for n in s.shape)].mean())


def nmse_ssim(a, b) -> tuple[float, float]:
    return nmse(a, b), ssim(a, b)


def endpoint_error(phi_pred, phi_true) -> float:
    """Mean residual of the predicted correspondence under the known warp.

    The benchmark builds ``moving = T(fixed, phi_true)``; a perfect prediction
    satisfies ``phi_pred(p) + phi_true(p + phi_pred(p)) = 0``.
    """
    pred = batch_field(as_field(phi_pred))
    true = batch_field(as_field(phi_true))
    resid = compose_fields(true, pred, COMPOSE).numpy()[0].astype(np.float64)
    return float(np.mean(np.linalg.norm(resid, axis=0)))


def mean_abs_displacement(phi) -> float:
    return float(np.mean(np.linalg.norm(as_field(phi), axis=0)))


def reverse_consistency(gx, gy, x, y, return_net: str = "gy") -> tuple[float, float]:
    """Warp X toward Y, register the result back toward X, compare with X.

    The return trip uses ``gy`` (the network trained to map Y-like images onto
    X) unless ``return_net="gx"``.
    """
    xb, yb = batch(as_image(x)), batch(as_image(y))
    y_hat = spatial_transform(xb, gx.predict(xb, yb)).numpy()
    back = gy if return_net == "gy" else gx
    x_tilde = spatial_transform(y_hat, back.predict(y_hat, xb)).numpy()
    return nmse_ssim(x_tilde[0, 0], xb[0, 0])


@dataclass
class EvalReport:
    nmse: float | None = None
    ssim: float | None = None
    dice: dict = field(default_factory=dict)
    dice_mean: float | None = None
    tre: float | None = None
    folding_pct: float | None = None
    endpoint_error: float | None = None
    initial_endpoint_error: float | None = None
    initial_nmse: float | None = None
    reverse_nmse: float | None = None
    reverse_ssim: float | None = None
    runtime: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dice"] = {str(k): v for k, v in self.dice.items()}
        return d


def evaluate(moving, fixed, phi, deformed=None, extras: dict | None = None,
             nets=None, spacing=1.0, runtime=None) -> EvalReport:
    """Every metric the available ground truth supports; missing inputs leave fields None."""
    extras = extras or {}
    moving, fixed = as_image(moving), as_image(fixed)
    phi = as_field(phi)
    if deformed is None:
        deformed = spatial_transform(batch(moving), batch_field(phi)).numpy()[0, 0]
    rep = EvalReport()
    rep.nmse, rep.ssim = nmse_ssim(deformed, fixed)
    rep.initial_nmse = nmse(moving, fixed)
    rep.folding_pct = folding_percentage(phi)
    if "labels_moving" in extras and "labels_fixed" in extras:
        rep.dice = dice(warp_labels(extras["labels_moving"], phi), extras["labels_fixed"])
        rep.dice_mean = mean_dice(rep.dice)
    if "landmarks_moving" in extras and "landmarks_fixed" in extras:
        rep.tre = tre(warp_points(extras["landmarks_fixed"], phi), extras["landmarks_moving"], spacing)
    if "phi_true" in extras:
        rep.endpoint_error = endpoint_error(phi, extras["phi_true"])
        rep.initial_endpoint_error = endpoint_error(np.zeros_like(phi), extras["phi_true"])
    if nets is not None:
        rep.reverse_nmse, rep.reverse_ssim = reverse_consistency(nets[0], nets[1], moving, fixed)
    rep.runtime = runtime
    return rep
