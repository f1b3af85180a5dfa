"""Registration, cycle and identity objectives.

All aggregates default to the mean over the lattice so the weights transfer
across image sizes; ``normalization="sum"`` gives the unnormalized sums.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from . import tensorcore as tc
from .tensorcore import ShapeError, Tensor, as_tensor
from .warp import spatial_transform


@dataclass
class HyperParams:
    alpha: float = 0.1   # cycle weight
    beta: float = 0.5    # identity weight
    lam: float = 1.0     # smoothness weight
    window: int = 9
    eps: float = 1e-5
    normalization: str = "mean"
    identity_cross: bool = True  # G_X sees the (Y, Y) pair, as in the published objective

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("alpha, beta and lam must be non-negative")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"NCC window must be odd and >= 3, got {self.window}")
        if self.normalization not in ("mean", "sum"):
            raise ValueError(f"normalization must be 'mean' or 'sum', got {self.normalization!r}")

    def to_dict(self):
        return asdict(self)


def _aggregate(t: Tensor, normalization: str) -> Tensor:
    return t.mean() if normalization == "mean" else t.sum()


def local_ncc(a, b, window: int = 9, eps: float = 1e-5, normalization: str = "mean") -> Tensor:
    """Squared windowed correlation coefficient, aggregated over the lattice.

    Windows are clipped at the border.
    """
    a, b = as_tensor(a), as_tensor(b)
    if window % 2 == 0 or window < 1:
        raise ValueError(f"NCC window must be odd, got {window}")
    if a.shape != b.shape:
        raise ShapeError("local_ncc", a.shape, b.shape)
    if a.shape[1] != 1:
        raise ShapeError("local_ncc", a.shape, b.shape, detail="single channel only")
    inv_count = Tensor._wrap(1.0 / tc.window_count(a.shape[2:], window))
    sa = tc.window_sum(a, window)
    sb = tc.window_sum(b, window)
    saa = tc.window_sum(tc.square(a), window)
    sbb = tc.window_sum(tc.square(b), window)
    sab = tc.window_sum(a * b, window)
    cross = sab - sa * sb * inv_count
    var_a = saa - tc.square(sa) * inv_count
    var_b = sbb - tc.square(sb) * inv_count
    cc = tc.div(tc.square(cross), var_a * var_b, eps)
    return _aggregate(cc, normalization)


def smoothness(phi, normalization: str = "mean") -> Tensor:
    """Squared forward differences of every component along every axis.

    The last difference along each axis is zero. Mean mode averages over all
    ``ndim * ndim * voxels`` difference entries.
    """
    phi = as_tensor(phi)
    nd = phi.ndim - 2
    total = None
    for ax in range(2, 2 + nd):
        hi = [slice(None)] * phi.ndim
        lo = [slice(None)] * phi.ndim
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        d = tc.square(phi[tuple(hi)] - phi[tuple(lo)]).sum()
        total = d if total is None else total + d
    if normalization == "mean":
        total = total * (1.0 / (phi.size * nd))
    return total


def registration_loss(x, y, phi, hp: HyperParams) -> Tensor:
    warped = spatial_transform(x, phi)
    sim = local_ncc(warped, y, hp.window, hp.eps, hp.normalization)
    return hp.lam * smoothness(phi, hp.normalization) - sim


def l1(a, b, normalization: str = "mean") -> Tensor:
    return _aggregate(tc.abs_(as_tensor(a) - as_tensor(b)), normalization)


def cycle_loss(x, y, x_hat, y_hat, phi_hat_xy, phi_hat_yx, normalization: str = "mean") -> Tensor:
    """L1 distance between each original image and its twice-warped version.

    ``y_hat = T(x, phi_xy)`` and ``x_hat = T(y, phi_yx)``; the second-pass
    fields map them back.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError("cycle_loss", x.shape, y.shape)
    x_tilde = spatial_transform(y_hat, phi_hat_yx)
    y_tilde = spatial_transform(x_hat, phi_hat_xy)
    return l1(x_tilde, x, normalization) + l1(y_tilde, y, normalization)


def identity_loss(x, y, net_x, net_y, hp: HyperParams) -> Tensor:
    """Negative self-similarity after warping an image with the field predicted for (img, img).

    ``net_x``/``net_y`` are callables ``(moving, fixed) -> field``.
    """
    x, y = as_tensor(x), as_tensor(y)
    if hp.identity_cross:
        first, second = (net_x, y), (net_y, x)
    else:
        first, second = (net_x, x), (net_y, y)
    total = None
    for net, img in (first, second):
        term = local_ncc(spatial_transform(img, net(img, img)), img, hp.window, hp.eps, hp.normalization)
        total = -term if total is None else total - term
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    regist_xy: Tensor
    regist_yx: Tensor
    cycle: Tensor
    identity: Tensor

    def values(self) -> dict[str, float]:
        return {
            "L_regist_xy": self.regist_xy.item(),
            "L_regist_yx": self.regist_yx.item(),
            "L_cycle": self.cycle.item(),
            "L_identity": self.identity.item(),
            "total": self.total.item(),
        }


def total_loss(x, y, net_x, net_y, hp: HyperParams, skip_zero_weighted: bool = False) -> LossBreakdown:
    """Full two-network objective.

    With ``skip_zero_weighted`` a term whose weight is zero is evaluated
    outside the tape: it is still reported, but contributes nothing.
    """
    x, y = as_tensor(x), as_tensor(y)
    phi_xy = net_x(x, y)
    phi_yx = net_y(y, x)
    y_hat = spatial_transform(x, phi_xy)
    x_hat = spatial_transform(y, phi_yx)
    sim_xy = local_ncc(y_hat, y, hp.window, hp.eps, hp.normalization)
    sim_yx = local_ncc(x_hat, x, hp.window, hp.eps, hp.normalization)
    reg_xy = hp.lam * smoothness(phi_xy, hp.normalization) - sim_xy
    reg_yx = hp.lam * smoothness(phi_yx, hp.normalization) - sim_yx

    def cycle():
        # second pass sees the deformed pair with the order switched
        return cycle_loss(x, y, x_hat, y_hat, net_x(x_hat, y_hat), net_y(y_hat, x_hat), hp.normalization)

    def ident():
        return identity_loss(x, y, net_x, net_y, hp)

    terms = {}
    for name, fn, weight in (("cycle", cycle, hp.alpha), ("identity", ident, hp.beta)):
        if weight == 0 and skip_zero_weighted:
            with tc.no_tape():
                terms[name] = fn().detach()
        else:
            terms[name] = fn()
    total = reg_xy + reg_yx
    if hp.alpha:
        total = total + hp.alpha * terms["cycle"]
    if hp.beta:
        total = total + hp.beta * terms["identity"]
    return LossBreakdown(total, reg_xy, reg_yx, terms["cycle"], terms["identity"])


def breakdown_record(step: int, parts: LossBreakdown) -> dict:
    return {"step": step, **parts.values()}

