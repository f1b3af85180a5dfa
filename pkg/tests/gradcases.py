"""Finite-difference cases for every differentiable operation and loss.

Each case is ``(name, f, arrays)``: ``f`` maps tensors to a scalar and
``arrays`` are the 64-bit inputs.  Inputs keep clear of kinks (|x| near 0 for
abs/leaky ReLU, integer sample coordinates for the warp) so that central
differences do not straddle one.
"""
import numpy as np

from cyclemorph import tensorcore as tc
from cyclemorph.losses import HyperParams, cycle_loss, identity_loss, local_ncc, smoothness, total_loss
from cyclemorph.regnet import RegNet, RegNetConfig, forward, layer_shapes
from cyclemorph.warp import compose_fields, downsample_image, rescale_field, resize_image, spatial_transform


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def fractional_field(rng, nd, spatial, amp=2.0):
    """Displacements whose sample coordinates sit well inside lattice cells."""
    whole = rng.integers(-int(amp), int(amp) + 1, (1, nd) + spatial)
    frac = rng.uniform(0.15, 0.85, (1, nd) + spatial)
    phi = whole + frac
    # keep the sample point inside the lattice (no clamping kinks)
    for d, n in enumerate(spatial):
        grid = np.arange(n).reshape([-1 if i == d else 1 for i in range(nd)])
        c = grid + phi[0, d]
        c = np.where(c < 0.2, c + n // 2, c)
        c = np.where(c > n - 1.2, c - n // 2, c)
        c = np.clip(c, 0.2, n - 1.2)
        c = np.floor(c) + np.clip(c - np.floor(c), 0.15, 0.85)
        phi[0, d] = c - grid
    return phi


def weighted(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: (t * tc.Tensor(w)).sum()


def tiny_net_cfg(nd=2):
    return RegNetConfig(ndim=nd, enc=(2, 3), dec=(3, 2, 2), final_std=0.1)


def cases(seed=0):
    rng = np.random.default_rng(seed)
    out = []

    def add(name, f, *arrays):
        out.append((name, f, [np.asarray(a, dtype=np.float64) for a in arrays]))

    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 3, 4))
    pos = rng.uniform(0.5, 2.0, (2, 3, 4))
    w = weighted(rng, (2, 3, 4))
    add("add", lambda x, y: w(x + y), a, b)
    add("add_broadcast", lambda x, y: w(x + y), a, rng.standard_normal((3, 1)))
    add("sub", lambda x, y: w(x - y), a, b)
    add("mul", lambda x, y: w(x * y), a, b)
    add("mul_broadcast", lambda x, y: w(x * y), a, rng.standard_normal((1, 3, 4)))
    add("div", lambda x, y: w(tc.div(x, y)), a, pos)
    add("neg", lambda x: w(-x), a)
    add("square", lambda x: w(tc.square(x)), a)
    add("sqrt", lambda x: w(tc.sqrt(x)), pos)
    add("abs", lambda x: w(tc.abs_(x)), away_from_zero(rng, (2, 3, 4)))
    add("leaky_relu", lambda x: w(tc.leaky_relu(x, 0.2)), away_from_zero(rng, (2, 3, 4)))
    w34 = rng.standard_normal((3, 4))
    add("sum_axis", lambda x: (x.sum(axis=0) * tc.Tensor(w34)).sum(), a)
    add("mean", lambda x: tc.square(x).mean(), a)
    add("mean_axis", lambda x: (tc.mean(x, axis=(0, 2), keepdims=True) * tc.Tensor(rng_fixed((1, 3, 1)))).sum(), a)
    add("reshape", lambda x: weighted(np.random.default_rng(1), (6, 4))(x.reshape(6, 4)), a)
    add("getitem", lambda x: weighted(np.random.default_rng(2), (2, 2, 2))(x[:, 1:, ::2]), a)
    add("pad", lambda x: weighted(np.random.default_rng(3), (2, 5, 7))(tc.pad(x, [(0, 0), (1, 1), (2, 1)])), a)
    add("concat", lambda x, y: weighted(np.random.default_rng(4), (2, 6, 4))(tc.concat([x, y], axis=1)), a, b)

    img = rng.standard_normal((2, 3, 6, 5))
    wk = rng.standard_normal((4, 3, 3, 3)) * 0.3
    bias = rng.standard_normal(4)
    add("conv", lambda x, k, c: weighted(np.random.default_rng(5), (2, 4, 6, 5))(tc.conv(x, k, c)), img, wk, bias)
    add("conv_stride2", lambda x, k: weighted(np.random.default_rng(6), (2, 4, 3, 3))(tc.conv(x, k, stride=2)), img, wk)
    vol = rng.standard_normal((1, 2, 4, 5, 3))
    wv = rng.standard_normal((2, 2, 3, 3, 3)) * 0.3
    add("conv_3d", lambda x, k: weighted(np.random.default_rng(7), (1, 2, 4, 5, 3))(tc.conv(x, k)), vol, wv)
    add("upsample", lambda x: weighted(np.random.default_rng(8), (2, 3, 12, 10))(tc.upsample_nearest(x, 2)), img)
    add("window_sum", lambda x: weighted(np.random.default_rng(9), (2, 3, 6, 5))(tc.window_sum(x, 3)), img)

    x2 = rng.uniform(0, 1, (2, 2, 7, 6))
    phi2 = fractional_field(rng, 2, (7, 6))
    phi2 = np.concatenate([phi2, fractional_field(rng, 2, (7, 6))])
    ws = weighted(rng, (2, 2, 7, 6))
    add("spatial_transform_2d", lambda x, p: ws(spatial_transform(x, p)), x2, phi2)
    x3 = rng.uniform(0, 1, (1, 1, 5, 4, 6))
    phi3 = fractional_field(rng, 3, (5, 4, 6), amp=1.0)
    add("spatial_transform_3d", lambda x, p: weighted(np.random.default_rng(10), (1, 1, 5, 4, 6))(spatial_transform(x, p)), x3, phi3)
    pa = fractional_field(rng, 2, (7, 6), amp=1.0)
    pb = fractional_field(rng, 2, (7, 6), amp=1.0)
    wc = weighted(rng, (1, 2, 7, 6))
    add("compose_fields", lambda p, q: wc(compose_fields(p, q)), pa, pb)
    f4 = rng.standard_normal((1, 2, 4, 6))
    add("rescale_field", lambda p: weighted(np.random.default_rng(11), (1, 2, 8, 12))(rescale_field(p, (8, 12))), f4)
    add("resize_image", lambda x: weighted(np.random.default_rng(12), (1, 2, 8, 3))(resize_image(x, (8, 3))), f4)
    add("downsample_image", lambda x: weighted(np.random.default_rng(13), (1, 2, 2, 3))(downsample_image(x, 2)), f4)

    # losses
    u = rng.uniform(0, 1, (1, 1, 12, 12))
    v = 0.6 * u + 0.4 * rng.uniform(0, 1, (1, 1, 12, 12))
    add("local_ncc_w9_12x12", lambda p, q: local_ncc(p, q, window=9), u, v)
    add("local_ncc_sum", lambda p, q: local_ncc(p, q, window=5, normalization="sum"), u, v)
    add("smoothness", lambda p: smoothness(p), rng.standard_normal((1, 2, 6, 7)))
    add("smoothness_3d", lambda p: smoothness(p), rng.standard_normal((1, 3, 3, 4, 5)))
    xa = rng.uniform(0, 1, (1, 1, 7, 6))
    ya = rng.uniform(0, 1, (1, 1, 7, 6))
    xh = rng.uniform(0, 1, (1, 1, 7, 6))
    yh = rng.uniform(0, 1, (1, 1, 7, 6))
    # L1 terms have kinks where the residual is zero; random data keeps them away
    add("cycle_l1", lambda p, q, r, s: cycle_loss(xa, ya, r, s, p, q), pa, pb, xh, yh)

    cfg = tiny_net_cfg()
    imgs = (rng.uniform(0, 1, (1, 1, 8, 8)), rng.uniform(0, 1, (1, 1, 8, 8)))
    names = list(layer_shapes(cfg))
    px = RegNet(cfg, seed=3).arrays()
    py = RegNet(cfg, seed=4).arrays()
    hp = HyperParams(window=5)

    def nets(*arrs):
        k = len(names)
        gx = RegNet(cfg, dict(zip(names, arrs[:k])))
        gy = RegNet(cfg, dict(zip(names, arrs[k:])))
        return gx, gy

    flow = [px["flow.w"], px["flow.b"], py["flow.w"], py["flow.b"]]

    def ident_flow(wx, bx, wy, by):
        gx = RegNet(cfg, {**{k: tc.Tensor(v) for k, v in px.items()}, "flow.w": wx, "flow.b": bx})
        gy = RegNet(cfg, {**{k: tc.Tensor(v) for k, v in py.items()}, "flow.w": wy, "flow.b": by})
        return identity_loss(imgs[0], imgs[1], gx, gy, hp)

    add("identity_loss", ident_flow, *flow)

    def end_to_end(*arrs):
        gx, gy = nets(*arrs)
        return total_loss(imgs[0], imgs[1], gx, gy, hp).total

    add("network_total_loss", end_to_end, *[px[n] for n in names], *[py[n] for n in names])
    add("network_forward", lambda m, f: weighted(np.random.default_rng(14), (1, 2, 8, 8))(
        forward({k: tc.Tensor(v) for k, v in px.items()}, m, f, cfg)), *imgs)
    return out


def rng_fixed(shape):
    return np.random.default_rng(99).standard_normal(shape)
