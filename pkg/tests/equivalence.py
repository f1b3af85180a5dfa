"""Random-instance comparison of package metrics against the loop oracles."""
import numpy as np

import oracles
from cyclemorph import metrics as M
from cyclemorph.losses import local_ncc, smoothness
from cyclemorph.tensorcore import precision
from cyclemorph.warp import spatial_transform

TOLERANCE = {"spatial_transform": 1e-6, "local_ncc": 1e-6, "smoothness": 1e-6, "folding_percentage": 1e-6,
             "dice": 1e-9, "tre": 1e-9, "nmse": 1e-6, "ssim": 1e-6}


def _lattice(rng, lo=3, hi=16):
    nd = int(rng.choice([2, 2, 3]))
    top = hi if nd == 2 else 7
    return tuple(int(s) for s in rng.integers(lo, top + 1, nd))


def _field(rng, shape, scale):
    return rng.normal(0.0, scale, (len(shape),) + shape)


def run(n=100, seed=0, dtype="float64"):
    """Max absolute discrepancy per function over ``n`` random instances each.

    The oracles work in plain Python floats.
    """
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(TOLERANCE, 0.0)

    def note(key, got, ref):
        worst[key] = max(worst[key], float(np.max(np.abs(np.asarray(got, float) - np.asarray(ref, float)))))

    with precision(dtype):
        for _ in range(n):
            shape = _lattice(rng)
            img = rng.uniform(0, 1, shape)
            phi = _field(rng, shape, float(rng.uniform(0.2, 3.0)))
            got = spatial_transform(img[None, None], phi[None]).numpy()[0, 0]
            note("spatial_transform", got, oracles.warp(img, phi))

            a = rng.uniform(0, 1, shape)
            b = 0.5 * a + 0.5 * rng.uniform(0, 1, shape)
            w = int(rng.choice([3, 5, 9]))
            note("local_ncc", local_ncc(a[None, None], b[None, None], window=w).item(), oracles.local_ncc(a, b, w))

            note("smoothness", smoothness(phi[None]).item(), oracles.smoothness(phi))
            # rougher fields so that folding actually occurs in some instances
            rough = _field(rng, shape, float(rng.uniform(0.1, 1.0)))
            note("folding_percentage", M.folding_percentage(rough), oracles.folding_percentage(rough))

            k = int(rng.integers(2, 6))
            la = rng.integers(0, k, shape)
            lb = np.where(rng.random(shape) < 0.7, la, rng.integers(0, k, shape))
            got_d, ref_d = M.dice(la, lb), oracles.dice(la, lb)
            assert set(got_d) == set(ref_d)
            for lab in ref_d:
                note("dice", got_d[lab], ref_d[lab])

            m = int(rng.integers(1, 20))
            pa = rng.uniform(0, 16, (m, len(shape)))
            pb = pa + rng.normal(0, 2, (m, len(shape)))
            sp = rng.uniform(0.5, 2.0, len(shape))
            note("tre", M.tre(pa, pb, sp), oracles.tre(pa, pb, sp))

            note("nmse", M.nmse(a, b), oracles.nmse(a, b))
            s2 = tuple(int(s) for s in rng.integers(7, 17, 2))
            a2 = rng.uniform(0, 1, s2)
            b2 = np.clip(a2 + rng.normal(0, 0.2, s2), 0, 1)
            note("ssim", M.ssim(a2, b2), oracles.ssim(a2, b2))
    return worst
