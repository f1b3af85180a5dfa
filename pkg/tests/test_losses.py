import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cyclemorph.losses import (HyperParams, LossBreakdown, breakdown_record, cycle_loss, identity_loss, local_ncc,
                               smoothness, total_loss)
from cyclemorph.regnet import RegNetConfig, RegNet, zero_net
from cyclemorph.tensorcore import GradTape, ShapeError, precision


def ncc(a, b, **kw):
    with precision("float64"):
        return local_ncc(a[None, None], b[None, None], **kw).item()


def test_ncc_of_image_with_itself_is_near_one():
    img = np.random.default_rng(0).random((12, 12))
    assert ncc(img, img) == pytest.approx(1.0, abs=1e-3)


def test_ncc_invariant_to_affine_intensity():
    rng = np.random.default_rng(1)
    a, b = rng.random((10, 10)), rng.random((10, 10))
    assert ncc(a, b, eps=0.0) == pytest.approx(ncc(3 * a + 2, b, eps=0.0), rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([3, 5, 9]))
def test_ncc_matches_oracle_and_is_bounded(seed, w):
    rng = np.random.default_rng(seed)
    a = rng.random((9, 8))
    b = rng.random((9, 8))
    got = ncc(a, b, window=w)
    assert 0.0 <= got <= 1.0
    assert got == pytest.approx(oracles.local_ncc(a, b, w), abs=1e-10)


def test_ncc_sum_normalization_scales_by_voxels():
    rng = np.random.default_rng(2)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    assert ncc(a, b, normalization="sum") == pytest.approx(64 * ncc(a, b), rel=1e-12)


def test_ncc_rejects_even_window_and_mismatch():
    with pytest.raises(ValueError):
        local_ncc(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)), window=4)
    with pytest.raises(ShapeError):
        local_ncc(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


def test_smoothness_zero_for_constant_field():
    assert smoothness(np.full((1, 2, 5, 5), 3.0)).item() == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_smoothness_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    phi = rng.normal(0, 1, (2, 5, 6))
    with precision("float64"):
        assert smoothness(phi[None]).item() == pytest.approx(oracles.smoothness(phi), rel=1e-12)


def test_cycle_loss_zero_when_returns_exact():
    rng = np.random.default_rng(3)
    x, y = rng.random((1, 1, 6, 6)), rng.random((1, 1, 6, 6))
    zero = np.zeros((1, 2, 6, 6))
    # zero forward fields: x_hat = y, y_hat = x, and zero return fields bring them back
    assert cycle_loss(x, y, y, x, zero, zero).item() == 0.0


def test_identity_loss_minimal_for_zero_net():
    cfg = RegNetConfig(enc=(2, 2), dec=(2, 2, 2))
    img = np.random.default_rng(4).random((1, 1, 8, 8))
    hp = HyperParams(window=3)
    z = zero_net(cfg)
    val = identity_loss(img, img, z, z, hp).item()
    assert val == pytest.approx(-2 * ncc(img[0, 0], img[0, 0], window=3), abs=1e-5)


def test_identity_cross_pairing():
    # G_X must see Y: with cross pairing, swapping which image is given changes nothing
    calls = []

    def spy(tag):
        def net(m, f):
            calls.append((tag, float(np.asarray(m.data).mean())))
            return np.zeros((1, 2) + m.shape[2:])
        return net

    x = np.zeros((1, 1, 8, 8)) + 0.25
    y = np.zeros((1, 1, 8, 8)) + 0.75
    y[0, 0, 0, 0] = 0.0
    x[0, 0, 0, 0] = 1.0
    identity_loss(x, y, spy("gx"), spy("gy"), HyperParams(window=3))
    assert calls[0][0] == "gx" and calls[0][1] == pytest.approx(y.mean(), abs=1e-6)
    assert calls[1][0] == "gy" and calls[1][1] == pytest.approx(x.mean(), abs=1e-6)
    calls.clear()
    identity_loss(x, y, spy("gx"), spy("gy"), HyperParams(window=3, identity_cross=False))
    assert calls[0][1] == pytest.approx(x.mean(), abs=1e-6)


def test_total_loss_combines_weighted_terms():
    cfg = RegNetConfig(enc=(2, 2), dec=(2, 2, 2), final_std=0.3)
    gx, gy = RegNet(cfg, seed=1), RegNet(cfg, seed=2)
    rng = np.random.default_rng(5)
    x, y = rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8))
    hp = HyperParams(alpha=0.3, beta=0.7, window=3)
    with precision("float64"):
        parts = total_loss(x, y, gx, gy, hp)
        v = parts.values()
    expect = v["L_regist_xy"] + v["L_regist_yx"] + 0.3 * v["L_cycle"] + 0.7 * v["L_identity"]
    assert v["total"] == pytest.approx(expect, rel=1e-12)
    rec = breakdown_record(4, parts)
    assert rec["step"] == 4 and set(rec) == {"step", "L_regist_xy", "L_regist_yx", "L_cycle", "L_identity", "total"}


def test_zero_weighted_terms_do_not_reach_the_gradient():
    cfg = RegNetConfig(enc=(2, 2), dec=(2, 2, 2), final_std=0.3)
    gx, gy = RegNet(cfg, seed=1), RegNet(cfg, seed=2)
    rng = np.random.default_rng(6)
    x, y = rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8))
    hp = HyperParams(alpha=0.0, beta=0.0, window=3)
    grads = []
    for skip in (False, True):
        with GradTape() as tape:
            parts = total_loss(x, y, gx, gy, hp, skip_zero_weighted=skip)
        g = tape.backward(parts.total, list(gx.params.values()))
        grads.append(np.concatenate([g[p].numpy().ravel() for p in gx.params.values()]))
        assert parts.cycle.item() != 0.0
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-5, atol=1e-8)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams(alpha=-1)
    with pytest.raises(ValueError):
        HyperParams(window=8)
    with pytest.raises(ValueError):
        HyperParams(normalization="median")
    assert HyperParams().to_dict()["beta"] == 0.5
