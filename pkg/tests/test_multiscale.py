import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cyclemorph import multiscale as ms
from cyclemorph.metrics import batch, batch_field
from cyclemorph.regnet import RegNet, RegNetConfig
from cyclemorph.trainer import PairDataset
from cyclemorph.warp import compose_fields, spatial_transform

NET = RegNetConfig(enc=(2, 2), dec=(2, 2, 2), final_std=0.5)


def test_default_strides():
    assert ms.MultiscaleConfig(patch=64).strides == (16, 16)
    assert ms.MultiscaleConfig(subsample=(2, 2, 2), patch=64).strides == (16, 16, 8)
    with pytest.raises(ValueError):
        ms.MultiscaleConfig(strides=(0, 4))
    with pytest.raises(ValueError):
        ms.MultiscaleConfig(fusion="median")


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 40), st.integers(1, 4), st.integers(1, 4))
def test_patch_offsets_cover_extent(extent, p_frac, stride):
    p = max(1, extent * p_frac // 4)
    stride = min(stride, p)  # the config rejects strides that leave gaps
    offs = ms.patch_offsets(extent, p, stride)
    covered = np.zeros(extent, bool)
    for o in offs:
        assert 0 <= o <= extent - p
        covered[o:o + p] = True
    assert covered.all() and offs == sorted(set(offs))


def test_patch_larger_than_lattice():
    with pytest.raises(ValueError):
        ms.patch_offsets(10, 16, 4)


@pytest.mark.parametrize("fusion", ["uniform", "cosine"])
def test_fusion_is_partition_of_unity(fusion):
    cfg = ms.MultiscaleConfig(patch=8, strides=(3, 5), fusion=fusion)
    shape = (20, 17)
    patches = ms.extract_patches(shape, cfg)
    win = ms.fusion_window(8, 2, fusion)
    _, wsum = ms.fuse([np.zeros((2, 8, 8))] * len(patches), patches, shape, cfg)
    total = np.zeros(shape)
    for p in patches:
        total[p.slices(8)] += win / wsum[p.slices(8)]
    np.testing.assert_allclose(total, 1.0, atol=1e-6)
    const, _ = ms.fuse([np.full((2, 8, 8), 1.5)] * len(patches), patches, shape, cfg)
    np.testing.assert_allclose(const, 1.5, atol=1e-12)


def test_degenerate_case_composes_two_plain_forwards():
    rng = np.random.default_rng(0)
    m, f = rng.random((16, 16)), rng.random((16, 16))
    g, l = RegNet(NET, seed=1), RegNet(NET, seed=2)
    cfg = ms.MultiscaleConfig(subsample=(1, 1), patch=16)
    res = ms.register_multiscale(g, l, m, f, cfg)
    phi_g = g.predict(batch(m), batch(f))
    inter = spatial_transform(batch(m), phi_g).numpy()
    phi_l = l.predict(inter, batch(f))
    expect = compose_fields(phi_g, phi_l).numpy()[0]
    np.testing.assert_allclose(res.phi_final, expect, atol=1e-6)


def test_single_interpolation_of_moving():
    rng = np.random.default_rng(1)
    m, f = rng.random((32, 32)), rng.random((32, 32))
    cfg = ms.MultiscaleConfig(subsample=(2, 2), patch=16)
    res = ms.register_multiscale(RegNet(NET, seed=1), RegNet(NET, seed=2), m, f, cfg)
    direct = spatial_transform(batch(m), batch_field(res.phi_final)).numpy()[0, 0]
    np.testing.assert_array_equal(res.deformed, direct)
    assert res.phi_global.shape == (2, 32, 32) and res.intermediate.shape == (32, 32)


def test_local_stage_independent_of_thread_count(monkeypatch):
    rng = np.random.default_rng(2)
    m, f = rng.random((32, 32)), rng.random((32, 32))
    net = RegNet(NET, seed=3)
    cfg = ms.MultiscaleConfig(patch=16)
    monkeypatch.setenv("CYCLEMORPH_THREADS", "1")
    a = ms.local_stage(net, m, f, cfg)
    monkeypatch.setenv("CYCLEMORPH_THREADS", "4")
    b = ms.local_stage(net, m, f, cfg)
    np.testing.assert_array_equal(a, b)


def test_local_training_set_patch_count():
    rng = np.random.default_rng(3)
    data = PairDataset([rng.random((32, 32), dtype=np.float32)], [rng.random((32, 32), dtype=np.float32)])
    cfg = ms.MultiscaleConfig(patch=16)
    out = ms.local_training_set(RegNet(NET, seed=1), data, cfg, strides=(16, 16))
    assert len(out) == 4 and out.moving[0].shape == (16, 16)
