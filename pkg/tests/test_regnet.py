import numpy as np
import pytest

from cyclemorph import regnet
from cyclemorph.regnet import CheckpointMismatch, RegNet, RegNetConfig, layer_shapes, zero_net
from cyclemorph.tensorcore import ShapeError


def test_default_layout_follows_voxelmorph_widths():
    shapes = layer_shapes(RegNetConfig())
    assert [shapes[f"enc{i}.w"][0] for i in range(4)] == [16, 32, 32, 32]
    assert [shapes[f"dec{j}.w"][0] for j in range(5)] == [32, 32, 32, 8, 8]
    assert shapes["flow.w"] == (2, 8, 3, 3)
    # skip concatenations feed the decoder
    assert shapes["dec1.w"][1] == 32 + 32 and shapes["dec3.w"][1] == 32 + 16 and shapes["dec4.w"][1] == 8 + 2


def test_forward_shape_and_near_zero_init():
    cfg = RegNetConfig()
    net = RegNet(cfg, seed=0)
    rng = np.random.default_rng(0)
    phi = net.predict(rng.random((1, 1, 32, 32)), rng.random((1, 1, 32, 32)))
    assert phi.shape == (1, 2, 32, 32)
    assert np.abs(phi).max() < 1e-2


def test_forward_3d():
    cfg = RegNetConfig(ndim=3, enc=(2, 2), dec=(2, 2, 2))
    net = RegNet(cfg, seed=0)
    assert net.predict(np.zeros((1, 1, 8, 4, 4)), np.zeros((1, 1, 8, 4, 4))).shape == (1, 3, 8, 4, 4)


def test_seeded_init_is_reproducible():
    a = RegNet(RegNetConfig(), seed=5).arrays()
    b = RegNet(RegNetConfig(), seed=5).arrays()
    c = RegNet(RegNetConfig(), seed=6).arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc0.w"], c["enc0.w"])


def test_bad_inputs():
    net = RegNet(RegNetConfig(), seed=0)
    with pytest.raises(ValueError):
        net.predict(np.zeros((1, 1, 24, 24)), np.zeros((1, 1, 24, 24)))
    with pytest.raises(ShapeError):
        net.predict(np.zeros((1, 1, 32, 32)), np.zeros((1, 1, 16, 16)))
    with pytest.raises(ValueError):
        RegNetConfig(ndim=4)


def test_save_load_bit_exact(tmp_path):
    cfg = RegNetConfig(enc=(2, 3), dec=(3, 2, 2))
    net = RegNet(cfg, seed=1)
    net.save(tmp_path / "n.cmk")
    back = RegNet.load(tmp_path / "n.cmk")
    assert back.cfg == cfg
    for k, v in net.arrays().items():
        assert back.arrays()[k].tobytes() == v.tobytes()


def test_load_reports_mismatch(tmp_path):
    small = RegNetConfig(enc=(2, 3), dec=(3, 2, 2))
    RegNet(small, seed=1).save(tmp_path / "n.cmk")
    with pytest.raises(CheckpointMismatch) as err:
        regnet.load(tmp_path / "n.cmk", RegNetConfig(enc=(2, 4), dec=(3, 2, 2)))
    assert "enc1.w" in err.value.wrong_shape
    with pytest.raises(CheckpointMismatch):
        regnet.load(tmp_path / "n.cmk", RegNetConfig(enc=(2, 3, 3), dec=(3, 2, 2)))


def test_zero_net_predicts_identity():
    net = zero_net(RegNetConfig(enc=(2, 2), dec=(2, 2, 2)))
    rng = np.random.default_rng(0)
    assert not net.predict(rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8))).any()
