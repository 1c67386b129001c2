import numpy as np
import pytest

from oracles import PUBLISHED_TABLE
from spdrdl import losses as LS
from spdrdl import model as M
from spdrdl import tensor as T
from spdrdl.errors import ConfigError, CorruptFileError, ShapeError, VersionError

SMALL = M.ModelConfig(input_size=32, unet_depth=2, unet_width=2, backbone_widths=(4, 8))


def batch(rng, n=2, size=32):
    return rng.uniform(size=(n, 1, size, size)).astype(np.float32)


# -- config / build ------------------------------------------------------

def test_full_size_shape_walk_matches_table():
    shapes = M.shape_walk(M.ModelConfig.full_size())
    for name, c, s in PUBLISHED_TABLE:
        assert shapes[name] == (c, s, s), name
    assert shapes["gap1"] == (1024,)
    assert shapes["classification"] == (4,)
    assert shapes["flatten1"] == (64 * 8 * 8,)
    assert shapes["xPosEstimate"] == shapes["yPosEstimate"] == (1,)


def test_desk_enhanced_shape_equals_input():
    cfg = M.ModelConfig()
    assert M.shape_walk(cfg)["lambda1"] == (1, 64, 64)
    out = M.forward(M.build(SMALL, 0), batch(np.random.default_rng(0)))
    assert out["x_enhanced"].shape == (2, 1, 32, 32)


def test_build_is_deterministic():
    a, b, c = M.build(SMALL, 3), M.build(SMALL, 3), M.build(SMALL, 4)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert not all(np.array_equal(a[n].data, c[n].data) for n in a)


@pytest.mark.parametrize("kwargs", [dict(input_size=60, unet_depth=3), dict(num_classes=1),
                                    dict(backbone_widths=())])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        M.ModelConfig(**kwargs)


def test_every_parameter_in_one_group():
    params = M.build(M.ModelConfig(), 0)
    assert set(params.groups.values()) == set(M.GROUPS)
    assert sorted(sum((params.in_group(g) for g in M.GROUPS), [])) == sorted(params.names)
    assert all(n.startswith(("conv1", "conv2", "conv3", "conv4", "conv5", "conv6", "conv7"))
               for n in params.in_group("enhance"))
    assert set(params.in_group("reg")) >= {"conv10.weight", "xPosEstimate.weight", "yPosEstimate.bias"}


def test_biases_start_at_zero():
    params = M.build(SMALL, 0)
    assert all(not params[n].data.any() for n in params if n.endswith(".bias"))


def test_config_text_round_trip():
    cfg = M.ModelConfig(input_size=32, unet_depth=2, backbone_widths=(3, 5), aa=False)
    assert M.ModelConfig.from_text(cfg.to_text()) == cfg


# -- forward -------------------------------------------------------------

def test_forward_contracts():
    out = M.forward(M.build(SMALL, 1), batch(np.random.default_rng(1), n=5))
    p = out["probabilities"].data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p.shape == (5, 4) and np.all(p >= 0)
    x = out["x_enhanced"].data
    assert x.min() >= 0 and x.max() <= 1
    assert out["p_hat"].shape == (5, 2)


def test_forward_wrong_extent():
    params = M.build(SMALL, 0)
    with pytest.raises(ShapeError):
        M.forward(params, np.zeros((1, 1, 48, 48), np.float32))
    with pytest.raises(ShapeError):
        M.forward(params, np.zeros((1, 2, 32, 32), np.float32))


def test_classification_defined_for_other_extents():
    params = M.build(SMALL, 0)
    out = M.forward(params, np.random.default_rng(2).uniform(size=(1, 1, 48, 48)), heads=("c",))
    assert out["probabilities"].shape == (1, 4) and "p_hat" not in out


def test_every_strided_op_is_blurred():
    rng = np.random.default_rng(3)
    aa = M.build(SMALL, 0)
    out = M.forward(aa, batch(rng))
    root = out["probabilities"].sum() + out["p_hat"].sum()
    assert M.strided_ops_without_blur(root) == []
    plain = aa.with_config(aa=False)
    out = M.forward(plain, batch(rng))
    assert len(M.strided_ops_without_blur(out["probabilities"].sum() + out["p_hat"].sum())) == 4


def test_layer_table_marks_strided_layers():
    for spec in M.build_layers(M.ModelConfig()):
        if spec.strided:
            assert spec.aa and spec.kind == "aa-maxpool"


def test_aa_damps_two_pixel_shift():
    from spdrdl import data as D
    cfg = M.ModelConfig(input_size=64, unet_depth=2, unet_width=2, backbone_widths=(8, 16, 32))
    params = M.build(cfg, seed=2)
    rng = np.random.default_rng(4)
    base, moved = [], []
    for i in range(50):
        chip = D.render(i % 4, rng.uniform(0, np.pi), (0.0, 0.0), rng.uniform(40, 150), 68, rng)
        base.append(chip[2:66, 2:66])
        moved.append(chip[2:66, 4:68])
    base, moved = np.stack(base)[:, None], np.stack(moved)[:, None]

    def change(p):
        a = M.forward(p, base, heads=("c",))["probabilities"].data
        b = M.forward(p, moved, heads=("c",))["probabilities"].data
        return np.abs(a - b).sum(axis=1)

    assert np.median(change(params)) < np.median(change(params.with_config(aa=False)))


def test_ssp_gradient_vanishes_with_zero_weight():
    params = M.build(SMALL, 5)
    x = batch(np.random.default_rng(5))
    out = M.forward(params, x)
    (0.0 * LS.loss_ssp(x, out["x_enhanced"])).backward()
    assert all(not np.any(params[n].grad) for n in params.in_group("enhance"))
    params.zero_grad()
    out = M.forward(params, x)
    LS.loss_ssp(x, out["x_enhanced"]).backward()
    assert any(np.any(params[n].grad) for n in params.in_group("enhance"))
    assert all(params[n].grad is None for n in params.in_group("c") + params.in_group("reg"))


def test_joint_gradient_reaches_every_group():
    params = M.build(SMALL, 6)
    x = batch(np.random.default_rng(6))
    lb = LS.joint_loss(x, M.forward(params, x), [0, 1], np.array([[np.nan, np.nan], [2.0, -1.0]]), 1e-6, 0.1)
    lb.total_tensor.backward()
    for g in M.GROUPS:
        assert any(params[n].grad is not None and np.any(params[n].grad) for n in params.in_group(g)), g


# -- persistence ---------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = M.build(SMALL, 7)
    path = tmp_path / "a.bin"
    M.save(params, path)
    loaded = M.load(path)
    M.save(loaded, tmp_path / "b.bin")
    assert path.read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert loaded.config == params.config and loaded.seed == 7 and loaded.names == params.names
    x = batch(np.random.default_rng(7))
    with T.no_grad():
        a, b = M.forward(params, x), M.forward(loaded, x)
    for k in ("x_enhanced", "probabilities", "p_hat"):
        assert a[k].data.tobytes() == b[k].data.tobytes()


def test_checkpoint_header():
    raw = M.to_bytes(M.build(SMALL, 0))
    assert raw.startswith(M.CHECKPOINT_MAGIC)


def test_truncated_checkpoint(tmp_path):
    raw = M.to_bytes(M.build(SMALL, 0))
    with pytest.raises(CorruptFileError):
        M.from_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptFileError):
        M.from_bytes(b"not a checkpoint")


def test_checkpoint_version_mismatch():
    raw = bytearray(M.to_bytes(M.build(SMALL, 0)))
    n = len(M.CHECKPOINT_MAGIC)
    raw[n:n + 4] = (M.CHECKPOINT_VERSION + 1).to_bytes(4, "little")
    with pytest.raises(VersionError):
        M.from_bytes(bytes(raw))
