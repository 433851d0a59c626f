import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skipcross import model, ops
from skipcross.model import FusionTopology
from skipcross.tensor import ShapeError, Tensor

SMALL = FusionTopology(stage_blocks=(2, 1), stage_channels=(4, 6), head_channels=4)


def inputs(rng, n=1, size=32, rgb_c=3):
    return rng.uniform(size=(n, rgb_c, size, size)).astype(np.float32), rng.uniform(size=(n, 1, size, size)).astype(np.float32)


def randomize(net, rng, scale=0.5):
    """Zero-initialized scalars and biases would hide wiring mistakes."""
    for name, p in net.named_parameters():
        if name.endswith(".b") or p.ndim == 0:
            p.data[...] = rng.uniform(-scale, scale, p.shape)


# -- connection count -------------------------------------------------------------


def test_count_law_examples():
    assert model.count_cross_weights([2]) == 6
    assert model.count_cross_weights([1]) == 2
    assert model.count_cross_weights([2, 3, 3]) == 30
    assert model.count_cross_weights(FusionTopology()) == 30


def test_single_stage_scalar_list():
    names = model.cross_scalar_names(FusionTopology(stage_blocks=(2,), stage_channels=(8,)))
    live = sorted(v for v in names.values() if v)
    # w11, w12, w22 in each direction
    assert live == sorted(f"fuse.s0.{d}.{k}.{j}" for d in "LR" for k, j in [(1, 1), (1, 2), (2, 2)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_count_law_matches_built_network(blocks):
    topo = FusionTopology(stage_blocks=tuple(blocks), stage_channels=(2,) * len(blocks), head_channels=2)
    net = model.build(topo)
    expect = sum(b * (b + 1) for b in blocks)
    assert model.count_cross_weights(topo) == expect == len(net.cross_scalars())


def test_cross_strategy_scalars():
    net = model.build(model.configure_strategy("cross"))
    assert len(net.cross_scalars()) == 2 + 3 + 3


def test_encoder_mask_removes_stage_scalars():
    topo = FusionTopology(encoder_mask=(True, False, True))
    net = model.build(topo)
    assert len(net.cross_scalars()) == 6 + 12
    assert not any(n.startswith("fuse.s1.") for n in net.params)


def test_unknown_strategy_and_bad_topology():
    with pytest.raises(model.TopologyError):
        model.configure_strategy("mid")
    with pytest.raises(model.TopologyError):
        FusionTopology(stage_blocks=(2, 3), stage_channels=(8,))
    with pytest.raises(model.TopologyError):
        FusionTopology(stage_blocks=(0,), stage_channels=(8,))


# -- construction -------------------------------------------------------------------


def test_parameter_budget():
    n = model.param_count(model.build())
    assert abs(n - 2.33e6) / 2.33e6 < 0.15


def test_build_is_deterministic():
    a, b = model.build(seed=3), model.build(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = model.build(seed=4)
    assert not np.array_equal(a.params["rgb.stem.w"].data, c.params["rgb.stem.w"].data)


def test_strategy_branches():
    early = model.build(model.configure_strategy("early", SMALL))
    assert early.params["enc.stem.w"].shape[1] == 4
    assert not any(n.startswith(("rgb.", "lid.")) for n in early.params)
    late = model.build(model.configure_strategy("late", SMALL))
    assert "rgb.cls.w" in late.params and "lid.cls.w" in late.params and not late.cross_scalars()
    cam = model.build(model.configure_strategy("camera", SMALL))
    assert not any(n.startswith("lid.") for n in cam.params)


# -- forward -------------------------------------------------------------------------


@pytest.mark.parametrize("strategy", model.ALL_STRATEGIES)
def test_forward_shapes(strategy, rng):
    net = model.build(model.configure_strategy(strategy, SMALL))
    out = net(*inputs(rng, n=2))
    assert out.logits.shape == (2, 2, 32, 32)
    assert out.road_confidence.shape == (2, 32, 32)
    assert ((out.road_confidence >= 0) & (out.road_confidence <= 1)).all()


def test_default_forward_confidence(rng):
    net = model.build()
    out = net(*inputs(rng))
    assert out.logits.shape == (1, 2, 32, 32)
    both = ops.softmax(out.logits.data.astype(np.float64), axis=1)
    np.testing.assert_allclose(both.sum(axis=1), 1.0, rtol=1e-12)


def test_input_shape_errors(rng):
    net = model.build(SMALL)
    rgb, adi = inputs(rng, size=32)
    with pytest.raises(ShapeError):
        net(rgb[:, :, :20], adi[:, :, :20])  # 20 is not a multiple of 8
    with pytest.raises(ShapeError) as e:
        net(rgb, adi[:, :, :16])
    assert e.value.dim == "H"
    with pytest.raises(ShapeError):
        net(rgb[:, :2], adi)


def test_every_parameter_receives_gradient(rng):
    net = model.build()
    randomize(net, rng, scale=0.1)
    rgb, adi = inputs(rng)
    target = (rng.uniform(size=(1, 32, 32)) > 0.5).astype(np.uint8)
    ops.softmax_cross_entropy(net(rgb, adi).logits, target).backward()
    for name, p in net.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
    assert net.fusion_scalars()


def test_fuse_stage_stub():
    f0 = {"rgb": Tensor(np.array([1.0])), "lid": Tensor(np.array([5.0]))}
    blocks = {"rgb": [lambda x: Tensor(np.array([3.0]))], "lid": [lambda x: Tensor(np.array([0.0]))]}
    w = {"L": Tensor(np.array(0.5)), "R": None}
    hist = model.fuse_stage(f0, blocks, lambda d, k, j: w[d])
    assert hist["rgb"][1].data.tolist() == [5.5]
    assert hist["lid"][1].data.tolist() == [0.0]


# -- degeneracies ------------------------------------------------------------------------


def test_zero_fusion_equals_camera_network(rng):
    full = model.build(SMALL, seed=1)
    randomize(full, rng)
    for name, p in full.fusion_scalars().items():
        if name.startswith("fuse.") or ".skip.lid." in name:
            p.data[...] = 0.0
    full.params["dec.g.rgb"].data[...] = 1.0
    full.params["dec.g.lid"].data[...] = 0.0
    cam = model.build(model.configure_strategy("camera", SMALL), seed=2)
    for name, p in cam.named_parameters():
        p.data[...] = full.params[name].data
    rgb, adi = inputs(rng)
    np.testing.assert_array_equal(full(rgb, adi).logits.data, cam(rgb, adi).logits.data)


def test_cross_is_skipcross_with_pinned_off_diagonals(rng):
    cross = model.build(model.configure_strategy("cross", SMALL), seed=1)
    randomize(cross, rng)
    sc = model.build(SMALL, seed=2)
    for name, p in sc.named_parameters():
        if name in cross.params:
            p.data[...] = cross.params[name].data
    for (s, d, k, j), name in model.cross_scalar_names(SMALL).items():
        sc.params[name].data[...] = cross.params[f"fuse.s{s}.diag.{k}"].data if k == j else 0.0
    rgb, adi = inputs(rng)
    np.testing.assert_array_equal(sc(rgb, adi).logits.data, cross(rgb, adi).logits.data)


def test_stream_permutation_symmetry(rng):
    topo = FusionTopology(stage_blocks=(2, 1), stage_channels=(4, 6), head_channels=4, rgb_in_channels=1)
    net = model.build(topo, seed=1, dtype=np.float64)
    randomize(net, rng)
    swapped = model.build(topo, seed=9, dtype=np.float64)

    def mirror(name):
        for a, b in (("rgb", "lid"), (".L.", ".R.")):
            if a in name:
                return name.replace(a, b)
            if b in name:
                return name.replace(b, a)
        return name

    for name, p in swapped.named_parameters():
        p.data[...] = net.params[mirror(name)].data
    a = rng.uniform(size=(1, 1, 32, 32))
    b = rng.uniform(size=(1, 1, 32, 32))
    np.testing.assert_allclose(net(a, b).logits.data, swapped(b, a).logits.data, rtol=1e-10, atol=1e-12)


# -- checkpoints --------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    net = model.build(SMALL, seed=5)
    randomize(net, rng)
    model.save_weights(net, tmp_path / "w.skxc")
    back = model.load_weights(tmp_path / "w.skxc")
    assert back.topology == net.topology
    for name, p in net.named_parameters():
        assert back.params[name].shape == p.shape
        np.testing.assert_array_equal(back.params[name].data, p.data)
    rgb, adi = inputs(rng)
    np.testing.assert_array_equal(back(rgb, adi).logits.data, net(rgb, adi).logits.data)


def test_checkpoint_corruption(tmp_path):
    net = model.build(SMALL)
    path = tmp_path / "w.skxc"
    model.save_weights(net, path)
    blob = path.read_bytes()
    for bad in (blob[:-3], b"XXXX" + blob[4:], blob + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(model.CheckpointError):
            model.load_weights(path)


def test_checkpoint_topology_mismatch(tmp_path):
    model.save_weights(model.build(SMALL), tmp_path / "w.skxc")
    with pytest.raises(model.TopologyError):
        model.load_weights(tmp_path / "w.skxc", model.configure_strategy("early", SMALL))
    assert model.load_weights(tmp_path / "w.skxc", SMALL).topology == SMALL


def test_state_dict_checks(rng):
    net = model.build(SMALL)
    state = net.state_dict()
    state.pop("cls.b")
    with pytest.raises(model.CheckpointError):
        net.load_state_dict(state)
