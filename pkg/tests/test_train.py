import numpy as np
import pytest

from skipcross import data, model, ops, synth, train
from skipcross.tensor import parameter
from skipcross.train import Adam, TrainConfig

SMALL = model.FusionTopology(stage_blocks=(1, 1), stage_channels=(4, 6), head_channels=4)


@pytest.fixture(scope="module")
def tiny_data():
    ds = synth.synth_generate(synth.SceneSpec(seed=5, width=32, height=32), 6)
    return ds.samples[:4], ds.samples[4:]


def quick_config(**kw):
    base = dict(max_epochs=3, batch_size=2, crop_size=(32, 32), multiscale=False, crop=False, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- Adam -------------------------------------------------------------------------------


def test_adam_matches_reference_update(rng):
    p = parameter(rng.standard_normal(5), dtype=np.float64)
    opt = Adam([p], lr=0.01)
    w = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        p.grad[...] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-14, atol=1e-15)


def test_adam_descends_quadratic():
    w = parameter(np.zeros(3), dtype=np.float64)
    target = np.array([5.0, -4.0, 3.0])
    opt = Adam([w], lr=0.01)
    losses = []
    for _ in range(100):
        d = w.data - target
        losses.append(float(d @ d))
        w.grad[...] = 2 * d
        opt.step()
        opt.zero_grad()
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert not w.grad.any()


def test_adam_leaves_zero_gradient_parameters_alone(rng):
    a = parameter(rng.standard_normal(4), dtype=np.float64)
    b = parameter(rng.standard_normal(4), dtype=np.float64)
    before = b.data.copy()
    opt = Adam([a, b], lr=0.1)
    for _ in range(10):
        a.grad[...] = rng.standard_normal(4)
        opt.step()
        opt.zero_grad()
    np.testing.assert_array_equal(b.data, before)


# -- augmentation -------------------------------------------------------------------------


def test_augment_is_seed_deterministic(tiny_data):
    s = tiny_data[0][0]
    cfg = TrainConfig(crop_size=(16, 16))
    a = train.augment(s, np.random.default_rng(3), cfg)
    b = train.augment(s, np.random.default_rng(3), cfg)
    for x, y in zip((a.rgb, a.adi, a.mask), (b.rgb, b.adi, b.mask)):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("seed", range(10))
def test_augment_keeps_alignment(tiny_data, seed):
    s = tiny_data[0][seed % 4]
    cfg = TrainConfig(crop_size=(16, 16))
    out = train.augment(s, np.random.default_rng(seed), cfg)
    assert out.rgb.shape == (3, 16, 16) and out.adi.shape == (1, 16, 16) and out.mask.shape == (16, 16)
    assert out.rgb.dtype == np.float32 and 0 <= out.rgb.min() and out.rgb.max() <= 1


def test_crop_offsets_agree():
    """Encode pixel coordinates in every field and check the crop window is shared."""
    h = w = 32
    yy, xx = np.mgrid[0:h, 0:w]
    code = (yy * w + xx).astype(np.float32) / (h * w)
    s = data.Sample(np.stack([code] * 3), code[None].copy(), ((yy + xx) % 2).astype(np.uint8))
    cfg = TrainConfig(crop_size=(16, 16), multiscale=False, brightness=False, road_removal=False)
    out = train.augment(s, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(out.rgb[0], out.adi[0])
    y0, x0 = divmod(int(round(out.adi[0, 0, 0] * h * w)), w)
    np.testing.assert_array_equal(out.mask, s.mask[y0 : y0 + 16, x0 : x0 + 16])


def test_all_flags_off_is_identity_or_resize(tiny_data):
    s = tiny_data[0][0]
    off = TrainConfig().without_augmentation(crop_size=(32, 32))
    same = train.augment(s, np.random.default_rng(0), off)
    np.testing.assert_array_equal(same.rgb, s.rgb)
    np.testing.assert_array_equal(same.mask, s.mask)
    assert same.rgb is not s.rgb
    small = train.augment(s, np.random.default_rng(0), off.without_augmentation(crop_size=(16, 16)))
    np.testing.assert_array_equal(small.mask, data.resize_nearest(s.mask, 16, 16))


def test_brightness_and_road_removal_touch_rgb_only(tiny_data):
    s = tiny_data[0][1]
    cfg = TrainConfig(crop_size=(32, 32), multiscale=False, crop=False)
    for seed in range(6):
        out = train.augment(s, np.random.default_rng(seed), cfg)
        np.testing.assert_array_equal(out.adi, s.adi)
        np.testing.assert_array_equal(out.mask, s.mask)


def test_road_rectangle_hits_road(rng):
    mask = np.zeros((40, 40), np.uint8)
    mask[30:, 5:9] = 1
    for _ in range(50):
        top, left, rh, rw = train._road_rectangle(mask, rng)
        assert 0.04 <= rh * rw / 1600 <= 0.17
        assert 0 <= top and top + rh <= 40 and 0 <= left and left + rw <= 40
        assert mask[top : top + rh, left : left + rw].any()
    assert train._road_rectangle(np.zeros((8, 8)), rng) is None


def test_crop_larger_than_image(tiny_data):
    with pytest.raises(data.DataError):
        train.augment(tiny_data[0][0], np.random.default_rng(0), TrainConfig(crop_size=(48, 48), multiscale=False))


def test_config_validation():
    for bad in (dict(lr=0), dict(lr_decay=1.0), dict(batch_size=0), dict(crop_size=(40, 48)), dict(plateau_patience=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- fitting --------------------------------------------------------------------------------


def test_fit_is_bitwise_reproducible(tiny_data):
    runs = []
    for _ in range(2):
        net = model.build(SMALL, seed=1)
        h = train.fit(net, *tiny_data, TrainConfig(max_epochs=2, batch_size=2, crop_size=(16, 16)))
        runs.append((net.state_dict(), h.column("loss"), h.column("val_maxf")))
    (sa, la, ma), (sb, lb, mb) = runs
    assert la == lb and ma == mb
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k])


def test_plateau_schedule_on_frozen_network(tiny_data):
    net = model.build(SMALL)
    net.freeze()
    cfg = quick_config(max_epochs=25, lr=1e-3, plateau_patience=10, min_lr=2e-6, brightness=False, road_removal=False)
    h = train.fit(net, *tiny_data, cfg)
    lrs = h.column("lr")
    assert lrs[:11] == [1e-3] * 11
    assert lrs[11] == pytest.approx(1e-4)
    assert lrs[22] == pytest.approx(1e-5)
    assert all(b <= a for a, b in zip(lrs, lrs[1:])) and min(lrs) >= cfg.min_lr
    floor = train.fit(net, *tiny_data, quick_config(max_epochs=30, plateau_patience=1, min_lr=1e-6))
    assert min(floor.column("lr")) == 1e-6


def test_zero_epochs_changes_nothing(tiny_data):
    net = model.build(SMALL)
    before = net.state_dict()
    h = train.fit(net, *tiny_data, quick_config(max_epochs=0))
    assert len(h) == 0 and h.best_state is None
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_best_state_is_restored(tiny_data, tmp_path):
    net = model.build(SMALL, seed=2)
    path = tmp_path / "history.csv"
    h = train.fit(net, *tiny_data, quick_config(max_epochs=4, lr=3e-3), history_path=path)
    assert h.best_maxf == max(h.column("val_maxf"))
    assert h.column("val_maxf")[h.best_epoch - 1] == h.best_maxf
    assert train.validate_maxf(net, tiny_data[1])[0] == h.best_maxf
    rows = train.read_history(path)
    assert list(rows[0]) == list(train.HISTORY_COLUMNS)
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
    assert [float(r["loss"]) for r in rows] == h.column("loss")


def test_callback_stops_early(tiny_data):
    net = model.build(SMALL)
    h = train.fit(net, *tiny_data, quick_config(max_epochs=10), callback=lambda rec: rec.epoch == 2)
    assert len(h) == 2


def test_non_finite_loss_raises(tiny_data):
    net = model.build(SMALL)
    net.params["cls.b"].data[...] = np.nan
    with pytest.raises(train.NumericalError, match="non-finite"):
        train.fit(net, *tiny_data, quick_config())


def test_fit_rejects_bad_sets(tiny_data):
    net = model.build(SMALL)
    with pytest.raises(data.DataError):
        train.fit(net, [], tiny_data[1], quick_config())
    odd = [data.Sample(np.zeros((3, 20, 20), np.float32), np.zeros((1, 20, 20), np.float32), np.zeros((20, 20), np.uint8))]
    with pytest.raises(data.DataError):
        train.fit(net, tiny_data[0], odd, quick_config())


def test_train_step_updates_and_resets(tiny_data):
    net = model.build(SMALL)
    opt = Adam(net.parameters(), lr=1e-3)
    before = net.params["cls.w"].data.copy()
    loss = train.train_step(net, data.stack(tiny_data[0][:2]), opt)
    assert np.isfinite(loss) and opt.step_count == 1
    assert not np.array_equal(before, net.params["cls.w"].data)
    assert all(not p.grad.any() for p in net.parameters())
    # the reported loss is the one of the pre-update weights
    net2 = model.build(SMALL)
    rgb, adi, mask = data.stack(tiny_data[0][:2])
    assert loss == ops.softmax_cross_entropy(net2(rgb, adi).logits, mask).item()
