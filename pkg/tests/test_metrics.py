import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skipcross import metrics as M
from skipcross.metrics import ConfusionCounts

counts_st = st.builds(ConfusionCounts, *(st.integers(0, 500) for _ in range(4)))


def brute_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def brute_sweep_f1(conf, gt):
    """F1 per threshold t = i/255 by direct masking."""
    out = []
    for i in range(256):
        c = brute_confusion(conf > i / 255, gt)
        pre = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
        rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
        out.append((pre, rec, 2 * pre * rec / (pre + rec) if pre + rec else 0.0))
    return out


def brute_ap(conf, gt):
    curve = brute_sweep_f1(conf, gt)
    total = 0.0
    for level in range(11):
        r = level / 10
        best = 0.0
        for pre, rec, _ in curve:
            if rec >= r - 1e-12:
                best = max(best, pre)
        total += best
    return total / 11


def test_fbeta_examples():
    assert M.fbeta_from(0.9, 0.9, 1.0) == pytest.approx(0.9, abs=1e-12)
    assert M.fbeta_from(0.5, 1.0, 2.0) == pytest.approx(2.5 / 3, abs=1e-12)
    assert M.fbeta_from(1.0, 1.0, 0.3) == 1.0
    assert M.fbeta_from(0.0, 0.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        M.fbeta_from(0.5, 0.5, 0.0)


def test_miou_and_accuracy_example():
    c = ConfusionCounts(tp=80, fp=20, fn=20, tn=880)
    assert M.miou(c) == pytest.approx(0.5 * (80 / 120 + 880 / 920), abs=1e-12)
    assert M.miou(c) == pytest.approx(0.8116, abs=1e-4)
    assert M.accuracy(c) == 0.96
    assert M.fpr(c) == 20 / 900 and M.fnr(c) == 0.2


def test_perfect_prediction():
    gt = np.zeros((25, 40), dtype=bool)
    gt.flat[:100] = True
    c = M.confusion(gt, gt)
    assert c == ConfusionCounts(100, 0, 0, 900)
    assert M.miou(c) == M.accuracy(c) == 1.0 and M.fpr(c) == M.fnr(c) == 0.0
    assert M.confusion(np.zeros_like(gt), gt) == ConfusionCounts(0, 0, 100, 900)
    assert M.maxf(gt.astype(float), gt)[0] == 1.0
    assert M.average_precision(gt.astype(float), gt) == 1.0


def test_confusion_matches_brute_force(rng):
    for _ in range(20):
        pred = rng.integers(0, 2, (4, 4))
        gt = rng.integers(0, 2, (4, 4))
        assert M.confusion(pred, gt) == brute_confusion(pred, gt)


def test_confusion_rejects_non_binary():
    with pytest.raises(ValueError):
        M.confusion(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError):
        M.confusion(np.array([0, 1]), np.array([0, 1, 1]))


@pytest.mark.parametrize("p", [0.1, 0.25, 0.5, 0.9])
def test_constant_confidence_closed_form(p):
    n = 400
    gt = np.zeros(n, dtype=bool)
    gt[: int(p * n)] = True
    mf, thr = M.maxf(np.full(n, 0.5), gt)
    assert mf == pytest.approx(2 * p / (p + 1), abs=1e-12)
    assert thr == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_sweep_and_ap_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    conf = rng.uniform(size=(16, 16))
    # snap some values onto the grid so the strict inequality matters
    conf[:4] = rng.integers(0, 256, (4, 16)) / 255
    gt = rng.uniform(size=(16, 16)) < 0.4
    curve = brute_sweep_f1(conf, gt)
    mf, thr = M.maxf(conf, gt)
    f1s = [f for _, _, f in curve]
    assert mf == pytest.approx(max(f1s), abs=1e-12)
    assert thr == f1s.index(max(f1s)) / 255
    assert M.average_precision(conf, gt) == pytest.approx(brute_ap(conf, gt), abs=1e-9)
    rep = M.evaluate(conf, gt)
    c = brute_confusion(conf > thr, gt)
    assert rep.pre == pytest.approx(c.tp / (c.tp + c.fp), abs=1e-12)
    assert rep.acc == pytest.approx((c.tp + c.tn) / 256, abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_maxf_dominates_every_threshold(seed):
    rng = np.random.default_rng(seed)
    conf = rng.uniform(size=(16, 16))
    gt = rng.uniform(size=(16, 16)) < rng.uniform(0.05, 0.95)
    mf, _ = M.maxf(conf, gt)
    t = rng.uniform()
    assert mf >= M.fbeta(M.confusion(conf > t, gt)) - 1e-12


def test_ap_all_background():
    gt = np.zeros((16, 16), dtype=bool)
    gt[4:8] = True
    assert M.average_precision(np.zeros((16, 16)), gt) < 0.1


def test_report_fields_and_permutation(rng):
    conf = rng.uniform(size=(20, 20))
    gt = rng.uniform(size=(20, 20)) < 0.3
    rep = M.evaluate(conf, gt).to_dict()
    assert all(0 <= v <= 1 and np.isfinite(v) for v in rep.values())
    assert rep["rec"] + rep["fnr"] == pytest.approx(1.0)
    perm = rng.permutation(400)
    assert M.evaluate(conf.ravel()[perm], gt.ravel()[perm]).to_dict() == rep


def test_dataset_pools_counts(rng):
    confs = [rng.uniform(size=(8, 8)) for _ in range(3)]
    gts = [rng.uniform(size=(8, 8)) < 0.5 for _ in range(3)]
    agg, per = M.evaluate_dataset(confs, gts)
    assert len(per) == 3
    assert agg.to_dict() == M.evaluate(np.concatenate(confs), np.concatenate(gts)).to_dict()
    with pytest.raises(ValueError):
        M.evaluate_dataset([], [])


@settings(max_examples=200)
@given(counts_st)
def test_complementarity(c):
    if c.tp + c.fn:
        assert M.recall(c) + M.fnr(c) == pytest.approx(1.0)
    if c.fp + c.tn:
        assert M.specificity(c) + M.fpr(c) == pytest.approx(1.0)
    assert 0 <= M.miou(c) <= 1


def test_empty_class_iou():
    # no road anywhere and none predicted: road IoU counts as 1
    assert M.miou(ConfusionCounts(0, 0, 0, 50)) == 1.0
    # road present but never hit: road IoU 0
    assert M.miou(ConfusionCounts(0, 0, 10, 40)) == pytest.approx(0.5 * (0 + 40 / 50))
