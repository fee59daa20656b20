import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rddlab import metrics as M
from rddlab.rdd import DifficultyMap


def set_oracle_miou(pred, gt, C):
    """IoU from explicit pixel-coordinate sets."""
    ious = []
    pix = list(np.ndindex(*gt.shape))
    for c in range(C):
        P = {p for p in pix if pred[p] == c}
        G = {p for p in pix if gt[p] == c}
        union = P | G
        if union:
            ious.append(len(P & G) / len(union))
    return sum(ious) / len(ious)


def test_empty_batch():
    cm = M.ConfusionMatrix(3)
    M.accumulate(cm, np.zeros((0, 4, 4), int), np.zeros((0, 4, 4), int))
    assert cm.total == 0


def test_perfect_is_diagonal():
    y = np.random.default_rng(0).integers(0, 4, (2, 5, 5))
    cm = M.accumulate(M.ConfusionMatrix(4), y, y)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert M.miou(cm) == 1.0


def test_hand_tally():
    cm = M.accumulate(M.ConfusionMatrix(2), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    assert cm.counts.tolist() == [[1, 0], [1, 2]]
    assert M.per_class_iou(cm).tolist() == [0.5, 2 / 3]
    assert M.miou(cm) == pytest.approx(7 / 12, abs=1e-15)
    assert M.pixel_accuracy(cm) == 0.75


def test_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        M.accumulate(M.ConfusionMatrix(2), np.array([0, 2]), np.array([0, 1]))


def test_absent_class_excluded():
    cm = M.accumulate(M.ConfusionMatrix(3), np.array([0, 1]), np.array([0, 1]))
    assert np.isnan(M.per_class_iou(cm)[2])
    assert M.miou(cm) == 1.0


def test_all_absent():
    with pytest.raises(ValueError):
        M.miou(M.ConfusionMatrix(3))


def test_ignore_label_hook():
    cm = M.accumulate(M.ConfusionMatrix(2), np.array([0, 1, 1]), np.array([0, M.IGNORE_LABEL, 1]),
                      ignore_label=M.IGNORE_LABEL)
    assert cm.total == 2


@pytest.mark.parametrize("C", [2, 5])
def test_set_oracle(C):
    rng = np.random.default_rng(C)
    for _ in range(100):
        pred, gt = rng.integers(0, C, (8, 8)), rng.integers(0, C, (8, 8))
        cm = M.accumulate(M.ConfusionMatrix(C), pred, gt)
        assert abs(M.miou(cm) - set_oracle_miou(pred, gt, C)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_order_independence_and_sharding(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 4, (6, 5, 5)), rng.integers(0, 4, (6, 5, 5))
    whole = M.accumulate(M.ConfusionMatrix(4), pred, gt)
    perm = rng.permutation(6)
    shuffled = M.ConfusionMatrix(4)
    for i in perm:
        M.accumulate(shuffled, pred[i], gt[i])
    shards = M.accumulate(M.ConfusionMatrix(4), pred[:3], gt[:3]) + M.accumulate(M.ConfusionMatrix(4), pred[3:], gt[3:])
    np.testing.assert_array_equal(whole.counts, shuffled.counts)
    np.testing.assert_array_equal(whole.counts, shards.counts)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_class_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 5, (8, 8)), rng.integers(0, 5, (8, 8))
    perm = rng.permutation(5)
    a = M.miou(M.accumulate(M.ConfusionMatrix(5), pred, gt))
    b = M.miou(M.accumulate(M.ConfusionMatrix(5), perm[pred], perm[gt]))
    assert a == pytest.approx(b, abs=1e-12)


class TestDifficultyStats:
    def test_all_zero(self):
        s = M.difficulty_stats(DifficultyMap(np.zeros((1, 4, 4)), "TSE"))
        assert s["active_fraction"] == 0.0

    def test_all_one(self):
        s = M.difficulty_stats(DifficultyMap(np.ones((1, 4, 4)), "TFE"))
        assert s["mean"] == 1.0
        assert s["histogram"][-1] == 16 and sum(s["histogram"]) == 16

    def test_half(self):
        v = np.zeros((1, 4, 4))
        v[0, :2] = 1.0
        s = M.difficulty_stats(DifficultyMap(v, "TSE"))
        assert s["mean"] == 0.5 and s["active_fraction"] == 0.5


def test_metrics_writer(tmp_path):
    w = M.MetricsWriter(tmp_path / "m.csv", 2)
    row = {c: 0.5 for c in M.metrics_columns(2)}
    row.update(iter=3, stage="TSE")
    w.write(row)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == ["iter", "stage", "miou", "pixel_acc"]
    assert "iou_1" in lines[0] and lines[1].startswith("3,TSE,0.5")
    with pytest.raises(KeyError):
        w.write({"iter": 1})
