# Test functions for anchor matching, target sampling and loss heads

import numpy as np
import pytest

from selseg.anchors import Box, LossConfig, iou, iou_matrix, assign_targets, sample_targets, sample_batch_targets
from selseg.losses import lsd_loss, seg_loss, total_loss
from selseg.lsd import ScoreMaps
from selseg.tensor import Tensor
from selseg.errors import RejectedInputError


### IoU ###

def test_iou_examples():
    assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0
    assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0
    assert iou(Box(0, 0, 100, 100), Box(50, 50, 150, 150)) == pytest.approx(2500 / 17500, abs=1e-12)
    # touching edges share no area
    assert iou([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0


def test_iou_symmetric_and_bounded(rng):
    xy = rng.uniform(0, 50, size=(40, 2))
    wh = rng.uniform(1, 30, size=(40, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    m = iou_matrix(boxes, boxes)
    np.testing.assert_allclose(m, m.T, rtol=0, atol=1e-15)
    assert (m >= 0).all() and (m <= 1 + 1e-15).all()
    np.testing.assert_allclose(np.diag(m), 1.0)


def test_degenerate_box_rejected():
    with pytest.raises(RejectedInputError):
        Box(5, 0, 5, 10)


### Target assignment ###

def test_assign_examples():
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 4], [5, 5, 15, 15]], dtype=float)
    targets = assign_targets(anchors, [Box(0, 0, 10, 10)], [2])
    np.testing.assert_array_equal(targets, [2, 255, 0])


def test_assign_without_boxes():
    np.testing.assert_array_equal(assign_targets(np.array([[0, 0, 4, 4]]), [], []), [0])
    with pytest.raises(RejectedInputError):
        assign_targets(np.zeros((0, 4)), [Box(0, 0, 1, 1)], [1])


def test_forced_match_overrides_threshold():
    # best IoU is 0.25, below theta_neg, but the box keeps its best anchor
    anchors = np.array([[0, 0, 20, 20], [40, 40, 60, 60]], dtype=float)
    targets = assign_targets(anchors, [Box(0, 0, 10, 10)], [3])
    np.testing.assert_array_equal(targets, [3, 0])


def _assign_oracle(anchors, boxes, classes, cfg):
    targets = []
    for a in anchors:
        ious = [iou(a, b) for b in boxes]
        best = max(range(len(boxes)), key=lambda j: (ious[j], -j))
        if ious[best] > cfg.theta_pos:
            targets.append(classes[best])
        elif ious[best] < cfg.theta_neg:
            targets.append(0)
        else:
            targets.append(255)
    for j, b in enumerate(boxes):
        ious = [iou(a, b) for a in anchors]
        forced = max(range(len(anchors)), key=lambda i: (ious[i], -i))
        targets[forced] = classes[j]
    return targets


def test_assign_matches_brute_force(rng):
    cfg = LossConfig()
    for _ in range(500):
        n_anchor, n_gt = int(rng.integers(1, 25)), int(rng.integers(1, 5))
        xy = rng.integers(0, 40, size=(n_anchor, 2)).astype(float)
        anchors = np.concatenate([xy, xy + rng.integers(2, 20, size=(n_anchor, 2))], axis=1)
        gxy = rng.integers(0, 40, size=(n_gt, 2)).astype(float)
        boxes = np.concatenate([gxy, gxy + rng.integers(2, 20, size=(n_gt, 2))], axis=1)
        classes = list(rng.integers(1, 4, size=n_gt))
        targets = assign_targets(anchors, boxes, classes, cfg)
        assert list(targets) == _assign_oracle(anchors, boxes, classes, cfg)
        # the best anchor of every box ends up positive
        forced = iou_matrix(anchors, boxes).argmax(axis=0)
        assert ((targets[forced] > 0) & (targets[forced] != 255)).all()


### Target sampling ###

def test_sample_counts():
    targets = np.array([1] * 10 + [0] * 500)
    kept = sample_targets(targets, 0)
    assert (kept == 1).sum() == 10 and (kept == 0).sum() == 30
    kept = sample_targets(np.zeros(500, dtype=int), 0)
    assert (kept == 0).sum() == 128
    kept = sample_targets(np.array([2] * 200 + [0] * 100), 0)
    assert (kept == 2).sum() == 128 and (kept == 0).sum() == 0


def test_sample_keeps_dont_care_and_shape(rng):
    targets = rng.choice([0, 1, 2, 255], size=(3, 90), p=[0.6, 0.1, 0.1, 0.2])
    kept = sample_batch_targets(targets, rng)
    assert kept.shape == targets.shape
    assert (kept[targets == 255] == 255).all()
    changed = kept != targets
    assert (kept[changed] == 255).all()
    for row in kept:
        n_pos, n_neg = ((row != 0) & (row != 255)).sum(), (row == 0).sum()
        assert n_pos + n_neg <= 128
        assert n_pos == 0 or n_neg <= 3 * n_pos


def test_sample_batch_counts_per_image():
    row = np.array([1] * 10 + [0] * 500)
    kept = sample_batch_targets(np.stack([row] * 4), 0)
    np.testing.assert_array_equal((kept != 255).sum(axis=1), [40, 40, 40, 40])
    targets = np.stack([np.array([2] * 40 + [0] * 300), np.zeros(340, dtype=int)])
    kept = sample_batch_targets(targets, 0)
    assert (kept[0] == 2).sum() == 40 and (kept[0] == 0).sum() == 88
    assert (kept[1] == 0).sum() == 128


def test_sample_rejects_batches():
    with pytest.raises(RejectedInputError):
        sample_targets(np.zeros((2, 10), dtype=int), 0)
    with pytest.raises(RejectedInputError):
        sample_batch_targets(np.zeros(10, dtype=int), 0)
    assert sample_batch_targets(np.zeros((0, 10), dtype=int), 0).shape == (0, 10)


def test_sample_is_seeded():
    targets = np.array([1] * 5 + [0] * 300)
    np.testing.assert_array_equal(sample_targets(targets, 4), sample_targets(targets, 4))


def test_loss_config_validation():
    with pytest.raises(RejectedInputError):
        LossConfig(theta_pos=0.3, theta_neg=0.5)
    with pytest.raises(RejectedInputError):
        LossConfig(max_targets=0)
    with pytest.raises(RejectedInputError):
        LossConfig(alpha_loss=-1.0)


### Losses ###

def _score_maps(rng, n=2, k=3):
    return ScoreMaps([Tensor(rng.normal(size=(n, k, 3, 3)), requires_grad=True),
                      Tensor(rng.normal(size=(n, k, 2, 2)), requires_grad=True)])


def test_lsd_loss_uniform_two_classes():
    scores = ScoreMaps([Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 1, 1)))])
    loss = lsd_loss(scores, np.array([[0, 1, 1, 0, 1]]))
    assert loss.item() == pytest.approx(np.log(2), abs=1e-12)


def test_lsd_loss_perfect_prediction():
    maps = np.full((1, 3, 1, 2), -50.0)
    maps[0, 2, 0, 0] = 50.0
    maps[0, 0, 0, 1] = 50.0
    loss = lsd_loss(ScoreMaps([Tensor(maps)]), np.array([[2, 0]]))
    assert loss.item() < 1e-12


def test_lsd_loss_matches_hand_sum(rng):
    scores = _score_maps(rng)
    targets = rng.choice([0, 1, 2, 255], size=(2, 13))
    flat = scores.flat()
    nll, count = 0.0, 0
    for n in range(2):
        for a in range(13):
            if targets[n, a] == 255:
                continue
            logits = flat[n, a]
            nll -= logits[targets[n, a]] - np.log(np.exp(logits).sum())
            count += 1
    assert lsd_loss(scores, targets).item() == pytest.approx(nll / count, abs=1e-10)


def test_lsd_loss_all_dont_care(rng):
    scores = _score_maps(rng)
    loss = lsd_loss(scores, np.full((2, 13), 255))
    loss.backward()
    assert loss.item() == 0.0
    assert all(not m.grad.any() for m in scores.maps)


def test_seg_loss(rng):
    assert seg_loss(Tensor(np.zeros((1, 2, 4, 4))), np.ones((1, 4, 4), dtype=int)).item() == \
        pytest.approx(np.log(2), abs=1e-12)
    logits = rng.normal(size=(1, 4, 3, 3))
    mask = rng.integers(0, 4, size=(1, 3, 3))
    mask[0, 1, 1] = 255
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    valid = mask != 255
    expected = -np.mean([logp[0, mask[0, y, x], y, x] for y, x in np.argwhere(valid[0])])
    assert seg_loss(Tensor(logits), mask).item() == pytest.approx(expected, abs=1e-10)


def test_total_loss_examples():
    assert total_loss(2, 4, 1) == 6
    assert total_loss(2, 4, 0) == 2
    assert total_loss(0, 3.5, 0.5) == 1.75
    combined = total_loss(Tensor(2.0), Tensor(4.0), 0.5)
    assert combined.item() == 4.0
