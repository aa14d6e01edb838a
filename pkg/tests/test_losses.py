import math
import warnings

import numpy as np
import pytest

from scaleadapt.losses import (
    LossConfig,
    adaptation_loss,
    ce_loss,
    filtered_ce_loss,
    focal_loss,
)
from scaleadapt.scale_examples import ScaleExample
from scaleadapt.tensor import Rect, softmax
from testutil import fd_loss_grad, max_rel_err


def _random_case(rng, num_classes=2, h=3, w=3, with_ignore=True):
    logits = rng.uniform(-2, 2, size=(num_classes, h, w))
    y = rng.integers(0, num_classes, size=(h, w)).astype(np.uint8)
    if with_ignore:
        y[rng.random((h, w)) < 0.2] = 255
    filt = (rng.random((h, w)) < 0.6).astype(np.uint8)
    return logits, y, filt


def test_ce_zero_on_perfect_prediction():
    p = np.zeros((3, 2, 2), dtype=np.float32)
    p[1] = 1.0
    y = np.full((2, 2), 1, dtype=np.uint8)
    lv = ce_loss(p, y)
    assert lv.loss == 0.0
    assert lv.count == 4


def test_ce_single_pixel_ln2():
    p = np.array([0.5, 0.5], dtype=np.float32).reshape(2, 1, 1)
    y = np.zeros((1, 1), dtype=np.uint8)
    assert ce_loss(p, y).loss == pytest.approx(math.log(2), abs=1e-6)


def test_ce_all_ignore():
    p = np.full((2, 2, 2), 0.5, dtype=np.float32)
    y = np.full((2, 2), 255, dtype=np.uint8)
    lv = ce_loss(p, y)
    assert lv.loss == 0.0 and lv.count == 0
    assert not lv.grad.any()


def test_ce_rejects_out_of_range_label():
    p = np.full((2, 1, 1), 0.5, dtype=np.float32)
    y = np.array([[2]], dtype=np.uint8)
    with pytest.raises(ValueError, match="out of range"):
        ce_loss(p, y)


def test_filtered_ce_composition():
    rng = np.random.default_rng(0)
    logits, y, filt = _random_case(rng, 3, 2, 2, with_ignore=False)
    p = softmax(logits.astype(np.float32))
    full = filtered_ce_loss(p, y, np.ones_like(filt))
    assert full.loss == pytest.approx(ce_loss(p, y).loss, abs=1e-7)
    none = filtered_ce_loss(p, y, np.zeros_like(filt))
    assert none.loss == 0.0 and none.count == 0
    # 1x2 image, F = (1, 0): only the first pixel's CE survives
    p2 = softmax(rng.uniform(-1, 1, size=(3, 1, 2)).astype(np.float32))
    y2 = np.array([[0, 1]], dtype=np.uint8)
    both = ce_loss(p2, y2).loss
    first_only = filtered_ce_loss(p2, y2, np.array([[1, 0]], dtype=np.uint8)).loss
    second_only = filtered_ce_loss(p2, y2, np.array([[0, 1]], dtype=np.uint8)).loss
    assert both == pytest.approx(first_only + second_only, abs=1e-6)


def test_focal_zero_when_confident():
    p = np.zeros((2, 2, 2), dtype=np.float32)
    p[0] = 1.0
    y = np.zeros((2, 2), dtype=np.uint8)
    for gamma in (0.0, 1.0, 3.0):
        lv = focal_loss(p, y, np.ones((2, 2), np.uint8), LossConfig(gamma=gamma))
        assert lv.loss == 0.0


def test_focal_gamma0_equals_ce_exactly():
    rng = np.random.default_rng(1)
    logits, y, filt = _random_case(rng, 3, 4, 4)
    p = softmax(logits.astype(np.float32))
    fl = focal_loss(p, y, filt, LossConfig(gamma=0.0))
    ce = ce_loss(p, y)
    assert fl.loss == pytest.approx(ce.loss, abs=1e-9)
    assert np.allclose(fl.grad, ce.grad, atol=1e-7)
    # masked variant reduces to the filtered CE
    flm = focal_loss(p, y, filt, LossConfig(gamma=0.0, focal_masked=True))
    cem = filtered_ce_loss(p, y, filt)
    assert flm.loss == pytest.approx(cem.loss, abs=1e-9)


def test_focal_single_pixel_reference():
    # -ln(0.5) * (1 - 0.5)^3 = 0.6931 * 0.125
    p = np.array([0.5, 0.5], dtype=np.float32).reshape(2, 1, 1)
    y = np.zeros((1, 1), dtype=np.uint8)
    lv = focal_loss(p, y, np.ones((1, 1), np.uint8), LossConfig(gamma=3.0))
    assert lv.loss == pytest.approx(0.0866, abs=1e-4)


def test_focal_never_exceeds_ce():
    rng = np.random.default_rng(2)
    for gamma in (0.5, 1.0, 3.0, 5.0):
        logits, y, _ = _random_case(rng, 4, 5, 5, with_ignore=False)
        p = softmax(logits.astype(np.float32))
        ones = np.ones_like(y, dtype=np.uint8)
        assert focal_loss(p, y, ones, LossConfig(gamma=gamma)).loss <= ce_loss(p, y).loss + 1e-9


def test_losses_nonnegative_and_zero_iff_perfect():
    rng = np.random.default_rng(3)
    logits, y, filt = _random_case(rng, 3, 4, 4)
    p = softmax(logits.astype(np.float32))
    assert ce_loss(p, y).loss > 0
    assert focal_loss(p, y, filt, LossConfig(gamma=2.0)).loss >= 0


def test_gradient_checks_against_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for seed in range(8):
        logits, y, filt = _random_case(np.random.default_rng(seed), 2, 3, 3)
        logits = logits.astype(np.float64)

        cases = [
            (lambda p: ce_loss(p, y).loss, lambda p: ce_loss(p, y).grad),
            (
                lambda p: filtered_ce_loss(p, y, filt).loss,
                lambda p: filtered_ce_loss(p, y, filt).grad,
            ),
        ]
        for gamma in (0.0, 1.0, 3.0):
            cfg = LossConfig(gamma=gamma)
            cases.append(
                (
                    lambda p, cfg=cfg: focal_loss(p, y, filt, cfg).loss,
                    lambda p, cfg=cfg: focal_loss(p, y, filt, cfg).grad,
                )
            )
        for loss_fn, grad_fn in cases:
            analytic = grad_fn(softmax(logits))
            fd = fd_loss_grad(loss_fn, logits.copy(), step=1e-4)
            mask = (np.abs(fd) > 1e-9) | (np.abs(analytic) > 1e-9)
            if mask.any():
                worst = max(worst, max_rel_err(analytic[mask], fd[mask], floor=1e-6))
    assert worst <= 1e-3, worst


def _example(labels, filt):
    h, w = labels.shape
    return ScaleExample(
        image=np.zeros((3, h, w), dtype=np.float32),
        labels=labels,
        filt=filt,
        source_id="x",
        rect=Rect(0, 0, h, w),
    )


def test_adaptation_loss_composition():
    rng = np.random.default_rng(5)
    logits = rng.uniform(-1, 1, size=(2, 3, 2, 2)).astype(np.float32)
    probs = np.stack([softmax(l) for l in logits])
    y = rng.integers(0, 3, size=(2, 2, 2)).astype(np.uint8)
    filt = (rng.random((2, 2, 2)) < 0.7).astype(np.uint8)
    examples = [_example(y[i], filt[i]) for i in range(2)]

    cfg = LossConfig(gamma=3.0, beta=0.1)
    total = adaptation_loss(examples, probs, cfg)
    by_hand = 0.0
    for i in range(2):
        by_hand += filtered_ce_loss(probs[i], y[i], filt[i]).loss
        by_hand += 0.1 * focal_loss(probs[i], y[i], filt[i], cfg).loss
    assert total.loss == pytest.approx(by_hand, rel=1e-7)
    assert total.ce_part + 0.1 * total.fl_part == pytest.approx(total.loss, rel=1e-7)
    # beta composition arithmetic: FL=0.2, CE=1.0, beta=0.1 -> 1.02
    assert 1.0 + 0.1 * 0.2 == pytest.approx(1.02)

    # beta = 0 reduces to summed filtered CE
    no_fl = adaptation_loss(examples, probs, LossConfig(gamma=3.0, beta=0.0))
    want = sum(filtered_ce_loss(probs[i], y[i], filt[i]).loss for i in range(2))
    assert no_fl.loss == pytest.approx(want, rel=1e-7)

    # duplicated list doubles loss and stacks gradients
    doubled = adaptation_loss(examples * 2, np.concatenate([probs, probs]), cfg)
    assert doubled.loss == pytest.approx(2 * total.loss, rel=1e-7)
    assert np.allclose(doubled.grad[:2], total.grad)


def test_adaptation_loss_empty_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        lv = adaptation_loss([], np.zeros((0, 2, 1, 1), dtype=np.float32), LossConfig())
    assert lv.loss == 0.0 and lv.count == 0
    assert any("empty example list" in str(w.message) for w in caught)


def test_mean_reduction_scales_by_count():
    rng = np.random.default_rng(6)
    logits, y, _ = _random_case(rng, 2, 3, 3, with_ignore=False)
    p = softmax(logits.astype(np.float32))
    s = ce_loss(p, y, reduction="sum")
    m = ce_loss(p, y, reduction="mean")
    assert m.loss == pytest.approx(s.loss / s.count, rel=1e-7)
    assert np.allclose(m.grad, s.grad / s.count)
