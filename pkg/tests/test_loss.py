import math

import numpy as np
import pytest

from src.errors import LabelOutOfRangeError, ShapeMismatchError
from src.training.loss import cross_entropy_loss


def test_uniform_logits_cost_log_two():
    mask = np.array([[[0, 1], [1, 0]]])
    loss, grad = cross_entropy_loss(np.zeros((1, 2, 2, 2)), mask)
    assert loss == pytest.approx(math.log(2))
    assert grad[0, 0, 0, 0] == pytest.approx(-0.5 / 4)
    assert grad[0, 1, 0, 0] == pytest.approx(0.5 / 4)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 2, 3, 3))
    mask = rng.integers(0, 2, size=(2, 3, 3))
    _, grad = cross_entropy_loss(logits, mask)
    eps = 1e-5
    for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)]:
        bump = np.zeros_like(logits)
        bump[idx] = eps
        numeric = (cross_entropy_loss(logits + bump, mask)[0] - cross_entropy_loss(logits - bump, mask)[0]) / (2 * eps)
        assert grad[idx] == pytest.approx(numeric, rel=1e-3, abs=1e-7)


def test_large_logits_stay_finite():
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 1] = 1000.0
    loss, grad = cross_entropy_loss(logits, np.array([[[1]]]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(grad).all()


def test_channel_mask_is_accepted():
    loss, _ = cross_entropy_loss(np.zeros((1, 2, 2, 2)), np.zeros((1, 1, 2, 2), np.uint8))
    assert loss == pytest.approx(math.log(2))


def test_invalid_masks():
    with pytest.raises(ShapeMismatchError):
        cross_entropy_loss(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 3)))
    with pytest.raises(LabelOutOfRangeError):
        cross_entropy_loss(np.zeros((1, 2, 1, 1)), np.array([[[2]]]))
