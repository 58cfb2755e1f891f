import numpy as np
import pytest

from src.errors import NonFiniteGradientError
from src.training.lion import LionState, lion_step


def test_single_update():
    w = {"w": np.ones(3, np.float32)}
    state = LionState.for_params(w, lr=0.1, weight_decay=0.01)
    lion_step(w, {"w": np.array([1.0, -2.0, 0.0], np.float32)}, state)
    np.testing.assert_allclose(w["w"], [0.899, 1.099, 0.999], rtol=1e-6)
    np.testing.assert_allclose(state.momentum["w"], [0.01, -0.02, 0.0], rtol=1e-6)
    assert state.step == 1


def test_update_size_does_not_depend_on_gradient_magnitude():
    small = {"w": np.zeros(2, np.float32)}
    large = {"w": np.zeros(2, np.float32)}
    s1 = LionState.for_params(small, weight_decay=0.0)
    s2 = LionState.for_params(large, weight_decay=0.0)
    lion_step(small, {"w": np.array([1e-6, -1e-6], np.float32)}, s1, lr=0.5)
    lion_step(large, {"w": np.array([1e6, -1e6], np.float32)}, s2, lr=0.5)
    np.testing.assert_array_equal(small["w"], large["w"])
    np.testing.assert_array_equal(small["w"], [-0.5, 0.5])


def test_non_finite_gradient_leaves_everything_untouched():
    w = {"a": np.ones(2, np.float32), "b": np.ones(2, np.float32)}
    state = LionState.for_params(w)
    with pytest.raises(NonFiniteGradientError):
        lion_step(w, {"a": np.ones(2, np.float32), "b": np.array([np.inf, 0], np.float32)}, state)
    np.testing.assert_array_equal(w["a"], [1, 1])
    assert not state.momentum["a"].any()
    assert state.step == 0


def test_shape_mismatch():
    w = {"a": np.ones(2, np.float32)}
    with pytest.raises(ValueError):
        lion_step(w, {"a": np.ones(3, np.float32)}, LionState.for_params(w))


def test_state_round_trip(tmp_path):
    w = {"conv.weight": np.ones((2, 2), np.float32)}
    state = LionState.for_params(w, lr=1e-3)
    lion_step(w, {"conv.weight": np.full((2, 2), 0.5, np.float32)}, state)
    loaded = LionState.load(state.save(tmp_path / "lion.npz"))
    assert (loaded.lr, loaded.step, loaded.beta1) == (1e-3, 1, 0.9)
    np.testing.assert_array_equal(loaded.momentum["conv.weight"], state.momentum["conv.weight"])


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.5])
def test_betas_are_validated(beta):
    with pytest.raises(ValueError):
        LionState(beta1=beta)
