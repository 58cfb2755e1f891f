import numpy as np
import pytest

from src.errors import GraphValidationError, MissingStatsError, ShapeMismatchError, TapMissingError
from src.network.builder import ModelConfig, build_model, init_params
from src.network.graph import INPUT, NetworkGraph, Precision, freeze
from src.network.layers import Activation, BatchNorm, Conv2d, Node


class RecordingTracker:
    def __init__(self):
        self.next = 0
        self.live = {}
        self.events = []

    def on_alloc(self, nbytes, tag):
        self.next += 1
        self.live[self.next] = nbytes
        self.events.append(("alloc", tag, nbytes))
        return self.next

    def on_free(self, handle):
        self.live.pop(handle)
        self.events.append(("free", handle))


@pytest.fixture(scope="module")
def small_model():
    return build_model(ModelConfig(input_size=(32, 32)))


def _randomise_batchnorm(graph, seed=0):
    rng = np.random.default_rng(seed)
    from src.numerics.tensor import Tensor

    for key, tensor in list(graph.params.items()):
        shape = tensor.shape
        if key.endswith(".running_var"):
            value = rng.uniform(0.5, 2.0, shape)
        elif key.endswith(".running_mean") or key.endswith(".beta"):
            value = rng.normal(0, 0.2, shape)
        elif key.endswith(".gamma"):
            value = rng.uniform(0.5, 1.5, shape)
        else:
            continue
        graph.set_param(key, Tensor(value.astype(np.float32)))


def _chain(*nodes, output=None, shape=(2, 4, 4)):
    nodes = list(nodes)
    return NetworkGraph(nodes, shape, output or nodes[-1].name, params=init_params(nodes))


def test_freeze_folds_batchnorm_without_changing_outputs(small_model):
    graph = small_model.copy()
    _randomise_batchnorm(graph)
    frozen = freeze(graph)
    x = np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_allclose(frozen.forward(x).output, graph.forward(x).output, rtol=1e-3, atol=1e-3)
    assert frozen.frozen
    assert not any(isinstance(n.spec, BatchNorm) for n in frozen.nodes)
    assert len(frozen) < len(graph)
    assert set(frozen.taps) == set(graph.taps)


def test_forward_does_not_mutate_in_inference(small_model):
    graph = small_model.copy()
    before = {k: v.data.copy() for k, v in graph.params.items()}
    graph.forward(np.ones((1, 3, 32, 32), np.float32))
    for key, value in before.items():
        np.testing.assert_array_equal(graph.params[key].data, value)


def test_taps_expose_intermediate_features(small_model):
    run = small_model.forward(np.zeros((1, 3, 32, 32), np.float32))
    low, mid, high = (run.tap(n) for n in ("low_level", "mid_level", "high_level"))
    assert low.shape[2] > mid.shape[2] > high.shape[2]
    with pytest.raises(TapMissingError):
        run.tap("nowhere")


def test_input_shape_is_checked(small_model):
    with pytest.raises(ShapeMismatchError):
        small_model.forward(np.zeros((1, 3, 16, 16), np.float32))


def test_validation_catches_wiring_problems():
    conv = Node("c", Conv2d(2, 2), (INPUT,))
    with pytest.raises(GraphValidationError):
        _chain(Node("a", Activation(), ("b",)), Node("b", Activation(), (INPUT,))).validate()
    with pytest.raises(GraphValidationError):
        _chain(conv, Node("c", Activation(), ("c",))).validate()
    with pytest.raises(GraphValidationError):
        _chain(conv, output="missing").validate()
    bad_tap = _chain(conv)
    bad_tap.taps["x"] = "nothing"
    with pytest.raises(GraphValidationError):
        bad_tap.validate()
    missing_param = _chain(conv)
    del missing_param.params["c.weight"]
    with pytest.raises(GraphValidationError):
        missing_param.validate()
    with pytest.raises(GraphValidationError):
        _chain(Node("c", Conv2d(3, 2), (INPUT,))).validate()


def test_backward_reaches_every_trainable_parameter(small_model):
    graph = small_model.copy()
    run = graph.forward(np.random.default_rng(2).normal(size=(2, 3, 32, 32)).astype(np.float32), training=True)
    result = run.backward(np.ones_like(run.output))
    assert set(result.param_grads) == set(graph.trainable_keys())
    assert result.grad_input.shape == (2, 3, 32, 32)


def test_backward_without_caches_is_an_error(small_model):
    run = small_model.forward(np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(RuntimeError):
        run.backward(np.zeros_like(run.output))


def test_int8_node_without_activation_params_fails(small_model):
    graph = small_model.copy()
    first = graph.nodes[0].name
    graph.precisions[first] = Precision.INT8
    with pytest.raises(MissingStatsError):
        graph.forward(np.zeros((1, 3, 32, 32), np.float32))


def test_tracker_sees_balanced_events_in_inference(small_model):
    tracker = RecordingTracker()
    small_model.forward(np.zeros((1, 3, 32, 32), np.float32), tracker=tracker)
    allocs = [e for e in tracker.events if e[0] == "alloc"]
    frees = [e for e in tracker.events if e[0] == "free"]
    assert len(allocs) == len(small_model) + 1
    assert len(frees) == len(allocs)
    assert not tracker.live


def test_training_keeps_buffers_until_backward(small_model):
    graph = small_model.copy()
    tracker = RecordingTracker()
    run = graph.forward(np.zeros((1, 3, 32, 32), np.float32), training=True, tracker=tracker)
    assert tracker.live
    assert not any(e[0] == "free" for e in tracker.events)
    run.backward(np.zeros_like(run.output))
    assert not tracker.live


def test_training_forward_can_defer_running_stat_updates(small_model):
    graph = small_model.copy()
    keys = [k for k in graph.params if k.endswith(".running_mean") or k.endswith(".running_var")]
    before = {k: graph.params[k].data.copy() for k in keys}
    x = np.random.default_rng(6).normal(size=(2, 3, 32, 32)).astype(np.float32)

    run = graph.forward(x, training=True, update_buffers=False)
    assert set(run.buffer_updates) == set(keys)
    for k in keys:
        np.testing.assert_array_equal(graph.params[k].data, before[k])

    pending = {k: v.copy() for k, v in run.buffer_updates.items()}
    run.commit_buffers()
    assert run.buffer_updates == {}
    for k in keys:
        np.testing.assert_array_equal(graph.params[k].data, pending[k])
    assert any(not np.array_equal(pending[k], before[k]) for k in keys)


def test_training_forward_commits_running_stats_by_default(small_model):
    graph = small_model.copy()
    key = next(k for k in graph.params if k.endswith(".running_mean"))
    before = graph.params[key].data.copy()
    graph.forward(np.ones((1, 3, 32, 32), np.float32), training=True)
    assert not np.array_equal(graph.params[key].data, before)
    inference = graph.copy()
    snapshot = inference.params[key].data.copy()
    assert inference.forward(np.ones((1, 3, 32, 32), np.float32)).buffer_updates == {}
    np.testing.assert_array_equal(inference.params[key].data, snapshot)
