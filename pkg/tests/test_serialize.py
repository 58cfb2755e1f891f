import numpy as np
import pytest

from src.errors import CorruptFileError, VersionMismatchError
from src.network.builder import ModelConfig, build_model
from src.network.graph import Precision, freeze
from src.network.serialize import decode_model, encode_model, load_model, save_model
from src.quant.policy import QuantPolicy
from src.quant.ptq import apply_ptq


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(input_size=(16, 16), activation="prelu"))


def test_model_file_round_trip(tmp_path, model):
    path = save_model(model, tmp_path / "m.emb")
    back = load_model(path)
    assert back.node_names == model.node_names
    assert back.taps == model.taps
    assert back.config == model.config
    x = np.random.default_rng(0).normal(size=(1, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(back.forward(x).output, model.forward(x).output)


def test_encoding_is_deterministic(model):
    assert encode_model(model) == encode_model(model.copy())


def test_mixed_precision_graph_round_trip(model):
    quantized, _ = apply_ptq(freeze(model), QuantPolicy.uniform(Precision.FP16), {})
    back = decode_model(encode_model(quantized))
    assert back.frozen
    assert set(back.precisions.values()) == {Precision.FP16}
    assert back.param_bytes() == quantized.param_bytes()


def test_corrupt_model_files_are_rejected(model):
    buf = encode_model(model)
    with pytest.raises(CorruptFileError):
        decode_model(b"NOPE" + buf[4:])
    with pytest.raises(VersionMismatchError):
        decode_model(buf[:4] + (99).to_bytes(4, "little") + buf[8:])
    with pytest.raises(CorruptFileError):
        decode_model(buf[:-3])
    with pytest.raises(CorruptFileError):
        decode_model(buf + b"\0")
