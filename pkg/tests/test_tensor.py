import numpy as np
import pytest

from src.errors import CorruptFileError, MissingParamsError, ShapeMismatchError
from src.numerics.io import HEADER, decode_tensor, encode_tensor, load_tensor, save_tensor
from src.numerics.quant import Granularity, QuantParams
from src.numerics.tensor import DType, Tensor, cast_tensor


def test_f16_cast_of_exact_values_is_lossless():
    t = Tensor.from_array([1.0, 2.0])
    back = cast_tensor(cast_tensor(t, DType.F16), DType.F32)
    np.testing.assert_array_equal(back.data, t.data)


def test_f16_cast_rounds():
    t = cast_tensor(Tensor.from_array([0.1]), DType.F16)
    assert t.dtype is DType.F16
    assert float(t.data.ravel()[0]) == 0.0999755859375


def test_i8_cast_round_trip():
    p = QuantParams.asymmetric_int8(1.0, 0)
    q = cast_tensor(Tensor.from_array([3.4]), DType.I8, p)
    assert q.data.dtype == np.int8
    assert cast_tensor(q, DType.F32).data.ravel().tolist() == [3.0]


def test_i8_cast_requires_params():
    with pytest.raises(MissingParamsError):
        cast_tensor(Tensor.from_array([1.0]), DType.I8)


@pytest.mark.parametrize("src", list(DType))
@pytest.mark.parametrize("dst", list(DType))
def test_cast_preserves_shape(src, dst):
    p = QuantParams.asymmetric_int8(0.05, 0)
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
    t = cast_tensor(Tensor(x), src, p if src is DType.I8 else None)
    out = cast_tensor(t, dst, p if dst is DType.I8 else None)
    assert out.shape == (2, 3, 4, 5)
    assert out.numel == x.size


def test_tensor_invariants():
    with pytest.raises(ShapeMismatchError):
        Tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(MissingParamsError):
        Tensor(np.zeros((1, 1, 1, 1), dtype=np.int8), DType.I8)
    with pytest.raises(ValueError):
        Tensor(np.full((1, 1, 1, 1), 0.1, dtype=np.float32), DType.F16)
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32), DType.F32, QuantParams.asymmetric_int8(1.0, 0))


def test_nbytes_reflects_storage_width():
    x = np.ones((2, 3, 4, 4), dtype=np.float32)
    assert Tensor(x).nbytes == x.size * 4
    assert cast_tensor(Tensor(x), DType.F16).nbytes == x.size * 2
    p = QuantParams.symmetric_int8((0.1, 0.2), Granularity.PER_CHANNEL, axis=0)
    q = cast_tensor(Tensor(np.ones((2, 3, 1, 1), dtype=np.float32)), DType.I8, p)
    assert q.nbytes == 6 + 14 + 16


@pytest.mark.parametrize("dtype", list(DType))
def test_file_round_trip_is_bit_exact(tmp_path, dtype):
    x = np.random.default_rng(3).normal(size=(1, 2, 3, 3)).astype(np.float32)
    p = QuantParams.symmetric_int8((0.01, 0.02), Granularity.PER_CHANNEL, axis=1) if dtype is DType.I8 else None
    t = cast_tensor(Tensor(x), dtype, p)
    path = save_tensor(t, tmp_path / "t.embt")
    back = load_tensor(path)
    assert back.dtype is t.dtype
    assert back.qparams == t.qparams
    np.testing.assert_array_equal(back.data, t.data)


def test_header_layout():
    buf = encode_tensor(Tensor.from_array(np.zeros((1, 2, 3, 4))))
    assert HEADER.size == 24
    assert buf[:4] == b"EMBT"
    assert int.from_bytes(buf[8:12], "little") == 1
    assert len(buf) == 24 + 24 * 4
    assert len(encode_tensor(cast_tensor(Tensor.from_array(np.zeros((1, 2, 3, 4))), DType.F16))) == 24 + 24 * 2


def test_corrupt_buffers_are_rejected(tmp_path):
    buf = encode_tensor(Tensor.from_array(np.ones((1, 1, 2, 2))))
    with pytest.raises(CorruptFileError):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(CorruptFileError):
        decode_tensor(buf[:-1])
    with pytest.raises(CorruptFileError):
        decode_tensor(buf[:10])
    path = tmp_path / "trailing.embt"
    path.write_bytes(buf + b"\0")
    with pytest.raises(CorruptFileError):
        load_tensor(path)
