import struct

import numpy as np
import pytest

from fedskew.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from fedskew.errors import FormatError
from fedskew.nn import ModelParams, forward, init_mlp


@pytest.fixture
def model():
    return init_mlp([5, 4, 3], seed=7, dropout_rate=0.25)


class TestFormat:
    def test_round_trip_is_exact(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "m.frsm")
        back = load_checkpoint(tmp_path / "m.frsm")
        assert back.equals(model)
        assert back.dropout_rate == 0.25
        assert back.activations == ("relu", "identity")
        x = np.random.default_rng(0).random((9, 5))
        np.testing.assert_array_equal(forward(back, x), forward(model, x))

    def test_layout_by_hand(self):
        m = ModelParams([np.array([[1.0, 2.0]])], [np.array([3.0])], ("identity",))
        expected = (b"FRSM" + struct.pack("<IId", 1, 1, 0.0) + struct.pack("<IIB", 2, 1, 0)
                    + struct.pack("<ddd", 1.0, 2.0, 3.0))
        assert to_bytes(m) == expected

    def test_weights_row_major_out_by_in(self):
        w = np.arange(6, dtype=float).reshape(3, 2)
        m = ModelParams([w], [np.zeros(3)], ("relu",))
        raw = to_bytes(m)
        body = np.frombuffer(raw[20 + 9:20 + 9 + 48], dtype="<f8")
        np.testing.assert_array_equal(body, np.arange(6))

    @pytest.mark.parametrize("cut", [0, 3, 10, 25, 40, -1])
    def test_truncation_reports_offset(self, model, cut):
        raw = to_bytes(model)
        short = raw[:cut] if cut >= 0 else raw[:-1]
        with pytest.raises(FormatError) as err:
            from_bytes(short)
        assert err.value.offset == len(short)

    def test_bad_magic(self, model):
        raw = b"XXXX" + to_bytes(model)[4:]
        with pytest.raises(FormatError) as err:
            from_bytes(raw)
        assert err.value.offset == 0

    def test_trailing_bytes(self, model):
        raw = to_bytes(model)
        with pytest.raises(FormatError) as err:
            from_bytes(raw + b"\0")
        assert err.value.offset == len(raw)

    def test_unknown_activation(self, model):
        raw = bytearray(to_bytes(model))
        raw[20 + 8] = 9
        with pytest.raises(FormatError) as err:
            from_bytes(bytes(raw))
        assert err.value.offset == 28

    def test_save_overwrites_atomically(self, model, tmp_path):
        path = tmp_path / "m.frsm"
        save_checkpoint(init_mlp([5, 4, 3], seed=1), path)
        save_checkpoint(model, path)
        assert load_checkpoint(path).equals(model)
        assert [p.name for p in tmp_path.iterdir()] == ["m.frsm"]
