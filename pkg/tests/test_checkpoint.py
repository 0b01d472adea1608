import struct

import numpy as np
import pytest

from todnet.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from todnet.errors import (
    BadMagicError,
    LayerShapeError,
    OddDimensionError,
    TrailingDataError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from todnet.flow import FlowParams, MlpDeformerParams, flow_forward, init_flow, init_mlp_deformer


@pytest.mark.parametrize(
    "deformer",
    [
        init_flow(4, 3, 2, 8, 1, output_scale=0.5),
        init_flow(6, 1, 1, 5, 2, condition_normalized=False),
        init_mlp_deformer(4, 4, 8, seed=3),
    ],
    ids=["flow", "raw-condition", "mlp"],
)
def test_save_load_save_is_bit_exact(tmp_path, deformer):
    path = tmp_path / "m.todf"
    save_checkpoint(deformer, path)
    back = load_checkpoint(path)
    assert type(back) is type(deformer)
    assert back.condition_normalized == deformer.condition_normalized
    assert checkpoint_bytes(back) == path.read_bytes()
    assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), deformer.arrays()))


def test_layout():
    flow = init_flow(2, 1, 1, 3, 0)
    data = checkpoint_bytes(flow)
    assert data[:4] == b"TODF"
    assert struct.unpack_from("<HHII", data, 4) == (1, 1, 2, 1)
    assert struct.unpack_from("<BI", data, 16) == (1, 2)
    assert struct.unpack_from("<IIII", data, 21) == (3, 3, 2, 3)
    n_values = 3 * 3 + 3 + 2 * 3 + 2
    assert len(data) == 37 + 8 * n_values
    first_w = np.frombuffer(data[37:37 + 72], "<f8").reshape(3, 3)
    assert np.array_equal(first_w, flow.layers[0].conditioner.weights[0])


def test_loaded_flow_behaves_the_same():
    flow = init_flow(4, 3, 2, 8, 5, output_scale=0.5)
    back = parse_checkpoint(checkpoint_bytes(flow))
    v = np.random.default_rng(0).standard_normal((10, 4))
    assert np.array_equal(flow_forward(flow, v, v), flow_forward(back, v, v))
    assert isinstance(back, FlowParams) and not isinstance(back, MlpDeformerParams)


def test_parse_errors():
    good = checkpoint_bytes(init_flow(4, 2, 1, 4, 0))
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"FDOT" + good[4:])
    with pytest.raises(TruncatedFileError):
        parse_checkpoint(good[:2])
    with pytest.raises(TruncatedFileError):
        parse_checkpoint(good[:-1])
    with pytest.raises(TruncatedFileError):
        parse_checkpoint(good[:20])
    with pytest.raises(TrailingDataError):
        parse_checkpoint(good + b"\0" * 8)
    with pytest.raises(UnsupportedVersionError):
        parse_checkpoint(good[:4] + struct.pack("<H", 9) + good[6:])
    with pytest.raises(OddDimensionError):
        parse_checkpoint(good[:8] + struct.pack("<I", 5) + good[12:])
    with pytest.raises(LayerShapeError):
        parse_checkpoint(good[:16] + bytes([0]) + good[17:])  # both layers transform the first half
    with pytest.raises(LayerShapeError):
        parse_checkpoint(good[:16] + bytes([4]) + good[17:])
    with pytest.raises(LayerShapeError):
        parse_checkpoint(good[:6] + struct.pack("<H", 8) + good[8:])
