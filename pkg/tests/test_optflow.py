import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lipread3d.errors import ContractError, FormatError, ShapeError
from lipread3d.optflow import (FlowField, FlowParams, decode_flo, encode_flo, estimate_flow, flow_sequence,
                               flow_to_input, read_flo, write_flo)

from textures import shifted, textures, translations


@pytest.mark.parametrize("name", ["noise", "grating", "coarse"])
def test_translation_is_recovered(name):
    img = textures()[name]
    for dx, dy in translations():
        f = estimate_flow(img, shifted(img, dx, dy))
        assert np.median(np.hypot(f.u - dx, f.v - dy)) <= 0.5, (name, dx, dy)


def test_zero_motion_gives_zero_flow():
    img = textures()["noise"]
    f = estimate_flow(img, img)
    assert np.abs(f.data).max() < 1e-6


def test_flow_sign_convention():
    img = textures()["coarse"]
    f = estimate_flow(img, shifted(img, 2, 0))
    assert np.median(f.u) > 1.5 and abs(np.median(f.v)) < 0.5
    f = estimate_flow(img, shifted(img, 0, -2))
    assert np.median(f.v) < -1.5


def test_flat_image_gives_zero_flow():
    flat = np.full((32, 32), 0.5)
    assert np.abs(estimate_flow(flat, flat).data).max() == 0


def test_params_validation():
    with pytest.raises(ContractError):
        FlowParams(window=4)
    with pytest.raises(ContractError):
        FlowParams(pyramid_levels=0)
    with pytest.raises(ShapeError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))


def test_flow_sequence_alignment():
    img = textures(32)["coarse"]
    clip = np.stack([shifted(img, t, 0) for t in range(4)])
    stream = flow_sequence(clip, FlowParams(pyramid_levels=1))
    assert stream.shape == (2, 4, 32, 32)
    assert np.array_equal(stream[:, 3], stream[:, 2])
    assert np.median(stream[0, 1]) == pytest.approx(1.0, abs=0.3)
    with pytest.raises(ContractError):
        flow_sequence(clip[:1])


def test_flow_to_input_scales_and_clamps():
    x = flow_to_input(np.array([-20.0, -4.0, 0.0, 8.0, 30.0]), 8.0)
    assert x.tolist() == [-1.0, -0.5, 0.0, 1.0, 1.0]
    with pytest.raises(ContractError):
        flow_to_input(np.zeros(2), 0)


def test_flo_layout():
    f = FlowField.from_uv(np.array([[1.5, -2.0]]), np.array([[0.25, 3.0]]))
    buf = encode_flo(f)
    assert buf[:4] == b"PIEH" and len(buf) == 12 + 1 * 2 * 8
    assert np.frombuffer(buf[:4], "<f4")[0] == 202021.25
    assert np.frombuffer(buf[4:12], "<i4").tolist() == [2, 1]
    assert np.frombuffer(buf[12:], "<f4").tolist() == [1.5, 0.25, -2.0, 3.0]


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_round_trip_is_bitwise(data):
    f = FlowField(data)
    back = decode_flo(encode_flo(f))
    assert back.data.tobytes() == f.data.tobytes()


def test_flo_file_and_stream_round_trip(tmp_path):
    f = FlowField(np.random.default_rng(0).standard_normal((5, 7, 2)))
    write_flo(f, tmp_path / "a.flo")
    assert read_flo(tmp_path / "a.flo").data.tobytes() == f.data.tobytes()
    buf = io.BytesIO()
    write_flo(f, buf)
    buf.seek(0)
    assert read_flo(buf).data.tobytes() == f.data.tobytes()


def test_flo_rejects_bad_input():
    good = encode_flo(FlowField(np.zeros((2, 2, 2))))
    with pytest.raises(FormatError):
        decode_flo(b"XXXX" + good[4:])
    with pytest.raises(FormatError):
        decode_flo(good[:-1])
    with pytest.raises(FormatError):
        decode_flo(good[:8])
    with pytest.raises(ContractError):
        encode_flo(FlowField(np.full((1, 1, 2), np.nan)))
    with pytest.raises(ShapeError):
        FlowField(np.zeros((2, 2, 3)))
