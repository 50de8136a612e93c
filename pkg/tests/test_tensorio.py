import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nerfguide import tensorio

finite32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 5)), elements=finite32))
def test_checkpoint_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("c") / "x.nfd"
    tensors = {"mlp.W1": a, "scalar": np.array(2.5, np.float32), "ü": a.ravel()}
    tensorio.save_tensors(p, tensors)
    back = tensorio.load_tensors(p)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_header(tmp_path):
    tensorio.save_tensors(tmp_path / "a", {"w": np.ones((2, 3), np.float32)})
    raw = (tmp_path / "a").read_bytes()
    assert raw[:4] == b"NFD1" and raw[4:8] == (1).to_bytes(4, "little")
    assert len(raw) == 8 + 4 + 1 + 4 + 8 + 24


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        tensorio.load_tensors(tmp_path / "bad")


def test_float_image(tmp_path, rng):
    img = rng.random((3, 5, 3)).astype(np.float32)
    tensorio.save_float_image(tmp_path / "i", img)
    np.testing.assert_array_equal(tensorio.load_float_image(tmp_path / "i"), img)
    tensorio.save_float_image(tmp_path / "g", img[..., 0])
    assert tensorio.load_float_image(tmp_path / "g").shape == (3, 5, 1)


def test_ppm(tmp_path, rng):
    img = rng.random((4, 6, 3))
    tensorio.save_ppm(tmp_path / "p.ppm", img)
    assert (tmp_path / "p.ppm").read_bytes().startswith(b"P6\n6 4\n255\n")
    np.testing.assert_array_equal(tensorio.load_ppm(tmp_path / "p.ppm"), tensorio.to_uint8(img))


def test_ppm_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# hi\n1 1\n255\n" + bytes([1, 2, 3]))
    np.testing.assert_array_equal(tensorio.load_ppm(tmp_path / "c.ppm"), [[[1, 2, 3]]])


def test_to_uint8_clips():
    np.testing.assert_array_equal(tensorio.to_uint8(np.array([-1.0, 0.5, 2.0])), [0, 128, 255])
