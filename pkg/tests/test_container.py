import numpy as np
import pytest

from dense_align import container
from dense_align.errors import FormatVersionError, IntegrityError


def sample():
    rng = np.random.default_rng(0)
    meta = {"rank": 4, "widths": [3, 8, 2], "note": "x"}
    arrays = {"params": rng.normal(size=37), "latents": rng.normal(size=(2, 5, 3)),
              "pairs": np.array([[0, 1], [2, 3]]), "empty": np.zeros((0, 2))}
    return meta, arrays


def test_roundtrip_bit_exact(tmp_path):
    meta, arrays = sample()
    path = tmp_path / "a.ckpt"
    container.save(path, meta, arrays)
    meta2, arrays2 = container.load(path)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k, v in arrays.items():
        assert arrays2[k].shape == v.shape
        assert arrays2[k].dtype.kind == v.dtype.kind
        assert arrays2[k].tobytes() == np.asarray(v).tobytes()


def test_resave_identical_bytes(tmp_path):
    meta, arrays = sample()
    a, b = tmp_path / "a", tmp_path / "b"
    container.save(a, meta, arrays)
    container.save(b, *container.load(a))
    assert a.read_bytes() == b.read_bytes()


def test_special_values_survive():
    blob = container.encode({}, {"x": np.array([np.inf, -0.0, 5e-324])})
    x = container.decode(blob)[1]["x"]
    assert x.tobytes() == np.array([np.inf, -0.0, 5e-324]).tobytes()


@pytest.mark.parametrize("where", ["magic", "header", "payload", "truncate"])
def test_corruption_detected(where):
    blob = bytearray(container.encode(*sample()))
    if where == "magic":
        blob[0] ^= 1
    elif where == "header":
        blob[20] ^= 1
    elif where == "payload":
        blob[-3] ^= 1
    else:
        blob = blob[:-8]
    with pytest.raises(IntegrityError):
        container.decode(bytes(blob))


def test_version_mismatch():
    blob = container.encode({}, {}, version=container.FORMAT_VERSION + 1)
    with pytest.raises(FormatVersionError):
        container.decode(blob)


def test_noninteger_int_array():
    with pytest.raises(ValueError):
        container.encode({}, {"big": np.array([2**60 + 1])})
