import numpy as np
import pytest

from dsdistill import dst1


def test_roundtrip_ranks(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(5,), (3, 4), (2, 3, 4), (2, 2, 3, 4)]:
        a = rng.standard_normal(shape)
        path = tmp_path / "t.dst1"
        dst1.dump(a, path)
        back = dst1.load(path)
        assert back.shape == a.shape
        np.testing.assert_array_equal(back, a)  # bit-exact


def test_header_layout():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    raw = dst1.dump_bytes(a)
    assert raw[:4] == b"DST1"
    assert raw[4] == 2  # rank
    assert int.from_bytes(raw[5:9], "little") == 2
    assert int.from_bytes(raw[9:13], "little") == 2
    assert len(raw) == 13 + 4 * 8


def test_rejects_bad_magic():
    with pytest.raises(ValueError):
        dst1.load_bytes(b"NOPE" + bytes(20))


def test_rejects_truncated():
    raw = dst1.dump_bytes(np.ones(4))
    with pytest.raises(ValueError):
        dst1.load_bytes(raw[:-8])


def test_rejects_rank_five():
    with pytest.raises(ValueError):
        dst1.dump_bytes(np.ones((1, 1, 1, 1, 1)))


def test_exact_integers_survive():
    a = np.array([0.0, 1.0, 255.0, 12345.0])
    assert (dst1.load_bytes(dst1.dump_bytes(a)) == a).all()
