import numpy as np
import pytest

from nsdser import kvformat as kv


def test_roundtrip_preserves_floats_bit_exactly():
    v = np.random.default_rng(0).standard_normal(7)
    text = kv.dumps("thing", {"vec": v, "x": 0.1, "n": 3, "flag": True, "name": "sd15"})
    f = kv.loads(text, "thing")
    assert np.array_equal(kv.parse_vector(f["vec"]), v)
    assert float(f["x"]) == 0.1
    assert int(f["n"]) == 3 and kv.parse_bool(f["flag"]) and f["name"] == "sd15"


def test_header_and_kind_checked():
    text = kv.dumps("a", {"k": 1})
    assert text.splitlines()[:3] == ["format = nsdser-kv", "version = 1", "kind = a"]
    with pytest.raises(kv.KVFormatError):
        kv.loads(text, "b")


@pytest.mark.parametrize("bad", ["format = nsdser-kv\nversion = 1\nkind = a\nnot a pair\n",
                                 "format = other\nversion = 1\nkind = a\n"])
def test_malformed_input_rejected(bad):
    with pytest.raises(kv.KVFormatError):
        kv.loads(bad)


def test_multiline_values_rejected():
    with pytest.raises(kv.KVFormatError):
        kv.dumps("a", {"k": "x\ny"})
