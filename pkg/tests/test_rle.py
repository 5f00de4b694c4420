import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from anyword.errors import LengthMismatch
from anyword.rle import (
    counts_to_string,
    decode_rle,
    decode_segmentation,
    encode_rle,
    encode_segmentation,
    string_to_counts,
)


def test_all_background():
    out = decode_rle([9], 3, 3)
    assert out.dtype == bool and not out.any()


def test_leading_zero_run():
    assert decode_rle([0, 9], 3, 3).all()


def test_mixed_runs_match_expansion_oracle():
    assert decode_rle([2, 3, 4], 3, 3).astype(int).tolist() == oracles.expand_runs([2, 3, 4], 3, 3)


def test_column_major_layout():
    # first column background, second column foreground
    out = decode_rle([2, 2], 2, 2)
    assert out.tolist() == [[False, True], [False, True]]


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        decode_rle([2, 3], 3, 3)
    with pytest.raises(ValueError):
        decode_rle([10, -1], 3, 3)


def test_encode_leading_foreground():
    assert encode_rle(np.ones((2, 2))) == [0, 4]
    assert encode_rle(np.zeros((2, 2))) == [4]


def test_round_trip_random(rng):
    for _ in range(1000):
        h, w = rng.integers(1, 20, size=2)
        m = rng.random((h, w)) < rng.random()
        assert np.array_equal(decode_rle(encode_rle(m), h, w), m)


@settings(max_examples=100, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_encode_matches_oracle(m):
    counts = encode_rle(m)
    assert sum(counts) == m.size
    assert all(c > 0 for c in counts[1:])
    assert oracles.expand_runs(counts, *m.shape) == m.astype(int).tolist()


def test_compressed_string_known_value():
    # reference value produced by the COCO mask API for this mask
    m = np.zeros((4, 4), dtype=bool)
    m[1:3, 1:3] = True
    assert encode_rle(m) == [5, 2, 2, 2, 5]
    assert counts_to_string([5, 2, 2, 2, 5]) == "52203"


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=30))
def test_compressed_string_round_trip(counts):
    assert string_to_counts(counts_to_string(counts)) == counts


def test_segmentation_objects(rng):
    m = rng.random((7, 5)) > 0.5
    for compressed in (False, True):
        seg = encode_segmentation(m, compressed)
        assert seg["size"] == [7, 5]
        assert isinstance(seg["counts"], str) == compressed
        np.testing.assert_array_equal(decode_segmentation(seg), m)
    seg = encode_segmentation(m, True)
    seg["counts"] = seg["counts"].encode()
    np.testing.assert_array_equal(decode_segmentation(seg), m)
