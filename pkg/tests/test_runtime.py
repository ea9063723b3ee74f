import numpy as np
import pytest

from nvarrays.runtime import parallel_map, stream


def _draw(index: int) -> float:
    return float(stream(7, "fabricate", index).random())


def test_stream_is_reproducible():
    assert stream(1, "hbt", 3).random(5).tolist() == stream(1, "hbt", 3).random(5).tolist()


def test_streams_differ_by_seed_stage_and_index():
    ref = stream(1, "hbt", 3).random(4)
    for other in (stream(2, "hbt", 3), stream(1, "image", 3), stream(1, "hbt", 4)):
        assert not np.allclose(ref, other.random(4))


def test_stream_rejects_negative_inputs():
    with pytest.raises(ValueError):
        stream(-1, "hbt", 0)
    with pytest.raises(ValueError):
        stream(1, "hbt", -2)


def test_parallel_map_matches_serial_in_order():
    items = list(range(23))
    assert parallel_map(_draw, items, 2) == [_draw(i) for i in items]
    assert parallel_map(_draw, items, 2, chunk_size=5) == parallel_map(_draw, items, 1)


def test_parallel_map_handles_trivial_inputs():
    assert parallel_map(_draw, [], 4) == []
    assert parallel_map(_draw, [3], 4) == [_draw(3)]
