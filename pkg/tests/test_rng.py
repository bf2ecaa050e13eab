import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from towerlab import rng as rngmod


def test_streams_are_reproducible_and_distinct():
    a = rngmod.stream(7, "x", 0).random(5)
    np.testing.assert_array_equal(a, rngmod.stream(7, "x", 0).random(5))
    assert not np.array_equal(a, rngmod.stream(7, "x", 1).random(5))
    assert not np.array_equal(a, rngmod.stream(7, "y", 0).random(5))
    assert not np.array_equal(a, rngmod.stream(8, "x", 0).random(5))


@given(st.integers(0, 5000), st.integers(1, 700))
def test_chunk_bounds_cover_range(n, chunk):
    b = rngmod.chunk_bounds(n, chunk)
    covered = [i for _, s, e in b for i in range(s, e)]
    assert covered == list(range(n))
    assert [c for c, _, _ in b] == list(range(len(b)))


def test_map_chunks_independent_of_threads():
    def fn(ci, s, e):
        return rngmod.stream(3, "t", ci).random(e - s)

    one = rngmod.concat(rngmod.map_chunks(fn, 10_000, 1, chunk=333))
    many = rngmod.concat(rngmod.map_chunks(fn, 10_000, 8, chunk=333))
    np.testing.assert_array_equal(one, many)
