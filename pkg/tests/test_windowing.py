import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slicerecon.data import Volume
from slicerecon.errors import ShapeError
from slicerecon.windowing import make_window_pairs, n_window_pairs, stack_channels, unstack_channels


def _volume(n, h=4, w=4):
    # slice k is filled with the value k so positions are easy to audit
    px = np.broadcast_to(np.arange(n, dtype=np.float32)[:, None, None], (n, h, w)).copy()
    return Volume("s", "scan", px)


@pytest.mark.parametrize("n,expected", [(40, 35), (6, 1), (5, 0), (0, 0)])
def test_pair_counts(n, expected):
    pairs = make_window_pairs(_volume(n))
    assert len(pairs) == expected == n_window_pairs(n)


def test_single_pair_start_index():
    (p,) = make_window_pairs(_volume(6))
    assert p.start_index == 0
    np.testing.assert_array_equal(p.input_stack[:, 0, 0], [0, 1, 2])
    np.testing.assert_array_equal(p.target_stack[:, 0, 0], [3, 4, 5])


@given(st.integers(0, 30))
def test_count_coverage_and_consecutiveness(n):
    pairs = make_window_pairs(_volume(n, 2, 2))
    assert len(pairs) == max(0, n - 5)
    assert [p.start_index for p in pairs] == list(range(len(pairs)))
    seen = set()
    for p in pairs:
        inp = p.input_stack[:, 0, 0].astype(int).tolist()
        tgt = p.target_stack[:, 0, 0].astype(int).tolist()
        assert inp == [p.start_index + k for k in range(3)]
        assert tgt[0] == inp[0] + 3 and tgt == sorted(tgt)
        assert p.target_start == p.start_index + 3
        seen.update(inp + tgt)
    if n >= 6:
        assert seen == set(range(n))


def test_pairs_are_read_only_views():
    v = _volume(8)
    p = make_window_pairs(v)[0]
    assert np.shares_memory(p.input_stack, v.pixels)
    with pytest.raises(ValueError):
        p.input_stack[0, 0, 0] = 9
    # the volume itself stays writable
    v.pixels[0, 0, 0] = 1.5


def test_stack_channels_order_and_round_trip():
    rng = np.random.default_rng(0)
    a, b, c = (rng.random((5, 7)) for _ in range(3))
    s = stack_channels([a, b, c])
    assert s.shape == (3, 5, 7)
    np.testing.assert_array_equal(s[1], b)
    for orig, back in zip((a, b, c), unstack_channels(s)):
        np.testing.assert_array_equal(orig, back)


def test_stack_channels_errors():
    a = np.zeros((4, 4))
    with pytest.raises(ShapeError):
        stack_channels([a, a, np.zeros((4, 5))])
    with pytest.raises(ShapeError):
        stack_channels([a, a])
