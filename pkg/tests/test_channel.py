import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cafl.channel import (DYNAMIC, STATIC, CoherenceProfile, GridShape, awgn, channel_at, sample_channel,
                          span_in_one_tile, tile_count, tile_index)
from cafl.rng import crandn, substream


def grid(N_s, N, M=2):
    return GridShape(N_s, N, M)


def test_single_block_when_tile_covers_grid():
    r = sample_channel(CoherenceProfile(0, 8, 4), grid(8, 4), seed=1)
    assert r.n_blocks == 1


def test_block_count_8x4():
    r = sample_channel(CoherenceProfile(0, 4, 2), grid(8, 4), seed=1)
    assert r.n_blocks == math.ceil(8 / 4) * math.ceil(4 / 2) == 4


def test_seed_determinism():
    p = CoherenceProfile(3, 3, 2, offset_t=1)
    a = sample_channel(p, grid(10, 5), seed=42)
    b = sample_channel(p, grid(10, 5), seed=42)
    assert np.array_equal(a.h, b.h)
    c = sample_channel(p, grid(10, 5), seed=43)
    assert not np.array_equal(a.h, c.h)


def test_rejects_bad_inputs():
    p = CoherenceProfile(0, 2, 2)
    with pytest.raises(ValueError):
        sample_channel(p, grid(4, 4, 0), seed=0)
    with pytest.raises(ValueError):
        sample_channel(p, grid(0, 4), seed=0)
    with pytest.raises(ValueError):
        CoherenceProfile(0, 0, 1)
    with pytest.raises(ValueError):
        CoherenceProfile(0, 4, 1, offset_t=4)
    with pytest.raises(ValueError):
        CoherenceProfile(0, 4, 1, cls="walking")


def test_channel_at_same_and_different_tiles():
    p = CoherenceProfile(0, 4, 1)
    r = sample_channel(p, grid(8, 1), seed=5)
    assert np.array_equal(channel_at(r, 0, 0), channel_at(r, 1, 0))
    assert not np.array_equal(channel_at(r, 0, 0), channel_at(r, 4, 0))
    with pytest.raises(IndexError):
        channel_at(r, 8, 0)


def test_offset_moves_boundary():
    p = CoherenceProfile(0, 4, 1, offset_t=1)
    assert tile_index(0, 4, 1) != tile_index(1, 4, 1)
    r = sample_channel(p, grid(8, 1), seed=5)
    assert not np.array_equal(channel_at(r, 0, 0), channel_at(r, 1, 0))
    assert np.array_equal(channel_at(r, 1, 0), channel_at(r, 4, 0))


def test_unit_variance_gaussian_entries():
    h = crandn(substream(0, 1), (100_000,))
    assert abs(np.mean(np.abs(h) ** 2) - 1) < 0.02
    assert abs(np.var(h.real) - 0.5) < 0.01 and abs(np.var(h.imag) - 0.5) < 0.01
    r = sample_channel(CoherenceProfile(0, 1, 1), grid(50_000, 2, 1), seed=9)
    assert abs(np.mean(np.abs(r.h) ** 2) - 1) < 0.02


def test_awgn_moments():
    assert np.array_equal(awgn((5, 3), 0.0, seed=1), np.zeros((5, 3)))
    w = awgn((100_000,), 2.0, seed=2)
    assert abs(np.mean(np.abs(w) ** 2) - 2) < 0.04
    assert abs(np.var(w.real) - 1) < 0.02 and abs(np.var(w.imag) - 1) < 0.02
    with pytest.raises(ValueError):
        awgn((2,), -1.0)


@settings(max_examples=200)
@given(N_s=st.integers(1, 32), N=st.integers(1, 32), L_t=st.integers(1, 12), L_f=st.integers(1, 12),
       data=st.data())
def test_tile_constancy_bruteforce(N_s, N, L_t, L_f, data):
    o_t = data.draw(st.integers(0, L_t - 1))
    o_f = data.draw(st.integers(0, L_f - 1))
    p = CoherenceProfile(0, L_t, L_f, offset_t=o_t, offset_f=o_f)
    r = sample_channel(p, grid(N_s, N, 1), seed=data.draw(st.integers(0, 2**32 - 1)))
    # brute-force tiles: rows n, n' share a tile iff no boundary offset + j L_t lies in (n, n']
    def label(pos, L, o):
        return (pos - o) // L if o else pos // L
    rows = {label(n, L_t, o_t) for n in range(N_s)}
    cols = {label(m, L_f, o_f) for m in range(N)}
    assert r.n_blocks == len(rows) * len(cols)
    assert tile_count(N_s, L_t, o_t) == len(rows)
    seen = {}
    for n in range(N_s):
        for m in range(N):
            key = (label(n, L_t, o_t), label(m, L_f, o_f))
            h = channel_at(r, n, m)[0]
            if key in seen:
                assert seen[key] == h
            else:
                seen[key] = h
    assert len(set(seen.values())) == len(seen)


def test_span_in_one_tile():
    p = CoherenceProfile(0, 6, 1)
    assert span_in_one_tile(p, 0, 5)
    assert not span_in_one_tile(p, 4, 7)
    assert STATIC != DYNAMIC
