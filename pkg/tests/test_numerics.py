import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conceptnce.errors import DegenerateNorm, EmptyGrid, NonFiniteInput
from conceptnce.numerics import (
    bilinear_resize,
    first_argmax,
    floats_to_hex,
    hex_to_floats,
    l2_normalize,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_examples():
    assert np.allclose(softmax([2.0, 2.0, 2.0]), [1 / 3] * 3, rtol=0, atol=1e-15)
    assert np.allclose(softmax([0.0, math.log(3)]), [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_vs_extended_precision():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(scale=10, size=49)
        with mpmath.workdps(50):
            e = [mpmath.exp(mpmath.mpf(float(v))) for v in x]
            total = mpmath.fsum(e)
            ref = np.array([float(v / total) for v in e])
        assert np.max(np.abs(softmax(x) - ref)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=finite), finite)
def test_softmax_shift_invariance(x, c):
    assert np.max(np.abs(softmax(x + c) - softmax(x))) <= 1e-12


def test_softmax_errors():
    with pytest.raises(NonFiniteInput):
        softmax([])
    with pytest.raises(NonFiniteInput):
        softmax([1.0, np.nan])


def test_l2_normalize_examples():
    assert l2_normalize([3.0, 4.0]).tolist() == [0.6, 0.8]
    assert l2_normalize([0.0, 1.0]).tolist() == [0.0, 1.0]
    with pytest.raises(DegenerateNorm):
        l2_normalize([0.0, 0.0])
    with pytest.raises(NonFiniteInput):
        l2_normalize([np.inf, 1.0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=finite))
def test_l2_normalize_idempotent(x):
    if np.linalg.norm(x) < 1e-6:
        return
    once = l2_normalize(x)
    assert np.max(np.abs(l2_normalize(once) - once)) <= 1e-12
    assert abs(np.linalg.norm(once) - 1) <= 1e-12


def _scalar_bilinear(src, out_h, out_w):
    # direct per-pixel evaluation of the half-pixel formula
    h, w = len(src), len(src[0])
    out = []
    for r in range(out_h):
        y = min(max((r + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        row = []
        for c in range(out_w):
            x = min(max((c + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = src[y0][x0] * (1 - fx) + src[y0][x1] * fx
            bot = src[y1][x0] * (1 - fx) + src[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return np.array(out)


def test_bilinear_examples():
    assert np.all(bilinear_resize(np.full((7, 7), 0.7), 56, 40) == 0.7)
    src = np.random.default_rng(1).random((5, 6))
    assert np.array_equal(bilinear_resize(src, 5, 6), src)
    two = [[0.0, 1.0], [0.0, 1.0]]
    out = bilinear_resize(two, 4, 4)
    assert out.tolist() == [[0.0, 0.25, 0.75, 1.0]] * 4
    assert np.array_equal(out, _scalar_bilinear(two, 4, 4))


def test_bilinear_matches_scalar_formula():
    rng = np.random.default_rng(2)
    for shape, out in [((7, 7), (56, 56)), ((3, 5), (8, 4)), ((4, 4), (2, 2)), ((1, 3), (5, 7))]:
        src = rng.normal(size=shape)
        ref = _scalar_bilinear(src.tolist(), *out)
        assert np.max(np.abs(bilinear_resize(src, *out) - ref)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite),
       st.integers(1, 20), st.integers(1, 20))
def test_bilinear_bounded(src, oh, ow):
    out = bilinear_resize(src, oh, ow)
    assert out.shape == (oh, ow)
    assert out.min() >= src.min() and out.max() <= src.max()


def test_bilinear_errors():
    with pytest.raises(EmptyGrid):
        bilinear_resize(np.zeros((0, 3)), 2, 2)
    with pytest.raises(EmptyGrid):
        bilinear_resize(np.zeros((2, 2)), 0, 2)
    with pytest.raises(NonFiniteInput):
        bilinear_resize([[np.nan]], 2, 2)


def test_first_argmax_tie_break():
    g = np.zeros((3, 4))
    g[1, 2] = g[2, 0] = g[0, 3] = 5.0
    assert first_argmax(g) == (0, 3)
    assert first_argmax(np.ones((2, 2))) == (0, 0)


def test_hex_round_trip_special_values():
    vals = np.array([0.0, -0.0, 1.0, -2.5, 5e-324, np.inf, -np.inf, 1 / 3, np.nan])
    codes = floats_to_hex(vals)
    assert codes[2] == "3ff0000000000000" and codes[1] == "8000000000000000"
    back = hex_to_floats(codes)
    assert back.view(np.uint64).tolist() == vals.view(np.uint64).tolist()
    assert hex_to_floats(codes[:4], (2, 2)).shape == (2, 2)
