import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tritrain import tensor as T
from tritrain.packing import pack, packed_matmul, unpack
from tritrain.quant import compute_threshold, ternary_sign
from tritrain.tensor import Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=64)


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


@st.composite
def matmul_pair(draw):
    m, k, n = (draw(st.integers(1, 16)) for _ in range(3))
    a = draw(arrays(np.float64, (m, k), elements=finite))
    b = draw(arrays(np.float64, (k, n), elements=finite))
    return a, b


@settings(max_examples=60, deadline=None)
@given(matmul_pair())
def test_matmul_matches_loops(pair):
    a, b = pair
    got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, loop_matmul(a, b), rtol=1e-9, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 12)),
              elements=st.floats(-50, 50, allow_nan=False, width=64)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(Tensor(x, dtype=np.float64)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    shifted = T.softmax(Tensor(x + 7.5, dtype=np.float64)).data
    np.testing.assert_allclose(shifted, p, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite),
       st.integers(-8, 8), st.booleans())
def test_ternary_sign_scale_equivariance(w, k, negate):
    c = (-1.0 if negate else 1.0) * 2.0 ** k  # powers of two keep the threshold exact
    s = ternary_sign(w, compute_threshold(w))
    sc = ternary_sign(c * w, compute_threshold(c * w))
    assert np.array_equal(sc, -s if negate else s)


def test_pack_bijection_on_all_single_byte_patterns():
    seen = set()
    for n in range(81):
        digits = [(n // 3 ** i) % 3 - 1 for i in range(4)]
        p = pack(np.array([digits]), 1.0)
        assert len(p.codes) == 1
        seen.add(p.codes)
        assert unpack(p)[0].tolist() == [digits]
    assert len(seen) == 81


@st.composite
def packed_case(draw):
    rows, cols = draw(st.integers(1, 256)), draw(st.integers(1, 256))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    r = np.random.default_rng(seed)
    return (r.integers(-1, 2, (rows, cols)), r.uniform(-10, 10, (cols, draw(st.integers(1, 4)))),
            draw(st.floats(1e-3, 2.0)))


@settings(max_examples=40, deadline=None)
@given(packed_case())
def test_packed_matmul_matches_dense(case):
    s, x, alpha = case
    p = pack(s, alpha)
    np.testing.assert_allclose(packed_matmul(p, x), p.alpha * (s @ x), atol=1e-4)
