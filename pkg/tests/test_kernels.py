import numpy as np
import pytest
from hypothesis import given, strategies as st

from czsl import _kernels

pytestmark = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


@given(st.integers(0, 10_000), st.integers(0, 6), st.integers(0, 7), st.sampled_from([1.0, 50.0, 400.0]))
def test_context_scores_agree(seed, n, m, scale):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 5)) * scale
    b = rng.normal(size=(m, 5)) * scale
    w2 = rng.normal(size=5)
    ref = _kernels.numpy_impl.context_scores(a, b, w2, 0.3)
    got = _kernels.numba_impl.context_scores(a, b, w2, 0.3)
    assert got.shape == (n, m)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_context_scores_row_independent():
    rng = np.random.default_rng(0)
    a, b, w2 = rng.normal(size=(6, 4)), rng.normal(size=(5, 4)), rng.normal(size=4)
    full = _kernels.context_scores(a, b, w2, 0.0)
    one = _kernels.context_scores(a[2:3], b, w2, 0.0)
    np.testing.assert_allclose(full[2:3], one, rtol=1e-13, atol=1e-15)


@given(st.integers(0, 10_000), st.booleans())
def test_true_ranks_agree(seed, ties):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(9, 11))
    if ties:
        s = np.round(s)
    s[0, 0] = np.nan
    t = rng.integers(0, 11, size=9)
    a = _kernels.numpy_impl.true_ranks(np.where(np.isnan(s), -np.inf, s), t)
    assert np.array_equal(a, _kernels.numba_impl.true_ranks(np.where(np.isnan(s), -np.inf, s), t))
    assert np.array_equal(a, _kernels.true_ranks(s, t))


@given(st.lists(st.lists(st.integers(-1, 6), max_size=7), min_size=1, max_size=20))
def test_group_cooc_agree(groups):
    ptr = np.cumsum([0] + [len(g) for g in groups]).astype(np.int64)
    ids = np.array([c for g in groups for c in g], dtype=np.int64)
    ref = _kernels.numpy_impl.group_cooc(ptr, ids, 7)
    got = _kernels.numba_impl.group_cooc(ptr, ids, 7)
    for x, y in zip(ref, got):
        assert np.array_equal(x, y)


def test_env_flag_selects_fallback(monkeypatch):
    monkeypatch.setenv("CZSL_DISABLE_NUMBA", "1")
    assert not _kernels.numba_enabled() and _kernels._impl() is _kernels.numpy_impl
    monkeypatch.setenv("CZSL_DISABLE_NUMBA", "0")
    assert _kernels.numba_enabled() and _kernels._impl() is _kernels.numba_impl
    monkeypatch.setenv("CZSL_THREADS", "1")
    _kernels.true_ranks(np.zeros((1, 2)), np.zeros(1, dtype=np.int64))
