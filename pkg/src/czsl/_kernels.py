"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``CZSL_DISABLE_NUMBA``
is unset (or ``0``). Both implementations are importable directly as
``numpy_impl`` and ``numba_impl`` so tests and benchmarks can compare them.
"""

from __future__ import annotations

import os
import warnings
from types import SimpleNamespace

import numpy as np
from scipy import sparse

try:
    import numba
    from numba.core.errors import NumbaWarning

    # an old system TBB only makes numba fall back to another threading layer
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=NumbaWarning)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get("CZSL_DISABLE_NUMBA", "0").strip().lower()
    return HAVE_NUMBA and flag in ("", "0", "false", "no")


def _set_threads() -> None:
    cap = os.environ.get("CZSL_THREADS")
    if HAVE_NUMBA and cap:
        numba.set_num_threads(max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# numpy fallback
# ---------------------------------------------------------------------------


def _context_scores_np(pre_ctx, pre_cls, w2, b2):
    n, m = pre_ctx.shape[0], pre_cls.shape[0]
    out = np.empty((n, m))
    # one row at a time: a row's values never depend on which other rows are scored
    for i in range(n):
        out[i] = np.tanh(pre_ctx[i] + pre_cls) @ w2 + b2
    return out


def _true_ranks_np(scores, true_col):
    n = scores.shape[0]
    s_true = scores[np.arange(n), true_col][:, None]
    above = (scores > s_true).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == s_true) & (cols < true_col[:, None])).sum(axis=1)
    return (1 + above + tied_before).astype(np.int64)


def _group_cooc_np(group_ptr, ids, n_vocab):
    n_groups = len(group_ptr) - 1
    rows = np.repeat(np.arange(n_groups), np.diff(group_ptr))
    keep = ids >= 0
    counts = sparse.csr_matrix(
        (np.ones(int(keep.sum()), dtype=np.int64), (rows[keep], ids[keep])),
        shape=(n_groups, n_vocab),
    )
    counts.sum_duplicates()
    presence = counts.copy()
    presence.data = np.ones_like(presence.data)
    occurrences = np.asarray(counts.sum(axis=0)).ravel().astype(np.int64)
    marg = np.asarray(presence.sum(axis=0)).ravel().astype(np.int64)
    pairs = np.asarray((presence.T @ presence).todense(), dtype=np.int64)
    multi = counts.copy()
    multi.data = (multi.data >= 2).astype(np.int64)
    np.fill_diagonal(pairs, np.asarray(multi.sum(axis=0)).ravel())
    return occurrences, marg, pairs


numpy_impl = SimpleNamespace(
    context_scores=_context_scores_np,
    true_ranks=_true_ranks_np,
    group_cooc=_group_cooc_np,
)


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    # exp(2(a+b)) = exp(2a) exp(2b) moves the transcendental out of the inner loop;
    # beyond |x| > _EXP_SAFE the product could overflow, so fall back to tanh.
    _EXP_SAFE = 170.0

    @numba.njit(cache=True, parallel=True, fastmath={"reassoc", "contract", "arcp"})
    def _context_scores_nb(pre_ctx, pre_cls, w2, b2):
        n, hidden = pre_ctx.shape
        m = pre_cls.shape[0]
        out = np.empty((n, m))
        big = max(np.abs(pre_ctx).max() if n else 0.0, np.abs(pre_cls).max() if m else 0.0)
        if big > _EXP_SAFE or not np.isfinite(big):
            for i in numba.prange(n):
                for j in range(m):
                    acc = 0.0
                    for k in range(hidden):
                        acc += w2[k] * np.tanh(pre_ctx[i, k] + pre_cls[j, k])
                    out[i, j] = acc + b2
            return out
        ea = np.exp(2.0 * pre_ctx)
        eb = np.exp(2.0 * pre_cls)
        for i in numba.prange(n):
            for j in range(m):
                acc = 0.0
                for k in range(hidden):
                    acc += w2[k] * (1.0 - 2.0 / (ea[i, k] * eb[j, k] + 1.0))
                out[i, j] = acc + b2
        return out

    @numba.njit(cache=True)
    def _true_ranks_nb(scores, true_col):
        n, m = scores.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            t = true_col[i]
            s = scores[i, t]
            r = 1
            for j in range(m):
                v = scores[i, j]
                if v > s or (v == s and j < t):
                    r += 1
            out[i] = r
        return out

    @numba.njit(cache=True)
    def _group_cooc_nb(group_ptr, ids, n_vocab):
        occurrences = np.zeros(n_vocab, dtype=np.int64)
        marg = np.zeros(n_vocab, dtype=np.int64)
        pairs = np.zeros((n_vocab, n_vocab), dtype=np.int64)
        scratch = np.zeros(n_vocab, dtype=np.int64)
        present = np.empty(ids.shape[0], dtype=np.int64)
        for g in range(group_ptr.shape[0] - 1):
            n_present = 0
            for p in range(group_ptr[g], group_ptr[g + 1]):
                c = ids[p]
                if c < 0:
                    continue
                if scratch[c] == 0:
                    present[n_present] = c
                    n_present += 1
                scratch[c] += 1
            for a in range(n_present):
                ca = present[a]
                occurrences[ca] += scratch[ca]
                marg[ca] += 1
                if scratch[ca] >= 2:
                    pairs[ca, ca] += 1
                for b in range(a + 1, n_present):
                    cb = present[b]
                    pairs[ca, cb] += 1
                    pairs[cb, ca] += 1
            for a in range(n_present):
                scratch[present[a]] = 0
        return occurrences, marg, pairs

    numba_impl = SimpleNamespace(
        context_scores=_context_scores_nb,
        true_ranks=_true_ranks_nb,
        group_cooc=_group_cooc_nb,
    )
else:  # pragma: no cover
    numba_impl = numpy_impl


def _impl():
    if numba_enabled():
        _set_threads()
        return numba_impl
    return numpy_impl


def context_scores(pre_ctx, pre_cls, w2, b2):
    """Score every (context row, class row) pair through a one-output tanh layer.

    ``out[i, j] = sum_k w2[k] * tanh(pre_ctx[i, k] + pre_cls[j, k]) + b2``
    """
    pre_ctx = np.ascontiguousarray(pre_ctx, dtype=np.float64)
    pre_cls = np.ascontiguousarray(pre_cls, dtype=np.float64)
    w2 = np.ascontiguousarray(w2, dtype=np.float64).ravel()
    return _impl().context_scores(pre_ctx, pre_cls, w2, float(b2))


def true_ranks(scores, true_col):
    """1-based rank of ``scores[i, true_col[i]]`` in descending order.

    Ties go to the lower column index. NaN is treated as -inf.
    """
    scores = np.array(scores, dtype=np.float64, order="C")
    scores[np.isnan(scores)] = -np.inf
    true_col = np.ascontiguousarray(true_col, dtype=np.int64)
    return _impl().true_ranks(scores, true_col)


def group_cooc(group_ptr, ids, n_vocab):
    """Occurrence, presence and pairwise co-presence counts over groups.

    ``ids[group_ptr[g]:group_ptr[g+1]]`` are the item ids of group ``g``;
    negative ids are ignored. Returns ``(occurrences, presence, pairs)`` where
    ``pairs[c, i]`` counts groups holding both ``c`` and ``i`` and the diagonal
    counts groups holding an id at least twice.
    """
    group_ptr = np.ascontiguousarray(group_ptr, dtype=np.int64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    return _impl().group_cooc(group_ptr, ids, int(n_vocab))
