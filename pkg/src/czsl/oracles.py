"""Count-based oracle baselines: True Prior, Visual Bayes, Textual Bayes.

These read target-domain labels and therefore refuse to run unless the
caller passes ``oracle=True``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .components import OracleFlagError, Scorers, ScoreTable, score_table
from .datamodel import SceneDataset, ZslInstance

TABLE_MAGIC = b"CZCT1"
DEFAULT_EPS = 1e-9


@dataclass
class CooccurrenceTable:
    """Unit count ``M``, per-class counts ``#i`` and symmetric pair counts ``#(c,i)``.

    The diagonal ``#(i,i)`` counts units holding class ``i`` at least twice.
    Counts may be fractional when built from generator expectations.
    """

    M: float
    marginals: np.ndarray
    pairs: np.ndarray

    def __post_init__(self):
        self.marginals = np.asarray(self.marginals, dtype=np.float64)
        self.pairs = np.asarray(self.pairs, dtype=np.float64)
        n = len(self.marginals)
        if self.pairs.shape != (n, n):
            raise ValueError("pair matrix shape does not match marginals")
        if np.any(self.marginals < 0) or np.any(self.pairs < 0) or self.M <= 0:
            raise ValueError("counts must be nonnegative and M positive")
        if not np.array_equal(self.pairs, self.pairs.T):
            raise ValueError("pair counts must be symmetric")

    @property
    def n_classes(self) -> int:
        return len(self.marginals)

    def lift_matrix(self) -> np.ndarray:
        """``P_cooc(c|i)`` for all (c, i); 0 where either marginal is 0."""
        m = self.marginals
        denom = np.outer(m, m)
        out = np.zeros_like(self.pairs)
        ok = denom > 0
        out[ok] = self.pairs[ok] * self.M / denom[ok]
        return out


def require_oracle(oracle: bool, what: str) -> None:
    if not oracle:
        raise OracleFlagError(f"{what} reads target-domain labels; pass oracle=True")


def build_image_cooc(dataset: SceneDataset, oracle: bool = False, include_all_domains: bool = True) -> CooccurrenceTable:
    """Presence-based co-occurrence over every scene of the dataset."""
    require_oracle(oracle, "image co-occurrence")
    scenes = dataset.scenes if include_all_domains else dataset.split_scenes("train")
    ptr = np.zeros(len(scenes) + 1, dtype=np.int64)
    ids = []
    for k, scene in enumerate(scenes):
        ids.extend(o.class_idx for o in scene.objects)
        ptr[k + 1] = len(ids)
    _, presence, pairs = _kernels.group_cooc(ptr, np.asarray(ids, dtype=np.int64), len(dataset.vocab))
    return CooccurrenceTable(float(len(scenes)), presence, pairs)


def build_text_cooc(token_stream, labels: Sequence[str], window: int = 8) -> CooccurrenceTable:
    """Sliding windows (stride 1) over a whitespace-tokenized UTF-8 file.

    ``M`` is the number of windows, ``#i`` the occurrences of token ``i``
    summed over windows, and a pair is counted once per window. Tokens not
    in ``labels`` are ignored. A stream no longer than the window is a
    single window.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    try:
        tokens = Path(token_stream).read_text(encoding="utf-8").split()
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read token stream {token_stream}: {exc}") from exc
    return text_cooc_from_tokens(tokens, labels, window)


def text_cooc_from_tokens(tokens: Sequence[str], labels: Sequence[str], window: int = 8) -> CooccurrenceTable:
    index = {lab: i for i, lab in enumerate(labels)}
    ids = np.array([index.get(t, -1) for t in tokens], dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("empty token stream")
    if len(ids) <= window:
        windows = ids[None, :]
    else:
        windows = np.lib.stride_tricks.sliding_window_view(ids, window)
    n_win, width = windows.shape
    ptr = np.arange(n_win + 1, dtype=np.int64) * width
    occ, _, pairs = _kernels.group_cooc(ptr, windows.reshape(-1), len(labels))
    return CooccurrenceTable(float(n_win), occ, pairs)


def p_cooc(table: CooccurrenceTable, c: int, i: int) -> float:
    """``#(c,i) M / (#c #i)``; a lift ratio that may exceed 1."""
    mc, mi = table.marginals[c], table.marginals[i]
    if mc <= 0 or mi <= 0:
        raise ValueError(f"zero marginal count for class {c if mc <= 0 else i}")
    return float(table.pairs[c, i] * table.M / (mc * mi))


def true_prior_logscore(table: CooccurrenceTable, i, eps: float = 0.0):
    """``log((#i + eps) / (M + eps |O|))``; vectorized over ``i``."""
    num = table.marginals[i] + eps
    with np.errstate(divide="ignore"):
        out = np.log(num / (table.M + eps * table.n_classes))
    return float(out) if np.ndim(out) == 0 else out


def context_log_likelihood(lift: np.ndarray, context_labels: Sequence[int], candidates, eps: float) -> np.ndarray:
    """sum over context objects c of log(P_cooc(c|i) + eps), for each candidate i."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(context_labels) == 0:
        return np.zeros(len(candidates))
    with np.errstate(divide="ignore"):
        return np.log(lift[np.asarray(context_labels)][:, candidates] + eps).sum(axis=0)


def visual_bayes_logscore(
    table: CooccurrenceTable,
    instance: ZslInstance,
    i: int,
    visual_logscore: float,
    alpha_v: float = 1.0,
    alpha_p: float = 1.0,
    eps: float = DEFAULT_EPS,
    oracle: bool = False,
) -> float:
    require_oracle(oracle, "Visual Bayes")
    if table.marginals[i] <= 0:
        raise ValueError(f"class {i} unseen in co-occurrence table")
    ctx = context_log_likelihood(table.lift_matrix(), instance.oracle_context_labels(), [i], eps)[0]
    out = ctx
    if alpha_v:
        out += alpha_v * visual_logscore
    if alpha_p:
        out += alpha_p * true_prior_logscore(table, i)
    return float(out)


def oracle_score_table(
    kind: str,
    instances: Sequence[ZslInstance],
    candidates,
    visual_scorers: Scorers,
    table: CooccurrenceTable,
    prior_table: CooccurrenceTable | None = None,
    eps: float = DEFAULT_EPS,
    oracle: bool = False,
) -> ScoreTable:
    """Component score table for an oracle.

    ``true-prior``: visual + log P*. ``visual-bayes`` and ``textual-bayes``:
    co-occurrence context + visual + count prior (``prior_table`` defaults
    to ``table``). Exponents are then tuned with the standard calibration.
    """
    require_oracle(oracle, kind)
    if kind not in ("true-prior", "visual-bayes", "textual-bayes"):
        raise ValueError(f"unknown oracle {kind!r}")
    candidates = np.asarray(candidates, dtype=np.int64)
    base = Scorers(visual_scorers.class_vectors, visual=visual_scorers.visual, joint=None)
    st = score_table(base, instances, candidates)
    prior_table = prior_table or table
    st.prior = true_prior_logscore(prior_table, candidates, eps)
    if kind != "true-prior":
        lift = table.lift_matrix()
        st.context = np.stack(
            [context_log_likelihood(lift, inst.oracle_context_labels(), candidates, eps) for inst in instances]
        ) if instances else np.zeros((0, len(candidates)))
    return st


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_table(path, table: CooccurrenceTable) -> None:
    """``CZCT1``, u32 class count, u64 M, dense u64 marginals, u32 pair count,
    then sparse (u32, u32, u64) upper-triangle pair triples."""
    for arr in (table.marginals, table.pairs, np.array([table.M])):
        if not np.all(arr == np.round(arr)):
            raise ValueError("only integral count tables can be serialized")
    n = table.n_classes
    iu, ju = np.nonzero(np.triu(table.pairs))
    with Path(path).open("wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<IQ", n, int(table.M)))
        fh.write(table.marginals.astype("<u8").tobytes())
        fh.write(struct.pack("<I", len(iu)))
        for a, b in zip(iu, ju):
            fh.write(struct.pack("<IIQ", int(a), int(b), int(table.pairs[a, b])))


def load_table(path) -> CooccurrenceTable:
    raw = Path(path).read_bytes()
    if raw[:5] != TABLE_MAGIC:
        raise ValueError(f"{path}: not a CZCT1 table")
    n, M = struct.unpack_from("<IQ", raw, 5)
    pos = 17
    marg = np.frombuffer(raw, dtype="<u8", count=n, offset=pos).astype(np.float64)
    pos += 8 * n
    (n_pairs,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    pairs = np.zeros((n, n))
    for _ in range(n_pairs):
        a, b, v = struct.unpack_from("<IIQ", raw, pos)
        pos += 16
        pairs[a, b] = pairs[b, a] = v
    return CooccurrenceTable(float(M), marg, pairs)
