"""Rank-based retrieval metrics: FR/MFR, Recall@k, MRR, Spearman."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REPORT_SCHEMA = "czr-1"
QUARTILE_RULE = "linear interpolation between order statistics (numpy 'linear')"


def first_relevant(r, n: int):
    """FR in percent: ``100 * 2 (r - 1) / (n - 1)``. Works on scalars or arrays."""
    if n < 2:
        raise ValueError("first_relevant needs at least two candidates")
    r_arr = np.asarray(r)
    if np.any(r_arr < 1) or np.any(r_arr > n):
        raise ValueError(f"rank out of range [1, {n}]")
    fr = 100.0 * 2.0 * (r_arr - 1) / (n - 1)
    return float(fr) if np.ndim(fr) == 0 else fr


@dataclass
class RankingReport:
    n: int
    fr: np.ndarray
    ranks: np.ndarray
    mfr: float
    recall_at: dict[int, float]
    mrr: float
    mode: str = "target"
    per_class: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.fr)

    def to_dict(self, calibration=None, oracle: bool = False, labels: Sequence[str] | None = None, extra=None) -> dict:
        doc = {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "n": int(self.n),
            "count": int(self.count),
            "mfr": round(float(self.mfr), 2),
            "mfr_exact": float(self.mfr),
        }
        for k in sorted(self.recall_at):
            doc[f"recall@{k}"] = float(self.recall_at[k])
        doc["mrr"] = float(self.mrr)
        doc["oracle"] = bool(oracle)
        if calibration is not None:
            a_c, a_v, a_p = calibration
            doc["calibration"] = {"alpha_c": float(a_c), "alpha_v": float(a_v), "alpha_p": float(a_p)}
        per_class = {}
        for cls, summary in self.per_class.items():
            key = labels[cls] if labels is not None else str(cls)
            per_class[key] = summary
        doc["per_class"] = per_class
        doc["per_class_quartile_rule"] = QUARTILE_RULE
        if extra:
            doc.update(extra)
        return doc


def aggregate(ranks, n: int, ks: Sequence[int] = (1, 5, 10), mode: str = "target", classes=None) -> RankingReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("cannot aggregate an empty set of ranks")
    fr = first_relevant(ranks, n)
    fr = np.atleast_1d(fr)
    report = RankingReport(
        n=n,
        fr=fr,
        ranks=ranks,
        mfr=float(fr.mean()),
        recall_at={int(k): float((ranks <= k).mean()) for k in ks},
        mrr=float((1.0 / ranks).mean()),
        mode=mode,
    )
    if classes is not None:
        report.per_class = per_class_fr(classes, ranks, n)
    return report


def _five_numbers(values) -> dict[str, float]:
    q = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


def per_class_fr(classes, ranks, n: int) -> dict[int, dict[str, float]]:
    """Five-number FR summary per true class, ordered by ascending median."""
    classes = np.asarray(classes, dtype=np.int64)
    fr = np.atleast_1d(first_relevant(np.asarray(ranks), n))
    summaries = {int(c): _five_numbers(fr[classes == c]) for c in np.unique(classes)}
    order = sorted(summaries, key=lambda c: (summaries[c]["median"], c))
    return {c: summaries[c] for c in order}


def _fractional_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average-tie ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    rx = _fractional_ranks(x)
    ry = _fractional_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if den == 0:
        raise ValueError("zero variance in ranks")
    return float(np.clip((rx * ry).sum() / den, -1.0, 1.0))
