"""Exponent-weighted combination of component log-scores, ranking and calibration."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .components import Scorers, ScoreTable, score_all_classes, score_table
from .datamodel import ZslInstance
from .metrics import first_relevant
from .training import EmpiricalPrior, sample_negative_batch

DEFAULT_GRID = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)
EXPORT_HEADER = "instance_id,label,log_visual,log_context,log_prior"


@dataclass(frozen=True)
class CalibrationWeights:
    alpha_c: float = 1.0
    alpha_v: float = 1.0
    alpha_p: float = 1.0
    active: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        for name, a, on in zip(("alpha_c", "alpha_v", "alpha_p"), self.as_tuple(), self.active):
            if a < 0:
                raise ValueError(f"{name} must be nonnegative")
            if not on and a != 0:
                raise ValueError(f"{name} must be 0 for an inactive component")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha_c, self.alpha_v, self.alpha_p)

    @classmethod
    def for_active(cls, active, alpha=(1.0, 1.0, 1.0)) -> "CalibrationWeights":
        a = tuple(float(x) if on else 0.0 for x, on in zip(alpha, active))
        return cls(*a, active=tuple(bool(x) for x in active))


def combined_logscore(triple, alpha) -> float:
    """alpha_C log P_context + alpha_V log P_visual + alpha_P log P_prior."""
    if isinstance(alpha, CalibrationWeights):
        alpha = alpha.as_tuple()
    return float(sum(a * s for a, s in zip(alpha, triple) if a))


def ranks_from_table(table: ScoreTable, alpha) -> np.ndarray:
    """1-based rank of each instance's true class (descending score, ties by class index)."""
    if isinstance(alpha, CalibrationWeights):
        alpha = alpha.as_tuple()
    if np.any(table.true_col < 0):
        raise ValueError("every instance's true class must be a candidate")
    if np.any(np.diff(table.candidates) <= 0):
        raise ValueError("candidates must be sorted by class index")
    return _kernels.true_ranks(table.combined(alpha), table.true_col)


def rank(instance: ZslInstance, candidates, scorers: Scorers, alpha):
    """Candidate classes in predicted order, and the 1-based rank of the true class."""
    candidates = np.sort(np.asarray(candidates, dtype=np.int64))
    triples = score_all_classes(scorers, instance, candidates)
    if isinstance(alpha, CalibrationWeights):
        alpha = alpha.as_tuple()
    scores = np.array([combined_logscore(triples[int(c)], alpha) for c in candidates])
    order = order_by_score(scores)
    ordered = candidates[order]
    hits = np.flatnonzero(ordered == instance.label)
    r = int(hits[0]) + 1 if hits.size else None
    return ordered, r


def order_by_score(scores) -> np.ndarray:
    """Column order: descending score, ties by ascending column; NaN last."""
    scores = np.asarray(scores, dtype=np.float64)
    key = np.where(np.isnan(scores), -np.inf, scores)
    return np.lexsort((np.arange(len(key)), -key))


def mfr(table: ScoreTable, alpha) -> float:
    return float(np.mean(first_relevant(ranks_from_table(table, alpha), len(table.candidates))))


def default_grid(active) -> list[tuple[float, ...]]:
    return [DEFAULT_GRID if on else (0.0,) for on in active]


@dataclass
class CalibrationResult:
    weights: CalibrationWeights
    mfr: float
    evaluated: list[tuple[tuple[float, float, float], float]]


def calibrate(table: ScoreTable, grid=None, active=None) -> CalibrationResult:
    """Exhaustive grid search for the exponents minimizing MFR.

    ``grid`` holds one value list per component (context, visual, prior);
    inactive components are pinned to 0. The all-zero triple ignores every
    component and is skipped. Ties go to the lexicographically smallest
    exponent triple.
    """
    if len(table) == 0:
        raise ValueError("calibration needs a nonempty validation set")
    active = tuple(active) if active is not None else table.active
    if grid is None:
        grid = default_grid(active)
    axes = []
    for values, on in zip(grid, active):
        values = sorted({float(v) for v in values}) if on else [0.0]
        if on and (0.0 not in values or not any(v > 0 for v in values)):
            raise ValueError("each active grid axis needs 0 and at least one positive value")
        axes.append(values)
    evaluated = []
    best = None
    for alpha in itertools.product(*axes):
        if not any(alpha):
            continue
        score = mfr(table, alpha)
        evaluated.append((alpha, score))
        if best is None or (score, alpha) < best:
            best = (score, alpha)
    score, alpha = best
    return CalibrationResult(CalibrationWeights.for_active(active, alpha), score, evaluated)


def export_component_scores(
    scorers: Scorers,
    instances: Sequence[ZslInstance],
    candidates,
    k: int = 1,
    seed: int = 0,
    labels: Sequence[str] | None = None,
) -> list[tuple[str, str, float, float, float]]:
    """One ``pos`` row per instance plus ``k`` ``neg`` rows for random wrong classes."""
    candidates = np.sort(np.asarray(candidates, dtype=np.int64))
    table = score_table(scorers, instances, candidates)
    rng = np.random.default_rng(seed)
    uniform = EmpiricalPrior.from_counts({int(c): 1 for c in candidates})
    negs = sample_negative_batch("uniform", uniform, table.labels, k, rng) if len(instances) else []
    col = {int(c): j for j, c in enumerate(candidates)}

    def triple(row, j):
        return (
            0.0 if table.visual is None else float(table.visual[row, j]),
            0.0 if table.context is None else float(table.context[row, j]),
            0.0 if table.prior is None else float(table.prior[j]),
        )

    rows = []
    for r, inst_id in enumerate(table.instance_ids):
        rows.append((inst_id, "pos", *triple(r, table.true_col[r])))
        for c in negs[r]:
            rows.append((inst_id, "neg", *triple(r, col[int(c)])))
    return rows


def write_score_csv(path, rows) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(EXPORT_HEADER + "\n")
        for inst_id, label, v, c, p in rows:
            fh.write(f"{inst_id},{label},{v!r},{c!r},{p!r}\n")
