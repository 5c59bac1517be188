"""Benchmark scoring: recall, precision and DF1 averaged over an IoU threshold grid.

Per-threshold scores are computed as exact fractions from integer counts and
averaged exactly, so hand-derived fixture values reproduce bit for bit.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .geometry import Box, greedy_match
from .grammar import LabeledBox, ReferringTask, parse_response
from .reward import prf_from_counts

DEFAULT_GRID = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
REJECTION_SUBSET = "rejection"

# (tp, fp, fn) -> (precision, recall, f1); swap in a density-weighted F1 here
Scorer = Callable[[int, int, int], tuple[Fraction, Fraction, Fraction]]


class EvaluationError(ValueError):
    pass


def plain_f1(tp: int, fp: int, fn: int) -> tuple[Fraction, Fraction, Fraction]:
    return prf_from_counts(tp, tp + fp, tp + fn)


@dataclass(frozen=True)
class PredictionRecord:
    """One model output for a task.

    ``n_invalid`` counts predicted boxes that failed box validation when the
    record was read from explicit boxes; they score as unmatched predictions.
    """

    task_id: str
    raw_response: Optional[str] = None
    boxes: tuple[LabeledBox, ...] = ()
    n_invalid: int = 0

    @classmethod
    def from_response(cls, task_id: str, raw: str) -> "PredictionRecord":
        answer = parse_response(raw).answer
        return cls(task_id, raw, answer.boxes)

    @property
    def pred_boxes(self) -> list[Box]:
        return [lb.box for lb in self.boxes]

    @property
    def is_empty(self) -> bool:
        return not self.boxes and self.n_invalid == 0


@dataclass(frozen=True)
class SubsetScores:
    recall: float
    precision: float
    df1: float
    n_tasks: int = 0


@dataclass
class EvalReport:
    per_subset: dict[str, SubsetScores]
    overall: Optional[SubsetScores]
    rejection_score: Optional[float]
    grid: tuple[float, ...] = field(default=DEFAULT_GRID)

    def to_dict(self) -> dict:
        def scores(s: SubsetScores, with_n: bool) -> dict:
            d = {"recall": s.recall, "precision": s.precision, "df1": s.df1}
            if with_n:
                d["n"] = s.n_tasks
            return d

        return {
            "per_subset": {k: scores(v, True) for k, v in sorted(self.per_subset.items())},
            "overall": None if self.overall is None else scores(self.overall, False),
            "rejection_score": self.rejection_score,
            "grid": list(self.grid),
        }

    def csv_rows(self) -> list[list]:
        rows = [["subset", "R", "P", "DF1", "n"]]
        for tag, s in sorted(self.per_subset.items()):
            rows.append([tag, s.recall, s.precision, s.df1, s.n_tasks])
        if self.overall is not None:
            n = sum(s.n_tasks for t, s in self.per_subset.items() if t != REJECTION_SUBSET)
            rows.append(["overall", self.overall.recall, self.overall.precision, self.overall.df1, n])
        return rows


def counts_at_threshold(
    preds: Sequence[Box], gts: Sequence[Box], t: float, n_invalid: int = 0
) -> tuple[int, int, int]:
    m = greedy_match(preds, gts, t)
    return len(m.pairs), len(m.unmatched_preds) + n_invalid, len(m.unmatched_gts)


def _check_grid(grid: Sequence[float]) -> None:
    if not grid:
        raise ValueError("threshold grid is empty")
    if any(not 0.0 < t <= 1.0 for t in grid):
        raise ValueError(f"thresholds must lie in (0, 1]: {list(grid)}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"threshold grid must be strictly ascending: {list(grid)}")


def _task_fractions(
    preds: Sequence[Box],
    gts: Sequence[Box],
    grid: Sequence[float],
    scorer: Scorer,
    n_invalid: int = 0,
) -> tuple[Fraction, Fraction, Fraction]:
    r_sum = p_sum = f_sum = Fraction(0)
    for t in grid:
        p, r, f = scorer(*counts_at_threshold(preds, gts, t, n_invalid))
        r_sum += r
        p_sum += p
        f_sum += f
    n = len(grid)
    return r_sum / n, p_sum / n, f_sum / n


def task_metrics(
    preds: Sequence[Box],
    gts: Sequence[Box],
    grid: Sequence[float] = DEFAULT_GRID,
    scorer: Scorer = plain_f1,
) -> tuple[float, float, float]:
    """Grid-averaged ``(recall, precision, df1)`` for one task."""
    _check_grid(grid)
    r, p, f = _task_fractions(preds, gts, grid, scorer)
    return float(r), float(p), float(f)


def _index_records(records: Iterable[PredictionRecord]) -> dict[str, PredictionRecord]:
    by_id: dict[str, PredictionRecord] = {}
    dupes = []
    for rec in records:
        if rec.task_id in by_id:
            dupes.append(rec.task_id)
        by_id[rec.task_id] = rec
    if dupes:
        raise EvaluationError(f"duplicate prediction records for task ids: {sorted(set(dupes))}")
    return by_id


def rejection_score(
    tasks: Sequence[ReferringTask], preds: Sequence[PredictionRecord] | Mapping[str, PredictionRecord]
) -> Optional[float]:
    """Fraction of rejection-subset tasks answered with no boxes; ``None`` without such tasks."""
    by_id = preds if isinstance(preds, Mapping) else _index_records(preds)
    rej = [t for t in tasks if t.subset == REJECTION_SUBSET]
    if not rej:
        return None
    missing = [t.task_id for t in rej if t.task_id not in by_id]
    if missing:
        raise EvaluationError(f"no prediction record for rejection tasks: {missing}")
    hits = sum(1 for t in rej if by_id[t.task_id].is_empty)
    return float(Fraction(hits, len(rej)))


def evaluate(
    tasks: Sequence[ReferringTask],
    preds: Sequence[PredictionRecord],
    grid: Sequence[float] = DEFAULT_GRID,
    scorer: Scorer = plain_f1,
) -> EvalReport:
    """Macro-average task metrics per subset; overall is the mean of non-rejection subsets."""
    _check_grid(grid)
    ids = [t.task_id for t in tasks]
    dup_tasks = sorted(i for i, n in Counter(ids).items() if n > 1)
    if dup_tasks:
        raise EvaluationError(f"duplicate task ids: {dup_tasks}")
    by_id = _index_records(preds)
    missing = sorted(set(ids) - set(by_id))
    unknown = sorted(set(by_id) - set(ids))
    if missing or unknown:
        parts = []
        if missing:
            parts.append(f"tasks without predictions: {missing}")
        if unknown:
            parts.append(f"predictions for unknown tasks: {unknown}")
        raise EvaluationError("; ".join(parts))

    sums: dict[str, list] = defaultdict(lambda: [Fraction(0), Fraction(0), Fraction(0), 0])
    for task in tasks:
        rec = by_id[task.task_id]
        r, p, f = _task_fractions(rec.pred_boxes, task.gt_boxes, grid, scorer, rec.n_invalid)
        acc = sums[task.subset]
        acc[0] += r
        acc[1] += p
        acc[2] += f
        acc[3] += 1

    means = {tag: (r / n, p / n, f / n, n) for tag, (r, p, f, n) in sums.items()}
    per_subset = {
        tag: SubsetScores(float(r), float(p), float(f), n) for tag, (r, p, f, n) in means.items()
    }
    scored = [v for tag, v in means.items() if tag != REJECTION_SUBSET]
    overall = None
    if scored:
        k = len(scored)
        overall = SubsetScores(
            float(sum(v[0] for v in scored) / k),
            float(sum(v[1] for v in scored) / k),
            float(sum(v[2] for v in scored) / k),
            sum(v[3] for v in scored),
        )
    return EvalReport(per_subset, overall, rejection_score(tasks, by_id), tuple(grid))

