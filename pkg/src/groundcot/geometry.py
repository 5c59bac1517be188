"""Axis-aligned boxes, IoU and one-to-one prediction/ground-truth matching."""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass
from typing import Sequence

DEFAULT_MATCH_TOL = 1e-6


@dataclass(frozen=True)
class Box:
    """Pixel-space rectangle ``(x0, y0, x1, y1)`` with the origin at the top-left.

    Construction fails for non-finite coordinates or boxes without positive area.
    """

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        coords = (self.x0, self.y0, self.x1, self.y1)
        for c in coords:
            if isinstance(c, bool) or not isinstance(c, numbers.Real):
                raise ValueError(f"box coordinate {c!r} is not a number")
            if not math.isfinite(c):
                raise ValueError(f"box coordinate {c!r} is not finite")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {list(coords)}: need x1 > x0 and y1 > y0")

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "Box":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*coords)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int], ...] = ()
    unmatched_preds: tuple[int, ...] = ()
    unmatched_gts: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)


def iou(a: Box, b: Box) -> float:
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    # identical boxes give exactly 1.0
    if inter == union:
        return 1.0
    return inter / union


def exact_match(a: Box, b: Box, tol: float = DEFAULT_MATCH_TOL) -> bool:
    """Coordinate-wise equality within ``tol``; stands in for IoU == 1."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return (
        abs(a.x0 - b.x0) <= tol
        and abs(a.y0 - b.y0) <= tol
        and abs(a.x1 - b.x1) <= tol
        and abs(a.y1 - b.y1) <= tol
    )


def _finish(pairs: list[tuple[int, int]], n_preds: int, n_gts: int) -> Matching:
    pairs.sort()
    used_p = {p for p, _ in pairs}
    used_g = {g for _, g in pairs}
    return Matching(
        pairs=tuple(pairs),
        unmatched_preds=tuple(i for i in range(n_preds) if i not in used_p),
        unmatched_gts=tuple(j for j in range(n_gts) if j not in used_g),
    )


def greedy_match(preds: Sequence[Box], gts: Sequence[Box], threshold: float = 0.5) -> Matching:
    """Greedy one-to-one matching by descending IoU.

    Candidate pairs need ``iou >= threshold``. Ties go to the lower prediction
    index, then the lower ground-truth index.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    candidates = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            v = iou(p, g)
            if v >= threshold:
                candidates.append((-v, i, j))
    candidates.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return _finish(pairs, len(preds), len(gts))


def exact_match_set(
    preds: Sequence[Box], gts: Sequence[Box], tol: float = DEFAULT_MATCH_TOL
) -> Matching:
    """Match each prediction, in index order, to the first free exactly-equal ground truth.

    Duplicate predictions of one ground-truth box match it only once.
    """
    used_g: set[int] = set()
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if j not in used_g and exact_match(p, g, tol):
                used_g.add(j)
                pairs.append((i, j))
                break
    return _finish(pairs, len(preds), len(gts))
