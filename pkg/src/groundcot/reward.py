"""Exact-match F1 accuracy reward, binary format reward and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .geometry import DEFAULT_MATCH_TOL, Box, exact_match_set
from .grammar import ReferringTask, parse_response, validate_format


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.9
    match_tol: float = DEFAULT_MATCH_TOL

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.match_tol < 0:
            raise ValueError(f"match_tol must be nonnegative, got {self.match_tol}")


@dataclass(frozen=True)
class RewardBreakdown:
    precision: float
    recall: float
    f1: float
    fmt: int
    total: float


def prf_from_counts(n_matched: int, n_preds: int, n_gts: int) -> tuple[Fraction, Fraction, Fraction]:
    """Exact precision/recall/F1 with the empty-set conventions.

    Both sets empty scores 1 (a correct abstention); exactly one empty scores 0.
    """
    if n_preds == 0 and n_gts == 0:
        return Fraction(1), Fraction(1), Fraction(1)
    if n_preds == 0 or n_gts == 0:
        return Fraction(0), Fraction(0), Fraction(0)
    p = Fraction(n_matched, n_preds)
    r = Fraction(n_matched, n_gts)
    f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f1


def f1_reward(
    preds: Sequence[Box], gts: Sequence[Box], tol: float = DEFAULT_MATCH_TOL
) -> tuple[float, float, float]:
    m = exact_match_set(preds, gts, tol)
    p, r, f1 = prf_from_counts(len(m), len(preds), len(gts))
    return float(p), float(r), float(f1)


def format_reward(raw: str) -> int:
    return 1 if validate_format(raw) else 0


def total_reward(f1: float, fmt: int, cfg: RewardConfig = RewardConfig()) -> float:
    return cfg.lam * f1 + (1.0 - cfg.lam) * fmt


def reward_response(
    task: ReferringTask, raw: str, cfg: RewardConfig = RewardConfig()
) -> RewardBreakdown:
    """Score one generated response against the task's ground-truth hint boxes.

    Rejections and unparseable answers both count as an empty prediction set.
    """
    parsed = parse_response(raw)
    preds = parsed.answer.pred_boxes
    p, r, f1 = f1_reward(preds, task.gt_boxes, cfg.match_tol)
    fmt = 1 if parsed.format_ok else 0
    return RewardBreakdown(p, r, f1, fmt, total_reward(f1, fmt, cfg))
