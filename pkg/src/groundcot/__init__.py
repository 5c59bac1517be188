"""Grounded referring with structured reasoning traces, exact-match rewards and GRPO."""

from .geometry import Box, Matching, exact_match, exact_match_set, greedy_match, iou
from .grammar import (
    Action,
    Answer,
    AnswerKind,
    BoxHint,
    CoTResponse,
    LabeledBox,
    ReferringTask,
    ThinkTrace,
    parse_answer,
    parse_response,
    render_prompt,
    serialize_response,
    validate_format,
)
from .grpo import GrpoConfig, grpo_gradient, grpo_objective, kl_term, normalize_advantages, train
from .metrics import EvalReport, PredictionRecord, evaluate, rejection_score, task_metrics
from .reward import RewardConfig, f1_reward, format_reward, reward_response, total_reward

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Answer",
    "AnswerKind",
    "Box",
    "BoxHint",
    "CoTResponse",
    "EvalReport",
    "GrpoConfig",
    "LabeledBox",
    "Matching",
    "PredictionRecord",
    "ReferringTask",
    "RewardConfig",
    "ThinkTrace",
    "evaluate",
    "exact_match",
    "exact_match_set",
    "f1_reward",
    "format_reward",
    "greedy_match",
    "grpo_gradient",
    "grpo_objective",
    "iou",
    "kl_term",
    "normalize_advantages",
    "parse_answer",
    "parse_response",
    "rejection_score",
    "render_prompt",
    "reward_response",
    "serialize_response",
    "task_metrics",
    "total_reward",
    "train",
    "validate_format",
]
