"""Structured reasoning output: ``<think>`` plan/action/summary trace plus a JSON ``<answer>``.

Tag structure is checked strictly (it drives the format reward); the trace
inside ``<think>`` is extracted leniently and never raises.

Canonical emitted text::

    <think>
    Plan:
    1. find every red person
    Action:
    - person 1: match. wears a red coat
    - person 2: no-match. wears blue
    Summary: person 1 is the red person
    </think>
    <answer>
    ```json
    [{"person 1": [10, 20, 110, 220]}]
    ```
    </answer>
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .geometry import Box

SUBSET_TAGS = (
    "attribute",
    "position",
    "interaction",
    "reasoning",
    "celebrity",
    "rejection",
    "synthetic",
)
VERDICTS = ("match", "no-match", "partial")
REJECTION_WORDS = frozenset({"no match", "none"})

DEFAULT_PREAMBLE = (
    "<image>. A conversation between User and Assistant. The user asks a question, "
    "and the Assistant solves it. The assistant first thinks about the reasoning "
    "process in the mind and then provides the user with the answer. The reasoning "
    "process and answer are enclosed within <think> </think> and <answer> </answer> "
    "tags, respectively, i.e., <think> reasoning process here </think> <answer> "
    "answer here </answer>."
)

_TAGS = ("<think>", "</think>", "<answer>", "</answer>")
_ORDINAL_RE = re.compile(r"(\d+)$")
_BLOCKS_RE = re.compile(r"\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*", re.S)
_THINK_RE = re.compile(r"<think>(.*?)</think>", re.S)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.S)
_FENCE_RE = re.compile(r"^```[\w-]*[ \t]*\n?(.*?)\n?[ \t]*```$", re.S)
_HEADER_RE = re.compile(
    r"^(plan|planning|actions?|summary|summarization)\s*:\s*(.*)$", re.I
)
_BULLET_RE = re.compile(r"^(?:\d+[.)]|[-*])\s+")
_ACTION_RE = re.compile(
    r"^\s*(?:[-*]\s*)?(?P<label>[^:\n]*?)(?P<ordinal>\d+)\s*:\s*"
    r"(?P<verdict>no-match|partial|match)\b\.?[ \t]*(?P<rationale>.*)$",
    re.I,
)


def label_ordinal(label: str) -> int:
    """Trailing 1-based ordinal of a hint label such as ``"person 3"``."""
    m = _ORDINAL_RE.search(label.strip())
    if m is None:
        raise ValueError(f"hint label {label!r} has no trailing ordinal")
    return int(m.group(1))


@dataclass(frozen=True)
class BoxHint:
    label: str
    box: Box

    @property
    def ordinal(self) -> int:
        return label_ordinal(self.label)


@dataclass(frozen=True)
class ReferringTask:
    task_id: str
    image_ref: str
    expression: str
    category: str
    hints: tuple[BoxHint, ...]
    gt: tuple[int, ...]
    subset: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "hints", tuple(self.hints))
        object.__setattr__(self, "gt", tuple(sorted(self.gt)))
        labels = [h.label for h in self.hints]
        if len(set(labels)) != len(labels):
            raise ValueError(f"task {self.task_id}: duplicate hint labels")
        for k, h in enumerate(self.hints, start=1):
            if not h.label.strip():
                raise ValueError(f"task {self.task_id}: empty hint label")
            if h.ordinal != k:
                raise ValueError(
                    f"task {self.task_id}: hint {h.label!r} at position {k} breaks ordinal order"
                )
        if len(set(self.gt)) != len(self.gt):
            raise ValueError(f"task {self.task_id}: duplicate ground-truth ordinals")
        bad = [g for g in self.gt if not 1 <= g <= len(self.hints)]
        if bad:
            raise ValueError(f"task {self.task_id}: ground-truth ordinals {bad} out of range")
        if self.subset not in SUBSET_TAGS:
            raise ValueError(f"task {self.task_id}: unknown subset {self.subset!r}")
        if self.subset == "rejection" and self.gt:
            raise ValueError(f"task {self.task_id}: rejection task with nonempty ground truth")

    @property
    def gt_boxes(self) -> list[Box]:
        return [self.hints[k - 1].box for k in self.gt]

    def hint(self, ordinal: int) -> BoxHint:
        return self.hints[ordinal - 1]


@dataclass(frozen=True)
class Action:
    ordinal: int
    verdict: str
    rationale: str = ""


@dataclass(frozen=True)
class ThinkTrace:
    plan: tuple[str, ...] = ()
    actions: tuple[Action, ...] = ()
    summary: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "plan", tuple(self.plan))
        object.__setattr__(self, "actions", tuple(self.actions))

    @property
    def structured(self) -> bool:
        return bool(self.plan)


class AnswerKind(str, enum.Enum):
    BOXES = "boxes"
    REJECTION = "rejection"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class LabeledBox:
    label: str
    box: Box


@dataclass(frozen=True)
class Answer:
    kind: AnswerKind
    boxes: tuple[LabeledBox, ...] = ()

    @classmethod
    def of(cls, boxes: Iterable[LabeledBox]) -> "Answer":
        boxes = tuple(boxes)
        return cls(AnswerKind.BOXES, boxes) if boxes else REJECTION

    @property
    def pred_boxes(self) -> list[Box]:
        return [lb.box for lb in self.boxes]


REJECTION = Answer(AnswerKind.REJECTION)
UNPARSEABLE = Answer(AnswerKind.UNPARSEABLE)


@dataclass(frozen=True)
class CoTResponse:
    raw: str
    format_ok: bool
    trace: Optional[ThinkTrace]
    answer: Answer


# -- validation ---------------------------------------------------------------


def format_problems(raw: str) -> list[str]:
    """Human-readable reasons ``raw`` breaks the tag grammar; empty when it is well formed."""
    problems = []
    for tag in _TAGS:
        n = raw.count(tag)
        if n != 1:
            problems.append(f"expected exactly one {tag}, found {n}")
    if not problems and _BLOCKS_RE.fullmatch(raw) is None:
        problems.append("blocks out of order or text outside <think>/<answer>")
    return problems


def validate_format(raw: str) -> bool:
    return not format_problems(raw)


# -- parsing ------------------------------------------------------------------


def _strip_fence(text: str) -> str:
    m = _FENCE_RE.match(text)
    return m.group(1).strip() if m else text


def _is_rejection_word(text: str) -> bool:
    return text.strip().lower() in REJECTION_WORDS


def _coords_box(value) -> Optional[Box]:
    if not isinstance(value, list) or len(value) != 4:
        return None
    try:
        return Box(*value)
    except ValueError:
        return None


def parse_answer(text: str) -> Answer:
    """Classify the text between the answer tags as boxes, a rejection or unparseable."""
    body = _strip_fence(text.strip())
    if _is_rejection_word(body):
        return REJECTION
    try:
        data = json.loads(body)
    except (json.JSONDecodeError, RecursionError):
        return UNPARSEABLE
    if isinstance(data, str):
        return REJECTION if _is_rejection_word(data) else UNPARSEABLE
    if not isinstance(data, list):
        return UNPARSEABLE
    if not data:
        return REJECTION

    boxes = []
    if all(isinstance(item, dict) for item in data):
        for item in data:
            if len(item) != 1:
                return UNPARSEABLE
            ((label, coords),) = item.items()
            box = _coords_box(coords)
            if box is None:
                return UNPARSEABLE
            boxes.append(LabeledBox(label, box))
    elif all(isinstance(item, list) for item in data):
        for k, coords in enumerate(data, start=1):
            box = _coords_box(coords)
            if box is None:
                return UNPARSEABLE
            boxes.append(LabeledBox(f"object {k}", box))
    else:
        return UNPARSEABLE
    return Answer(AnswerKind.BOXES, tuple(boxes))


def parse_trace(text: str) -> ThinkTrace:
    """Lenient plan/action/summary extraction; unknown lines are ignored."""
    plan: list[str] = []
    actions: list[Action] = []
    summary_lines: list[str] = []
    section = None
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        header = _HEADER_RE.match(stripped)
        if header:
            name = header.group(1).lower()
            section = "plan" if name.startswith("plan") else name[:3]
            inline = header.group(2).strip()
            if inline:
                if section == "sum":
                    summary_lines.append(inline)
                elif section == "plan":
                    plan.append(inline)
            continue
        if section == "plan":
            plan.append(_BULLET_RE.sub("", stripped, count=1))
        elif section == "sum":
            summary_lines.append(stripped)
        else:
            m = _ACTION_RE.match(stripped)
            if m:
                actions.append(
                    Action(
                        int(m.group("ordinal")),
                        m.group("verdict").lower(),
                        m.group("rationale").strip(),
                    )
                )
    return ThinkTrace(tuple(plan), tuple(actions), "\n".join(summary_lines))


def parse_response(raw: str) -> CoTResponse:
    think = _THINK_RE.search(raw)
    answer = _ANSWER_RE.search(raw)
    return CoTResponse(
        raw=raw,
        format_ok=validate_format(raw),
        trace=parse_trace(think.group(1)) if think else None,
        answer=parse_answer(answer.group(1)) if answer else UNPARSEABLE,
    )


# -- emitting -----------------------------------------------------------------


def _check_line(text: str, what: str, allow_empty: bool = False) -> None:
    if not isinstance(text, str):
        raise ValueError(f"{what} must be a string")
    if not text and not allow_empty:
        raise ValueError(f"{what} is empty")
    if (text and text.splitlines() != [text]) or text != text.strip():
        raise ValueError(f"{what} must be a single stripped line: {text!r}")
    if any(tag in text for tag in _TAGS):
        raise ValueError(f"{what} contains a reserved tag: {text!r}")


def _json_number(v: float):
    return int(v) if float(v).is_integer() else float(v)


def box_json(box: Box) -> list:
    return [_json_number(c) for c in box.as_list()]


def serialize_answer(answer: Answer | Sequence[LabeledBox]) -> str:
    if not isinstance(answer, Answer):
        answer = Answer.of(answer)
    if answer.kind is AnswerKind.UNPARSEABLE:
        raise ValueError("cannot serialize an unparseable answer")
    if answer.kind is AnswerKind.REJECTION:
        return "[]"
    for lb in answer.boxes:
        if any(tag in lb.label for tag in _TAGS):
            raise ValueError(f"answer label contains a reserved tag: {lb.label!r}")
    payload = [{lb.label: box_json(lb.box)} for lb in answer.boxes]
    return "```json\n" + json.dumps(payload, ensure_ascii=False) + "\n```"


def serialize_response(
    trace: ThinkTrace,
    answer: Answer | Sequence[LabeledBox],
    task: Optional[ReferringTask] = None,
) -> str:
    """Emit canonical text that ``parse_response`` reads back to ``(trace, answer)``.

    With ``task`` given, action lines use the task's hint labels and ordinals
    outside the hint range are rejected.
    """
    lines = ["Plan:"]
    for k, step in enumerate(trace.plan, start=1):
        _check_line(step, "plan step")
        lines.append(f"{k}. {step}")
    lines.append("Action:")
    for act in trace.actions:
        if act.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {act.verdict!r}")
        if act.ordinal < 1:
            raise ValueError(f"hint ordinal {act.ordinal} must be >= 1")
        _check_line(act.rationale, "rationale", allow_empty=True)
        if task is not None:
            if act.ordinal > len(task.hints):
                raise ValueError(
                    f"hint ordinal {act.ordinal} out of range for task {task.task_id} "
                    f"with {len(task.hints)} hints"
                )
            label = task.hint(act.ordinal).label
            if ":" in label or label_ordinal(label) != act.ordinal:
                raise ValueError(f"hint label {label!r} cannot be emitted in an action line")
        else:
            label = f"object {act.ordinal}"
        line = f"- {label}: {act.verdict}."
        if act.rationale:
            line += f" {act.rationale}"
        lines.append(line)
    _check_line(trace.summary, "summary", allow_empty=True)
    lines.append(f"Summary: {trace.summary}".rstrip())
    think = "\n".join(lines)
    return f"<think>\n{think}\n</think>\n<answer>\n{serialize_answer(answer)}\n</answer>"


def _hint_json(hint: BoxHint) -> str:
    return json.dumps({hint.label: box_json(hint.box)}, ensure_ascii=False)


def render_prompt(task: ReferringTask, system_preamble: str = DEFAULT_PREAMBLE) -> str:
    """Fill the referring prompt template with the task's box hints and expression."""
    if not task.expression.strip():
        raise ValueError(f"task {task.task_id}: empty referring expression")
    hints = ", ".join(_hint_json(h) for h in task.hints)
    return (
        f"{system_preamble} Hint: Object and its coordinates in this image: {hints}. "
        f"User: Locate {task.expression}. Assistant:"
    )

