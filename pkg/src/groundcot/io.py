"""Versioned JSONL records for tasks, predictions and reports.

Every line carries ``"v": 1``. Floats are written with 9 significant digits so
outputs are byte-stable across runs.
"""

from __future__ import annotations

import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Optional

from .geometry import Box
from .grammar import BoxHint, LabeledBox, ReferringTask, box_json, parse_response
from .metrics import PredictionRecord

SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data (CLI exit code 1)."""


def round_floats(obj: Any) -> Any:
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(round_floats(obj), ensure_ascii=False, sort_keys=False)


@contextmanager
def open_out(path: Optional[str]) -> Iterator[IO[str]]:
    if path is None or path == "-":
        yield sys.stdout
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yield fh


def write_jsonl(path: Optional[str], records: Iterable[dict]) -> None:
    with open_out(path) as fh:
        for rec in records:
            fh.write(dumps({"v": SCHEMA_VERSION, **rec}) + "\n")


def write_json(path: Optional[str], obj: dict) -> None:
    with open_out(path) as fh:
        fh.write(json.dumps(round_floats({"v": SCHEMA_VERSION, **obj}), indent=2, ensure_ascii=False) + "\n")


def read_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` for each nonblank line, checking the schema version."""
    try:
        fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield lineno, parse_record(line, path, lineno)


def parse_record(line: str, path: str = "<input>", lineno: int = 0) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise DataError(f"{path}:{lineno}: record is not a JSON object")
    if rec.get("v") != SCHEMA_VERSION:
        raise DataError(f"{path}:{lineno}: unsupported schema version {rec.get('v')!r}")
    return rec


# -- tasks --------------------------------------------------------------------


def task_to_json(task: ReferringTask) -> dict:
    return {
        "task_id": task.task_id,
        "image_ref": task.image_ref,
        "subset": task.subset,
        "category": task.category,
        "expression": task.expression,
        "hints": [{"label": h.label, "box": box_json(h.box)} for h in task.hints],
        "gt": list(task.gt),
    }


def task_from_json(rec: dict, where: str = "") -> ReferringTask:
    try:
        hints = tuple(BoxHint(h["label"], Box.from_list(h["box"])) for h in rec["hints"])
        return ReferringTask(
            task_id=str(rec["task_id"]),
            image_ref=str(rec.get("image_ref", "")),
            expression=rec["expression"],
            category=rec.get("category", ""),
            hints=hints,
            gt=tuple(int(g) for g in rec["gt"]),
            subset=rec["subset"],
        )
    except KeyError as exc:
        raise DataError(f"{where}: task record missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: invalid task record: {exc}") from exc


def read_tasks(path: str) -> list[ReferringTask]:
    tasks = [task_from_json(rec, f"{path}:{n}") for n, rec in read_jsonl(path)]
    seen: set[str] = set()
    for t in tasks:
        if t.task_id in seen:
            raise DataError(f"{path}: duplicate task id {t.task_id!r}")
        seen.add(t.task_id)
    return tasks


def write_tasks(path: Optional[str], tasks: Iterable[ReferringTask]) -> None:
    write_jsonl(path, (task_to_json(t) for t in tasks))


# -- predictions --------------------------------------------------------------


def prediction_from_json(rec: dict, where: str = "") -> PredictionRecord:
    """Read ``{task_id, raw_response}`` or ``{task_id, boxes}``.

    Explicit boxes that fail validation are kept as a count of invalid
    predictions. When both fields are given the boxes must equal the parsed answer.
    """
    if "task_id" not in rec:
        raise DataError(f"{where}: prediction record missing field 'task_id'")
    task_id = str(rec["task_id"])
    raw = rec.get("raw_response")
    if raw is not None and not isinstance(raw, str):
        raise DataError(f"{where}: raw_response must be a string")
    boxes = None
    n_invalid = 0
    if "boxes" in rec:
        if not isinstance(rec["boxes"], list):
            raise DataError(f"{where}: boxes must be a list")
        boxes = []
        for item in rec["boxes"]:
            if not isinstance(item, dict) or "box" not in item:
                raise DataError(f"{where}: each box entry needs a 'box' field")
            try:
                boxes.append(LabeledBox(str(item.get("label", "")), Box.from_list(item["box"])))
            except (TypeError, ValueError):
                n_invalid += 1
    if raw is None and boxes is None:
        raise DataError(f"{where}: prediction needs raw_response or boxes")
    if raw is None:
        return PredictionRecord(task_id, None, tuple(boxes), n_invalid)
    parsed = parse_response(raw).answer.boxes
    if boxes is not None and ([b.box for b in boxes] != [b.box for b in parsed] or n_invalid):
        raise DataError(f"{where}: boxes disagree with the parsed raw_response")
    return PredictionRecord(task_id, raw, parsed)


def read_predictions(path: str) -> list[PredictionRecord]:
    return [prediction_from_json(rec, f"{path}:{n}") for n, rec in read_jsonl(path)]


def prediction_to_json(rec: PredictionRecord) -> dict:
    if rec.raw_response is not None:
        return {"task_id": rec.task_id, "raw_response": rec.raw_response}
    return {
        "task_id": rec.task_id,
        "boxes": [{"label": b.label, "box": box_json(b.box)} for b in rec.boxes],
    }
