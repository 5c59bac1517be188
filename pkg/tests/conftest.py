"""Shared fixtures: hand-built benchmark tasks and small builders."""

from __future__ import annotations

import numpy as np
import pytest

from groundcot.geometry import Box
from groundcot.grammar import BoxHint, LabeledBox, ReferringTask
from groundcot.metrics import PredictionRecord


def make_task(task_id, boxes, gt, subset="attribute", expression="the person"):
    hints = tuple(BoxHint(f"person {k}", Box(*b)) for k, b in enumerate(boxes, start=1))
    return ReferringTask(task_id, f"img://{task_id}", expression, "person", hints, tuple(gt), subset)


def pred(task_id, *boxes, n_invalid=0):
    return PredictionRecord(
        task_id, None, tuple(LabeledBox(f"p{k}", Box(*b)) for k, b in enumerate(boxes)), n_invalid
    )


G100 = (0, 0, 100, 100)


def micro_benchmark():
    """Six tasks over three subsets with hand-computed scores (see test_metrics)."""
    tasks = [
        make_task("T1", [G100, (200, 0, 300, 100)], [1], "attribute"),
        make_task("T2", [G100], [1], "attribute"),
        make_task("T3", [G100, (200, 0, 300, 100)], [1, 2], "position"),
        make_task("T4", [G100], [1], "position"),
        make_task("T5", [G100], [], "rejection"),
        make_task("T6", [G100], [], "rejection"),
    ]
    preds = [
        pred("T1", G100),
        pred("T2", (0, 0, 100, 72)),  # IoU 0.72
        pred("T3", G100),
        pred("T4"),
        pred("T5"),
        pred("T6", G100),
    ]
    return tasks, preds


def rejection_fixture():
    tasks = [make_task(f"R{k}", [G100], [], "rejection") for k in range(4)]
    preds = [pred("R0"), pred("R1"), pred("R2", G100), pred("R3")]
    return tasks, preds


@pytest.fixture
def bench():
    return micro_benchmark()


# -- randomized grammar cases -------------------------------------------------

WORDS = (
    "person", "red", "left", "Plan:", "match", "no-match", "partial", "Summary",
    "object 3:", "1.", "-", "*", "[]", "{}", '"q"', "none", "```", "é", "人", "→", "#", "x:y",
)


def random_text(rng, allow_empty=False):
    n = rng.randint(0 if allow_empty else 1, 6)
    return " ".join(rng.choice(WORDS) for _ in range(n))


def random_box(rng):
    x0, y0 = rng.choice([rng.randint(0, 900), round(rng.uniform(0, 900), 3)]), rng.randint(0, 900)
    return Box(x0, y0, x0 + rng.choice([rng.randint(1, 300), rng.uniform(0.5, 300)]), y0 + rng.randint(1, 300))


def random_trace_answer(rng):
    from groundcot.grammar import REJECTION, VERDICTS, Action, Answer, ThinkTrace

    trace = ThinkTrace(
        plan=tuple(random_text(rng) for _ in range(rng.randint(0, 3))),
        actions=tuple(
            Action(rng.randint(1, 12), rng.choice(VERDICTS), random_text(rng, allow_empty=True))
            for _ in range(rng.randint(0, 5))
        ),
        summary=random_text(rng, allow_empty=True),
    )
    if rng.random() < 0.2:
        return trace, REJECTION
    labels = [f"{random_text(rng)} {k}" for k in range(1, rng.randint(2, 5))]
    return trace, Answer.of(LabeledBox(lab, random_box(rng)) for lab in labels)


TAGS = ("<think>", "</think>", "<answer>", "</answer>")


def mutate_tags(rng, raw):
    """Break the tag structure of a well-formed response by deletion, duplication or reordering."""
    kind = rng.choice(("delete", "duplicate", "reorder", "swap"))
    if kind == "delete":
        tag = rng.choice(TAGS)
        return raw.replace(tag, "", 1)
    if kind == "duplicate":
        tag = rng.choice(TAGS)
        pos = rng.randint(0, len(raw))
        return raw[:pos] + tag + raw[pos:]
    think_end = raw.index("</think>") + len("</think>")
    if kind == "reorder":
        return raw[think_end:].strip() + "\n" + raw[:think_end]
    a, b = rng.sample(TAGS, 2)
    return raw.replace(a, "\0").replace(b, a).replace("\0", b)


# -- random GRPO instances ----------------------------------------------------


def random_group_logprobs(rng, G, max_len=6):
    """Per-response token log-probs as nested lists: (current, old, ref)."""
    lens = rng.integers(1, max_len + 1, size=G)
    draw = lambda: [list(-rng.uniform(0.01, 4.0, size=n)) for n in lens]  # noqa: E731
    return draw(), draw(), draw()


def gradient_instance(rng, d=8, n_groups=2, G=4, eps=0.2, margin=1e-3):
    """Random toy policy instance whose importance ratios stay clear of the clip boundaries.

    Returns ``(params, groups, features)``; old log-probs come from perturbed
    weights and reference log-probs from a third weight vector.
    """
    from groundcot.grpo import Response, RolloutGroup, TokenLogProbs
    from groundcot.policy import ToyPolicyParams, token_logprobs

    while True:
        w = rng.normal(0, 0.7, size=d)
        w_old = w + rng.normal(0, 0.15, size=d)
        w_ref = w + rng.normal(0, 0.3, size=d)
        feats, groups, ok = {}, [], True
        for k in range(n_groups):
            tid = f"g{k}"
            n = int(rng.integers(2, 6))
            phi = rng.normal(0, 1, size=(n, d))
            phi[:, 0] = 1.0
            feats[tid] = phi
            responses = []
            for _ in range(G):
                tokens = rng.integers(0, 2, size=n)
                cur = token_logprobs(w, phi, tokens)
                old = token_logprobs(w_old, phi, tokens)
                ref = token_logprobs(w_ref, phi, tokens)
                rho = np.exp(cur - old)
                if np.any(np.abs(np.abs(rho - 1.0) - eps) < margin):
                    ok = False
                responses.append(
                    Response("", TokenLogProbs(cur, old, ref), float(rng.uniform(0, 1)), tuple(int(t) for t in tokens))
                )
            groups.append(RolloutGroup(tid, responses))
        if ok:
            return ToyPolicyParams(w), groups, feats


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE = []


def record_criterion(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
