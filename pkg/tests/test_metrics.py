import random
from fractions import Fraction

import pytest

from conftest import G100, make_task, micro_benchmark, pred, rejection_fixture
from groundcot.geometry import Box, iou
from groundcot.grammar import LabeledBox, ThinkTrace, serialize_response
from groundcot.metrics import (
    DEFAULT_GRID,
    EvaluationError,
    PredictionRecord,
    counts_at_threshold,
    evaluate,
    rejection_score,
    task_metrics,
)

g = Box(*G100)


def test_default_grid():
    assert len(DEFAULT_GRID) == 10
    assert DEFAULT_GRID[0] == 0.5 and DEFAULT_GRID[-1] == 0.95


class TestCounts:
    def test_examples(self):
        assert counts_at_threshold([g, g], [g, g], 0.95) == (2, 0, 0)
        assert counts_at_threshold([], [g], 0.5) == (0, 0, 1)
        p = Box(0, 0, 100, 60)
        assert iou(p, g) == pytest.approx(0.6)
        assert counts_at_threshold([p], [g], 0.75) == (0, 1, 1)

    def test_tp_nonincreasing_in_threshold(self):
        rng = random.Random(4)
        for _ in range(200):
            def rb():
                x, y = rng.randint(0, 50), rng.randint(0, 50)
                return Box(x, y, x + rng.randint(5, 50), y + rng.randint(5, 50))
            preds = [rb() for _ in range(rng.randint(0, 4))]
            gts = [rb() for _ in range(rng.randint(0, 4))]
            tps = [counts_at_threshold(preds, gts, t)[0] for t in DEFAULT_GRID]
            assert tps == sorted(tps, reverse=True)


class TestTaskMetrics:
    def test_examples(self):
        assert task_metrics([g], [g]) == (1.0, 1.0, 1.0)
        assert task_metrics([Box(0, 0, 100, 72)], [g]) == (0.5, 0.5, 0.5)
        assert task_metrics([], [g]) == (0.0, 0.0, 0.0)
        assert task_metrics([], []) == (1.0, 1.0, 1.0)

    def test_custom_grid(self):
        assert task_metrics([Box(0, 0, 100, 72)], [g], grid=(0.7, 0.8)) == (0.5, 0.5, 0.5)

    @pytest.mark.parametrize("grid", [(), (0.0, 0.5), (0.6, 0.5), (0.5, 1.2), (0.5, 0.5)])
    def test_bad_grid(self, grid):
        with pytest.raises(ValueError):
            task_metrics([g], [g], grid=grid)


class TestEvaluate:
    def test_micro_benchmark(self):
        # T1 exact, T2 IoU 0.72 scores 1/2 -> attribute 3/4 on every metric.
        # T3 finds 1 of 2 (R 1/2, P 1, F1 2/3), T4 abstains wrongly (0) -> position R 1/4, P 1/2, DF1 1/3.
        # T5 abstains correctly (1), T6 draws a box (0).
        report = evaluate(*micro_benchmark())
        att, pos, rej = (report.per_subset[k] for k in ("attribute", "position", "rejection"))
        assert (att.recall, att.precision, att.df1, att.n_tasks) == (0.75, 0.75, 0.75, 2)
        assert (pos.recall, pos.precision, pos.df1) == (0.25, 0.5, float(Fraction(1, 3)))
        assert (rej.recall, rej.precision, rej.df1) == (0.5, 0.5, 0.5)
        o = report.overall
        assert (o.recall, o.precision, o.df1) == (0.5, 0.625, float((Fraction(3, 4) + Fraction(1, 3)) / 2))
        assert report.rejection_score == 0.5

    def test_rejection_fixture(self):
        tasks, preds = rejection_fixture()
        assert rejection_score(tasks, preds) == 0.75
        report = evaluate(tasks, preds)
        assert report.rejection_score == 0.75 and report.overall is None

    def test_rejection_score_extremes(self):
        tasks, _ = rejection_fixture()
        assert rejection_score(tasks, [pred(t.task_id) for t in tasks]) == 1.0
        assert rejection_score(tasks, [pred(t.task_id, G100) for t in tasks]) == 0.0
        assert rejection_score([make_task("a", [G100], [1])], [pred("a")]) is None

    def test_rejection_missing_record(self):
        tasks, preds = rejection_fixture()
        with pytest.raises(EvaluationError, match="R3"):
            rejection_score(tasks, preds[:3])

    def test_perfect_run(self):
        tasks, _ = micro_benchmark()
        preds = [pred(t.task_id, *(b.as_list() for b in t.gt_boxes)) for t in tasks]
        report = evaluate(tasks, preds)
        for s in report.per_subset.values():
            assert (s.recall, s.precision, s.df1) == (1.0, 1.0, 1.0)
        assert report.rejection_score == 1.0
        assert (report.overall.recall, report.overall.df1) == (1.0, 1.0)

    def test_order_invariance(self):
        tasks, preds = micro_benchmark()
        base = evaluate(tasks, preds).to_dict()
        rng = random.Random(0)
        for _ in range(10):
            t2, p2 = tasks[:], preds[:]
            rng.shuffle(t2)
            rng.shuffle(p2)
            assert evaluate(t2, p2).to_dict() == base

    def test_errors(self):
        tasks, preds = micro_benchmark()
        with pytest.raises(EvaluationError, match="unknown"):
            evaluate(tasks, preds + [pred("nope")])
        with pytest.raises(EvaluationError, match="T6"):
            evaluate(tasks, preds[:5])
        with pytest.raises(EvaluationError, match="duplicate"):
            evaluate(tasks, preds + [pred("T1")])
        with pytest.raises(EvaluationError, match="duplicate task"):
            evaluate(tasks + tasks[:1], preds)

    def test_invalid_boxes_count_as_false_positives(self):
        tasks = [make_task("a", [G100], [1])]
        report = evaluate(tasks, [pred("a", G100, n_invalid=1)])
        s = report.per_subset["attribute"]
        assert (s.recall, s.precision) == (1.0, 0.5)

    def test_raw_response_records(self):
        task = make_task("a", [G100, (200, 0, 300, 100)], [2])
        raw = serialize_response(ThinkTrace(), [LabeledBox("person 2", task.hint(2).box)])
        report = evaluate([task], [PredictionRecord.from_response("a", raw)])
        assert report.overall.df1 == 1.0

    def test_csv_and_dict(self):
        report = evaluate(*micro_benchmark())
        rows = report.csv_rows()
        assert rows[0] == ["subset", "R", "P", "DF1", "n"]
        assert [r[0] for r in rows[1:]] == ["attribute", "position", "rejection", "overall"]
        assert rows[-1][-1] == 4
        d = report.to_dict()
        assert d["per_subset"]["position"]["n"] == 2 and d["grid"] == list(DEFAULT_GRID)
