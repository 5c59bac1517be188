import json
from pathlib import Path

import pytest

from conftest import micro_benchmark
from groundcot import io
from groundcot.cli import HELDOUT_SEED_OFFSET, main
from groundcot.grammar import LabeledBox, ThinkTrace, serialize_response
from groundcot.metrics import evaluate
from groundcot.policy import ToyPolicyParams
from groundcot.toyenv import FEATURE_DIM, SyntheticSpec, generate_tasks, greedy_predictions

SMALL_TRAIN = ["--n-tasks", "30", "--iterations", "6", "--eval-tasks", "12", "--batch-size", "4"]


def jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


@pytest.fixture
def bench_files(tmp_path):
    tasks, preds = micro_benchmark()
    t = tmp_path / "tasks.jsonl"
    p = tmp_path / "preds.jsonl"
    io.write_tasks(str(t), tasks)
    io.write_jsonl(str(p), [io.prediction_to_json(x) for x in preds])
    return t, p


class TestGenTasks:
    def test_writes_and_reloads(self, tmp_path):
        out = tmp_path / "t.jsonl"
        assert main(["gen-tasks", "--n", "100", "--seed", "7", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 100
        assert len(io.read_tasks(str(out))) == 100
        again = tmp_path / "t2.jsonl"
        main(["gen-tasks", "--n", "100", "--seed", "7", "--out", str(again)])
        assert out.read_bytes() == again.read_bytes()

    def test_bad_flag(self, tmp_path, capsys):
        assert main(["gen-tasks", "--rejection-fraction", "1.5", "--out", str(tmp_path / "x")]) == 2
        assert "rejection_fraction" in capsys.readouterr().err

    def test_usage_errors(self, capsys):
        assert main([]) == 2
        assert main(["gen-tasks"]) == 2
        assert main(["gen-tasks", "--n", "x", "--out", "o"]) == 2
        assert main(["nope"]) == 2


class TestValidate:
    def test_mixed_fixture(self, tmp_path):
        task = micro_benchmark()[0][0]
        good = render_selection_like(task)
        lines = [
            json.dumps({"v": 1, "task_id": "a", "raw_response": good}),
            json.dumps({"v": 1, "raw_response": "<think>x</think><answer>[]</answer>"}),
            json.dumps({"v": 1, "raw_response": "<think>x</think><answer>[]"}),
            "not json at all",
            json.dumps({"v": 1, "raw_response": "<think>x</think><answer>person 1</answer>"}),
        ]
        src = tmp_path / "r.jsonl"
        src.write_text("\n".join(lines) + "\n")
        out = tmp_path / "report.jsonl"
        assert main(["validate", str(src), "--out", str(out)]) == 0
        rep = jsonl(out)
        assert [r["line"] for r in rep] == [1, 2, 3, 4, 5]
        assert [r["format_ok"] for r in rep] == [True, True, False, False, True]
        assert [r["answer_kind"] for r in rep] == ["boxes", "rejection", "unparseable", None, "unparseable"]
        assert [bool(r["errors"]) for r in rep] == [False, False, True, True, True]
        assert rep[0]["task_id"] == "a" and all(r["v"] == 1 for r in rep)

    def test_empty_file(self, tmp_path):
        src = tmp_path / "e.jsonl"
        src.write_text("")
        out = tmp_path / "o.jsonl"
        assert main(["validate", str(src), "--out", str(out)]) == 0
        assert out.read_text() == ""

    def test_unreadable(self, tmp_path):
        assert main(["validate", str(tmp_path / "missing.jsonl")]) == 2


def render_selection_like(task):
    answer = [LabeledBox(task.hint(k).label, task.hint(k).box) for k in task.gt]
    return serialize_response(ThinkTrace(("check each person",)), answer, task)


class TestReward:
    def test_scores(self, tmp_path, bench_files):
        tasks_path, _ = bench_files
        tasks = micro_benchmark()[0]
        resp = tmp_path / "resp.jsonl"
        io.write_jsonl(
            str(resp),
            [
                {"task_id": "T1", "raw_response": render_selection_like(tasks[0])},
                {"task_id": "T5", "raw_response": serialize_response(ThinkTrace(), [])},
                {"task_id": "T3", "raw_response": "garbage"},
            ],
        )
        out = tmp_path / "rw.jsonl"
        assert main(["reward", "--tasks", str(tasks_path), "--responses", str(resp), "--out", str(out)]) == 0
        assert [r["total"] for r in jsonl(out)] == [1.0, 1.0, 0.0]
        assert main(["reward", "--tasks", str(tasks_path), "--responses", str(resp), "--lam", "0.5", "--out", str(out)]) == 0

    def test_unknown_task(self, tmp_path, bench_files, capsys):
        tasks_path, _ = bench_files
        resp = tmp_path / "resp.jsonl"
        io.write_jsonl(str(resp), [{"task_id": "ghost", "raw_response": "x"}])
        assert main(["reward", "--tasks", str(tasks_path), "--responses", str(resp)]) == 1
        assert "ghost" in capsys.readouterr().err

    def test_bad_lambda(self, bench_files):
        t, p = bench_files
        assert main(["reward", "--tasks", str(t), "--responses", str(p), "--lam", "2"]) == 2


class TestEval:
    def test_micro_benchmark(self, tmp_path, bench_files):
        t, p = bench_files
        out, csv, fig = tmp_path / "r.json", tmp_path / "r.csv", tmp_path / "r.png"
        assert main(["eval", "--tasks", str(t), "--predictions", str(p), "--out", str(out), "--csv", str(csv), "--figure", str(fig)]) == 0
        rep = json.loads(out.read_text())
        assert rep["v"] == 1 and rep["rejection_score"] == 0.5
        assert rep["per_subset"]["attribute"] == {"recall": 0.75, "precision": 0.75, "df1": 0.75, "n": 2}
        assert rep["overall"]["df1"] == 0.541666667
        assert csv.read_text().splitlines()[-1] == "overall,0.5,0.625,0.541666667,4"
        assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_grid_flags(self, tmp_path, bench_files):
        t, p = bench_files
        out = tmp_path / "r.json"
        assert main(["eval", "--tasks", str(t), "--predictions", str(p), "--grid", "0.5,0.8", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["grid"] == [0.5, 0.8]
        assert main(["eval", "--tasks", str(t), "--predictions", str(p), "--grid-start", "0.5", "--grid-stop", "0.7", "--grid-step", "0.1", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["grid"] == [0.5, 0.6, 0.7]
        assert main(["eval", "--tasks", str(t), "--predictions", str(p), "--grid", "0.9,0.5"]) == 2
        assert main(["eval", "--tasks", str(t), "--predictions", str(p), "--grid", "a"]) == 2

    def test_missing_prediction(self, tmp_path, bench_files, capsys):
        t, _ = bench_files
        p = tmp_path / "short.jsonl"
        io.write_jsonl(str(p), [io.prediction_to_json(x) for x in micro_benchmark()[1][:5]])
        assert main(["eval", "--tasks", str(t), "--predictions", str(p)]) == 1
        assert "T6" in capsys.readouterr().err

    def test_bad_version(self, tmp_path, bench_files):
        t, _ = bench_files
        p = tmp_path / "v2.jsonl"
        p.write_text('{"v": 2, "task_id": "T1", "boxes": []}\n')
        assert main(["eval", "--tasks", str(t), "--predictions", str(p)]) == 1


class TestRenderPrompt:
    def test_prompts(self, tmp_path, bench_files):
        t, _ = bench_files
        out = tmp_path / "p.jsonl"
        assert main(["render-prompt", "--tasks", str(t), "--preamble", "SYS.", "--out", str(out)]) == 0
        rows = jsonl(out)
        assert len(rows) == 6 and rows[0]["prompt"].startswith("SYS. Hint:")

    def test_stdout(self, bench_files, capsys):
        t, _ = bench_files
        assert main(["render-prompt", "--tasks", str(t)]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 6


class TestConfig:
    def test_config_supplies_flags(self, tmp_path):
        cfg = tmp_path / "c.json"
        out = tmp_path / "t.jsonl"
        cfg.write_text(json.dumps({"n": 5, "seed": 3, "out": str(out)}))
        assert main(["gen-tasks", "--config", str(cfg)]) == 0
        assert len(out.read_text().splitlines()) == 5
        assert main(["gen-tasks", "--config", str(cfg), "--n", "7"]) == 0
        assert len(out.read_text().splitlines()) == 7

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 5, "colour": "red", "out": "x"}))
        assert main(["gen-tasks", "--config", str(cfg)]) == 2
        assert "colour" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("[1]")
        assert main(["gen-tasks", "--config", str(cfg)]) == 2
        assert main(["gen-tasks", "--config", str(tmp_path / "missing.json")]) == 2


class TestTrainToy:
    def test_artifacts_and_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train-toy", *SMALL_TRAIN, "--out-dir", str(a)]) == 0
        assert main(["train-toy", *SMALL_TRAIN, "--out-dir", str(b)]) == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == ["params.json", "report.csv", "report.json", "report.png", "train_log.jsonl", "training_curve.png"]
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), n
        log = jsonl(a / "train_log.jsonl")
        assert [r["iter"] for r in log] == list(range(6))

    def test_zero_iterations_is_init_report(self, tmp_path):
        out = tmp_path / "z"
        assert main(["train-toy", *SMALL_TRAIN, "--iterations", "0", "--no-figures", "--out-dir", str(out)]) == 0
        heldout = SyntheticSpec(n_tasks=12, seed=7 + HELDOUT_SEED_OFFSET)
        bench = generate_tasks(heldout)
        want = evaluate(bench, greedy_predictions(ToyPolicyParams.zeros(FEATURE_DIM), bench, heldout))
        got = json.loads((out / "report.json").read_text())
        got.pop("v")
        assert got == io.round_floats(want.to_dict())
        assert (out / "train_log.jsonl").read_text() == ""
        assert not (out / "report.png").exists()

    @pytest.mark.parametrize("flag", [["--group-size", "1"], ["--clip-eps", "0"], ["--beta", "-1"], ["--iterations", "-1"], ["--n-tasks", "0"]])
    def test_bad_flags(self, tmp_path, flag):
        assert main(["train-toy", *SMALL_TRAIN, *flag, "--out-dir", str(tmp_path / "x")]) == 2
