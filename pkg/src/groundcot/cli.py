"""Command-line entry point.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import io
from .grammar import DEFAULT_PREAMBLE, format_problems, parse_response, render_prompt
from .grpo import GrpoConfig, TrainingError, train
from .metrics import DEFAULT_GRID, EvalReport, EvaluationError, evaluate
from .policy import ToyPolicyParams
from .reward import RewardConfig, reward_response
from .toyenv import FEATURE_DIM, FEATURE_NAMES, SyntheticSpec, ToyEnv, generate_tasks, greedy_predictions

log = logging.getLogger("groundcot")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
HELDOUT_SEED_OFFSET = 1_000_000


class UsageError(Exception):
    pass


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _grid(args) -> tuple[float, ...]:
    if args.grid:
        try:
            grid = tuple(float(t) for t in args.grid.split(","))
        except ValueError as exc:
            raise UsageError(f"--grid: {exc}") from exc
    else:
        if args.grid_step <= 0 or args.grid_stop < args.grid_start:
            raise UsageError("grid needs step > 0 and stop >= start")
        n = int(round((args.grid_stop - args.grid_start) / args.grid_step)) + 1
        grid = tuple(round(args.grid_start + k * args.grid_step, 10) for k in range(n))
    if any(not 0 < t <= 1 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise UsageError(f"threshold grid must be ascending within (0, 1]: {list(grid)}")
    return grid


def _write_csv(path: str, rows: list[list]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def _emit_report(report: EvalReport, out: Optional[str], csv_path: Optional[str], figure: Optional[str]) -> None:
    io.write_json(out, report.to_dict())
    if csv_path:
        _write_csv(csv_path, report.csv_rows())
    if figure:
        from .plotting import plot_report

        plot_report(report, figure)


# -- commands -----------------------------------------------------------------


def cmd_gen_tasks(args) -> int:
    try:
        spec = SyntheticSpec(
            n_tasks=args.n,
            min_candidates=args.min_candidates,
            max_candidates=args.max_candidates,
            max_predicates=args.max_predicates,
            rejection_fraction=args.rejection_fraction,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    io.write_tasks(args.out, generate_tasks(spec))
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        fh = sys.stdin if args.responses == "-" else open(args.responses, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.responses}: {exc.strerror}") from exc
    reports = []
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entry = {"line": lineno, "format_ok": False, "answer_kind": None, "errors": []}
            try:
                rec = io.parse_record(line, args.responses, lineno)
                raw = rec.get("raw_response")
                if not isinstance(raw, str):
                    raise io.DataError("record has no raw_response string")
            except io.DataError as exc:
                entry["errors"].append(str(exc))
                reports.append(entry)
                continue
            if "task_id" in rec:
                entry["task_id"] = rec["task_id"]
            parsed = parse_response(raw)
            entry["format_ok"] = parsed.format_ok
            entry["answer_kind"] = parsed.answer.kind.value
            entry["errors"] = format_problems(raw)
            if parsed.answer.kind.value == "unparseable":
                entry["errors"].append("answer block is not a box list or rejection")
            reports.append(entry)
    io.write_jsonl(args.out, reports)
    return EXIT_OK


def cmd_reward(args) -> int:
    tasks = {t.task_id: t for t in io.read_tasks(args.tasks)}
    try:
        cfg = RewardConfig(lam=args.lam)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = []
    for lineno, rec in io.read_jsonl(args.responses):
        task_id = rec.get("task_id")
        if task_id not in tasks:
            raise io.DataError(f"{args.responses}:{lineno}: unknown task id {task_id!r}")
        raw = rec.get("raw_response")
        if not isinstance(raw, str):
            raise io.DataError(f"{args.responses}:{lineno}: record has no raw_response string")
        r = reward_response(tasks[task_id], raw, cfg)
        rows.append(
            {"task_id": task_id, "precision": r.precision, "recall": r.recall, "f1": r.f1, "fmt": r.fmt, "total": r.total}
        )
    io.write_jsonl(args.out, rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    grid = _grid(args)
    tasks = io.read_tasks(args.tasks)
    preds = io.read_predictions(args.predictions)
    report = evaluate(tasks, preds, grid)
    _emit_report(report, args.out, args.csv, args.figure)
    return EXIT_OK


def cmd_render_prompt(args) -> int:
    tasks = io.read_tasks(args.tasks)
    preamble = DEFAULT_PREAMBLE if args.preamble is None else args.preamble
    rows = []
    for t in tasks:
        try:
            rows.append({"task_id": t.task_id, "prompt": render_prompt(t, preamble)})
        except ValueError as exc:
            raise io.DataError(str(exc)) from exc
    io.write_jsonl(args.out, rows)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    try:
        spec = SyntheticSpec(n_tasks=args.n_tasks, rejection_fraction=args.rejection_fraction, seed=args.seed)
        heldout = SyntheticSpec(
            n_tasks=args.eval_tasks,
            rejection_fraction=args.rejection_fraction,
            seed=args.seed + HELDOUT_SEED_OFFSET,
        )
        cfg = GrpoConfig(
            group_size=args.group_size,
            clip_eps=args.clip_eps,
            kl_beta=args.beta,
            temperature=args.temperature,
            learning_rate=args.lr,
            seed=args.seed,
            batch_size=args.batch_size,
            inner_steps=args.inner_steps,
            kl_form=args.kl_form,
            max_grad_norm=args.max_grad_norm if args.max_grad_norm > 0 else None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.iterations < 0:
        raise UsageError("--iterations must be >= 0")
    if args.n_tasks < 1:
        raise UsageError("--n-tasks must be >= 1")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = ToyEnv(generate_tasks(spec), spec)
    result = train(env, ToyPolicyParams.zeros(FEATURE_DIM), cfg, args.iterations)

    io.write_json(
        str(out / "params.json"),
        {"feature_names": list(FEATURE_NAMES), "weights": result.params.weights.tolist()},
    )
    io.write_jsonl(str(out / "train_log.jsonl"), result.log)
    bench = generate_tasks(heldout)
    report = evaluate(bench, greedy_predictions(result.params, bench, heldout))
    figs = not args.no_figures
    _emit_report(
        report,
        str(out / "report.json"),
        str(out / "report.csv"),
        str(out / "report.png") if figs else None,
    )
    if figs and result.log:
        from .plotting import plot_training_curve

        plot_training_curve(result.log, out / "training_curve.png")
    log.info("wrote %s", out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", default=None, help="comma-separated IoU thresholds (overrides start/stop/step)")
    p.add_argument("--grid-start", type=float, default=DEFAULT_GRID[0])
    p.add_argument("--grid-stop", type=float, default=DEFAULT_GRID[-1])
    p.add_argument("--grid-step", type=float, default=0.05)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="groundcot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", default=None, help="JSON file of flag defaults (keys use underscores)")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen-tasks", cmd_gen_tasks, "generate synthetic referring tasks as JSONL")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rejection-fraction", type=float, default=0.1)
    p.add_argument("--min-candidates", type=int, default=2)
    p.add_argument("--max-candidates", type=int, default=6)
    p.add_argument("--max-predicates", type=int, default=2)
    p.add_argument("--out", required=True)

    p = add("validate", cmd_validate, "report the tag-format status of each response line")
    p.add_argument("responses")
    p.add_argument("--out", default=None)

    p = add("reward", cmd_reward, "score responses with the F1 + format reward")
    p.add_argument("--tasks", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--lam", type=_fraction, default=0.9, help="weight of the F1 term")
    p.add_argument("--out", default=None)

    p = add("eval", cmd_eval, "benchmark predictions: R/P/DF1 over IoU thresholds plus rejection score")
    p.add_argument("--tasks", required=True)
    p.add_argument("--predictions", required=True)
    _add_grid_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--figure", default=None, help="write a per-subset bar chart (PNG/PDF/SVG)")

    p = add("render-prompt", cmd_render_prompt, "render the referring prompt for each task")
    p.add_argument("--tasks", required=True)
    p.add_argument("--preamble", default=None)
    p.add_argument("--out", default=None)

    p = add("train-toy", cmd_train_toy, "train the toy policy with GRPO and benchmark it")
    p.add_argument("--n-tasks", type=int, default=200)
    p.add_argument("--rejection-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--beta", type=float, default=0.04)
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--inner-steps", type=int, default=1)
    p.add_argument("--kl-form", choices=("printed", "reverse"), default="printed")
    p.add_argument("--max-grad-norm", type=float, default=1.0, help="0 disables clipping")
    p.add_argument("--eval-tasks", type=int, default=100)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out-dir", required=True)
    return parser, subs


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, path: str) -> None:
    """Install config-file values as the subcommand's defaults; explicit flags still win."""
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot load config {path}: {exc}")
    if not isinstance(cfg, dict):
        parser.error(f"config {path} must hold a JSON object")
    known = {a.dest for a in sub._actions} - {"help", "config", "func"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        parser.error(f"unknown config keys: {unknown}")
    for a in sub._actions:
        if a.dest in cfg:
            a.required = False
    sub.set_defaults(**cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command = next((a for a in argv if a in subs), None)
        config = _config_path(argv)
        if command and config:
            _apply_config(parser, subs[command], config)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"groundcot {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, EvaluationError, TrainingError) as exc:
        print(f"groundcot {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"groundcot {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
