"""Operator entry point: run benchmarks, evaluate logs, print error
breakdowns, and build training datasets.

Every option resolves with the precedence flag > environment variable >
config file > built-in default. Exit codes are stable: 0 success, 2
configuration error, 3 transport-level abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

from .augment import AugmentConfig, build_datasets, identity_rewriter
from .core import (
    ConfigError,
    HomebenchError,
    SchemaError,
    load_tasks,
    parse_trajectory_log,
    serialize_trajectory,
)
from .loop import run_benchmark
from .metrics import (
    build_report,
    render_action_table,
    render_attribute_table,
    render_error_table,
    render_summary_table,
)
from .planners import (
    ConsolePlanner,
    RemotePlanner,
    RemotePlannerConfig,
    RemoteRewriter,
    load_scripted_plan,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3

ENV_PREFIX = "HOMEBENCH_"


def _bundled(subdir: str) -> Path:
    return Path(str(resources.files("homebench").joinpath(f"data/{subdir}")))


def _setting(flag_value, env_key: str, config: dict, config_key: str, default, cast=str):
    if flag_value is not None:
        return flag_value
    env_value = os.environ.get(ENV_PREFIX + env_key)
    if env_value is not None:
        try:
            return cast(env_value)
        except ValueError:
            raise ConfigError(f"bad value for {ENV_PREFIX + env_key}: {env_value!r}") from None
    if config_key in config:
        return cast(config[config_key])
    return default


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"{what} directory not found: {path}")
    return path


def _load_task_map(tasks_dir: Path) -> dict:
    overlay = None
    overlay_path = tasks_dir / "keypaths.json"
    if overlay_path.exists():
        overlay = json.loads(overlay_path.read_text(encoding="utf-8"))
    paths = sorted(p for p in tasks_dir.glob("*.json") if p.name != "keypaths.json")
    if not paths:
        raise ConfigError(f"no task files in {tasks_dir}")
    try:
        return load_tasks(paths, overlay)
    except SchemaError as exc:
        raise ConfigError(f"bad task file in {tasks_dir}: {exc}") from exc


def _load_scene_docs(scenes_dir: Path) -> dict:
    docs = {}
    for path in sorted(scenes_dir.glob("*.json")):
        try:
            docs[path.stem] = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scene file {path} is not valid JSON: {exc}") from exc
    if not docs:
        raise ConfigError(f"no scene files in {scenes_dir}")
    return docs


def _remote_config(profile: str, config: dict) -> RemotePlannerConfig:
    profiles = config.get("profiles", {})
    if profile not in profiles:
        raise ConfigError(f"remote profile {profile!r} not found in config file")
    spec = profiles[profile]
    try:
        return RemotePlannerConfig(
            endpoint=spec["endpoint"],
            model=spec.get("model", "default"),
            timeout=float(spec.get("timeout", 30.0)),
            max_retries=int(spec.get("max_retries", 2)),
            temperature=float(spec.get("temperature", 0.0)),
            template=spec.get("template", "default"),
            api_key_env=spec.get("api_key_env", "HOMEBENCH_API_KEY"),
        )
    except KeyError as exc:
        raise ConfigError(f"remote profile {profile!r} is missing {exc}") from None


def _planner_factory(spec: str, config: dict):
    """Turn a planner spec (scripted:PATH | console | remote:PROFILE) into a
    per-episode planner factory."""
    if spec == "console":
        return lambda task, run_index: ConsolePlanner()
    kind, _, arg = spec.partition(":")
    if kind == "scripted":
        base = Path(arg) if arg else _bundled("plans")
        if base.is_dir():
            def factory(task, run_index):
                plan_path = base / f"{task.id}.json"
                if not plan_path.exists():
                    raise ConfigError(f"no scripted plan for task {task.id!r} in {base}")
                return load_scripted_plan(plan_path.read_text(encoding="utf-8"))
            return factory
        if base.exists():
            text = base.read_text(encoding="utf-8")
            return lambda task, run_index: load_scripted_plan(text)
        raise ConfigError(f"scripted plan path not found: {base}")
    if kind == "remote":
        remote = _remote_config(arg, config)
        return lambda task, run_index: RemotePlanner(remote)
    raise ConfigError(f"unknown planner spec {spec!r}")


def _parse_logs(logs_dir: Path):
    """Parse every log file in a directory; malformed ones are reported and
    excluded rather than aborting the batch. report.json (evaluate's default
    output) is not a log."""
    trajectories = []
    corrupt = []
    for path in sorted(logs_dir.glob("*.json")):
        if path.name == "report.json":
            continue
        try:
            trajectories.append(parse_trajectory_log(path.read_bytes()))
        except HomebenchError as exc:
            corrupt.append((path.name, str(exc)))
    return trajectories, corrupt


def _report_corrupt(corrupt) -> None:
    if corrupt:
        print(f"warning: excluded {len(corrupt)} corrupt log(s):")
        for name, reason in corrupt:
            print(f"  {name}: {reason}")


# ---------------------------------------------------------------------------
# commands


class _RecordingPlanner:
    """Wraps a planner to capture instruction/response pairs for the
    optional debug transcripts."""

    def __init__(self, inner, sink: list):
        self._inner = inner
        self._sink = sink

    def next(self, instruction):
        raw = self._inner.next(instruction)
        self._sink.append({"instruction": instruction.text, "response": raw})
        return raw


def cmd_run(args, config: dict) -> int:
    tasks_dir = _require_dir(
        _setting(args.tasks, "TASKS", config, "tasks", _bundled("tasks")), "tasks")
    scenes_dir = _require_dir(
        _setting(args.scenes, "SCENES", config, "scenes", _bundled("scenes")), "scenes")
    out_dir = Path(_setting(args.out, "OUT", config, "output", "runs"))
    planner_spec = _setting(args.planner, "PLANNER", config, "planner", "scripted:")
    runs = _setting(args.runs, "RUNS", config, "runs_per_task", 3, int)
    budget = _setting(args.budget, "BUDGET", config, "budget", 20, int)
    retries = _setting(args.retries, "RETRIES", config, "retries", 3, int)
    if not 1 <= retries <= 3:
        raise ConfigError("--retries must be between 1 and 3 (attempts per step)")
    seed = _setting(args.seed, "SEED", config, "seed", None, int)
    jobs = _setting(args.jobs, "JOBS", config, "jobs", 1, int)

    tasks = _load_task_map(tasks_dir)
    scene_docs = _load_scene_docs(scenes_dir)
    for task in tasks.values():
        if task.scene_ref not in scene_docs:
            raise ConfigError(f"task {task.id!r} needs scene {task.scene_ref!r}, "
                              f"not found in {scenes_dir}")
    factory = _planner_factory(planner_spec, config)

    out_dir.mkdir(parents=True, exist_ok=True)
    task_list = [tasks[task_id] for task_id in sorted(tasks)]

    transcripts: dict = {}
    if args.transcripts:
        inner_factory = factory

        def factory(task, run_index):
            sink = transcripts.setdefault((task.id, run_index), [])
            return _RecordingPlanner(inner_factory(task, run_index), sink)

    def progress(result):
        if result.error is not None:
            detail = f"transport error: {result.error}"
        else:
            t = result.trajectory
            detail = (f"{len(t.steps)} steps, "
                      f"terminated by {'end' if t.terminated_by_end else 'budget'}")
        print(f"  {result.task_id} run {result.run_index}: {detail}")

    results = run_benchmark(
        task_list, factory, scene_docs,
        runs_per_task=runs, budget=budget, retries=retries,
        seed=seed, jobs=jobs, progress=progress,
    )

    written = 0
    failed = []
    transcript_dir = out_dir / "transcripts"
    for result in results:
        if result.complete:
            path = out_dir / f"{result.task_id}__run{result.run_index}.json"
            path.write_text(serialize_trajectory(result.trajectory), encoding="utf-8")
            written += 1
            recorded = transcripts.get((result.task_id, result.run_index))
            if recorded is not None:
                transcript_dir.mkdir(exist_ok=True)
                (transcript_dir / f"{result.task_id}__run{result.run_index}.json").write_text(
                    json.dumps(recorded, indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8")
        else:
            failed.append(result)
    summary = f"wrote {written} trajectory log(s) to {out_dir}"
    if failed:
        summary += f"; {len(failed)} episode(s) failed transport"
    print(summary)
    if results and not written:
        return EXIT_TRANSPORT
    return EXIT_OK


def cmd_evaluate(args, config: dict) -> int:
    logs_dir = _require_dir(
        _setting(args.logs, "LOGS", config, "logs", None) or _fail_opt("--logs"), "logs")
    tasks_dir = _require_dir(
        _setting(args.tasks, "TASKS", config, "tasks", _bundled("tasks")), "tasks")
    tasks = _load_task_map(tasks_dir)
    trajectories, corrupt = _parse_logs(logs_dir)
    _report_corrupt(corrupt)
    if not trajectories:
        print("warning: no parseable logs found; report contains zeros")

    report = build_report(trajectories, tasks, plwsr_literal=args.plwsr_literal)
    print(render_summary_table(report))
    print()
    print("Per-attribute SR")
    print(render_attribute_table(report))
    print()
    print(f"({report.n_runs} run(s) over {report.n_tasks} task(s); "
          f"{len(corrupt)} log(s) excluded)")

    out_path = Path(args.out) if args.out else logs_dir / "report.json"
    doc = report.to_dict()
    doc["excluded_logs"] = len(corrupt)
    out_path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")
    print(f"report written to {out_path}")
    return EXIT_OK


def cmd_report_errors(args, config: dict) -> int:
    logs_dir = _require_dir(
        _setting(args.logs, "LOGS", config, "logs", None) or _fail_opt("--logs"), "logs")
    tasks_dir = _require_dir(
        _setting(args.tasks, "TASKS", config, "tasks", _bundled("tasks")), "tasks")
    tasks = _load_task_map(tasks_dir)
    trajectories, corrupt = _parse_logs(logs_dir)
    _report_corrupt(corrupt)

    report = build_report(trajectories, tasks)
    print(render_error_table(report.error_stats["successful"],
                             "Successful trajectories error statistics"))
    print()
    print(render_error_table(report.error_stats["failed"],
                             "Failed trajectories error statistics"))
    print()
    print("Per-action execution statistics")
    print(render_action_table(report.action_stats))

    if args.plot_data:
        doc = {
            "successful": report.error_stats["successful"].to_dict(),
            "failed": report.error_stats["failed"].to_dict(),
        }
        Path(args.plot_data).write_text(
            json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        print(f"plot data written to {args.plot_data}")
    return EXIT_OK


def cmd_augment(args, config: dict) -> int:
    logs_dir = _require_dir(
        _setting(args.logs, "LOGS", config, "logs", None) or _fail_opt("--logs"), "logs")
    tasks_dir = _require_dir(
        _setting(args.tasks, "TASKS", config, "tasks", _bundled("tasks")), "tasks")
    scenes_dir = _setting(args.scenes, "SCENES", config, "scenes", _bundled("scenes"))
    out_dir = Path(_setting(args.out, "OUT", config, "output", "datasets"))
    seed = _setting(args.seed, "SEED", config, "seed", 0, int) or 0

    tasks = _load_task_map(tasks_dir)
    trajectories, corrupt = _parse_logs(logs_dir)
    _report_corrupt(corrupt)
    if not trajectories:
        raise ConfigError(f"no parseable logs in {logs_dir}")

    scene_docs = None
    if scenes_dir is not None:
        scenes_path = Path(scenes_dir)
        if scenes_path.is_dir():
            scene_docs = _load_scene_docs(scenes_path)

    rewriter = identity_rewriter
    if args.rewriter and args.rewriter != "identity":
        kind, _, arg = args.rewriter.partition(":")
        if kind != "remote":
            raise ConfigError(f"unknown rewriter spec {args.rewriter!r}")
        rewriter = RemoteRewriter(_remote_config(arg, config))

    lexicon = None
    if args.lexicon:
        lexicon_path = Path(args.lexicon)
        if not lexicon_path.exists():
            raise ConfigError(f"lexicon file not found: {lexicon_path}")
        lexicon = json.loads(lexicon_path.read_text(encoding="utf-8"))

    manifest = build_datasets(trajectories, tasks, AugmentConfig(
        out_dir=out_dir,
        seed=seed,
        rewrites=args.rewrites,
        rewriter=rewriter,
        lexicon=lexicon,
        dedup=not args.no_dedup,
        scene_docs=scene_docs,
        train_split=args.train_split,
    ))

    print(f"sft samples: {manifest['sft']['total']} "
          f"(base {manifest['sft']['base']}, rewrites x{manifest['rewrites']}, "
          f"{manifest['rewrite_failures']} rewrite failure(s))")
    dpo = manifest["dpo"]
    print("dpo pairs: "
          + ", ".join(f"{k}={v}" for k, v in dpo["post_dedup"].items())
          + f" (pre-dedup total {dpo['pre_dedup']['total']})")
    print(f"end-as-chosen violations: {dpo['end_as_chosen_violations']}")
    print(f"datasets written to {out_dir}")
    return EXIT_OK


def _fail_opt(name: str):
    raise ConfigError(f"missing required option {name}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="homebench",
        description="Household agent benchmark: run episodes, score logs, "
                    "and build training datasets.",
    )
    parser.add_argument("--config", help="JSON config file (flags > env > config)")
    parser.add_argument("--seed", type=int, help="global deterministic seed")
    parser.add_argument("--jobs", type=int, help="parallel episodes for run")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute tasks against a planner")
    p_run.add_argument("--tasks", help="task directory (default: bundled samples)")
    p_run.add_argument("--scenes", help="scene directory (default: bundled samples)")
    p_run.add_argument("--planner",
                       help="scripted:PATH | console | remote:PROFILE "
                            "(default: bundled scripted plans)")
    p_run.add_argument("--runs", type=int, help="runs per task (default 3)")
    p_run.add_argument("--budget", type=int, help="step budget per run (default 20)")
    p_run.add_argument("--retries", type=int, help="max executor attempts per step (default 3)")
    p_run.add_argument("--out", help="output directory for trajectory logs")
    p_run.add_argument("--transcripts", action="store_true",
                       help="also write instruction/response transcripts")

    p_eval = sub.add_parser("evaluate", help="score trajectory logs")
    p_eval.add_argument("--logs", help="directory of trajectory logs")
    p_eval.add_argument("--tasks", help="task directory (default: bundled samples)")
    p_eval.add_argument("--out", help="structured report path (default: LOGS/report.json)")
    p_eval.add_argument("--plwsr-literal", action="store_true",
                        help="use actual path length in the PLWSR numerator")

    p_err = sub.add_parser("report-errors", help="print error breakdown tables")
    p_err.add_argument("--logs", help="directory of trajectory logs")
    p_err.add_argument("--tasks", help="task directory (default: bundled samples)")
    p_err.add_argument("--plot-data", help="write plot-ready JSON here")

    p_aug = sub.add_parser("augment", help="build SFT/DPO datasets from logs")
    p_aug.add_argument("--logs", help="directory of trajectory logs")
    p_aug.add_argument("--tasks", help="task directory (default: bundled samples)")
    p_aug.add_argument("--scenes", help="scene directory for observation replay")
    p_aug.add_argument("--out", help="output directory for dataset files")
    p_aug.add_argument("--rewrites", type=int, default=0,
                       help="rewritten variants per sample (default 0)")
    p_aug.add_argument("--rewriter", default="identity",
                       help="identity | remote:PROFILE")
    p_aug.add_argument("--no-dedup", action="store_true",
                       help="keep duplicate preference pairs")
    p_aug.add_argument("--train-split", type=float,
                       help="task-id train fraction (e.g. 0.9) for split files")
    p_aug.add_argument("--lexicon", help="JSON list of corrupt action strings")
    return parser


COMMANDS = {
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "report-errors": cmd_report_errors,
    "augment": cmd_augment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config_path = args.config or os.environ.get(ENV_PREFIX + "CONFIG")
        config = _load_config_file(config_path)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HomebenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
