"""Evaluation metrics over finished trajectories: task progress, success
rates, termination and re-planning quality, and error-breakdown statistics.

All functions are pure; percentages are kept as exact rationals until
display time, where they are rendered to two decimals with half-up
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Iterable, Sequence

from .core import (
    ActionType,
    EmptyKeypathSet,
    ErrorCategory,
    ErrorCode,
    KeypathNode,
    MissingExpertLength,
    MissingTask,
    StepRecord,
    Task,
    TaskAttribute,
    Trajectory,
)


def round2(value) -> float:
    """Two-decimal half-up rounding for display (41.665 -> 41.67)."""
    if isinstance(value, Fraction):
        dec = Decimal(value.numerator) / Decimal(value.denominator)
    else:
        dec = Decimal(repr(float(value)))
    return float(dec.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _pct(numerator: int, denominator: int) -> Fraction:
    return Fraction(100) * Fraction(numerator, denominator) if denominator else Fraction(0)


# ---------------------------------------------------------------------------
# keypath matching


@dataclass
class MatchState:
    """Progress of one keypath against a trajectory: ``checked`` is always a
    prefix of ``keypath`` and ``cursor`` equals its length."""

    keypath: tuple
    checked: list = field(default_factory=list)

    @property
    def cursor(self) -> int:
        return len(self.checked)

    @property
    def complete(self) -> bool:
        return self.cursor == len(self.keypath)

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.cursor, len(self.keypath))


def _successful_pairs(trajectory: Trajectory):
    for step in trajectory.steps:
        if not step.feedback.ok:
            continue
        action = step.output.action_type
        if action is None or action is ActionType.END:
            continue
        yield action, step.output.target


def match_keypath(trajectory: Trajectory, keypath: Sequence[KeypathNode]) -> MatchState:
    """Scan the trajectory once, left to right, advancing the cursor whenever
    a *successful* step equals the next unmatched node. Failed steps and
    non-matching steps are skipped; the cursor never retreats.

    Because the node order is fixed, this greedy earliest match yields the
    longest prefix of the keypath that occurs as a subsequence of the
    successful steps.
    """
    state = MatchState(tuple(keypath))
    for action, target in _successful_pairs(trajectory):
        if state.complete:
            break
        node = state.keypath[state.cursor]
        if node.action is action and node.target == target:
            state.checked.append(node)
    return state


def compute_tp(trajectory: Trajectory, keypaths: Sequence) -> Fraction:
    """Task progress: the best matched-prefix ratio over the task's keypaths,
    as an exact rational in [0, 1]."""
    if not keypaths:
        raise EmptyKeypathSet("task progress needs at least one keypath")
    return max(match_keypath(trajectory, keypath).ratio for keypath in keypaths)


def count_replans(trajectory: Trajectory) -> int:
    """Number of steps taken immediately after a failed step. The replan is
    counted regardless of its own outcome, so consecutive failures each give
    rise to one replan (except a trailing failure with no successor)."""
    steps = trajectory.steps
    return sum(
        1 for i in range(1, len(steps)) if not steps[i - 1].feedback.ok
    )


# ---------------------------------------------------------------------------
# per-episode results


@dataclass(frozen=True)
class EpisodeResult:
    """Scalar summary of one finished run of one task.

    ``success`` holds exactly when task progress is 100%; ``ended`` when the
    planner terminated the run itself; ``length`` counts non-End steps.
    """

    task_id: str
    run_index: int
    tp: Fraction
    success: bool
    ended: bool
    replans: int
    length: int


def episode_result(trajectory: Trajectory, task: Task) -> EpisodeResult:
    tp = compute_tp(trajectory, task.keypaths)
    length = sum(
        1 for step in trajectory.steps
        if not (step.output.is_end and step.feedback.ok)
    )
    return EpisodeResult(
        task_id=trajectory.task_id,
        run_index=trajectory.run_index,
        tp=tp,
        success=tp == 1,
        ended=trajectory.ended,
        replans=count_replans(trajectory),
        length=length,
    )


def compute_ser(results: Iterable[EpisodeResult]):
    """Success end rate: successful runs over runs the agent itself ended,
    as a percentage. A zero denominator yields (0, True) rather than an
    error so batch reports survive degenerate planners.

    A run that completes every keypath node but burns its remaining budget
    without ever emitting End counts in neither side: the agent did not
    terminate it, and counting it as a success would push the rate past
    100%.
    """
    results = list(results)
    ended = sum(1 for r in results if r.ended)
    successes = sum(1 for r in results if r.success and r.ended)
    if ended == 0:
        return Fraction(0), True
    return _pct(successes, ended), False


def compute_srr(results: Iterable[EpisodeResult]):
    """Success re-plan rate: replans inside successful runs over all replans,
    as a percentage; (0, True) when no replans happened anywhere."""
    results = list(results)
    total = sum(r.replans for r in results)
    in_success = sum(r.replans for r in results if r.success)
    if total == 0:
        return Fraction(0), True
    return _pct(in_success, total), False


def compute_sr_plwsr(
    results: Iterable[EpisodeResult],
    expert_lengths: dict,
    literal: bool = False,
):
    """Success rate and path-length-weighted success rate, both as exact
    percentage rationals.

    Per successful episode the weight is expert / max(expert, actual) so a
    path longer than the expert's is penalized proportionally; failures
    weigh zero. ``literal=True`` switches the numerator to the actual
    length (which saturates at 1 for any path at least expert length).
    Episodes average within their task first, then across tasks.
    """
    by_task: dict = {}
    for r in results:
        by_task.setdefault(r.task_id, []).append(r)
    if not by_task:
        return Fraction(0), Fraction(0)

    sr_terms = []
    plw_terms = []
    for task_id, runs in sorted(by_task.items()):
        expert = expert_lengths.get(task_id)
        if expert is None or expert < 1:
            raise MissingExpertLength(f"no expert length for task {task_id!r}")
        sr_terms.append(Fraction(sum(1 for r in runs if r.success), len(runs)))
        weights = []
        for r in runs:
            if not r.success:
                weights.append(Fraction(0))
                continue
            denom = max(expert, r.length)
            numer = r.length if literal else expert
            weights.append(Fraction(numer, denom) if denom else Fraction(1))
        plw_terms.append(sum(weights, Fraction(0)) / len(runs))

    n = len(sr_terms)
    sr = Fraction(100) * sum(sr_terms, Fraction(0)) / n
    plwsr = Fraction(100) * sum(plw_terms, Fraction(0)) / n
    return sr, plwsr


# ---------------------------------------------------------------------------
# error statistics


CODE_ORDER = [
    ErrorCode.L1, ErrorCode.L2, ErrorCode.L3, ErrorCode.L4,
    ErrorCode.D1, ErrorCode.D2,
    ErrorCode.F1, ErrorCode.F2,
    ErrorCode.E1, ErrorCode.E2,
]
CATEGORY_ORDER = [
    ErrorCategory.LOGICAL, ErrorCategory.DISTANCE,
    ErrorCategory.FORMAT, ErrorCategory.EXECUTION,
]


@dataclass
class PartitionStats:
    """Error counts within one partition (successful or failed runs), with
    every count also expressed as a percentage of the partition's failed
    steps. ``failed_step_share`` is failed steps over all steps."""

    counts: dict = field(default_factory=dict)
    failed_steps: int = 0
    total_steps: int = 0

    def add(self, step: StepRecord):
        self.total_steps += 1
        if not step.feedback.ok:
            self.failed_steps += 1
            code = step.feedback.code
            self.counts[code] = self.counts.get(code, 0) + 1

    def count(self, code: ErrorCode) -> int:
        return self.counts.get(code, 0)

    def category_count(self, category: ErrorCategory) -> int:
        return sum(n for code, n in self.counts.items() if code.category is category)

    def percent(self, code: ErrorCode) -> Fraction:
        return _pct(self.count(code), self.failed_steps)

    def category_percent(self, category: ErrorCategory) -> Fraction:
        return _pct(self.category_count(category), self.failed_steps)

    @property
    def failed_step_share(self) -> Fraction:
        return _pct(self.failed_steps, self.total_steps)

    def to_dict(self) -> dict:
        return {
            "failed_steps": self.failed_steps,
            "total_steps": self.total_steps,
            "failed_step_share": round2(self.failed_step_share),
            "counts": {code.value: self.count(code) for code in CODE_ORDER},
            "percent": {code.value: round2(self.percent(code)) for code in CODE_ORDER},
            "category_counts": {
                cat.value: self.category_count(cat) for cat in CATEGORY_ORDER
            },
            "category_percent": {
                cat.value: round2(self.category_percent(cat)) for cat in CATEGORY_ORDER
            },
        }


def aggregate_error_stats(pairs: Iterable) -> dict:
    """Partition trajectories by success and tally their failed steps.

    ``pairs`` yields (trajectory, success: bool). Returns
    {"successful": PartitionStats, "failed": PartitionStats}.
    """
    stats = {"successful": PartitionStats(), "failed": PartitionStats()}
    for trajectory, success in pairs:
        bucket = stats["successful" if success else "failed"]
        for step in trajectory.steps:
            bucket.add(step)
    return stats


@dataclass
class ActionStats:
    attempts: int = 0
    successes: int = 0
    e_errors: int = 0

    @property
    def sr(self) -> Fraction:
        return _pct(self.successes, self.attempts)


def per_action_stats(trajectories: Iterable[Trajectory]) -> dict:
    """Per-skill attempt/success counts plus each skill's share of all
    E-category errors. One step is one attempt (its internal retries are
    not attempts of their own). End steps and F1 steps are excluded: an
    emission rejected for format never reached the executor, so it is not
    an attempt of any skill. Never-attempted actions are omitted.
    """
    stats: dict = {}
    for trajectory in trajectories:
        for step in trajectory.steps:
            action = step.output.action_type
            if action is None or action is ActionType.END:
                continue
            if step.feedback.code is ErrorCode.F1:
                continue
            entry = stats.setdefault(action, ActionStats())
            entry.attempts += 1
            if step.feedback.ok:
                entry.successes += 1
            elif step.feedback.code.category is ErrorCategory.EXECUTION:
                entry.e_errors += 1
    return stats


def action_error_share(stats: dict, action: ActionType) -> Fraction:
    total_e = sum(entry.e_errors for entry in stats.values())
    if action not in stats:
        return Fraction(0)
    return _pct(stats[action].e_errors, total_e)


# ---------------------------------------------------------------------------
# benchmark report


ATTRIBUTE_ORDER = [
    TaskAttribute.SHORT_HORIZON, TaskAttribute.LONG_HORIZON,
    TaskAttribute.OPEN_ENDED, TaskAttribute.LOGICAL, TaskAttribute.HUMAN_STYLE,
]
ATTRIBUTE_HEADERS = {
    TaskAttribute.SHORT_HORIZON: "Short-Horizon",
    TaskAttribute.LONG_HORIZON: "Long-Horizon",
    TaskAttribute.OPEN_ENDED: "Open-Ended",
    TaskAttribute.LOGICAL: "Logical",
    TaskAttribute.HUMAN_STYLE: "Human-Style",
}


@dataclass
class BenchmarkReport:
    """Everything the evaluate command prints and writes: headline metrics,
    per-attribute success rates, error breakdowns, and per-skill rates."""

    sr: Fraction
    plwsr: Fraction
    tp_mean: Fraction
    ser: Fraction
    srr: Fraction
    ser_denominator_zero: bool
    srr_denominator_zero: bool
    per_attribute_sr: dict
    per_task: dict
    error_stats: dict
    action_stats: dict
    n_tasks: int
    n_runs: int

    def to_dict(self) -> dict:
        per_action = {}
        for action in [a for a in ActionType if a is not ActionType.END]:
            if action not in self.action_stats:
                continue
            entry = self.action_stats[action]
            per_action[action.label] = {
                "attempts": entry.attempts,
                "successes": entry.successes,
                "sr": round2(entry.sr),
                "e_error_share": round2(action_error_share(self.action_stats, action)),
            }
        return {
            "tasks": self.n_tasks,
            "runs": self.n_runs,
            "sr": round2(self.sr),
            "plwsr": round2(self.plwsr),
            "tp": round2(self.tp_mean),
            "srr": round2(self.srr),
            "ser": round2(self.ser),
            "flags": {
                "ser_denominator_zero": self.ser_denominator_zero,
                "srr_denominator_zero": self.srr_denominator_zero,
            },
            "per_attribute_sr": {
                attr.value: (round2(v) if v is not None else None)
                for attr, v in self.per_attribute_sr.items()
            },
            "per_task": self.per_task,
            "error_stats": {k: v.to_dict() for k, v in self.error_stats.items()},
            "per_action": per_action,
        }


def build_report(
    trajectories: Sequence[Trajectory],
    tasks: dict,
    plwsr_literal: bool = False,
) -> BenchmarkReport:
    """Compute the full report for a batch of finished trajectories.

    Run-level values average within each task first, then across tasks;
    SER and SRR are global ratios over all runs by definition.
    """
    results = []
    for trajectory in trajectories:
        task = tasks.get(trajectory.task_id)
        if task is None:
            raise MissingTask(trajectory.task_id)
        results.append(episode_result(trajectory, task))

    expert_lengths = {t.id: t.expert_length for t in tasks.values()}
    if results:
        sr, plwsr = compute_sr_plwsr(results, expert_lengths, literal=plwsr_literal)
    else:
        sr, plwsr = Fraction(0), Fraction(0)
    ser, ser_flag = compute_ser(results)
    srr, srr_flag = compute_srr(results)

    by_task: dict = {}
    for r in results:
        by_task.setdefault(r.task_id, []).append(r)
    task_sr = {}
    task_tp = {}
    per_task = {}
    for task_id, runs in sorted(by_task.items()):
        task_sr[task_id] = _pct(sum(1 for r in runs if r.success), len(runs))
        task_tp[task_id] = Fraction(100) * sum((r.tp for r in runs), Fraction(0)) / len(runs)
        per_task[task_id] = {
            "runs": len(runs),
            "sr": round2(task_sr[task_id]),
            "tp": round2(task_tp[task_id]),
        }
    tp_mean = (
        sum(task_tp.values(), Fraction(0)) / len(task_tp) if task_tp else Fraction(0)
    )

    per_attribute: dict = {}
    for attr in ATTRIBUTE_ORDER:
        values = [task_sr[tid] for tid in task_sr if attr in tasks[tid].attributes]
        per_attribute[attr] = (
            sum(values, Fraction(0)) / len(values) if values else None
        )

    error_stats = aggregate_error_stats(
        (trajectory, result.success)
        for trajectory, result in zip(trajectories, results)
    )
    action_stats = per_action_stats(trajectories)

    return BenchmarkReport(
        sr=sr,
        plwsr=plwsr,
        tp_mean=tp_mean,
        ser=ser,
        srr=srr,
        ser_denominator_zero=ser_flag,
        srr_denominator_zero=srr_flag,
        per_attribute_sr=per_attribute,
        per_task=per_task,
        error_stats=error_stats,
        action_stats=action_stats,
        n_tasks=len(by_task),
        n_runs=len(results),
    )


# ---------------------------------------------------------------------------
# plain-text tables


def _fmt(value) -> str:
    return f"{round2(value):.2f}"


def _table(headers: list, rows: list) -> str:
    widths = [
        max(len(str(headers[i])), *(len(str(row[i])) for row in rows)) if rows else len(str(headers[i]))
        for i in range(len(headers))
    ]
    lines = ["  ".join(str(h).ljust(widths[i]) for i, h in enumerate(headers)).rstrip()]
    for row in rows:
        lines.append("  ".join(str(c).ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    return "\n".join(lines)


def render_summary_table(report: BenchmarkReport) -> str:
    flags = []
    if report.ser_denominator_zero:
        flags.append("SER denominator zero")
    if report.srr_denominator_zero:
        flags.append("SRR denominator zero")
    table = _table(
        ["SR", "PLWSR", "TP", "SRR", "SER"],
        [[_fmt(report.sr), _fmt(report.plwsr), _fmt(report.tp_mean),
          _fmt(report.srr), _fmt(report.ser)]],
    )
    if flags:
        table += "\n(" + "; ".join(flags) + ")"
    return table


def render_attribute_table(report: BenchmarkReport) -> str:
    row = []
    for attr in ATTRIBUTE_ORDER:
        value = report.per_attribute_sr.get(attr)
        row.append(_fmt(value) if value is not None else "-")
    return _table([ATTRIBUTE_HEADERS[a] for a in ATTRIBUTE_ORDER], [row])


def render_error_table(stats: PartitionStats, title: str) -> str:
    headers = ["", "L1", "L2", "L3", "L4", "L", "D1", "D2", "D",
               "F1", "F2", "F", "E1", "E2", "E", "All"]
    count_row = ["count"]
    pct_row = ["pct"]
    for category in CATEGORY_ORDER:
        for code in CODE_ORDER:
            if code.category is category:
                count_row.append(stats.count(code))
                pct_row.append(_fmt(stats.percent(code)))
        count_row.append(stats.category_count(category))
        pct_row.append(_fmt(stats.category_percent(category)))
    count_row.append(f"{stats.failed_steps}/{stats.total_steps}")
    pct_row.append(_fmt(stats.failed_step_share))
    return f"{title}\n" + _table(headers, [count_row, pct_row])


def render_action_table(action_stats: dict) -> str:
    headers = ["Action", "Attempts", "Successes", "SR", "P"]
    rows = []
    for action in [a for a in ActionType if a is not ActionType.END]:
        if action not in action_stats:
            continue
        entry = action_stats[action]
        rows.append([
            action.label, entry.attempts, entry.successes,
            _fmt(entry.sr), _fmt(action_error_share(action_stats, action)),
        ])
    return _table(headers, rows)
