"""The planner/executor protocol engine: assemble instructions, parse and
validate planner emissions, apply feedback to episode state, enforce step
budgets, and drive whole episodes and benchmarks.

One episode is strictly sequential; distinct episodes are independent and
may run concurrently as long as they never share a scene or state.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Optional, Protocol, Sequence

from .core import (
    SUCCESS,
    ActionType,
    ErrorCode,
    Feedback,
    HomebenchError,
    Inventory,
    InvariantError,
    PlannerOutput,
    PlannerTransportError,
    StepRecord,
    Task,
    Trajectory,
    failure,
)
from . import sim
from .sim import ExecOutcome, Scene, execute, load_scene, observe


def _load_text(name: str) -> str:
    return resources.files("homebench").joinpath(name).read_text(encoding="utf-8")


DEFAULT_SYSTEM_INFO = _load_text("templates/system.txt").strip()
DEFAULT_TEMPLATE = _load_text("templates/default.txt")

OBSERVATIONS_UNAVAILABLE = "(observations unavailable)"


# ---------------------------------------------------------------------------
# instruction assembly


@dataclass(frozen=True)
class Instruction:
    """One fully rendered planner prompt, kept in named parts so clients can
    split it into chat roles. Equal episode states render to byte-identical
    instructions.

    ``images`` carries optional observation image references (paths/URLs).
    The simulator is text-only and never sets it; it exists so logs from
    image-producing environments stay usable with the remote client.
    """

    system: str
    task: str
    inventory: str
    history: str
    feedback: str
    observations: str
    images: tuple = ()

    @property
    def text(self) -> str:
        return render_template(DEFAULT_TEMPLATE, self)

    @property
    def feedback_code(self) -> Optional[ErrorCode]:
        """Error code embedded in the feedback line, if the last step failed."""
        if self.feedback.startswith("failure ("):
            token = self.feedback[len("failure ("):].split(")", 1)[0]
            try:
                return ErrorCode(token)
            except ValueError:
                return None
        return None


def render_template(template: str, instruction: Instruction) -> str:
    """Fill a prompt template. Templates are plain text with any of the
    named placeholders {system} {task} {inventory} {history} {feedback}
    {observations}; literal braces must be doubled."""
    return template.format(
        system=instruction.system,
        task=instruction.task,
        inventory=instruction.inventory,
        history=instruction.history,
        feedback=instruction.feedback,
        observations=instruction.observations,
    )


def describe_output(output: PlannerOutput) -> str:
    if not output.action:
        return "(unparseable output)"
    return f"{output.action} {output.target}".rstrip()


def render_feedback(feedback: Optional[Feedback]) -> str:
    if feedback is None:
        return "none"
    if feedback.ok:
        return "success"
    return f"failure ({feedback.code.value}): {feedback.message}"


def render_history(entries: Sequence, skip_failed: bool = False) -> str:
    """Numbered step summaries. Analysis text is deliberately left out so
    long episodes do not balloon the prompt; only what was attempted and how
    it went is replayed."""
    lines = []
    for output, feedback in entries:
        if skip_failed and not feedback.ok:
            continue
        lines.append(
            f"{len(lines) + 1}. {describe_output(output)} -> {render_feedback(feedback)}"
        )
    return "\n".join(lines) if lines else "none"


def render_observations(observations: Optional[tuple]) -> str:
    if observations is None:
        return OBSERVATIONS_UNAVAILABLE
    return "\n".join(
        f"{direction}: {text}"
        for direction, text in zip(sim.DIRECTIONS, observations)
    )


@dataclass
class EpisodeState:
    """Mutable per-episode protocol state. ``system_info`` and ``task_text``
    never change within an episode; everything else evolves with feedback."""

    system_info: str
    task_text: str
    inventory: Inventory = field(default_factory=Inventory)
    history: list = field(default_factory=list)  # [(PlannerOutput, Feedback)]
    last_feedback: Optional[Feedback] = None
    observations: Optional[tuple] = None
    budget_remaining: int = 20


def assemble_instruction(state: EpisodeState, skip_failed_history: bool = False) -> Instruction:
    """Deterministic instruction for the current state. No scene state leaks
    into the prompt beyond the observation texts."""
    return Instruction(
        system=state.system_info,
        task=state.task_text,
        inventory=state.inventory.held if state.inventory.held else "empty",
        history=render_history(state.history, skip_failed=skip_failed_history),
        feedback=render_feedback(state.last_feedback),
        observations=render_observations(state.observations),
    )


# ---------------------------------------------------------------------------
# output parsing and validation


class ParseFailureReason(Enum):
    NO_STRUCTURED_OBJECT = "NoStructuredObject"
    MISSING_FIELD = "MissingField"
    MALFORMED_SUBTASK = "MalformedSubtask"


@dataclass(frozen=True)
class ParseFailure:
    reason: ParseFailureReason
    detail: str = ""
    raw: str = ""

    def __str__(self):
        if self.detail:
            return f"{self.reason.value}({self.detail})"
        return self.reason.value


def _extract_object(text: str) -> Optional[dict]:
    """Lenient extraction: find the first decodable JSON object anywhere in
    the text, skipping surrounding prose and code fences."""
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text[idx:])
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj
        idx = text.find("{", idx + 1)
    return None


def _scalar(value) -> Optional[str]:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, float, bool)):
        return str(value)
    return None


def parse_planner_output(raw: str):
    """Two-stage parse of arbitrary planner text.

    Stage one leniently locates a JSON object; stage two requires the
    analysis/subtask/model fields and a subtask of the shape
    [action] / [action, target] / {"action": ..., "target": ...}.
    Returns a PlannerOutput (fields normalized but not yet checked against
    the closed lists) or a ParseFailure value.
    """
    from .core import normalize_name, parse_action, parse_model

    obj = _extract_object(raw)
    if obj is None:
        return ParseFailure(ParseFailureReason.NO_STRUCTURED_OBJECT, raw=raw)
    for name in ("analysis", "subtask", "model"):
        if name not in obj:
            return ParseFailure(ParseFailureReason.MISSING_FIELD, name, raw)
    analysis = _scalar(obj["analysis"])
    model_raw = _scalar(obj["model"])
    if analysis is None:
        return ParseFailure(ParseFailureReason.MISSING_FIELD, "analysis", raw)
    if model_raw is None:
        return ParseFailure(ParseFailureReason.MISSING_FIELD, "model", raw)

    subtask = obj["subtask"]
    if isinstance(subtask, dict):
        action_raw = _scalar(subtask.get("action"))
        target_raw = _scalar(subtask.get("target", ""))
    elif isinstance(subtask, list) and 1 <= len(subtask) <= 2:
        action_raw = _scalar(subtask[0])
        target_raw = _scalar(subtask[1]) if len(subtask) == 2 else ""
    else:
        return ParseFailure(ParseFailureReason.MALFORMED_SUBTASK, raw=raw)
    if action_raw is None or target_raw is None:
        return ParseFailure(ParseFailureReason.MALFORMED_SUBTASK, raw=raw)

    action_type = parse_action(action_raw)
    model_choice = parse_model(model_raw)
    return PlannerOutput(
        analysis=analysis,
        action=action_type.label if action_type else action_raw.strip(),
        target=normalize_name(target_raw),
        model=model_choice.label if model_choice else model_raw.strip(),
    )


def validate_output(output: PlannerOutput) -> Optional[Feedback]:
    """Screen a parsed output against the closed action/model lists.

    Returns None when the output is dispatchable, or an F1 failure value
    when the action or model is unknown, End carries a target, or a
    non-End action lacks one. Scene grounding (F2) is the executor's job,
    never checked here.
    """
    action = output.action_type
    if action is None or output.model_choice is None:
        return failure(ErrorCode.F1)
    if (output.target == "") != (action is ActionType.END):
        return failure(ErrorCode.F1)
    return None


# ---------------------------------------------------------------------------
# state transitions


def _plain(feedback: Feedback) -> Feedback:
    return Feedback(feedback.status, feedback.code, feedback.message)


def apply_feedback(state: EpisodeState, output: PlannerOutput, feedback: Feedback) -> EpisodeState:
    """Fold one executed step into the episode state.

    Inventory follows the action type: a successful Pick fills the hand, a
    successful Place empties it, an E2 failure adopts the executor's
    authoritative correction (the hand ends up empty), and everything else
    leaves it alone. Observations refresh whenever the executor supplied
    post-step views.
    """
    if feedback.ok:
        action = output.action_type
        if action is ActionType.PICK:
            if not state.inventory.empty:
                raise InvariantError(
                    "executor reported a successful Pick while the hand was full"
                )
            state.inventory = Inventory(output.target)
        elif action is ActionType.PLACE:
            state.inventory = Inventory()
    elif feedback.code is ErrorCode.E2:
        correction = getattr(feedback, "inventory_correction", None)
        state.inventory = correction if correction is not None else Inventory()

    plain = _plain(feedback)
    state.history.append((output, plain))
    state.last_feedback = plain
    if isinstance(feedback, ExecOutcome):
        state.observations = feedback.observations
    return state


# ---------------------------------------------------------------------------
# episodes


class Planner(Protocol):
    def next(self, instruction: Instruction) -> str:  # pragma: no cover - protocol
        ...


def run_episode(
    scene: Scene,
    planner,
    task: Task,
    budget: int = 20,
    retries: int = 3,
    run_index: int = 0,
    system_info: Optional[str] = None,
    transcript: Optional[list] = None,
) -> Trajectory:
    """Drive one episode to termination.

    Every planner query consumes one budget step, including emissions that
    fail to parse or validate (logged as F1). Executor attempts within a
    step retry only on E1, up to ``retries`` attempts total; logical,
    distance, and format failures are deterministic for a given state, so
    they are final immediately. The episode stops at a valid End or when
    the budget runs out.

    If the planner transport fails, the raised error carries the partial
    trajectory on its ``trajectory`` attribute.
    """
    state = EpisodeState(
        system_info=system_info if system_info is not None else DEFAULT_SYSTEM_INFO,
        task_text=task.instruction,
        observations=observe(scene),
        budget_remaining=budget,
    )
    steps: list = []
    terminated_by_end = False

    while state.budget_remaining > 0:
        instruction = assemble_instruction(state)
        try:
            raw = planner.next(instruction)
        except PlannerTransportError as exc:
            exc.trajectory = Trajectory(
                task.id, tuple(steps), False, False, run_index=run_index
            )
            raise
        if transcript is not None:
            transcript.append((instruction.text, raw))

        index = len(steps) + 1
        parsed = parse_planner_output(raw)
        if isinstance(parsed, ParseFailure):
            output = PlannerOutput(analysis=raw, action="", target="", model="")
            feedback: Feedback = failure(ErrorCode.F1)
            retries_used = 0
        else:
            output = parsed
            verdict = validate_output(parsed)
            if verdict is not None:
                feedback = verdict
                retries_used = 0
            elif parsed.is_end:
                feedback = SUCCESS
                retries_used = 0
            else:
                subtask = parsed.subtask
                attempts = 0
                while True:
                    attempts += 1
                    outcome = execute(scene, subtask, state.inventory)
                    if outcome.ok or outcome.code is not ErrorCode.E1 or attempts >= retries:
                        break
                feedback = outcome
                retries_used = attempts - 1

        steps.append(StepRecord(index, output, _plain(feedback), retries_used))
        apply_feedback(state, output, feedback)
        state.budget_remaining -= 1
        if not isinstance(parsed, ParseFailure) and parsed.is_end and feedback.ok:
            terminated_by_end = True
            break

    return Trajectory(
        task_id=task.id,
        steps=tuple(steps),
        terminated_by_end=terminated_by_end,
        terminated_by_budget=not terminated_by_end,
        run_index=run_index,
    )


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from arbitrary parts; stable across
    processes and platforms (unlike hash())."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class RunResult:
    """One benchmark episode: its trajectory (possibly partial) and the
    transport error that interrupted it, if any."""

    task_id: str
    run_index: int
    trajectory: Optional[Trajectory]
    error: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.error is None and self.trajectory is not None


def run_benchmark(
    tasks: Sequence[Task],
    planner_factory,
    scene_docs: dict,
    runs_per_task: int = 3,
    budget: int = 20,
    retries: int = 3,
    seed: Optional[int] = None,
    jobs: int = 1,
    system_info: Optional[str] = None,
    progress=None,
) -> list:
    """Run every task ``runs_per_task`` times, each episode against a fresh
    scene and fresh state.

    ``planner_factory(task, run_index)`` must hand back a planner that is
    private to that episode. Transport failures are recorded on their
    RunResult and the benchmark continues. Results come back in stable
    (task order, run index) order regardless of ``jobs``.
    """
    specs = [
        (task, run_index)
        for task in tasks
        for run_index in range(runs_per_task)
    ]

    def one(spec):
        task, run_index = spec
        doc = scene_docs.get(task.scene_ref)
        if doc is None:
            raise HomebenchError(f"task {task.id!r}: unknown scene {task.scene_ref!r}")
        scene_seed = None if seed is None else stable_seed(seed, task.id, run_index)
        scene = load_scene(doc, seed=scene_seed)
        planner = planner_factory(task, run_index)
        try:
            trajectory = run_episode(
                scene, planner, task,
                budget=budget, retries=retries, run_index=run_index,
                system_info=system_info,
            )
            result = RunResult(task.id, run_index, trajectory)
        except PlannerTransportError as exc:
            result = RunResult(task.id, run_index, exc.trajectory, error=str(exc))
        if progress is not None:
            progress(result)
        return result

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, specs))
    return [one(spec) for spec in specs]


# ---------------------------------------------------------------------------
# log replay


def replay_instructions(
    trajectory: Trajectory,
    task: Task,
    scene: Optional[Scene] = None,
    system_info: Optional[str] = None,
    skip_failed_history: bool = False,
) -> list:
    """Reconstruct the instruction that preceded each logged step.

    Inventory, feedback, and history fold directly from the log. The
    observation blocks fold too when a fresh copy of the task's scene is
    supplied (logged successful mutations replay deterministically against
    it); without one they render as a fixed placeholder.

    ``skip_failed_history`` renders each prompt's history without failed
    steps, which is how supervised training prompts are built.
    """
    state = EpisodeState(
        system_info=system_info if system_info is not None else DEFAULT_SYSTEM_INFO,
        task_text=task.instruction,
        observations=observe(scene) if scene is not None else None,
        budget_remaining=len(trajectory.steps),
    )
    instructions = []
    for step in trajectory.steps:
        instructions.append(
            assemble_instruction(state, skip_failed_history=skip_failed_history)
        )
        feedback: Feedback = step.feedback
        if scene is not None:
            if step.feedback.ok and not step.output.is_end:
                subtask = step.output.subtask
                if subtask is not None:
                    sim.replay_step_mutation(
                        scene, subtask.action, subtask.target, state.inventory.held
                    )
            elif step.feedback.code is ErrorCode.E2:
                sim.relocate_lost_object(scene, state.inventory.held)
            feedback = ExecOutcome(
                step.feedback.status, step.feedback.code, step.feedback.message,
                observations=observe(scene),
                inventory_correction=Inventory() if step.feedback.code is ErrorCode.E2 else None,
            )
        # the log is authoritative in replay: a successful Pick overwrites
        # whatever the folded hand state says, even for histories this
        # executor could not have produced
        if (
            step.feedback.ok
            and step.output.action_type is ActionType.PICK
            and not state.inventory.empty
        ):
            state.inventory = Inventory()
        apply_feedback(state, step.output, feedback)
        state.budget_remaining -= 1
    return instructions
