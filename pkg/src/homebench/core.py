"""Domain types shared across the toolkit, plus the on-disk JSON schemas
for tasks, keypaths, and trajectory logs.

Everything here is a plain value type: parsing is stateless and parsed
objects are safe to share read-only across evaluation workers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional


# ---------------------------------------------------------------------------
# errors


class HomebenchError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(HomebenchError):
    """A document does not conform to its schema; the message names the
    offending path."""


class InvariantError(HomebenchError):
    """A structural rule that the public API promises to uphold was broken."""


class ConfigError(HomebenchError):
    """Bad or missing configuration (CLI exit code 2)."""


class EmptyKeypathSet(HomebenchError):
    """Task progress is undefined without at least one keypath."""


class MissingExpertLength(HomebenchError):
    """PLWSR needs an expert trajectory length for every task."""


class MissingTask(HomebenchError):
    """A trajectory log references a task id with no task file."""


class EmptyLexicon(HomebenchError):
    """Action corruption requires a non-empty lexicon."""


class PlannerTransportError(HomebenchError):
    """The planner endpoint could not be reached or answered garbage.

    When raised from a running episode, ``trajectory`` holds the partial
    trajectory collected so far.
    """

    def __init__(self, msg: str, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


class RewriterTransportError(HomebenchError):
    """A remote text rewriter failed; the affected rewrite is skipped."""


# ---------------------------------------------------------------------------
# names


_NAME_SEPS = re.compile(r"[\s\-_]+")


def normalize_name(raw: str) -> str:
    """Normalize an entity/spot name: lowercase, trimmed, with internal runs
    of whitespace, hyphens, or underscores collapsed to single underscores.

    Total and idempotent: normalize_name(normalize_name(x)) == normalize_name(x).
    """
    return _NAME_SEPS.sub("_", raw.strip().lower()).strip("_")


# ---------------------------------------------------------------------------
# closed enumerations


class ActionType(Enum):
    """The six skills the executor supports. Any other action string is a
    format violation (F1)."""

    GO_TO = "Go to"
    PICK = "Pick"
    PLACE = "Place"
    OPEN = "Open"
    CLOSE = "Close"
    END = "End"

    @property
    def label(self) -> str:
        return self.value

    @property
    def token(self) -> str:
        """Lowercase underscore form, used in schedule keys: "go_to"."""
        return self.value.lower().replace(" ", "_")


_ACTION_ALIASES = {
    "go_to": ActionType.GO_TO,
    "goto": ActionType.GO_TO,
    "pick": ActionType.PICK,
    "place": ActionType.PLACE,
    "put": ActionType.PLACE,
    "open": ActionType.OPEN,
    "close": ActionType.CLOSE,
    "end": ActionType.END,
}


def parse_action(raw: str) -> Optional[ActionType]:
    """Map an action string to the closed action set, or None if it is not
    one of ours. Matching ignores case and whitespace/underscore style."""
    return _ACTION_ALIASES.get(normalize_name(raw))


class ModelCategory(Enum):
    MANIPULATION = "Manipulation"
    NAVIGATION = "Navigation"
    UNIFIED = "Unified"


class ModelChoice(Enum):
    """Low-level models the planner may dispatch to."""

    M3 = "M3"
    RT1X = "RT-1-X"
    OCTO = "Octo"
    NOMAD = "NoMaD"
    PIXNAV = "PixNav"

    @property
    def label(self) -> str:
        return self.value

    @property
    def category(self) -> ModelCategory:
        return _MODEL_CATEGORIES[self]


_MODEL_CATEGORIES = {
    ModelChoice.M3: ModelCategory.UNIFIED,
    ModelChoice.RT1X: ModelCategory.MANIPULATION,
    ModelChoice.OCTO: ModelCategory.MANIPULATION,
    ModelChoice.NOMAD: ModelCategory.NAVIGATION,
    ModelChoice.PIXNAV: ModelCategory.NAVIGATION,
}

_MODEL_ALIASES = {
    "m3": ModelChoice.M3,
    "rt1x": ModelChoice.RT1X,
    "octo": ModelChoice.OCTO,
    "nomad": ModelChoice.NOMAD,
    "pixnav": ModelChoice.PIXNAV,
}


def parse_model(raw: str) -> Optional[ModelChoice]:
    """Map a model string to the closed model list, or None."""
    return _MODEL_ALIASES.get(normalize_name(raw).replace("_", ""))


class ErrorCategory(Enum):
    LOGICAL = "L"
    DISTANCE = "D"
    FORMAT = "F"
    EXECUTION = "E"


class ErrorCode(Enum):
    """Closed ten-value error taxonomy."""

    L1 = "L1"  # hand already full on pick/open/close
    L2 = "L2"  # hand empty on place
    L3 = "L3"  # pick from / place into a closed container
    L4 = "L4"  # illegal interaction target
    D1 = "D1"  # too far to reach
    D2 = "D2"  # too close to operate
    F1 = "F1"  # action or model outside the available lists
    F2 = "F2"  # target not present in the scene
    E1 = "E1"  # skill failed despite valid preconditions
    E2 = "E2"  # placement went wrong, object lost from hand

    @property
    def category(self) -> ErrorCategory:
        return ErrorCategory(self.value[0])


#: Canonical feedback message per error code. F2 and L4 deliberately share a
#: message; the structured code is authoritative when disambiguation matters.
CANONICAL_MESSAGES = {
    ErrorCode.L1: "the hand is full",
    ErrorCode.L2: "the hand is empty",
    ErrorCode.L3: "the container is closed, you should open it first",
    ErrorCode.L4: "please choose another object",
    ErrorCode.D1: "the target is far away",
    ErrorCode.D2: "the target is too close",
    ErrorCode.F1: "You should only choose actions in the list",
    ErrorCode.F2: "please choose another object",
    ErrorCode.E1: "the subtask is too difficult to perform",
    ErrorCode.E2: "the object is missing",
}


class TaskAttribute(Enum):
    SHORT_HORIZON = "short_horizon"
    LONG_HORIZON = "long_horizon"
    OPEN_ENDED = "open_ended"
    LOGICAL = "logical"
    HUMAN_STYLE = "human_style"


class StepStatus(Enum):
    SUCCESS = "success"
    FAILURE = "failure"


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class Subtask:
    """One executable decision: a validated action, target, and model.

    ``target`` is a normalized name and is empty exactly when the action
    is End.
    """

    action: ActionType
    target: str
    model: ModelChoice

    def __post_init__(self):
        if (self.target == "") != (self.action is ActionType.END):
            raise InvariantError(
                f"target must be non-empty iff action is not End "
                f"(got action={self.action.label!r}, target={self.target!r})"
            )


@dataclass(frozen=True)
class PlannerOutput:
    """A parsed planner emission.

    Field values are normalized strings. ``action`` and ``model`` are
    canonicalized when they belong to the known lists but are preserved
    verbatim otherwise, so invalid emissions (F1 steps) survive logging
    and round-trip intact. Membership checking is validation's job, not
    parsing's.
    """

    analysis: str
    action: str
    target: str
    model: str

    @property
    def action_type(self) -> Optional[ActionType]:
        return parse_action(self.action) if self.action else None

    @property
    def model_choice(self) -> Optional[ModelChoice]:
        return parse_model(self.model) if self.model else None

    @property
    def is_end(self) -> bool:
        return self.action_type is ActionType.END and self.target == ""

    @property
    def subtask(self) -> Optional[Subtask]:
        """Typed subtask, or None while the output has not passed
        validation (unknown action/model, or End with a target)."""
        action = self.action_type
        model = self.model_choice
        if action is None or model is None:
            return None
        if (self.target == "") != (action is ActionType.END):
            return None
        return Subtask(action, self.target, model)


def make_output(analysis: str, action: ActionType, target: str, model: ModelChoice) -> PlannerOutput:
    return PlannerOutput(analysis, action.label, normalize_name(target), model.label)


def make_end_output(analysis: str = "The task is complete.") -> PlannerOutput:
    """Canonical End emission (End carries no target; M3 is the uniform
    filler for the mandatory model field)."""
    return PlannerOutput(analysis, ActionType.END.label, "", ModelChoice.M3.label)


def serialize_output(output: PlannerOutput) -> str:
    """Single-line JSON form of a planner output, used verbatim in prompts,
    logs, and training data."""
    if output.is_end:
        subtask = [output.action]
    else:
        subtask = [output.action, output.target]
    return json.dumps(
        {"analysis": output.analysis, "subtask": subtask, "model": output.model},
        ensure_ascii=False,
    )


@dataclass(frozen=True)
class Inventory:
    """The agent's single-slot hand: zero or one held object."""

    held: Optional[str] = None

    @property
    def empty(self) -> bool:
        return self.held is None


@dataclass(frozen=True)
class Feedback:
    """Outcome of one executed step. ``code`` is present exactly on failure
    and ``message`` is then the code's canonical string."""

    status: StepStatus
    code: Optional[ErrorCode] = None
    message: str = ""

    def __post_init__(self):
        if self.status is StepStatus.FAILURE:
            if self.code is None:
                raise InvariantError("failure feedback requires an error code")
            if self.message != CANONICAL_MESSAGES[self.code]:
                raise InvariantError(
                    f"non-canonical message for {self.code.value}: {self.message!r}"
                )
        elif self.code is not None:
            raise InvariantError("success feedback must not carry an error code")

    @property
    def ok(self) -> bool:
        return self.status is StepStatus.SUCCESS


def failure(code: ErrorCode) -> Feedback:
    return Feedback(StepStatus.FAILURE, code, CANONICAL_MESSAGES[code])


SUCCESS = Feedback(StepStatus.SUCCESS)


@dataclass(frozen=True)
class StepRecord:
    """One planner turn: what was emitted and how it went.

    ``retries_used`` counts extra executor attempts within the step; each
    step gets at most three attempts total.
    """

    index: int
    output: PlannerOutput
    feedback: Feedback
    retries_used: int = 0

    def __post_init__(self):
        if self.index < 1:
            raise InvariantError(f"step index must be >= 1 (got {self.index})")
        if not 0 <= self.retries_used <= 2:
            raise InvariantError(f"retries_used must be 0..2 (got {self.retries_used})")


@dataclass(frozen=True)
class Trajectory:
    """An episode's ordered step records plus how it terminated.

    For a finished trajectory exactly one of the two termination flags is
    true, and End appears exactly when the planner terminated the episode,
    as the final step. Both flags false marks an episode that was cut off
    mid-flight (e.g. planner transport failure).
    """

    task_id: str
    steps: tuple[StepRecord, ...]
    terminated_by_end: bool
    terminated_by_budget: bool
    run_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for pos, step in enumerate(self.steps):
            if step.index != pos + 1:
                raise SchemaError(
                    f"steps[{pos}].index: expected {pos + 1}, got {step.index}"
                )
        if self.terminated_by_end and self.terminated_by_budget:
            raise InvariantError("trajectory cannot terminate by both end and budget")
        # A terminating End is a *valid, accepted* End emission; End-shaped
        # outputs rejected as F1 (bad model, stray target) do not terminate.
        end_positions = [
            pos for pos, step in enumerate(self.steps)
            if step.output.is_end and step.feedback.ok
        ]
        if end_positions and end_positions != [len(self.steps) - 1]:
            raise InvariantError("End must be the final step and appear at most once")
        if self.terminated_by_end:
            if not end_positions:
                raise InvariantError("terminated_by_end requires a final End step")
        elif end_positions:
            raise InvariantError("a trajectory containing End terminates by end")

    @property
    def finished(self) -> bool:
        return self.terminated_by_end or self.terminated_by_budget

    @property
    def ended(self) -> bool:
        return self.terminated_by_end


@dataclass(frozen=True)
class KeypathNode:
    action: ActionType
    target: str

    def __post_init__(self):
        if self.action is ActionType.END:
            raise InvariantError("keypath nodes never contain End")
        if not self.target:
            raise InvariantError("keypath nodes require a target")


Keypath = tuple  # tuple[KeypathNode, ...]


@dataclass(frozen=True)
class Task:
    """A benchmark task: instruction text, its attribute tags, the keypaths
    that define completion, the expert trajectory length, and which scene
    it runs in."""

    id: str
    instruction: str
    attributes: frozenset
    keypaths: tuple  # tuple[Keypath, ...]
    expert_length: int
    scene_ref: str

    def __post_init__(self):
        if not self.attributes:
            raise SchemaError(f"task {self.id!r}: attributes must be non-empty")
        if not self.keypaths:
            raise SchemaError(f"task {self.id!r}: keypaths must be non-empty")
        longest = max(len(k) for k in self.keypaths)
        if self.expert_length < longest:
            raise SchemaError(
                f"task {self.id!r}: expert_length {self.expert_length} is shorter "
                f"than the longest keypath ({longest} nodes)"
            )


# ---------------------------------------------------------------------------
# task documents


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def _parse_keypath_node(node, where: str) -> KeypathNode:
    if not isinstance(node, dict):
        raise SchemaError(f"{where}: keypath node must be an object")
    raw_action = str(_require(node, "action", where))
    action = parse_action(raw_action)
    if action is None:
        raise SchemaError(f"{where}.action: unknown action {raw_action!r}")
    if action is ActionType.END:
        raise SchemaError(f"{where}.action: keypath nodes never contain End")
    target = normalize_name(str(_require(node, "target", where)))
    if not target:
        raise SchemaError(f"{where}.target: empty target")
    return KeypathNode(action, target)


def parse_keypaths(raw, where: str = "keypaths") -> tuple:
    if not isinstance(raw, list) or not raw:
        raise SchemaError(f"{where}: expected a non-empty list of keypaths")
    keypaths = []
    for i, nodes in enumerate(raw):
        if not isinstance(nodes, list) or not nodes:
            raise SchemaError(f"{where}[{i}]: keypath must be a non-empty list")
        keypaths.append(tuple(
            _parse_keypath_node(node, f"{where}[{i}][{j}]")
            for j, node in enumerate(nodes)
        ))
    return tuple(keypaths)


def parse_task_file(data) -> Task:
    """Parse a task document (bytes or str). Raises SchemaError naming the
    offending path on any violation."""
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"task document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("task document must be a JSON object")

    task_id = str(_require(doc, "id", "task"))
    where = f"task {task_id!r}"
    instruction = str(_require(doc, "instruction", where))
    raw_attrs = _require(doc, "attributes", where)
    if not isinstance(raw_attrs, list) or not raw_attrs:
        raise SchemaError(f"{where}.attributes: expected a non-empty list")
    attributes = set()
    for attr in raw_attrs:
        try:
            attributes.add(TaskAttribute(str(attr)))
        except ValueError:
            raise SchemaError(f"{where}.attributes: unknown attribute {attr!r}") from None
    expert_length = _require(doc, "expert_length", where)
    if not isinstance(expert_length, int) or expert_length < 1:
        raise SchemaError(f"{where}.expert_length: expected a positive integer")
    scene_ref = str(_require(doc, "scene", where))
    keypaths = parse_keypaths(_require(doc, "keypaths", where), f"{where}.keypaths")
    return Task(task_id, instruction, frozenset(attributes), keypaths, expert_length, scene_ref)


def serialize_task(task: Task) -> str:
    """Canonical task document. parse/serialize round-trips byte-identically
    on canonically formatted documents."""
    doc = {
        "id": task.id,
        "instruction": task.instruction,
        "attributes": sorted(a.value for a in task.attributes),
        "expert_length": task.expert_length,
        "scene": task.scene_ref,
        "keypaths": [
            [{"action": n.action.label, "target": n.target} for n in kp]
            for kp in task.keypaths
        ],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# trajectory logs


def _parse_step(doc, pos: int) -> StepRecord:
    where = f"steps[{pos}]"
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected an object")
    index = _require(doc, "index", where)
    if not isinstance(index, int):
        raise SchemaError(f"{where}.index: expected an integer")
    analysis = str(_require(doc, "analysis", where))
    raw_action = str(_require(doc, "action", where))
    raw_target = str(_require(doc, "target", where))
    raw_model = str(_require(doc, "model", where))
    status_str = str(_require(doc, "status", where))
    try:
        status = StepStatus(status_str)
    except ValueError:
        raise SchemaError(f"{where}.status: unknown status {status_str!r}") from None

    code = None
    if status is StepStatus.FAILURE:
        code_str = _require(doc, "error_code", where)
        try:
            code = ErrorCode(str(code_str))
        except ValueError:
            raise SchemaError(f"{where}.error_code: unknown code {code_str!r}") from None
        message = doc.get("message", CANONICAL_MESSAGES[code])
        if message != CANONICAL_MESSAGES[code]:
            raise SchemaError(
                f"{where}.message: not the canonical message for {code.value}"
            )
    elif "error_code" in doc or "message" in doc:
        raise SchemaError(f"{where}: success steps carry no error_code/message")

    # F1 steps keep whatever string the planner emitted; everything else must
    # use the closed action/model lists.
    if code is ErrorCode.F1:
        action, target, model = raw_action, raw_target, raw_model
    else:
        action_type = parse_action(raw_action)
        if action_type is None:
            raise SchemaError(f"{where}.action: unknown action {raw_action!r}")
        model_choice = parse_model(raw_model)
        if model_choice is None:
            raise SchemaError(f"{where}.model: unknown model {raw_model!r}")
        action = action_type.label
        model = model_choice.label
        target = normalize_name(raw_target)
        if (target == "") != (action_type is ActionType.END):
            raise SchemaError(f"{where}.target: target must be non-empty iff action is not End")

    retries = _require(doc, "retries_used", where)
    if not isinstance(retries, int) or not 0 <= retries <= 2:
        raise SchemaError(f"{where}.retries_used: expected an integer in 0..2")

    output = PlannerOutput(analysis, action, target, model)
    try:
        feedback = Feedback(status, code, CANONICAL_MESSAGES[code] if code else "")
        return StepRecord(index, output, feedback, retries)
    except InvariantError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def parse_trajectory_log(data) -> Trajectory:
    """Parse a trajectory log (bytes or str).

    Raises SchemaError on malformed documents (including step index gaps)
    and InvariantError on structurally impossible trajectories such as an
    End step followed by more steps.
    """
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"trajectory log is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("trajectory log must be a JSON object")

    task_id = str(_require(doc, "task_id", "log"))
    run_index = _require(doc, "run_index", "log")
    if not isinstance(run_index, int) or run_index < 0:
        raise SchemaError("log.run_index: expected a non-negative integer")
    raw_steps = _require(doc, "steps", "log")
    if not isinstance(raw_steps, list):
        raise SchemaError("log.steps: expected a list")
    steps = [_parse_step(step, pos) for pos, step in enumerate(raw_steps)]
    for pos, step in enumerate(steps):
        if step.index != pos + 1:
            raise SchemaError(f"steps[{pos}].index: expected {pos + 1}, got {step.index} (gap)")

    terminated_by = str(_require(doc, "terminated_by", "log"))
    if terminated_by not in ("end", "budget"):
        raise SchemaError(f"log.terminated_by: expected 'end' or 'budget', got {terminated_by!r}")
    return Trajectory(
        task_id=task_id,
        steps=tuple(steps),
        terminated_by_end=terminated_by == "end",
        terminated_by_budget=terminated_by == "budget",
        run_index=run_index,
    )


def serialize_trajectory(trajectory: Trajectory) -> str:
    """Canonical trajectory log document (one trajectory per file)."""
    if not trajectory.finished:
        raise InvariantError("only finished trajectories can be serialized")
    steps = []
    for step in trajectory.steps:
        doc = {
            "index": step.index,
            "analysis": step.output.analysis,
            "action": step.output.action,
            "target": step.output.target,
            "model": step.output.model,
            "status": step.feedback.status.value,
        }
        if step.feedback.code is not None:
            doc["error_code"] = step.feedback.code.value
            doc["message"] = step.feedback.message
        doc["retries_used"] = step.retries_used
        steps.append(doc)
    doc = {
        "task_id": trajectory.task_id,
        "run_index": trajectory.run_index,
        "steps": steps,
        "terminated_by": "end" if trajectory.terminated_by_end else "budget",
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# directory helpers


def load_tasks(paths: Iterable, keypath_overlay: Optional[dict] = None) -> dict:
    """Load task files into an id-keyed dict.

    ``keypath_overlay`` optionally maps task id -> raw keypaths (the format
    of a standalone keypaths file); overlay entries replace the keypaths
    parsed from the task document.
    """
    tasks = {}
    for path in paths:
        task = parse_task_file(path.read_bytes())
        if keypath_overlay and task.id in keypath_overlay:
            keypaths = parse_keypaths(keypath_overlay[task.id], f"keypaths[{task.id!r}]")
            task = Task(task.id, task.instruction, task.attributes,
                        keypaths, task.expert_length, task.scene_ref)
        if task.id in tasks:
            raise SchemaError(f"duplicate task id {task.id!r}")
        tasks[task.id] = task
    return tasks
