"""Shared builders for tests: compact trajectory/task/scene construction."""

from __future__ import annotations

import itertools
import random

import pytest

from homebench.core import (
    ActionType,
    ErrorCode,
    Feedback,
    KeypathNode,
    PlannerOutput,
    StepRecord,
    StepStatus,
    Task,
    TaskAttribute,
    Trajectory,
    failure,
    parse_action,
)

SUCCESS = Feedback(StepStatus.SUCCESS)

MODEL_FOR = {
    ActionType.GO_TO: "NoMaD",
    ActionType.PICK: "RT-1-X",
    ActionType.PLACE: "RT-1-X",
    ActionType.OPEN: "Octo",
    ActionType.CLOSE: "Octo",
    ActionType.END: "M3",
}


def step(index, action, target, ok=True, code=None, retries=0, analysis="", model=None):
    """Build a StepRecord from a compact spec. ``action`` may be an
    ActionType, a canonical label, or a raw invalid string (F1 steps)."""
    if isinstance(action, ActionType):
        action_type = action
    else:
        action_type = parse_action(action)
    if action_type is not None:
        label = action_type.label
        model = model or MODEL_FOR[action_type]
    else:
        label = action  # raw junk, only valid on F1 steps
        model = model or ""
    output = PlannerOutput(analysis or f"do {label} {target}".strip(), label, target, model)
    if ok:
        feedback = SUCCESS
    else:
        feedback = failure(code or ErrorCode.E1)
    return StepRecord(index, output, feedback, retries)


def traj(specs, task_id="t1", run_index=0, budget=False):
    """Build a finished trajectory from (action, target, ok[, code]) specs.
    Appends an End step unless ``budget`` is true."""
    steps = []
    for i, spec in enumerate(specs):
        action, target, ok = spec[0], spec[1], spec[2]
        code = spec[3] if len(spec) > 3 else None
        steps.append(step(i + 1, action, target, ok=ok, code=code))
    if not budget:
        steps.append(step(len(steps) + 1, ActionType.END, "", ok=True))
    return Trajectory(
        task_id=task_id,
        steps=tuple(steps),
        terminated_by_end=not budget,
        terminated_by_budget=budget,
        run_index=run_index,
    )


def node(action, target):
    if not isinstance(action, ActionType):
        action = parse_action(action)
    return KeypathNode(action, target)


def make_task(task_id="t1", keypaths=None, expert_length=None, scene="kitchen_home",
              attributes=(TaskAttribute.SHORT_HORIZON,), instruction="do the thing"):
    keypaths = keypaths or ((node(ActionType.PICK, "apple"),),)
    longest = max(len(k) for k in keypaths)
    return Task(
        id=task_id,
        instruction=instruction,
        attributes=frozenset(attributes),
        keypaths=tuple(tuple(k) for k in keypaths),
        expert_length=expert_length or longest,
        scene_ref=scene,
    )


def prefix_subsequence_oracle(pairs, keypath):
    """Independent check: length of the longest prefix of ``keypath`` that
    occurs as a subsequence of ``pairs``, found by exhaustive enumeration of
    index combinations (no greedy scanning)."""
    n = len(pairs)
    for p in range(len(keypath), -1, -1):
        for combo in itertools.combinations(range(n), p):
            if all(
                pairs[idx] == (keypath[j].action, keypath[j].target)
                for j, idx in enumerate(combo)
            ):
                return p
    return 0


ACTIONS = [ActionType.GO_TO, ActionType.PICK, ActionType.PLACE, ActionType.OPEN]
TARGETS = ["apple", "drawer", "sofa"]
MODELS = ["M3", "RT-1-X", "Octo", "NoMaD", "PixNav"]


def random_trajectory(rng: random.Random, max_steps=12, task_id="t1", run_index=0):
    n = rng.randrange(0, max_steps + 1)
    steps = []
    for i in range(n):
        action = rng.choice(ACTIONS)
        steps.append(step(
            i + 1, action, rng.choice(TARGETS),
            ok=rng.random() < 0.6,
            code=rng.choice(list(ErrorCode)),
            analysis=f"step {i + 1} of {task_id}/{run_index}",
            model=rng.choice(MODELS),
        ))
    budget = rng.random() < 0.4
    if not budget:
        steps.append(step(len(steps) + 1, ActionType.END, "", ok=True,
                          analysis=f"end of {task_id}/{run_index}"))
    return Trajectory(
        task_id=task_id,
        steps=tuple(steps),
        terminated_by_end=not budget,
        terminated_by_budget=budget,
        run_index=run_index,
    )


def random_keypaths(rng: random.Random, max_paths=4, max_nodes=5):
    paths = []
    for _ in range(rng.randrange(1, max_paths + 1)):
        length = rng.randrange(1, max_nodes + 1)
        paths.append(tuple(
            node(rng.choice(ACTIONS), rng.choice(TARGETS)) for _ in range(length)
        ))
    return tuple(paths)


@pytest.fixture
def rng():
    return random.Random(20240817)
