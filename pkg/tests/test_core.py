import json
import random

import pytest

from homebench.core import (
    ActionType,
    ErrorCode,
    InvariantError,
    ModelCategory,
    ModelChoice,
    SchemaError,
    Trajectory,
    normalize_name,
    parse_action,
    parse_model,
    parse_task_file,
    parse_trajectory_log,
    serialize_task,
    serialize_trajectory,
)

from conftest import step, traj


# ---------------------------------------------------------------------------
# name normalization


def test_normalize_basic():
    assert normalize_name("Sugar Box") == "sugar_box"


def test_normalize_idempotent():
    assert normalize_name("sugar_box") == "sugar_box"


def test_normalize_whitespace_collapse():
    assert normalize_name("  brown  table ") == "brown_table"


def test_normalize_hyphens_and_case():
    assert normalize_name("TV-Stand") == "tv_stand"
    assert normalize_name("a - b") == "a_b"


def test_normalize_random_idempotence_and_case():
    rng = random.Random(3)
    alphabet = "aB -_Z8"
    for _ in range(500):
        raw = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 12)))
        once = normalize_name(raw)
        assert normalize_name(once) == once
        assert normalize_name(raw.upper()) == once


# ---------------------------------------------------------------------------
# closed enumerations


def test_action_aliases():
    assert parse_action("Go to") is ActionType.GO_TO
    assert parse_action("goto") is ActionType.GO_TO
    assert parse_action("GO_TO") is ActionType.GO_TO
    assert parse_action("put") is ActionType.PLACE
    assert parse_action("grab") is None
    assert parse_action("Jump") is None


def test_model_aliases_and_categories():
    assert parse_model("RT-1-X") is ModelChoice.RT1X
    assert parse_model("rt1x") is ModelChoice.RT1X
    assert parse_model("NoMaD") is ModelChoice.NOMAD
    assert parse_model("GPT-hands") is None
    assert ModelChoice.RT1X.category is ModelCategory.MANIPULATION
    assert ModelChoice.OCTO.category is ModelCategory.MANIPULATION
    assert ModelChoice.NOMAD.category is ModelCategory.NAVIGATION
    assert ModelChoice.PIXNAV.category is ModelCategory.NAVIGATION
    assert ModelChoice.M3.category is ModelCategory.UNIFIED


def test_error_code_categories():
    for code in ErrorCode:
        assert code.category.value == code.value[0]


# ---------------------------------------------------------------------------
# task documents


def task_doc(**overrides):
    doc = {
        "id": "sample",
        "instruction": "put the can in the drawer",
        "attributes": ["short_horizon"],
        "expert_length": 4,
        "scene": "kitchen_home",
        "keypaths": [
            [{"action": "Open", "target": "drawer"},
             {"action": "Pick", "target": "short_can"},
             {"action": "Place", "target": "drawer"}],
            [{"action": "Pick", "target": "short_can"},
             {"action": "Place", "target": "drawer"}],
        ],
    }
    doc.update(overrides)
    return doc


def test_parse_task_two_keypaths():
    task = parse_task_file(json.dumps(task_doc()))
    assert len(task.keypaths) == 2
    assert task.keypaths[0][0].target == "drawer"


def test_parse_task_unknown_keypath_action():
    doc = task_doc()
    doc["keypaths"][0][1]["action"] = "grab"
    with pytest.raises(SchemaError, match="grab"):
        parse_task_file(json.dumps(doc))


def test_parse_task_expert_length_violation():
    doc = task_doc(expert_length=2)  # longest keypath has 3 nodes
    with pytest.raises(SchemaError, match="expert_length"):
        parse_task_file(json.dumps(doc))


def test_parse_task_empty_keypaths():
    with pytest.raises(SchemaError):
        parse_task_file(json.dumps(task_doc(keypaths=[])))


def test_parse_task_missing_field_names_path():
    doc = task_doc()
    del doc["instruction"]
    with pytest.raises(SchemaError, match="instruction"):
        parse_task_file(json.dumps(doc))


def test_parse_task_end_in_keypath_rejected():
    doc = task_doc()
    doc["keypaths"][0].append({"action": "End", "target": "x"})
    with pytest.raises(SchemaError, match="End"):
        parse_task_file(json.dumps(doc))


def test_parse_task_normalizes_node_targets():
    doc = task_doc()
    doc["keypaths"][0][0]["target"] = "Kitchen Drawer"
    task = parse_task_file(json.dumps(doc))
    assert task.keypaths[0][0].target == "kitchen_drawer"


def test_task_roundtrip_byte_identical():
    text = serialize_task(parse_task_file(json.dumps(task_doc())))
    assert serialize_task(parse_task_file(text)) == text


# ---------------------------------------------------------------------------
# trajectory logs


def log_doc(statuses=("success",) * 4, terminated_by="end"):
    steps = []
    for i, status in enumerate(statuses):
        entry = {
            "index": i + 1,
            "analysis": f"step {i + 1}",
            "action": "Pick",
            "target": "apple",
            "model": "RT-1-X",
            "status": status,
        }
        if status == "failure":
            entry["error_code"] = "E1"
            entry["message"] = "the subtask is too difficult to perform"
        entry["retries_used"] = 0
        steps.append(entry)
    if terminated_by == "end":
        steps.append({
            "index": len(steps) + 1, "analysis": "done", "action": "End",
            "target": "", "model": "M3", "status": "success", "retries_used": 0,
        })
    return {"task_id": "sample", "run_index": 0, "steps": steps,
            "terminated_by": terminated_by}


def test_parse_log_end_termination():
    trajectory = parse_trajectory_log(json.dumps(log_doc()))
    assert trajectory.terminated_by_end
    assert not trajectory.terminated_by_budget
    assert len(trajectory.steps) == 5


def test_parse_log_budget_termination():
    doc = log_doc(statuses=("success",) * 20, terminated_by="budget")
    trajectory = parse_trajectory_log(json.dumps(doc))
    assert trajectory.terminated_by_budget
    assert len(trajectory.steps) == 20


def test_parse_log_index_gap():
    doc = log_doc()
    doc["steps"][2]["index"] = 4
    with pytest.raises(SchemaError, match="gap|expected 3"):
        parse_trajectory_log(json.dumps(doc))


def test_parse_log_end_mid_trajectory():
    doc = log_doc()
    doc["steps"][1].update(action="End", target="", model="M3")
    with pytest.raises(InvariantError):
        parse_trajectory_log(json.dumps(doc))


def test_parse_log_f1_keeps_raw_strings():
    doc = log_doc(statuses=("success",))
    doc["steps"].insert(0, {
        "index": 1, "analysis": "??", "action": "Dance", "target": "floor",
        "model": "GPT-hands", "status": "failure", "error_code": "F1",
        "message": "You should only choose actions in the list", "retries_used": 0,
    })
    for i, entry in enumerate(doc["steps"]):
        entry["index"] = i + 1
    trajectory = parse_trajectory_log(json.dumps(doc))
    assert trajectory.steps[0].output.action == "Dance"
    assert trajectory.steps[0].output.model == "GPT-hands"


def test_parse_log_unknown_action_outside_f1():
    doc = log_doc()
    doc["steps"][0]["action"] = "Dance"
    with pytest.raises(SchemaError, match="Dance"):
        parse_trajectory_log(json.dumps(doc))


def test_parse_log_wrong_canonical_message():
    doc = log_doc(statuses=("failure",))
    doc["steps"][0]["message"] = "too hard"
    with pytest.raises(SchemaError, match="canonical"):
        parse_trajectory_log(json.dumps(doc))


def test_parse_log_retries_bound():
    doc = log_doc()
    doc["steps"][0]["retries_used"] = 3
    with pytest.raises(SchemaError, match="retries_used"):
        parse_trajectory_log(json.dumps(doc))


def test_log_roundtrip_byte_identical():
    text = serialize_trajectory(parse_trajectory_log(json.dumps(log_doc())))
    assert serialize_trajectory(parse_trajectory_log(text)) == text


def test_log_roundtrip_with_failures_and_f1():
    trajectory = traj([
        ("Go to", "drawer", True),
        ("dance", "floor", False, ErrorCode.F1),
        ("Pick", "apple", False, ErrorCode.D1),
        ("Pick", "apple", True),
    ])
    text = serialize_trajectory(trajectory)
    assert serialize_trajectory(parse_trajectory_log(text)) == text


# ---------------------------------------------------------------------------
# trajectory construction invariants


def test_trajectory_end_must_be_final():
    steps = (
        step(1, ActionType.END, "", ok=True),
        step(2, ActionType.PICK, "apple", ok=True),
    )
    with pytest.raises(InvariantError):
        Trajectory("t", steps, terminated_by_end=True, terminated_by_budget=False)


def test_trajectory_flags_exclusive():
    steps = (step(1, ActionType.PICK, "apple", ok=True),)
    with pytest.raises(InvariantError):
        Trajectory("t", steps, terminated_by_end=True, terminated_by_budget=True)


def test_trajectory_end_flag_requires_end_step():
    steps = (step(1, ActionType.PICK, "apple", ok=True),)
    with pytest.raises(InvariantError):
        Trajectory("t", steps, terminated_by_end=True, terminated_by_budget=False)


def test_trajectory_rejected_f1_end_is_not_termination():
    # an End-shaped emission rejected as F1 (e.g. bad model) must not count
    # as the terminating End
    steps = (
        step(1, "End", "kitchen", ok=False, code=ErrorCode.F1),
        step(2, ActionType.PICK, "apple", ok=True),
    )
    trajectory = Trajectory("t", steps, terminated_by_end=False, terminated_by_budget=True)
    assert trajectory.terminated_by_budget
