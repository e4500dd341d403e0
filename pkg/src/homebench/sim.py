"""Desk-scale discrete household world: executes the six skills against a
small entity graph, produces every error code with its canonical message,
and renders four-direction textual observations.

A Scene is mutable single-episode state; give each episode its own copy
(reload from the document) and never share one across threads.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .core import (
    ActionType,
    CANONICAL_MESSAGES,
    ErrorCode,
    Feedback,
    Inventory,
    SchemaError,
    StepStatus,
    Subtask,
    failure,
    normalize_name,
)


class DuplicateName(SchemaError):
    """Two scene entities normalize to the same name."""


class EntityKind(Enum):
    OBJECT = "object"
    CONTAINER = "container"
    SPOT = "spot"


class OpenState(Enum):
    OPEN = "open"
    CLOSED = "closed"


class DistanceBand(Enum):
    TOO_CLOSE = "too_close"
    REACHABLE = "reachable"
    TOO_FAR = "too_far"


DIRECTIONS = ("front", "left", "back", "right")

#: Location marker for an object currently in the agent's hand.
HAND = "@hand"

# Demo-scene failure rates, applied per attempt when a scene document does
# not pin its own. Test scenes should set explicit zeros and drive failures
# through the outcome schedule instead.
DEFAULT_RATES = {"e1_manipulation": 0.1, "e1_navigation": 0.05, "e2_place": 0.05}


@dataclass
class Entity:
    name: str
    kind: EntityKind
    location: str  # spot or container name; spots use ""; held objects use HAND
    open_state: Optional[OpenState] = None
    interactive: bool = True

    def __post_init__(self):
        if (self.open_state is not None) != (self.kind is EntityKind.CONTAINER):
            raise SchemaError(
                f"entity {self.name!r}: open_state belongs to containers only"
            )


@dataclass
class AgentPose:
    at: str  # current spot ("" in a degenerate empty scene)
    band_overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExecOutcome(Feedback):
    """Executor feedback plus the post-step observations. ``inventory_correction``
    is set only on E2, where the executor reports the authoritative hand state
    after a botched placement."""

    observations: tuple = ("", "", "", "")
    inventory_correction: Optional[Inventory] = None


@dataclass
class Scene:
    id: str
    entities: dict  # normalized name -> Entity (spots included), insertion-ordered
    spot_order: tuple
    directions: dict  # spot -> {direction -> tuple of spot names}
    agent: AgentPose
    schedule: dict  # "action_token target" -> list of pending outcome strings
    rates: dict
    seed: int
    rng: random.Random

    # -- queries ------------------------------------------------------------

    def spot_of(self, name: str) -> Optional[str]:
        """Root spot an entity sits at (following container nesting), or None
        for a held object."""
        entity = self.entities[name]
        if entity.kind is EntityKind.SPOT:
            return name
        seen = set()
        location = entity.location
        while location not in (HAND, ""):
            if location in seen:
                raise SchemaError(f"entity {name!r}: containment cycle at {location!r}")
            seen.add(location)
            parent = self.entities[location]
            if parent.kind is EntityKind.SPOT:
                return location
            location = parent.location
        return None

    def band(self, name: str) -> DistanceBand:
        if name in self.agent.band_overrides:
            return self.agent.band_overrides[name]
        root = self.spot_of(name)
        if root is None:  # in hand
            return DistanceBand.REACHABLE
        return DistanceBand.REACHABLE if root == self.agent.at else DistanceBand.TOO_FAR


# ---------------------------------------------------------------------------
# loading


def _parse_band(raw: str, where: str) -> DistanceBand:
    try:
        return DistanceBand(str(raw))
    except ValueError:
        raise SchemaError(f"{where}: unknown distance band {raw!r}") from None


def load_scene(data, seed: Optional[int] = None) -> Scene:
    """Build a Scene from a scene document (dict, JSON str, or bytes).

    ``seed`` overrides the document's seed, letting a benchmark derive a
    fresh deterministic stream per run.
    """
    if isinstance(data, (bytes, str)):
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"scene document is not valid JSON: {exc}") from exc
    else:
        doc = data
    if not isinstance(doc, dict):
        raise SchemaError("scene document must be a JSON object")

    scene_id = str(doc.get("id", "scene"))
    entities: dict = {}
    spot_order = []
    directions = {}

    for i, spot_doc in enumerate(doc.get("spots", [])):
        where = f"spots[{i}]"
        if not isinstance(spot_doc, dict) or "name" not in spot_doc:
            raise SchemaError(f"{where}: expected an object with a name")
        name = normalize_name(str(spot_doc["name"]))
        if not name:
            raise SchemaError(f"{where}.name: empty name")
        if name in entities:
            raise DuplicateName(f"{where}.name: duplicate entity name {name!r}")
        entities[name] = Entity(
            name, EntityKind.SPOT, "",
            interactive=bool(spot_doc.get("interactive", True)),
        )
        spot_order.append(name)
        table = spot_doc.get("directions", {})
        if not isinstance(table, dict):
            raise SchemaError(f"{where}.directions: expected an object")
        parsed = {}
        for direction, names in table.items():
            if direction not in DIRECTIONS:
                raise SchemaError(f"{where}.directions: unknown direction {direction!r}")
            parsed[direction] = tuple(normalize_name(str(n)) for n in names)
        directions[name] = parsed

    for i, ent_doc in enumerate(doc.get("entities", [])):
        where = f"entities[{i}]"
        if not isinstance(ent_doc, dict):
            raise SchemaError(f"{where}: expected an object")
        name = normalize_name(str(ent_doc.get("name", "")))
        if not name:
            raise SchemaError(f"{where}.name: missing or empty name")
        if name in entities:
            raise DuplicateName(f"{where}.name: duplicate entity name {name!r}")
        kind_raw = str(ent_doc.get("kind", ""))
        try:
            kind = EntityKind(kind_raw)
        except ValueError:
            raise SchemaError(f"{where}.kind: unknown kind {kind_raw!r}") from None
        if kind is EntityKind.SPOT:
            raise SchemaError(f"{where}.kind: declare spots in the spots section")
        open_state = None
        if kind is EntityKind.CONTAINER:
            open_raw = str(ent_doc.get("open_state", "closed"))
            try:
                open_state = OpenState(open_raw)
            except ValueError:
                raise SchemaError(f"{where}.open_state: unknown state {open_raw!r}") from None
        elif "open_state" in ent_doc:
            raise SchemaError(f"{where}.open_state: only containers have an open state")
        location = normalize_name(str(ent_doc.get("location", "")))
        if not location:
            raise SchemaError(f"{where}.location: missing or empty location")
        entities[name] = Entity(
            name, kind, location, open_state,
            interactive=bool(ent_doc.get("interactive", True)),
        )

    # locations must resolve to a declared spot or container
    for name, entity in entities.items():
        if entity.kind is EntityKind.SPOT:
            continue
        parent = entities.get(entity.location)
        if parent is None or parent.kind is EntityKind.OBJECT:
            raise SchemaError(
                f"entity {name!r}: location {entity.location!r} is not a spot or container"
            )

    # every spot's direction table must place every spot exactly once
    for spot, table in directions.items():
        assigned = [n for direction in DIRECTIONS for n in table.get(direction, ())]
        for n in assigned:
            if n not in entities or entities[n].kind is not EntityKind.SPOT:
                raise SchemaError(
                    f"spot {spot!r}: direction table entry {n!r} is not a spot"
                )
        if sorted(assigned) != sorted(spot_order):
            raise SchemaError(
                f"spot {spot!r}: direction table must place every spot exactly once"
            )

    agent_start = normalize_name(str(doc.get("agent_start", "")))
    if spot_order:
        if agent_start not in spot_order:
            raise SchemaError(f"agent_start: {agent_start!r} is not a spot")
    elif agent_start:
        raise SchemaError("agent_start: scene has no spots")
    agent = AgentPose(at=agent_start)

    for name, band_raw in (doc.get("bands") or {}).items():
        norm = normalize_name(str(name))
        if norm not in entities:
            raise SchemaError(f"bands: unknown entity {name!r}")
        agent.band_overrides[norm] = _parse_band(band_raw, f"bands[{name!r}]")

    schedule = {}
    for key, outcomes in (doc.get("outcome_schedule") or {}).items():
        token, _, target = str(key).partition(" ")
        if token not in ("go_to", "pick", "place", "open", "close") or not target:
            raise SchemaError(
                f"outcome_schedule: key {key!r} must look like 'pick apple'"
            )
        entries = [str(o) for o in outcomes]
        for entry in entries:
            if entry not in ("ok", "E1", "E2"):
                raise SchemaError(f"outcome_schedule[{key!r}]: unknown outcome {entry!r}")
            if entry == "E2" and token != "place":
                raise SchemaError(f"outcome_schedule[{key!r}]: E2 applies to place only")
        schedule[f"{token} {normalize_name(target)}"] = entries

    rates = dict(DEFAULT_RATES)
    for key, value in (doc.get("failure_rates") or {}).items():
        if key not in DEFAULT_RATES:
            raise SchemaError(f"failure_rates: unknown rate {key!r}")
        rates[key] = float(value)

    scene_seed = int(doc.get("seed", 0)) if seed is None else int(seed)
    scene = Scene(
        id=scene_id,
        entities=entities,
        spot_order=tuple(spot_order),
        directions=directions,
        agent=agent,
        schedule=schedule,
        rates=rates,
        seed=scene_seed,
        rng=random.Random(scene_seed),
    )
    for name in entities:
        scene.spot_of(name)  # raises on containment cycles
    return scene


# ---------------------------------------------------------------------------
# observations


_BAND_TEXT = {
    DistanceBand.REACHABLE: "reachable",
    DistanceBand.TOO_FAR: "too far",
    DistanceBand.TOO_CLOSE: "too close",
}


def _render_entity(scene: Scene, entity: Entity) -> str:
    band = _BAND_TEXT[scene.band(entity.name)]
    if entity.kind is EntityKind.CONTAINER:
        bits = [entity.open_state.value, band]
        if entity.open_state is OpenState.OPEN:
            contents = [
                e.name for e in scene.entities.values() if e.location == entity.name
            ]
            if contents:
                bits.append("contains: " + ", ".join(contents))
        return f"{entity.name} ({', '.join(bits)})"
    return f"{entity.name} ({band})"


def observe(scene: Scene) -> tuple:
    """Deterministic four-direction observation texts (front, left, back,
    right). Objects inside a closed container are not visible; contents of
    open containers are listed nested under the container."""
    table = scene.directions.get(scene.agent.at, {})
    texts = []
    for direction in DIRECTIONS:
        parts = []
        for spot_name in table.get(direction, ()):
            parts.append(_render_entity(scene, scene.entities[spot_name]))
            for entity in scene.entities.values():
                if entity.kind is not EntityKind.SPOT and entity.location == spot_name:
                    parts.append(_render_entity(scene, entity))
        texts.append("; ".join(parts) if parts else "nothing notable")
    return tuple(texts)


# ---------------------------------------------------------------------------
# execution


def resolve_target(scene: Scene, name: str) -> Union[Entity, Feedback]:
    """Exact-match lookup on the normalized name; a miss is the F2 outcome
    value, not an exception."""
    entity = scene.entities.get(normalize_name(name))
    if entity is None:
        return failure(ErrorCode.F2)
    return entity


def _outcome_draw(scene: Scene, action: ActionType, target: str) -> str:
    """Next scheduled outcome for (action, target), falling back to seeded
    rates. Returns "ok", "E1", or "E2"."""
    key = f"{action.token} {target}"
    pending = scene.schedule.get(key)
    if pending:
        return pending.pop(0)
    if action is ActionType.GO_TO:
        rate = scene.rates["e1_navigation"]
    else:
        rate = scene.rates["e1_manipulation"]
    if rate > 0 and scene.rng.random() < rate:
        return "E1"
    if action is ActionType.PLACE:
        e2 = scene.rates["e2_place"]
        if e2 > 0 and scene.rng.random() < e2:
            return "E2"
    return "ok"


def _fail(scene: Scene, code: ErrorCode, correction: Optional[Inventory] = None) -> ExecOutcome:
    return ExecOutcome(
        StepStatus.FAILURE, code, CANONICAL_MESSAGES[code],
        observations=observe(scene), inventory_correction=correction,
    )


def _enclosing_closed_container(scene: Scene, entity: Entity) -> bool:
    location = entity.location
    while location not in (HAND, ""):
        parent = scene.entities[location]
        if parent.kind is EntityKind.CONTAINER and parent.open_state is OpenState.CLOSED:
            return True
        location = parent.location
    return False


def _mutate_success(scene: Scene, action: ActionType, target: str, held: Optional[str]) -> None:
    """World mutation for a successful skill; shared by live execution and
    log replay so both produce identical post-step observations."""
    entity = scene.entities[target]
    if action is ActionType.PICK:
        entity.location = HAND
    elif action is ActionType.PLACE:
        scene.entities[held].location = target
    elif action is ActionType.OPEN:
        entity.open_state = OpenState.OPEN
    elif action is ActionType.CLOSE:
        entity.open_state = OpenState.CLOSED
    elif action is ActionType.GO_TO:
        root = scene.spot_of(target)
        if root is not None:
            scene.agent.at = root
        scene.agent.band_overrides.clear()
        scene.agent.band_overrides[target] = DistanceBand.REACHABLE


def relocate_lost_object(scene: Scene, held: Optional[str]) -> None:
    """E2 aftermath: the held object lands somewhere unintended nearby (the
    agent's current spot), leaving the hand empty."""
    if held and held in scene.entities:
        scene.entities[held].location = scene.agent.at or ""


def replay_step_mutation(scene: Scene, action: ActionType, target: str,
                         held: Optional[str]) -> None:
    """Re-apply one logged successful step to a scene copy.

    Logs produced by this executor always satisfy the guards, reproducing
    the live mutations exactly; foreign or hand-crafted logs that do not
    line up with the scene degrade to no-ops instead of corrupting it.
    """
    entity = scene.entities.get(target)
    if entity is None:
        return
    if action in (ActionType.OPEN, ActionType.CLOSE):
        if entity.kind is EntityKind.CONTAINER:
            _mutate_success(scene, action, target, held)
    elif action is ActionType.PLACE:
        if held and held in scene.entities and entity.kind is not EntityKind.OBJECT:
            _mutate_success(scene, action, target, held)
    else:
        _mutate_success(scene, action, target, held)


def execute(scene: Scene, subtask: Subtask, inventory: Inventory) -> ExecOutcome:
    """Run one validated subtask against the scene.

    Checks apply in fixed precedence: F2, L4, L1, L2, L3, D2, D1, then the
    scheduled/stochastic execution outcome. Navigation skips the hand and
    distance preconditions entirely, so GoTo can only fail with F2 or E1.
    An E1 here is a single failed attempt; the caller owns the three-attempt
    retry budget.
    """
    action = subtask.action
    if action is ActionType.END:
        return ExecOutcome(StepStatus.SUCCESS, observations=observe(scene))
    target = resolve_target(scene, subtask.target)
    if isinstance(target, Feedback):
        return _fail(scene, ErrorCode.F2)

    if action is not ActionType.GO_TO:
        if action in (ActionType.OPEN, ActionType.CLOSE):
            if target.kind is not EntityKind.CONTAINER or not target.interactive:
                return _fail(scene, ErrorCode.L4)
        elif action is ActionType.PICK:
            if target.kind is not EntityKind.OBJECT or not target.interactive:
                return _fail(scene, ErrorCode.L4)
        elif action is ActionType.PLACE:
            if target.kind is EntityKind.OBJECT or not target.interactive:
                return _fail(scene, ErrorCode.L4)

        if action in (ActionType.PICK, ActionType.OPEN, ActionType.CLOSE) and not inventory.empty:
            return _fail(scene, ErrorCode.L1)
        if action is ActionType.PLACE and inventory.empty:
            return _fail(scene, ErrorCode.L2)
        if action is ActionType.PICK and _enclosing_closed_container(scene, target):
            return _fail(scene, ErrorCode.L3)
        if (
            action is ActionType.PLACE
            and target.kind is EntityKind.CONTAINER
            and target.open_state is OpenState.CLOSED
        ):
            return _fail(scene, ErrorCode.L3)

        band = scene.band(target.name)
        if band is DistanceBand.TOO_CLOSE:
            return _fail(scene, ErrorCode.D2)
        if band is DistanceBand.TOO_FAR:
            return _fail(scene, ErrorCode.D1)

    drawn = _outcome_draw(scene, action, target.name)
    if drawn == "E1":
        return _fail(scene, ErrorCode.E1)
    if drawn == "E2":
        relocate_lost_object(scene, inventory.held)
        return _fail(scene, ErrorCode.E2, correction=Inventory())

    _mutate_success(scene, action, target.name, inventory.held)
    return ExecOutcome(StepStatus.SUCCESS, observations=observe(scene))
