"""Build supervised conversation datasets and preference-pair datasets from
trajectory logs.

Conversation samples come from successful steps only (failed steps are junk
for supervised tuning, and they are also dropped from the replayed history
inside each prompt). Preference pairs come from four generators: re-plan
sifting, order changes, action corruptions, and same-category model swaps.
End outputs only ever appear on the rejected side.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .core import (
    ActionType,
    EmptyLexicon,
    InvariantError,
    MissingTask,
    ModelChoice,
    PlannerOutput,
    RewriterTransportError,
    Task,
    Trajectory,
    serialize_output,
)
from .loop import Instruction, replay_instructions, stable_seed
from .sim import Scene, load_scene


def _is_end_text(text: str) -> bool:
    from .loop import ParseFailure, parse_planner_output

    output = parse_planner_output(text)
    return not isinstance(output, ParseFailure) and output.action_type is ActionType.END


@dataclass(frozen=True)
class ConversationSample:
    """One supervised example: the rendered prompt for a step and the
    serialized output that answered it. The structured parts ride along so
    rewrites can regenerate text fields without touching action/target/model."""

    prompt: str
    response: str
    instruction: Instruction
    output: PlannerOutput
    task_id: str = ""


class PairSource(Enum):
    SIFT = "sift"
    ORDER_CHANGE = "order_change"
    ACTION_CHANGE = "action_change"
    MODEL_CHANGE = "model_change"


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    source: PairSource
    task_id: str = ""

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise InvariantError("preference pair requires chosen != rejected")
        if _is_end_text(self.chosen):
            raise InvariantError("End outputs may only appear as rejected")


def _make_sample(instruction: Instruction, output: PlannerOutput, task_id: str) -> ConversationSample:
    return ConversationSample(
        prompt=instruction.text,
        response=serialize_output(output),
        instruction=instruction,
        output=output,
        task_id=task_id,
    )


# ---------------------------------------------------------------------------
# supervised samples


def sft_convert(
    trajectory: Trajectory,
    task: Task,
    scene: Optional[Scene] = None,
    system_info: Optional[str] = None,
) -> list:
    """One sample per successful step. Each prompt is rebuilt from the state
    as of that step, with failed steps scrubbed from the replayed history."""
    prompts = replay_instructions(
        trajectory, task, scene=scene, system_info=system_info,
        skip_failed_history=True,
    )
    return [
        _make_sample(instruction, step.output, trajectory.task_id)
        for step, instruction in zip(trajectory.steps, prompts)
        if step.feedback.ok
    ]


def expand_with_rewrites(samples: Sequence, rewriter: Callable, n: int):
    """Add ``n`` rewritten variants per sample: the task description in the
    prompt and the analysis in the response are regenerated; action, target,
    and model are never altered. Originals come first, untouched.

    Returns (expanded samples, rewrite_failure_count); a failing rewriter
    skips that variant and the expansion continues.
    """
    expanded = list(samples)
    failures = 0
    for _ in range(n):
        for sample in samples:
            try:
                new_task = rewriter(sample.instruction.task)
                new_analysis = rewriter(sample.output.analysis)
            except RewriterTransportError:
                failures += 1
                continue
            instruction = dataclasses.replace(sample.instruction, task=new_task)
            output = dataclasses.replace(sample.output, analysis=new_analysis)
            expanded.append(_make_sample(instruction, output, sample.task_id))
    return expanded, failures


def identity_rewriter(text: str) -> str:
    return text


# ---------------------------------------------------------------------------
# preference pairs


def _full_prompts(trajectory, task, scene, system_info):
    return replay_instructions(
        trajectory, task, scene=scene, system_info=system_info,
        skip_failed_history=False,
    )


def _pair(prompts, i, chosen_output, rejected_output, source, task_id):
    """Build a pair anchored at step i, or None when it would violate the
    chosen != rejected or End-as-rejected rules (e.g. a re-plan whose
    successor is End, or two byte-identical adjacent outputs)."""
    chosen = serialize_output(chosen_output)
    rejected = serialize_output(rejected_output)
    if chosen == rejected or _is_end_text(chosen):
        return None
    return PreferencePair(prompts[i].text, chosen, rejected, source, task_id)


def dpo_sift(
    trajectory: Trajectory,
    task: Task,
    scene: Optional[Scene] = None,
    system_info: Optional[str] = None,
    prompts: Optional[list] = None,
) -> list:
    """Re-plan pairs: wherever step i failed and step i+1 succeeded, the
    step-i prompt prefers the re-planned output over the failed one."""
    steps = trajectory.steps
    prompts = prompts or _full_prompts(trajectory, task, scene, system_info)
    pairs = []
    for i in range(len(steps) - 1):
        if not steps[i].feedback.ok and steps[i + 1].feedback.ok:
            pair = _pair(
                prompts, i, steps[i + 1].output, steps[i].output,
                PairSource.SIFT, trajectory.task_id,
            )
            if pair is not None:
                pairs.append(pair)
    return pairs


def dpo_order_change(
    trajectory: Trajectory,
    task: Task,
    scene: Optional[Scene] = None,
    system_info: Optional[str] = None,
    prompts: Optional[list] = None,
) -> list:
    """Ordering pairs: for adjacent successful steps, the step-i prompt
    prefers the step-i output over the (premature) step-i+1 output. A
    trailing End lands on the rejected side, which is exactly the intended
    pressure against ending early."""
    steps = trajectory.steps
    prompts = prompts or _full_prompts(trajectory, task, scene, system_info)
    pairs = []
    for i in range(len(steps) - 1):
        if steps[i].feedback.ok and steps[i + 1].feedback.ok:
            pair = _pair(
                prompts, i, steps[i].output, steps[i + 1].output,
                PairSource.ORDER_CHANGE, trajectory.task_id,
            )
            if pair is not None:
                pairs.append(pair)
    return pairs


def load_default_lexicon() -> list:
    raw = resources.files("homebench").joinpath("data/action_lexicon.json").read_text(
        encoding="utf-8"
    )
    return json.loads(raw)


def dpo_action_change(
    trajectory: Trajectory,
    task: Task,
    lexicon: Sequence[str],
    rng: random.Random,
    scene: Optional[Scene] = None,
    system_info: Optional[str] = None,
    prompts: Optional[list] = None,
) -> list:
    """Format pairs: each successful non-End output is preferred over a copy
    whose action is replaced by a non-standard name drawn from the lexicon.
    Only the action field differs between the two sides."""
    if not lexicon:
        raise EmptyLexicon("action corruption needs a non-empty lexicon")
    steps = trajectory.steps
    prompts = prompts or _full_prompts(trajectory, task, scene, system_info)
    pairs = []
    for i, step in enumerate(steps):
        if not step.feedback.ok or step.output.action_type is ActionType.END:
            continue
        candidates = [entry for entry in lexicon if entry != step.output.action]
        if not candidates:
            continue
        corrupted = dataclasses.replace(step.output, action=rng.choice(candidates))
        pair = _pair(
            prompts, i, step.output, corrupted,
            PairSource.ACTION_CHANGE, trajectory.task_id,
        )
        if pair is not None:
            pairs.append(pair)
    return pairs


def dpo_model_change(
    trajectory: Trajectory,
    task: Task,
    scene: Optional[Scene] = None,
    system_info: Optional[str] = None,
    prompts: Optional[list] = None,
) -> list:
    """Dispatch pairs: each successful non-End output is preferred over a
    copy whose model is swapped for the other model of the same category.
    Steps using the only model of a category (M3) are skipped."""
    steps = trajectory.steps
    prompts = prompts or _full_prompts(trajectory, task, scene, system_info)
    pairs = []
    for i, step in enumerate(steps):
        if not step.feedback.ok or step.output.action_type is ActionType.END:
            continue
        model = step.output.model_choice
        alternatives = [
            m for m in ModelChoice if m.category is model.category and m is not model
        ]
        if not alternatives:
            continue
        swapped = dataclasses.replace(step.output, model=alternatives[0].label)
        pair = _pair(
            prompts, i, step.output, swapped,
            PairSource.MODEL_CHANGE, trajectory.task_id,
        )
        if pair is not None:
            pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# dataset assembly


def split_task_ids(task_ids: Iterable[str], train_fraction: float, seed: int):
    """Deterministic task-id split (e.g. 0.9 for a 90/10 train/val split).
    Returns (train_ids, val_ids) as sorted lists."""
    ids = sorted(set(task_ids))
    rng = random.Random(seed)
    rng.shuffle(ids)
    cut = round(len(ids) * train_fraction)
    return sorted(ids[:cut]), sorted(ids[cut:])


@dataclass
class AugmentConfig:
    out_dir: Path
    seed: int = 0
    rewrites: int = 0
    rewriter: Optional[Callable] = None
    lexicon: Optional[list] = None
    dedup: bool = True
    scene_docs: Optional[dict] = None  # scene_ref -> raw scene document
    system_info: Optional[str] = None
    train_split: Optional[float] = None


def _pair_key(pair: PreferencePair) -> str:
    blob = "\x1f".join((pair.prompt, pair.chosen, pair.rejected))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def build_datasets(trajectories: Sequence[Trajectory], tasks: dict, config: AugmentConfig) -> dict:
    """Run the full pipeline over a trajectory corpus and write sft.jsonl,
    dpo.jsonl, and manifest.json into ``config.out_dir``.

    Deterministic given the corpus and seed: re-running produces
    byte-identical files. Preference pairs are deduplicated by
    (prompt, chosen, rejected) content hash unless ``dedup`` is off; the
    manifest records counts before and after.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rewriter = config.rewriter if config.rewriter is not None else identity_rewriter
    lexicon = config.lexicon if config.lexicon is not None else load_default_lexicon()
    if not lexicon:
        raise EmptyLexicon("action corruption needs a non-empty lexicon")

    ordered = sorted(trajectories, key=lambda t: (t.task_id, t.run_index))
    samples = []
    pairs = []
    for trajectory in ordered:
        task = tasks.get(trajectory.task_id)
        if task is None:
            raise MissingTask(trajectory.task_id)

        def fresh_scene() -> Optional[Scene]:
            doc = (config.scene_docs or {}).get(task.scene_ref)
            return load_scene(doc) if doc is not None else None

        samples.extend(
            sft_convert(trajectory, task, fresh_scene(), config.system_info)
        )
        prompts = _full_prompts(trajectory, task, fresh_scene(), config.system_info)
        pairs.extend(dpo_sift(trajectory, task, prompts=prompts))
        pairs.extend(dpo_order_change(trajectory, task, prompts=prompts))
        # corruption draws are seeded per trajectory identity, so ingesting
        # the same log twice yields the same pairs (and dedup removes them)
        draw_rng = random.Random(
            stable_seed(config.seed, trajectory.task_id, trajectory.run_index)
        )
        pairs.extend(dpo_action_change(trajectory, task, lexicon, draw_rng, prompts=prompts))
        pairs.extend(dpo_model_change(trajectory, task, prompts=prompts))

    base_count = len(samples)
    samples, rewrite_failures = expand_with_rewrites(samples, rewriter, config.rewrites)

    def per_source(items):
        counts = {source.value: 0 for source in PairSource}
        for pair in items:
            counts[pair.source.value] += 1
        counts["total"] = len(items)
        return counts

    pre_dedup = per_source(pairs)
    if config.dedup:
        seen = set()
        deduped = []
        for pair in pairs:
            key = _pair_key(pair)
            if key not in seen:
                seen.add(key)
                deduped.append(pair)
        pairs = deduped
    post_dedup = per_source(pairs)

    # the pair constructor already forbids End on the chosen side; scan the
    # final corpus anyway and report the (expected zero) violation count
    violations = sum(1 for pair in pairs if _is_end_text(pair.chosen))

    lexicon_hash = hashlib.sha256(
        json.dumps(list(lexicon), ensure_ascii=False).encode("utf-8")
    ).hexdigest()

    split = None
    if config.train_split is not None:
        train_ids, val_ids = split_task_ids(
            (t.task_id for t in ordered), config.train_split, config.seed
        )
        split = {
            "train_fraction": config.train_split,
            "train_tasks": train_ids,
            "val_tasks": val_ids,
        }
        train_set = set(train_ids)
        _write_jsonl(out_dir / "sft_train.jsonl",
                     ({"prompt": s.prompt, "response": s.response}
                      for s in samples if s.task_id in train_set))
        _write_jsonl(out_dir / "sft_val.jsonl",
                     ({"prompt": s.prompt, "response": s.response}
                      for s in samples if s.task_id not in train_set))
        _write_jsonl(out_dir / "dpo_train.jsonl",
                     ({"prompt": p.prompt, "chosen": p.chosen,
                       "rejected": p.rejected, "source": p.source.value}
                      for p in pairs if p.task_id in train_set))
        _write_jsonl(out_dir / "dpo_val.jsonl",
                     ({"prompt": p.prompt, "chosen": p.chosen,
                       "rejected": p.rejected, "source": p.source.value}
                      for p in pairs if p.task_id not in train_set))

    _write_jsonl(out_dir / "sft.jsonl",
                 ({"prompt": s.prompt, "response": s.response} for s in samples))
    _write_jsonl(out_dir / "dpo.jsonl",
                 ({"prompt": p.prompt, "chosen": p.chosen,
                   "rejected": p.rejected, "source": p.source.value}
                  for p in pairs))

    manifest = {
        "seed": config.seed,
        "rewrites": config.rewrites,
        "rewrite_failures": rewrite_failures,
        "lexicon_sha256": lexicon_hash,
        "trajectories": len(ordered),
        "sft": {"base": base_count, "total": len(samples)},
        "dpo": {
            "pre_dedup": pre_dedup,
            "post_dedup": post_dedup,
            "end_as_chosen_violations": violations,
        },
        "split": split,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return manifest
