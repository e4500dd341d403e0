from fractions import Fraction

import pytest

from homebench.core import ActionType, EmptyKeypathSet, ErrorCode, MissingExpertLength
from homebench.metrics import (
    EpisodeResult,
    action_error_share,
    aggregate_error_stats,
    compute_ser,
    compute_sr_plwsr,
    compute_srr,
    compute_tp,
    count_replans,
    episode_result,
    match_keypath,
    per_action_stats,
    round2,
)

from conftest import (
    make_task,
    node,
    prefix_subsequence_oracle,
    random_keypaths,
    random_trajectory,
    traj,
)


def successful_pairs(trajectory):
    return [
        (s.output.action_type, s.output.target)
        for s in trajectory.steps
        if s.feedback.ok and s.output.action_type is not ActionType.END
    ]


# ---------------------------------------------------------------------------
# keypath matching


def test_match_skips_failures_and_interleaved_steps():
    trajectory = traj([
        ("Go to", "drawer", True),
        ("Open", "drawer", True),
        ("Pick", "short_can", False, ErrorCode.E1),
        ("Pick", "short_can", True),
        ("Place", "drawer", True),
    ])
    keypath = (node("Open", "drawer"), node("Place", "drawer"))
    state = match_keypath(trajectory, keypath)
    assert state.cursor == 2
    assert state.cursor == prefix_subsequence_oracle(successful_pairs(trajectory), keypath)


def test_match_empty_trajectory():
    trajectory = traj([], budget=True)
    keypath = (node("Pick", "apple"),)
    assert match_keypath(trajectory, keypath).cursor == 0


def test_match_reversed_order_matches_only_first_node():
    keypath = (node("Open", "drawer"), node("Pick", "apple"))
    trajectory = traj([("Pick", "apple", True), ("Open", "drawer", True)])
    state = match_keypath(trajectory, keypath)
    assert state.cursor == 1
    assert state.cursor == prefix_subsequence_oracle(successful_pairs(trajectory), keypath)


def test_match_failed_steps_never_advance():
    keypath = (node("Pick", "apple"),)
    trajectory = traj([("Pick", "apple", False, ErrorCode.D1)], budget=True)
    assert match_keypath(trajectory, keypath).cursor == 0


def test_checked_is_prefix_and_cursor_consistent(rng):
    for _ in range(200):
        trajectory = random_trajectory(rng)
        for keypath in random_keypaths(rng):
            state = match_keypath(trajectory, keypath)
            assert tuple(state.checked) == tuple(keypath[: state.cursor])


# ---------------------------------------------------------------------------
# task progress


def test_tp_picks_best_ratio():
    # ratios 1/3, 1/4, 1/2, 2/5 across four keypaths -> exactly 1/2
    trajectory = traj([
        ("Open", "drawer", True),
        ("Pick", "short_can", False, ErrorCode.E1),
        ("Place", "sofa", True),
    ], budget=True)
    keypaths = (
        (node("Open", "drawer"), node("Pick", "short_can"), node("Place", "drawer")),
        (node("Open", "drawer"), node("Pick", "short_can"), node("Place", "drawer"),
         node("Close", "drawer")),
        (node("Open", "drawer"), node("Pick", "apple")),
        (node("Open", "drawer"), node("Place", "sofa"), node("Pick", "short_can"),
         node("Place", "drawer"), node("Close", "drawer")),
    )
    ratios = [match_keypath(trajectory, k).ratio for k in keypaths]
    assert ratios == [Fraction(1, 3), Fraction(1, 4), Fraction(1, 2), Fraction(2, 5)]
    assert compute_tp(trajectory, keypaths) == Fraction(1, 2)


def test_tp_complete_match_is_one():
    trajectory = traj([("Pick", "apple", True), ("Place", "bowl", True)])
    keypaths = ((node("Pick", "apple"), node("Place", "bowl")),)
    assert compute_tp(trajectory, keypaths) == 1


def test_tp_no_successful_steps_is_zero():
    trajectory = traj([("Pick", "apple", False, ErrorCode.E1)], budget=True)
    keypaths = ((node("Pick", "apple"),),)
    assert compute_tp(trajectory, keypaths) == 0


def test_tp_empty_keypath_set():
    with pytest.raises(EmptyKeypathSet):
        compute_tp(traj([]), ())


def test_tp_monotone_under_appended_success(rng):
    for _ in range(200):
        keypaths = random_keypaths(rng)
        trajectory = random_trajectory(rng)
        base_specs = [
            (s.output.action_type, s.output.target, s.feedback.ok,
             s.feedback.code or ErrorCode.E1)
            for s in trajectory.steps
            if s.output.action_type is not ActionType.END
        ]
        before = compute_tp(traj(base_specs, budget=True), keypaths)
        extra = base_specs + [(ActionType.PICK, "apple", True, None)]
        after = compute_tp(traj(extra, budget=True), keypaths)
        assert after >= before


def test_tp_matches_bruteforce_oracle(rng):
    for _ in range(300):
        trajectory = random_trajectory(rng)
        keypaths = random_keypaths(rng)
        expected = max(
            Fraction(prefix_subsequence_oracle(successful_pairs(trajectory), k), len(k))
            for k in keypaths
        )
        assert compute_tp(trajectory, keypaths) == expected


# ---------------------------------------------------------------------------
# replans


def test_replan_count_worked_sequence():
    # statuses S F S F F S -> steps 3, 5, 6 follow failures
    trajectory = traj([
        ("Pick", "a", True),
        ("Pick", "a", False, ErrorCode.E1),
        ("Pick", "a", True),
        ("Pick", "a", False, ErrorCode.E1),
        ("Pick", "a", False, ErrorCode.E1),
        ("Pick", "a", True),
    ], budget=True)
    assert count_replans(trajectory) == 3


def test_replan_none_on_all_success():
    assert count_replans(traj([("Pick", "a", True)] * 4)) == 0


def test_replan_trailing_failure_not_counted():
    trajectory = traj([("Pick", "a", False, ErrorCode.E1)], budget=True)
    assert count_replans(trajectory) == 0


def test_replan_matches_enumeration(rng):
    for _ in range(300):
        trajectory = random_trajectory(rng)
        statuses = [s.feedback.ok for s in trajectory.steps]
        expected = sum(
            1 for i in range(2, len(statuses) + 1) if not statuses[i - 2]
        )
        assert count_replans(trajectory) == expected


# ---------------------------------------------------------------------------
# SER / SRR


def result(task_id="t1", run_index=0, tp=1, ended=True, replans=0, length=3):
    tp = Fraction(tp)
    return EpisodeResult(task_id, run_index, tp, tp == 1, ended, replans, length)


def test_ser_worked_example():
    results = [
        result(tp=1, ended=True),
        result(run_index=1, tp=1, ended=True),
        result(run_index=2, tp=Fraction(1, 2), ended=True),
        result(run_index=3, tp=Fraction(1, 2), ended=False),
    ]
    value, flag = compute_ser(results)
    assert not flag
    assert round2(value) == 66.67


def test_ser_all_successful_and_ended():
    value, flag = compute_ser([result(), result(run_index=1)])
    assert (value, flag) == (100, False)


def test_ser_zero_denominator_flag():
    value, flag = compute_ser([result(tp=0, ended=False)])
    assert (value, flag) == (0, True)


def test_srr_worked_example():
    results = [
        result(tp=1, replans=2),
        result(run_index=1, tp=Fraction(1, 2), replans=3),
    ]
    value, flag = compute_srr(results)
    assert (value, flag) == (40, False)


def test_srr_zero_denominator_flag():
    value, flag = compute_srr([result(replans=0)])
    assert (value, flag) == (0, True)


def test_srr_all_replans_in_successes():
    value, flag = compute_srr([result(replans=4), result(run_index=1, replans=1)])
    assert (value, flag) == (100, False)


def test_ser_srr_permutation_invariant(rng):
    results = [
        result(task_id=f"t{i % 3}", run_index=i, tp=rng.choice([0, 1]),
               ended=rng.random() < 0.5, replans=rng.randrange(4))
        for i in range(20)
    ]
    shuffled = results[:]
    rng.shuffle(shuffled)
    assert compute_ser(results) == compute_ser(shuffled)
    assert compute_srr(results) == compute_srr(shuffled)


# ---------------------------------------------------------------------------
# SR / PLWSR


def test_plwsr_weight_longer_than_expert():
    sr, plwsr = compute_sr_plwsr([result(length=10)], {"t1": 5})
    assert sr == 100
    assert plwsr == 50  # 5 / max(5, 10)


def test_plwsr_weight_equal_lengths():
    sr, plwsr = compute_sr_plwsr([result(length=5)], {"t1": 5})
    assert plwsr == 100


def test_plwsr_failure_weighs_zero():
    sr, plwsr = compute_sr_plwsr([result(tp=0, length=5)], {"t1": 5})
    assert (sr, plwsr) == (0, 0)


def test_plwsr_literal_reading_saturates():
    _, plwsr = compute_sr_plwsr([result(length=10)], {"t1": 5}, literal=True)
    assert plwsr == 100  # 10 / max(5, 10)


def test_plwsr_shorter_than_expert_full_weight():
    _, plwsr = compute_sr_plwsr([result(length=3)], {"t1": 5})
    assert plwsr == 100  # 5 / max(5, 3) = 1


def test_sr_macro_averages_tasks_not_runs():
    results = [
        result(task_id="a", run_index=0, tp=1),
        result(task_id="a", run_index=1, tp=0),
        result(task_id="b", run_index=0, tp=1),
        result(task_id="b", run_index=1, tp=1),
    ]
    sr, _ = compute_sr_plwsr(results, {"a": 3, "b": 3})
    assert sr == 75  # mean(50, 100), not 3/4 of runs... same here, so check unbalanced
    unbalanced = results + [result(task_id="b", run_index=2, tp=1)]
    sr, _ = compute_sr_plwsr(unbalanced, {"a": 3, "b": 3})
    assert sr == 75  # task b still contributes 100


def test_plwsr_missing_expert_length():
    with pytest.raises(MissingExpertLength):
        compute_sr_plwsr([result()], {})


# ---------------------------------------------------------------------------
# error statistics


def test_error_breakdown_percentages():
    specs = []
    for code, count in [
        (ErrorCode.L1, 5), (ErrorCode.L2, 1), (ErrorCode.L3, 1),
        (ErrorCode.D1, 56), (ErrorCode.F2, 22),
        (ErrorCode.E1, 20), (ErrorCode.E2, 19),
    ]:
        specs += [("Pick", "apple", False, code)] * count
    specs += [("dance", "x", False, ErrorCode.F1)] * 2
    specs += [("Go to", "sofa", True)] * (416 - 126 - 1)  # leave room for End
    trajectory = traj(specs)
    stats = aggregate_error_stats([(trajectory, True)])["successful"]
    assert stats.failed_steps == 126
    assert stats.total_steps == 416
    assert round2(stats.category_percent(ErrorCode.L1.category)) == 5.56
    assert round2(stats.category_percent(ErrorCode.D1.category)) == 44.44
    assert round2(stats.category_percent(ErrorCode.F1.category)) == 19.05
    assert round2(stats.category_percent(ErrorCode.E1.category)) == 30.95
    assert round2(stats.failed_step_share) == 30.29


def test_error_breakdown_zero_failed_steps():
    trajectory = traj([("Pick", "a", True)])
    stats = aggregate_error_stats([(trajectory, False)])["failed"]
    assert stats.failed_steps == 0
    for code in ErrorCode:
        assert stats.percent(code) == 0
        assert stats.count(code) == 0


def test_error_breakdown_single_failure_is_hundred():
    trajectory = traj([("Pick", "a", False, ErrorCode.D1)], budget=True)
    stats = aggregate_error_stats([(trajectory, False)])["failed"]
    assert stats.percent(ErrorCode.D1) == 100
    assert stats.category_percent(ErrorCode.D1.category) == 100


# ---------------------------------------------------------------------------
# per-action statistics


def test_action_error_share_ratio():
    trajectory = traj([
        ("Pick", "a", False, ErrorCode.E1),
        ("Go to", "b", False, ErrorCode.E1),
        ("Pick", "a", True),
    ], budget=True)
    stats = per_action_stats([trajectory])
    assert round2(action_error_share(stats, ActionType.PICK)) == 50.0


def test_action_stats_omit_unattempted():
    stats = per_action_stats([traj([("Pick", "a", True)])])
    assert ActionType.OPEN not in stats
    assert ActionType.END not in stats


def test_action_stats_sr_all_success():
    stats = per_action_stats([traj([("Open", "drawer", True)] * 3)])
    assert stats[ActionType.OPEN].sr == 100
    assert stats[ActionType.OPEN].attempts == 3


def test_action_stats_attempts_count_steps_not_retries():
    trajectory = traj([("Pick", "a", True)], budget=True)
    # one step with retries_used=2 is still one attempt
    from conftest import step as make_step
    from homebench.core import Trajectory
    s = make_step(1, "Pick", "a", ok=True, retries=2)
    trajectory = Trajectory("t1", (s,), False, True)
    stats = per_action_stats([trajectory])
    assert stats[ActionType.PICK].attempts == 1


# ---------------------------------------------------------------------------
# episode results


def test_episode_result_success_iff_tp_one():
    task = make_task(keypaths=((node("Pick", "apple"),),))
    full = traj([("Pick", "apple", True)])
    partial = traj([("Pick", "banana", True)])
    assert episode_result(full, task).success
    assert not episode_result(partial, task).success


def test_episode_result_length_excludes_end():
    task = make_task()
    trajectory = traj([("Pick", "apple", True), ("Place", "bowl", True)])
    assert len(trajectory.steps) == 3
    assert episode_result(trajectory, task).length == 2


def test_episode_result_percentages_in_range(rng):
    task = make_task(keypaths=random_keypaths(rng), expert_length=10)
    results = [
        episode_result(random_trajectory(rng, task_id=task.id, run_index=i), task)
        for i in range(30)
    ]
    ser, _ = compute_ser(results)
    srr, _ = compute_srr(results)
    sr, plwsr = compute_sr_plwsr(results, {task.id: task.expert_length})
    for value in (ser, srr, sr, plwsr):
        assert 0 <= value <= 100


def test_ser_capped_when_success_lacks_end():
    # all keypath nodes matched but the budget ran out before End: that run
    # is in neither the numerator nor the denominator
    results = [
        result(tp=1, ended=False),               # complete but never ended
        result(run_index=1, tp=1, ended=True),   # the only self-terminated run
    ]
    value, flag = compute_ser(results)
    assert (value, flag) == (100, False)
    assert 0 <= value <= 100


def test_round2_half_up():
    assert round2(Fraction(1, 800) * 100) == 0.13  # 0.125 rounds up, not to even
    assert round2(Fraction(1, 3) * 100) == 33.33
    assert round2(41.665) == 41.67


def test_action_stats_exclude_f1_non_attempts():
    # a format-rejected emission with a parseable action never reached the
    # executor and must not drag that skill's SR down
    trajectory = traj([
        ("Pick", "apple", False, ErrorCode.F1),  # e.g. bad model choice
        ("Pick", "apple", True),
    ], budget=True)
    stats = per_action_stats([trajectory])
    assert stats[ActionType.PICK].attempts == 1
    assert stats[ActionType.PICK].sr == 100


def test_error_partition_uses_each_trajectorys_own_result():
    # same (task_id, run_index) appearing twice with different outcomes must
    # not cross-contaminate the success/failure partitions
    from homebench.metrics import build_report
    from conftest import make_task, node

    task = make_task(task_id="dup", keypaths=((node("Pick", "apple"),),))
    winner = traj([("Pick", "apple", True),
                   ("Open", "drawer", False, ErrorCode.D1)], task_id="dup")
    loser = traj([("Pick", "banana", True),
                  ("Open", "drawer", False, ErrorCode.L1)], task_id="dup",
                 budget=True)
    report = build_report([winner, loser], {"dup": task})
    assert report.error_stats["successful"].count(ErrorCode.D1) == 1
    assert report.error_stats["successful"].count(ErrorCode.L1) == 0
    assert report.error_stats["failed"].count(ErrorCode.L1) == 1
