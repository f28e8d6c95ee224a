"""Confound analysis tests: copy baseline, duplication, structure, verdicts."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabaudit.backends import CopyLastBackend, GenParams
from tabaudit.confound import (
    CLASS_CONSTANT,
    CLASS_LABEL,
    CLASS_TIMESTAMP,
    LEVEL_CONFOUNDED,
    LEVEL_NONE,
    LEVEL_STRONG,
    LEVEL_WEAK,
    NO_EVIDENCE_CAVEAT,
    ConfoundProfile,
    Thresholds,
    classify_predictable_columns,
    copy_baseline,
    copy_baseline_best,
    detect_stuck_columns,
    duplicate_profile,
    file_confound,
    memorization_verdict,
    merge_confounds,
)
from tabaudit.ingest import ParseConfig, parse_dataset_file
from tabaudit.prompting import assemble_transcript
from tabaudit.sampler import AuditConfig, build_trial_plan
from tabaudit.scoring import DatasetScore, aggregate_scores, mean, score_trial

from synth import (
    as_file,
    disjoint_successor_rows,
    distinct_rows,
    predictable_columns_rows,
    rows_with_dup_rate,
    stuck_column_rows,
)


def plan_for(rows, n_trials=10, seed=0, name="synth.csv"):
    file = as_file(rows, name=name)
    return file, build_trial_plan(file, AuditConfig(n_trials=n_trials, seed=seed))


def profile_of(**overrides):
    base = dict(
        copy_baseline_mean=0.0,
        duplicate_row_fraction=0.0,
        stuck_columns=[],
        predictable_columns=[],
        per_trial_copy=[],
    )
    base.update(overrides)
    return ConfoundProfile(**base)


def score_of(dataset_mean, trial_count=25):
    return DatasetScore(
        per_file={"f.csv": dataset_mean},
        dataset_mean=dataset_mean,
        trial_count=trial_count,
        dataset_mean_weighted=dataset_mean,
    )


# -------------------------------------------------------- copy baseline


def test_copy_baseline_identical_rows_is_one():
    file, plan = plan_for(["3,4,5"] * 40)
    copy_mean, per_trial = copy_baseline(plan, file)
    assert copy_mean == 1.0
    assert per_trial == [1.0] * 10


def test_copy_baseline_disjoint_successors_below_half():
    file, plan = plan_for(disjoint_successor_rows(60))
    copy_mean, per_trial = copy_baseline(plan, file)
    assert all(r < 0.5 for r in per_trial)
    assert copy_mean < 0.5


def test_copy_baseline_matches_copy_backend_end_to_end():
    # Dual route: direct plan arithmetic vs running the copy strategy
    # through transcripts and the scoring pipeline. Must agree bit-exactly.
    file, plan = plan_for(distinct_rows(80, seed=13), seed=13)
    backend = CopyLastBackend()
    params = GenParams()
    trials = []
    for i, trial in enumerate(plan.trials):
        tr = assemble_transcript(
            trial.test, trial.fewshot, trial_id=i, file_ref=file.source_name
        )
        result = backend.complete(tr, params)
        trials.append(
            score_trial(
                trial.test.target_row, result, trial.test.prefix_rows[-1], trial_id=i
            )
        )
    agg = aggregate_scores({file.source_name: trials})
    copy_mean, per_trial = copy_baseline(plan, file)
    assert [t.ratio for t in trials] == per_trial
    assert agg.dataset_mean == copy_mean


def test_copy_baseline_best_dominates_last():
    file, plan = plan_for(distinct_rows(70, seed=21), seed=3)
    last_mean, last_trials = copy_baseline(plan, file)
    best_mean, best_trials = copy_baseline_best(plan, file)
    assert all(b >= l for b, l in zip(best_trials, last_trials))
    assert best_mean >= last_mean


# ----------------------------------------------------------- duplicates


def test_duplicate_profile_all_identical():
    dup = duplicate_profile(as_file(["1,2"] * 50))
    assert dup.duplicate_successor_rows == 49
    assert dup.row_count == 50
    assert dup.fraction == 49 / 50
    assert dup.run_length_histogram == {50: 1}


def test_duplicate_profile_all_distinct():
    dup = duplicate_profile(as_file(distinct_rows(50)))
    assert dup.duplicate_successor_rows == 0
    assert dup.fraction == 0.0
    assert dup.run_length_histogram == {1: 50}


def test_duplicate_profile_known_runs():
    dup = duplicate_profile(as_file(["a,a", "a,a", "a,a", "b,b", "b,b", "c,c"]))
    assert dup.duplicate_successor_rows == 3
    assert dup.fraction == 0.5
    assert dup.run_length_histogram == {1: 1, 2: 1, 3: 1}


def test_duplicate_profile_constructed_rate():
    rows = rows_with_dup_rate(100, 0.3, seed=7)
    dup = duplicate_profile(as_file(rows))
    assert dup.duplicate_successor_rows == round(0.3 * 99)
    assert dup.fraction == round(0.3 * 99) / 100


# ------------------------------------------------------ column structure


def test_stuck_column_detected_at_threshold():
    file = as_file(stuck_column_rows(n=100, run=25, col=2, start=40))
    assert detect_stuck_columns(file, min_run=20) == [(2, 25)]
    assert detect_stuck_columns(file, min_run=25) == [(2, 25)]
    assert detect_stuck_columns(file, min_run=26) == []


def test_stuck_ignores_changing_columns():
    rows = [f"{i},{i * 2}" for i in range(100)]
    assert detect_stuck_columns(as_file(rows), min_run=20) == []


def test_fully_constant_column_is_stuck_for_whole_file():
    rows = [f"{i},5" for i in range(60)]
    assert detect_stuck_columns(as_file(rows), min_run=20) == [(1, 60)]


def test_classify_predictable_columns():
    file = as_file(predictable_columns_rows(250, seed=0))
    got = classify_predictable_columns(file)
    assert got == [
        (0, CLASS_CONSTANT),
        (1, CLASS_TIMESTAMP),
        (2, CLASS_LABEL),
    ]


def test_classify_timestamp_requires_bounded_increments():
    # Three distinct deltas break the fixed-increment pattern.
    rows = [str(v) + ",1.5" for v in [10, 25, 41, 56, 72, 87, 103, 120]]
    got = classify_predictable_columns(as_file(rows))
    assert all(kind != CLASS_TIMESTAMP for _, kind in got)
    steady = [str(10 + 15 * i) + f",{i}.5" for i in range(60)]
    got = classify_predictable_columns(as_file(steady))
    assert (0, CLASS_TIMESTAMP) in got


def test_classify_label_needs_long_runs():
    # 3 distinct values but alternating every row: not predictable.
    rows = [f"0.{i},{i % 3}" for i in range(120)]
    got = classify_predictable_columns(as_file(rows))
    assert all(kind != CLASS_LABEL for _, kind in got)


def test_classify_thresholds_are_tunable():
    rows = [f"0.{i:03d},{i // 30}" for i in range(120)]  # runs of 30, 4 values
    assert classify_predictable_columns(as_file(rows)) == []
    loose = Thresholds(label_min_run=30)
    assert classify_predictable_columns(as_file(rows), loose) == [(1, CLASS_LABEL)]


def test_non_canonical_spacing_disables_column_checks():
    text = "1.0   7   a\n2.0  7    a\n" * 40
    file = parse_dataset_file(text, ParseConfig(delimiter=" "), source_name="w.txt")
    assert file.non_canonical_spacing
    assert detect_stuck_columns(file, min_run=20) == []
    assert classify_predictable_columns(file) == []


# -------------------------------------------------------------- verdict


def test_verdict_strong_from_clean_memorization():
    v = memorization_verdict(score_of(1.0), profile_of(copy_baseline_mean=0.3))
    assert v.level == LEVEL_STRONG
    assert v.margin == 0.7
    assert v.llm_score == 1.0
    assert v.copy_baseline == 0.3
    assert NO_EVIDENCE_CAVEAT not in v.notes


def test_verdict_confounded_overrides_margin():
    v = memorization_verdict(
        score_of(0.93),
        profile_of(copy_baseline_mean=0.91, duplicate_row_fraction=0.8),
    )
    assert v.level == LEVEL_CONFOUNDED
    assert any("duplicate" in n for n in v.notes)


def test_verdict_no_evidence_carries_caveat():
    v = memorization_verdict(
        score_of(0.4),
        profile_of(copy_baseline_mean=0.5, duplicate_row_fraction=0.1),
    )
    assert v.level == LEVEL_NONE
    assert v.margin == 0.4 - 0.5
    assert NO_EVIDENCE_CAVEAT in v.notes


def test_verdict_margin_boundary_inclusive():
    at = memorization_verdict(score_of(0.1), profile_of(copy_baseline_mean=0.0))
    assert at.level == LEVEL_STRONG
    below = memorization_verdict(
        score_of(math.nextafter(0.1, 0.0)), profile_of(copy_baseline_mean=0.0)
    )
    assert below.level == LEVEL_WEAK


def test_verdict_dup_boundary_inclusive():
    v = memorization_verdict(
        score_of(0.9), profile_of(copy_baseline_mean=0.1, duplicate_row_fraction=0.5)
    )
    assert v.level == LEVEL_CONFOUNDED
    v = memorization_verdict(
        score_of(0.9),
        profile_of(copy_baseline_mean=0.1, duplicate_row_fraction=math.nextafter(0.5, 0.0)),
    )
    assert v.level == LEVEL_STRONG


def test_verdict_notes_enumerate_structure():
    v = memorization_verdict(
        score_of(0.9),
        profile_of(
            copy_baseline_mean=0.2,
            stuck_columns=[(3, 44)],
            predictable_columns=[(0, CLASS_CONSTANT), (1, CLASS_TIMESTAMP)],
        ),
    )
    assert any("column 3 stuck: 44" in n for n in v.notes)
    assert any("column 0" in n and CLASS_CONSTANT in n for n in v.notes)
    assert any("column 1" in n and CLASS_TIMESTAMP in n for n in v.notes)


@settings(max_examples=300, deadline=None)
@given(
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
)
def test_verdict_total_and_matches_rule(llm, copy, dup):
    t = Thresholds()
    v = memorization_verdict(
        score_of(llm),
        profile_of(copy_baseline_mean=copy, duplicate_row_fraction=dup),
        t,
    )
    margin = llm - copy
    if dup >= t.confound_dup:
        want = LEVEL_CONFOUNDED
    elif margin >= t.margin_min:
        want = LEVEL_STRONG
    elif margin > 0:
        want = LEVEL_WEAK
    else:
        want = LEVEL_NONE
    assert v.level == want
    assert v.margin == margin
    assert (NO_EVIDENCE_CAVEAT in v.notes) == (want == LEVEL_NONE)


# ------------------------------------------------------- file and merge


def test_file_confound_wires_all_parts():
    rows = stuck_column_rows(n=120, run=30, col=1, start=10)
    file, plan = plan_for(rows, n_trials=5, seed=2, name="walk.csv")
    c = file_confound(file, plan)
    want_mean, want_trials = copy_baseline(plan, file)
    assert c.copy_baseline_mean == want_mean
    assert c.per_trial_copy == want_trials
    assert c.copy_baseline_best_mean == copy_baseline_best(plan, file)[0]
    assert c.stuck_columns == [(1, 30)]
    assert c.row_count == 120
    assert c.per_file_copy_mean == {"walk.csv": want_mean}
    dup = duplicate_profile(file)
    assert c.duplicate_row_fraction == dup.fraction
    assert c.run_length_histogram == dup.run_length_histogram


def test_merge_confounds_arithmetic():
    a = profile_of(
        copy_baseline_mean=0.25,
        per_trial_copy=[0.25, 0.25],
        duplicate_successor_rows=10,
        row_count=100,
        duplicate_row_fraction=0.1,
        stuck_columns=[(0, 30), (2, 25)],
        predictable_columns=[(0, CLASS_CONSTANT)],
        run_length_histogram={1: 90, 2: 5},
        copy_baseline_best_mean=0.5,
        per_file_copy_mean={"a.csv": 0.25},
    )
    b = profile_of(
        copy_baseline_mean=0.75,
        per_trial_copy=[0.75],
        duplicate_successor_rows=30,
        row_count=60,
        duplicate_row_fraction=0.5,
        stuck_columns=[(0, 60), (1, 21)],
        predictable_columns=[(0, CLASS_CONSTANT), (1, CLASS_LABEL)],
        run_length_histogram={1: 20, 2: 5, 30: 1},
        copy_baseline_best_mean=0.9,
        per_file_copy_mean={"b.csv": 0.75},
    )
    merged = merge_confounds({"b.csv": b, "a.csv": a})
    assert merged.copy_baseline_mean == 0.5  # unweighted over files
    assert merged.duplicate_successor_rows == 40
    assert merged.row_count == 160
    assert merged.duplicate_row_fraction == 40 / 160
    assert merged.stuck_columns == [(0, 60), (1, 21), (2, 25)]
    assert merged.predictable_columns == [
        (0, CLASS_CONSTANT),
        (1, CLASS_LABEL),
    ]
    assert merged.run_length_histogram == {1: 110, 2: 10, 30: 1}
    assert merged.copy_baseline_best_mean == 0.7
    assert merged.per_trial_copy == [0.25, 0.25, 0.75]
    assert merged.per_file_copy_mean == {"a.csv": 0.25, "b.csv": 0.75}


def test_merge_confounds_order_independent_bits():
    files = {}
    for i, seed in enumerate([3, 4, 5]):
        file, plan = plan_for(distinct_rows(60, seed=seed), n_trials=6,
                              seed=seed, name=f"f{i}.csv")
        files[f"f{i}.csv"] = file_confound(file, plan)
    forward = merge_confounds(files)
    backward = merge_confounds(dict(reversed(list(files.items()))))
    assert forward == backward
    assert forward.copy_baseline_mean == mean(
        [files[k].copy_baseline_mean for k in sorted(files)]
    )


def test_merge_confounds_rejects_empty():
    with pytest.raises(ValueError):
        merge_confounds({})
