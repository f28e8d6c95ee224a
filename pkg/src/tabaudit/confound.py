"""Confound analysis: how well a model could score with no memory at all.

High completion scores do not establish memorization on their own. Sensor
files are full of rows identical to their predecessor, stuck channels that
repeat one value for long stretches, fixed-increment timestamps, and label
columns that rarely change; a model can reproduce all of these from the
prompt context alone. This module quantifies those escape hatches and
folds them into a qualified verdict.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .ingest import ColumnProfile, DatasetFile, profile_columns
from .sampler import TrialPlan
from .scoring import DatasetScore, levenshtein_ratio, mean

CLASS_TIMESTAMP = "fixed_increment_timestamp"
CLASS_LABEL = "low_cardinality_label"
CLASS_CONSTANT = "constant"

LEVEL_STRONG = "strong_evidence"
LEVEL_WEAK = "weak_evidence"
LEVEL_CONFOUNDED = "confounded"
LEVEL_NONE = "no_evidence"

# A failed test never claims absence.
NO_EVIDENCE_CAVEAT = (
    "A low completion score does not necessarily mean the dataset was "
    "unseen during training; verbatim extraction can fail for memorized data."
)


@dataclass(frozen=True)
class Thresholds:
    """Decision constants; stamped into every report so verdicts are auditable."""

    margin_min: float = 0.10
    confound_dup: float = 0.5
    min_run: int = 20
    label_max_cardinality: int = 10
    label_min_run: int = 50


@dataclass(frozen=True)
class DuplicateProfile:
    duplicate_successor_rows: int
    row_count: int
    fraction: float
    run_length_histogram: dict[int, int]


@dataclass(frozen=True)
class ConfoundProfile:
    copy_baseline_mean: float
    duplicate_row_fraction: float
    stuck_columns: list[tuple[int, int]]
    predictable_columns: list[tuple[int, str]]
    per_trial_copy: list[float]
    copy_baseline_best_mean: float = 0.0
    per_trial_copy_best: list[float] = field(default_factory=list)
    duplicate_successor_rows: int = 0
    row_count: int = 0
    run_length_histogram: dict[int, int] = field(default_factory=dict)
    per_file_copy_mean: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Verdict:
    level: str
    llm_score: float
    copy_baseline: float
    margin: float
    notes: list[str]


def copy_baseline(plan: TrialPlan, file: DatasetFile) -> tuple[float, list[float]]:
    """Score the copy-last-row strategy over the plan's trials.

    This is computed directly from the plan, independently of the backend
    pipeline; running the copy backend end-to-end must land on the same
    mean.
    """
    per_trial = [
        levenshtein_ratio(t.test.target_row, t.test.prefix_rows[-1])
        for t in plan.trials
    ]
    return mean(per_trial), per_trial


def copy_baseline_best(plan: TrialPlan, file: DatasetFile) -> tuple[float, list[float]]:
    """Best-of-window variant: the strongest single-row copy per trial."""
    per_trial = [
        max(levenshtein_ratio(t.test.target_row, row) for row in t.test.prefix_rows)
        for t in plan.trials
    ]
    return mean(per_trial), per_trial


def duplicate_profile(file: DatasetFile) -> DuplicateProfile:
    """Fraction of rows identical to their predecessor, plus run lengths."""
    rows = file.rows
    duplicates = sum(1 for a, b in zip(rows, rows[1:]) if a == b)
    histogram: Counter = Counter()
    run = 1
    for a, b in zip(rows, rows[1:]):
        if a == b:
            run += 1
        else:
            histogram[run] += 1
            run = 1
    histogram[run] += 1
    return DuplicateProfile(
        duplicate_successor_rows=duplicates,
        row_count=len(rows),
        fraction=duplicates / len(rows),
        run_length_histogram=dict(sorted(histogram.items())),
    )


def detect_stuck_columns(
    file: DatasetFile,
    min_run: int = Thresholds.min_run,
    profiles: list[ColumnProfile] | None = None,
) -> list[tuple[int, int]]:
    """Columns repeating one value for at least ``min_run`` consecutive rows."""
    if file.non_canonical_spacing:
        return []
    if profiles is None:
        profiles = profile_columns(file)
    return [(p.index, p.max_run_length) for p in profiles if p.max_run_length >= min_run]


def classify_predictable_columns(
    file: DatasetFile,
    thresholds: Thresholds = Thresholds(),
    profiles: list[ColumnProfile] | None = None,
) -> list[tuple[int, str]]:
    """Columns a model can extend correctly without any memorization.

    Three patterns: constant columns, timestamps advancing by at most two
    distinct increments, and low-cardinality label columns that change
    rarely.
    """
    if file.non_canonical_spacing:
        return []
    if profiles is None:
        profiles = profile_columns(file)
    out = []
    for p in profiles:
        if p.distinct_count == 1:
            out.append((p.index, CLASS_CONSTANT))
        elif (
            p.is_numeric
            and p.strictly_monotone
            and p.increment_stats
            and len(p.increment_stats) <= 2
        ):
            out.append((p.index, CLASS_TIMESTAMP))
        elif (
            p.distinct_count <= thresholds.label_max_cardinality
            and p.max_run_length >= thresholds.label_min_run
        ):
            out.append((p.index, CLASS_LABEL))
    return out


def file_confound(
    file: DatasetFile,
    plan: TrialPlan,
    thresholds: Thresholds = Thresholds(),
) -> ConfoundProfile:
    """Full confound profile of one file under its trial plan."""
    copy_mean, per_trial = copy_baseline(plan, file)
    best_mean, per_trial_best = copy_baseline_best(plan, file)
    dup = duplicate_profile(file)
    profiles = profile_columns(file)
    return ConfoundProfile(
        copy_baseline_mean=copy_mean,
        duplicate_row_fraction=dup.fraction,
        stuck_columns=detect_stuck_columns(file, thresholds.min_run, profiles),
        predictable_columns=classify_predictable_columns(file, thresholds, profiles),
        per_trial_copy=per_trial,
        copy_baseline_best_mean=best_mean,
        per_trial_copy_best=per_trial_best,
        duplicate_successor_rows=dup.duplicate_successor_rows,
        row_count=dup.row_count,
        run_length_histogram=dup.run_length_histogram,
        per_file_copy_mean={file.source_name: copy_mean},
    )


def merge_confounds(per_file: dict[str, ConfoundProfile]) -> ConfoundProfile:
    """Dataset-level profile from per-file profiles.

    The dataset copy baseline is the unweighted mean of per-file means,
    mirroring score aggregation exactly so the two are comparable (and so
    the copy backend's dataset mean matches bit-for-bit).
    """
    if not per_file:
        raise ValueError("no per-file confound profiles")
    ordered = [per_file[ref] for ref in sorted(per_file)]
    copy_means = {ref: per_file[ref].copy_baseline_mean for ref in sorted(per_file)}
    stuck: dict[int, int] = {}
    predictable: set[tuple[int, str]] = set()
    histogram: Counter = Counter()
    for c in ordered:
        for index, run in c.stuck_columns:
            stuck[index] = max(stuck.get(index, 0), run)
        predictable.update(c.predictable_columns)
        histogram.update(c.run_length_histogram)
    dup_rows = sum(c.duplicate_successor_rows for c in ordered)
    rows = sum(c.row_count for c in ordered)
    return ConfoundProfile(
        copy_baseline_mean=mean(list(copy_means.values())),
        duplicate_row_fraction=dup_rows / rows,
        stuck_columns=sorted(stuck.items()),
        predictable_columns=sorted(predictable),
        per_trial_copy=[r for c in ordered for r in c.per_trial_copy],
        copy_baseline_best_mean=mean([c.copy_baseline_best_mean for c in ordered]),
        per_trial_copy_best=[r for c in ordered for r in c.per_trial_copy_best],
        duplicate_successor_rows=dup_rows,
        row_count=rows,
        run_length_histogram=dict(sorted(histogram.items())),
        per_file_copy_mean=copy_means,
    )


def memorization_verdict(
    score: DatasetScore,
    profile: ConfoundProfile,
    thresholds: Thresholds = Thresholds(),
) -> Verdict:
    """Combine score and confound profile into one qualified level.

    Heavy row duplication dominates: no margin over the copy baseline is
    trustworthy when most rows repeat their predecessor. Otherwise the
    margin against the copy baseline decides between strong, weak, and no
    evidence.
    """
    margin = score.dataset_mean - profile.copy_baseline_mean
    confounded = profile.duplicate_row_fraction >= thresholds.confound_dup
    if confounded:
        level = LEVEL_CONFOUNDED
    elif margin >= thresholds.margin_min:
        level = LEVEL_STRONG
    elif margin > 0:
        level = LEVEL_WEAK
    else:
        level = LEVEL_NONE

    notes = []
    if confounded:
        notes.append(
            f"duplicate-successor fraction {profile.duplicate_row_fraction:.3f} >= "
            f"threshold {thresholds.confound_dup}: high scores are explainable by "
            "copying repeated context rows"
        )
    for index, run in profile.stuck_columns:
        notes.append(f"column {index} stuck: {run} consecutive identical values")
    for index, kind in profile.predictable_columns:
        notes.append(f"column {index} predictable without memorization: {kind}")
    if level == LEVEL_NONE:
        notes.append(NO_EVIDENCE_CAVEAT)
    return Verdict(
        level=level,
        llm_score=score.dataset_mean,
        copy_baseline=profile.copy_baseline_mean,
        margin=margin,
        notes=notes,
    )
