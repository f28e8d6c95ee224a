"""Edit-distance scoring of generated rows against ground truth.

The similarity score for a trial is ``1 - lev_dist / (len_gt + len_gen)``:
unit-cost Levenshtein distance normalized by the two row lengths, which
lands in [0, 1] with 1.0 meaning verbatim reproduction. Only the first
non-empty output line is scored; anything after it is kept as extra
predictions for rendering, never scored.
"""

from __future__ import annotations

from dataclasses import dataclass

_FENCE = "```"


class EmptyCompletion(Exception):
    """Completion text holds no non-empty line."""


class NoTrials(Exception):
    """Aggregation requires at least one scored trial per file."""


@dataclass(frozen=True)
class TrialScore:
    trial_id: int
    ground_truth: str
    generated_row: str
    extra_lines: list[str]
    lev_dist: int
    ratio: float
    copy_ratio: float
    empty_completion: bool = False


@dataclass(frozen=True)
class DatasetScore:
    per_file: dict[str, float]
    dataset_mean: float
    trial_count: int
    # Trial-weighted variant, reported alongside the unweighted mean since
    # either reading of "averaged across files" is defensible.
    dataset_mean_weighted: float = 0.0


def levenshtein_distance(a: str, b: str) -> int:
    """Unit-cost edit distance over Unicode scalar values.

    Two-row dynamic program: O(len(a) * len(b)) time, O(min(len)) space.
    Rows can run to hundreds of characters and an audit scores thousands of
    them, so the quadratic table is never materialized.
    """
    if a == b:
        return 0
    # Keep the inner row as short as possible.
    if len(a) > len(b):
        a, b = b, a
    n = len(a)
    if n == 0:
        return len(b)
    current = list(range(n + 1))
    for i, cb in enumerate(b, start=1):
        previous, current = current, [i] + [0] * n
        for j, ca in enumerate(a, start=1):
            cost = 0 if ca == cb else 1
            current[j] = min(
                previous[j] + 1,       # delete from b
                current[j - 1] + 1,    # insert into b
                previous[j - 1] + cost # substitute
            )
    return current[n]


def levenshtein_ratio(gt: str, gen: str) -> float:
    """Length-normalized similarity in [0, 1].

    Equal strings score 1.0; in particular the empty-vs-empty case, where
    the formula degenerates to 0/0, is defined as 1.0. Empty against
    non-empty follows the formula and scores 0.0.
    """
    if gt == gen:
        return 1.0
    return 1.0 - levenshtein_distance(gt, gen) / (len(gt) + len(gen))


def extract_candidate_row(
    completion_text: str,
    *,
    strip_whitespace: bool = True,
    strip_fences: bool = True,
) -> tuple[str, list[str]]:
    """Split raw model output into the scored row and extra predictions.

    Chat models routinely wrap output in markdown code fences; fence lines
    are dropped by default. ``strip_whitespace=False`` scores lines exactly
    as produced.
    """
    lines = completion_text.splitlines()
    if strip_fences:
        lines = [ln for ln in lines if not ln.strip().startswith(_FENCE)]
    if strip_whitespace:
        lines = [ln.strip() for ln in lines]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise EmptyCompletion("completion has no non-empty line")
    return lines[0], lines[1:]


def score_trial(
    ground_truth: str,
    completion,
    copy_source: str,
    *,
    trial_id: int = 0,
    strip_whitespace: bool = True,
    strip_fences: bool = True,
) -> TrialScore:
    """Score one completion against the true next row.

    ``completion`` is a backend CompletionResult or a bare output string.
    ``copy_source`` is the last prefix row; its ratio against the ground
    truth is the score a trivial copy strategy would have achieved on this
    trial. An empty completion scores as an empty generated row (ratio 0
    for non-empty ground truth) and is flagged.
    """
    if not ground_truth:
        raise ValueError("ground_truth must be non-empty")
    text = getattr(completion, "text", completion)
    try:
        row, extra = extract_candidate_row(
            text,
            strip_whitespace=strip_whitespace,
            strip_fences=strip_fences,
        )
        empty = False
    except EmptyCompletion:
        row, extra, empty = "", [], True
    return TrialScore(
        trial_id=trial_id,
        ground_truth=ground_truth,
        generated_row=row,
        extra_lines=extra,
        lev_dist=levenshtein_distance(ground_truth, row),
        ratio=levenshtein_ratio(ground_truth, row),
        copy_ratio=levenshtein_ratio(ground_truth, copy_source),
        empty_completion=empty,
    )


def mean(values: list[float]) -> float:
    """Plain left-to-right arithmetic mean.

    Shared by score aggregation and the copy-baseline computation so the
    two code paths produce bit-identical floats on identical inputs.
    """
    if not values:
        raise NoTrials("mean of zero values")
    return sum(values) / len(values)


def aggregate_scores(trials_by_file: dict[str, list[TrialScore]]) -> DatasetScore:
    """Per-file mean ratios, then the unweighted mean across files.

    Files are folded in sorted-name order so the result is independent of
    dict insertion order; a reloaded report recomputes the same bits.
    """
    if not trials_by_file:
        raise NoTrials("no files to aggregate")
    per_file = {}
    for file_ref in sorted(trials_by_file):
        trials = trials_by_file[file_ref]
        if not trials:
            raise NoTrials(f"{file_ref}: no trials")
        per_file[file_ref] = mean([t.ratio for t in trials])
    all_ratios = [
        t.ratio for file_ref in sorted(trials_by_file)
        for t in trials_by_file[file_ref]
    ]
    return DatasetScore(
        per_file=per_file,
        dataset_mean=mean(list(per_file.values())),
        trial_count=len(all_ratios),
        dataset_mean_weighted=mean(all_ratios),
    )
