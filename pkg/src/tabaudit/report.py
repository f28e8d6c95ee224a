"""Colored diffs, report rendering, and deterministic result persistence.

Diffs color each generated value green when it matches the ground-truth
row at the same position, red when it differs, and purple when the model
predicted past the end of the expected row. Reports render to terminal
text, a standalone HTML page, or canonical JSON; persisted results reload
with an integrity check that re-derives every stored ratio.
"""

from __future__ import annotations

import html
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .backends import GenParams
from .confound import ConfoundProfile, Thresholds, Verdict, memorization_verdict
from .rng import GENERATOR_ID
from .sampler import AuditConfig
from .scoring import (
    DatasetScore,
    TrialScore,
    levenshtein_distance,
    levenshtein_ratio,
    mean,
)

GREEN = "green"
RED = "red"
PURPLE = "purple"

GRANULARITY_CELL = "cell"
GRANULARITY_CHAR = "char"
GRANULARITIES = (GRANULARITY_CELL, GRANULARITY_CHAR)

_ANSI = {GREEN: "\x1b[32m", RED: "\x1b[31m", PURPLE: "\x1b[35m"}
_ANSI_RESET = "\x1b[0m"

FORMATS = ("ansi", "html", "json")

SUMMARY_NAME = "summary.json"
TRIALS_NAME = "trials.jsonl"
HTML_NAME = "report.html"

_SCHEMA = "tabaudit-report-v1"


class UnsupportedFormat(Exception):
    pass


class ParseError(Exception):
    """Result file is missing, malformed, or structurally invalid."""


class IntegrityMismatch(Exception):
    """A stored derived value does not re-derive from its stored inputs."""


@dataclass(frozen=True)
class RowDiff:
    segments: list[tuple[str, str]]
    gt_row: str
    gen_row: str
    granularity: str


@dataclass(frozen=True)
class Provenance:
    tool_version: str
    generator: str
    backend_id: str
    started_utc: str
    finished_utc: str

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value:
                raise ValueError(f"provenance field {name} must be non-empty")


@dataclass(frozen=True)
class ReportTrial:
    file: str
    score: TrialScore
    diff: RowDiff


@dataclass(frozen=True)
class AuditReport:
    audit_config: AuditConfig
    gen_params: GenParams
    thresholds: Thresholds
    backend: str
    granularity: str
    dataset_score: DatasetScore
    confound: ConfoundProfile
    verdict: Verdict
    trials: list[ReportTrial]
    provenance: Provenance
    notes: list[str] = field(default_factory=list)


def _merge_runs(colored: list[tuple[str, str]]) -> list[tuple[str, str]]:
    segments: list[tuple[str, str]] = []
    for text, color in colored:
        if segments and segments[-1][1] == color:
            segments[-1] = (segments[-1][0] + text, color)
        else:
            segments.append((text, color))
    return segments


def _cell_segments(gt: str, gen: str, delimiter: str) -> list[tuple[str, str]]:
    gt_tokens = gt.split(delimiter)
    gen_tokens = gen.split(delimiter)
    segments = []
    for k, token in enumerate(gen_tokens):
        # Carry the joining delimiter so the segment texts concatenate
        # back to the generated row exactly.
        text = token if k == 0 else delimiter + token
        if k >= len(gt_tokens):
            segments.append((text, PURPLE))
        elif token == gt_tokens[k]:
            segments.append((text, GREEN))
        else:
            segments.append((text, RED))
    if len(gen_tokens) < len(gt_tokens):
        # Empty red marker: a truncated row is not a perfect match.
        segments.append(("", RED))
    return segments


def _char_segments(gt: str, gen: str) -> list[tuple[str, str]]:
    colored = []
    for k, ch in enumerate(gen):
        if k >= len(gt):
            colored.append((ch, PURPLE))
        elif ch == gt[k]:
            colored.append((ch, GREEN))
        else:
            colored.append((ch, RED))
    segments = _merge_runs(colored)
    if len(gen) < len(gt):
        segments.append(("", RED))
    return segments


def diff_row(
    gt: str,
    gen: str,
    extra_lines: list[str] | None = None,
    delimiter: str = ",",
    granularity: str = GRANULARITY_CELL,
) -> RowDiff:
    """Positional comparison of a generated row against the ground truth.

    Cell granularity compares delimiter-separated values whole; char
    granularity compares character by character (the fallback for files
    whose spacing does not survive tokenization). Extra lines beyond the
    first are always extra predictions, colored purple.
    """
    if granularity == GRANULARITY_CELL:
        segments = _cell_segments(gt, gen, delimiter)
    elif granularity == GRANULARITY_CHAR:
        segments = _char_segments(gt, gen)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    for line in extra_lines or []:
        segments.append(("\n" + line, PURPLE))
    return RowDiff(segments=segments, gt_row=gt, gen_row=gen, granularity=granularity)


def is_perfect(diff: RowDiff) -> bool:
    """True when every segment is green (no red, no purple, no extras)."""
    return all(color == GREEN for _, color in diff.segments)


def ansi_diff(diff: RowDiff) -> str:
    return "".join(
        _ANSI[color] + text + _ANSI_RESET
        for text, color in diff.segments
        if text
    )


def _html_diff(diff: RowDiff) -> str:
    return "".join(
        f'<span class="{color}">{html.escape(text)}</span>'
        for text, color in diff.segments
        if text
    )


def provenance_from_timestamps(
    timestamps: list[str],
    backend_id: str,
) -> Provenance:
    """Provenance window derived from completion timestamps, not the wall
    clock, so a replay run reproduces the recorded run's bytes."""
    stamps = [t for t in timestamps if t]
    if not stamps:
        # A foreign cache may omit timestamps; keep provenance non-empty.
        stamps = ["unrecorded"]
    return Provenance(
        tool_version=__version__,
        generator=GENERATOR_ID,
        backend_id=backend_id,
        started_utc=min(stamps),
        finished_utc=max(stamps),
    )


# --- serialization ---

def _trial_to_jsonable(rt: ReportTrial) -> dict:
    return {
        "file": rt.file,
        "trial_id": rt.score.trial_id,
        "ground_truth": rt.score.ground_truth,
        "generated_row": rt.score.generated_row,
        "extra_lines": list(rt.score.extra_lines),
        "lev_dist": rt.score.lev_dist,
        "ratio": rt.score.ratio,
        "copy_ratio": rt.score.copy_ratio,
        "empty_completion": rt.score.empty_completion,
        "diff": {
            "granularity": rt.diff.granularity,
            "segments": [[text, color] for text, color in rt.diff.segments],
        },
    }


def _trial_from_jsonable(obj: dict) -> ReportTrial:
    score = TrialScore(
        trial_id=obj["trial_id"],
        ground_truth=obj["ground_truth"],
        generated_row=obj["generated_row"],
        extra_lines=list(obj["extra_lines"]),
        lev_dist=obj["lev_dist"],
        ratio=obj["ratio"],
        copy_ratio=obj["copy_ratio"],
        empty_completion=obj.get("empty_completion", False),
    )
    diff = RowDiff(
        segments=[(text, color) for text, color in obj["diff"]["segments"]],
        gt_row=score.ground_truth,
        gen_row=score.generated_row,
        granularity=obj["diff"]["granularity"],
    )
    return ReportTrial(file=obj["file"], score=score, diff=diff)


def to_jsonable(report: AuditReport, include_trials: bool = True) -> dict:
    confound = asdict(report.confound)
    confound["run_length_histogram"] = {
        str(run): count
        for run, count in sorted(report.confound.run_length_histogram.items())
    }
    confound["stuck_columns"] = [list(t) for t in report.confound.stuck_columns]
    confound["predictable_columns"] = [list(t) for t in report.confound.predictable_columns]
    obj = {
        "schema": _SCHEMA,
        "config": {
            "audit": asdict(report.audit_config),
            "gen": asdict(report.gen_params),
            "thresholds": asdict(report.thresholds),
            "backend": report.backend,
            "granularity": report.granularity,
        },
        "dataset_score": asdict(report.dataset_score),
        "confound": confound,
        "verdict": asdict(report.verdict),
        "provenance": asdict(report.provenance),
        "notes": list(report.notes),
    }
    if include_trials:
        obj["trials"] = [_trial_to_jsonable(rt) for rt in report.trials]
    return obj


def from_jsonable(obj: dict) -> AuditReport:
    try:
        cfg = obj["config"]
        confound = obj["confound"]
        return AuditReport(
            audit_config=AuditConfig(**cfg["audit"]),
            gen_params=GenParams(**cfg["gen"]),
            thresholds=Thresholds(**cfg["thresholds"]),
            backend=cfg["backend"],
            granularity=cfg["granularity"],
            dataset_score=DatasetScore(**obj["dataset_score"]),
            confound=ConfoundProfile(
                copy_baseline_mean=confound["copy_baseline_mean"],
                duplicate_row_fraction=confound["duplicate_row_fraction"],
                stuck_columns=[tuple(t) for t in confound["stuck_columns"]],
                predictable_columns=[tuple(t) for t in confound["predictable_columns"]],
                per_trial_copy=list(confound["per_trial_copy"]),
                copy_baseline_best_mean=confound.get("copy_baseline_best_mean", 0.0),
                per_trial_copy_best=list(confound.get("per_trial_copy_best", [])),
                duplicate_successor_rows=confound.get("duplicate_successor_rows", 0),
                row_count=confound.get("row_count", 0),
                run_length_histogram={
                    int(run): count
                    for run, count in confound.get("run_length_histogram", {}).items()
                },
                per_file_copy_mean=dict(confound.get("per_file_copy_mean", {})),
            ),
            verdict=Verdict(**obj["verdict"]),
            trials=[_trial_from_jsonable(t) for t in obj.get("trials", [])],
            provenance=Provenance(**obj["provenance"]),
            notes=list(obj.get("notes", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed report object: {exc}") from exc


def _canonical_json(obj: dict) -> bytes:
    # sort_keys plus Python's shortest round-trip float repr makes the
    # byte stream a pure function of the report's values.
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def render_json(report: AuditReport) -> bytes:
    return _canonical_json(to_jsonable(report))


def _format_notes(notes: list[str], indent: str = "  ") -> list[str]:
    return [f"{indent}- {note}" for note in notes]


def render_ansi(report: AuditReport) -> bytes:
    score = report.dataset_score
    confound = report.confound
    lines = [
        f"row-completion audit: model {report.gen_params.model_id}, "
        f"backend {report.backend}",
        f"window {report.audit_config.window_len}, "
        f"fewshot {report.audit_config.n_fewshot}, "
        f"trials/file {report.audit_config.n_trials}, "
        f"seed {report.audit_config.seed}, "
        f"granularity {report.granularity}",
        "",
        "per-file mean levenshtein ratio:",
    ]
    for file_ref in sorted(score.per_file):
        lines.append(f"  {file_ref}  {score.per_file[file_ref]:.4f}")
    lines += [
        f"dataset mean: {score.dataset_mean:.4f} "
        f"(trial-weighted {score.dataset_mean_weighted:.4f}, "
        f"{score.trial_count} trials)",
        "",
        f"copy baseline: {confound.copy_baseline_mean:.4f} "
        f"(best-of-window {confound.copy_baseline_best_mean:.4f})",
        f"duplicate successor fraction: {confound.duplicate_row_fraction:.4f}",
        f"stuck columns: {confound.stuck_columns or 'none'}",
        f"predictable columns: {confound.predictable_columns or 'none'}",
        "",
        f"verdict: {report.verdict.level} (margin {report.verdict.margin:+.4f})",
    ]
    lines += _format_notes(report.verdict.notes)
    if report.notes:
        lines.append("run notes:")
        lines += _format_notes(report.notes)
    if report.trials:
        lines.append("")
        lines.append("trials:")
        for rt in report.trials:
            marker = "ok " if is_perfect(rt.diff) else "DIFF"
            lines.append(
                f"[{rt.file} #{rt.score.trial_id}] {marker} "
                f"ratio {rt.score.ratio:.4f} (copy {rt.score.copy_ratio:.4f})"
            )
            lines.append(f"  gt   {rt.score.ground_truth}")
            lines.append(f"  gen  {ansi_diff(rt.diff)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


_HTML_STYLE = (
    "body{font-family:monospace;background:#fff;color:#111;margin:2em}"
    "h1{font-size:1.3em}h2{font-size:1.1em}"
    "table{border-collapse:collapse}td,th{border:1px solid #999;"
    "padding:2px 8px;text-align:left}"
    ".green{color:#1a7f37}.red{color:#cf222e}.purple{color:#8250df}"
    ".diff{white-space:pre-wrap;margin:0 0 1em 0}"
)


def render_html(report: AuditReport) -> bytes:
    score = report.dataset_score
    confound = report.confound
    esc = html.escape
    rows = "".join(
        f"<tr><td>{esc(ref)}</td><td>{score.per_file[ref]:.4f}</td></tr>"
        for ref in sorted(score.per_file)
    )
    notes = "".join(f"<li>{esc(n)}</li>" for n in report.verdict.notes)
    trials = []
    for rt in report.trials:
        trials.append(
            f"<h3>{esc(rt.file)} trial {rt.score.trial_id} "
            f"(ratio {rt.score.ratio:.4f})</h3>"
            f'<pre class="diff">gt   {esc(rt.score.ground_truth)}\n'
            f"gen  {_html_diff(rt.diff)}</pre>"
        )
    doc = (
        "<!doctype html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>row-completion audit</title><style>{_HTML_STYLE}</style>"
        "</head><body>"
        f"<h1>row-completion audit</h1>"
        f"<p>model {esc(report.gen_params.model_id)}, backend "
        f"{esc(report.backend)}, seed {report.audit_config.seed}</p>"
        f"<h2>scores</h2><table><tr><th>file</th><th>mean ratio</th></tr>"
        f"{rows}</table>"
        f"<p>dataset mean {score.dataset_mean:.4f}, copy baseline "
        f"{confound.copy_baseline_mean:.4f}, duplicate fraction "
        f"{confound.duplicate_row_fraction:.4f}</p>"
        f"<h2>verdict: {esc(report.verdict.level)}</h2>"
        f"<ul>{notes}</ul>"
        f"<h2>trials</h2>{''.join(trials)}"
        "</body></html>\n"
    )
    return doc.encode("utf-8")


def render_report(report: AuditReport, format: str) -> bytes:
    if format == "json":
        return render_json(report)
    if format == "ansi":
        return render_ansi(report)
    if format == "html":
        return render_html(report)
    raise UnsupportedFormat(f"unknown report format {format!r}")


def save_report(report: AuditReport, out_dir: str | Path) -> dict[str, Path]:
    """Write summary.json, trials.jsonl, and report.html into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out / SUMMARY_NAME,
        "trials": out / TRIALS_NAME,
        "html": out / HTML_NAME,
    }
    paths["summary"].write_bytes(_canonical_json(to_jsonable(report, include_trials=False)))
    with open(paths["trials"], "w", encoding="utf-8") as fh:
        for rt in report.trials:
            fh.write(json.dumps(_trial_to_jsonable(rt), sort_keys=True,
                                ensure_ascii=False) + "\n")
    paths["html"].write_bytes(render_html(report))
    return paths


def _verify_integrity(report: AuditReport) -> None:
    by_file: dict[str, list[TrialScore]] = {}
    for rt in report.trials:
        t = rt.score
        if levenshtein_distance(t.ground_truth, t.generated_row) != t.lev_dist:
            raise IntegrityMismatch(
                f"trial {t.trial_id}: stored lev_dist does not re-derive"
            )
        if levenshtein_ratio(t.ground_truth, t.generated_row) != t.ratio:
            raise IntegrityMismatch(
                f"trial {t.trial_id}: stored ratio does not re-derive"
            )
        by_file.setdefault(rt.file, []).append(t)
    score = report.dataset_score
    for file_ref, trials in by_file.items():
        if file_ref not in score.per_file:
            raise IntegrityMismatch(f"trials for unknown file {file_ref!r}")
        if mean([t.ratio for t in trials]) != score.per_file[file_ref]:
            raise IntegrityMismatch(f"{file_ref}: per-file mean does not re-derive")
    if report.trials and len(report.trials) != score.trial_count:
        raise IntegrityMismatch("trial_count does not match persisted trials")
    values = [score.per_file[ref] for ref in sorted(score.per_file)]
    if mean(values) != score.dataset_mean:
        raise IntegrityMismatch("dataset_mean does not re-derive from per-file means")
    verdict = report.verdict
    recomputed = memorization_verdict(score, report.confound, report.thresholds)
    if recomputed.level != verdict.level or recomputed.margin != verdict.margin:
        raise IntegrityMismatch("verdict does not re-derive from stored inputs")


def load_results(path: str | Path) -> AuditReport:
    """Reload a persisted report and re-derive every stored ratio.

    Accepts a run directory, a summary.json, or a full JSON render. When
    loading a summary, a sibling trials.jsonl is merged in if present.
    """
    p = Path(path)
    if p.is_dir():
        p = p / SUMMARY_NAME
    if not p.exists():
        raise ParseError(f"no such result file: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ParseError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"{p}: expected a JSON object")
    if "trials" not in obj:
        sibling = p.with_name(TRIALS_NAME)
        if sibling.exists():
            trials = []
            with open(sibling, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        try:
                            trials.append(json.loads(line))
                        except ValueError as exc:
                            raise ParseError(
                                f"{sibling}: invalid JSON line: {exc}"
                            ) from exc
            obj["trials"] = trials
    report = from_jsonable(obj)
    _verify_integrity(report)
    return report
