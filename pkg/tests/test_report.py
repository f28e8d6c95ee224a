"""Report tests: diff rendering, serialization, integrity verification."""

import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabaudit.backends import GenParams, MemorizerBackend
from tabaudit.confound import (
    Thresholds,
    file_confound,
    memorization_verdict,
    merge_confounds,
)
from tabaudit.prompting import assemble_transcript
from tabaudit.report import (
    GRANULARITY_CHAR,
    GREEN,
    PURPLE,
    RED,
    AuditReport,
    IntegrityMismatch,
    ParseError,
    Provenance,
    ReportTrial,
    RowDiff,
    UnsupportedFormat,
    ansi_diff,
    diff_row,
    from_jsonable,
    is_perfect,
    load_results,
    provenance_from_timestamps,
    render_html,
    render_json,
    render_report,
    save_report,
    to_jsonable,
)
from tabaudit.sampler import AuditConfig, build_trial_plan
from tabaudit.scoring import aggregate_scores, score_trial

from synth import as_file, distinct_rows

FIXTURES = Path(__file__).parent / "fixtures"


# ------------------------------------------------------------- row diffs


def test_diff_equal_rows_all_green():
    diff = diff_row("1,2,3", "1,2,3")
    assert diff.segments == [("1", GREEN), (",2", GREEN), (",3", GREEN)]
    assert is_perfect(diff)


def test_diff_mismatch_and_extra_cell():
    diff = diff_row("1,2,3", "1,9,3,4")
    assert diff.segments == [
        ("1", GREEN),
        (",9", RED),
        (",3", GREEN),
        (",4", PURPLE),
    ]
    assert not is_perfect(diff)


def test_diff_extra_lines_append_purple():
    diff = diff_row("1,2", "1,2", extra_lines=["7,8"])
    assert diff.segments == [("1", GREEN), (",2", GREEN), ("\n7,8", PURPLE)]
    assert not is_perfect(diff)


def test_diff_shorter_generation_marks_missing():
    diff = diff_row("1,2,3", "1,2")
    assert diff.segments == [("1", GREEN), (",2", GREEN), ("", RED)]
    assert not is_perfect(diff)


def test_diff_concat_invariant():
    rng = random.Random(5)
    alphabet = "0123456789.,"
    for _ in range(200):
        gt = "".join(rng.choice(alphabet) for _ in range(rng.randrange(1, 25)))
        gen = "".join(rng.choice(alphabet) for _ in range(rng.randrange(25)))
        for granularity in ("cell", "char"):
            diff = diff_row(gt, gen, granularity=granularity)
            joined = "".join(text for text, _ in diff.segments)
            assert joined == gen


def test_diff_char_granularity_merges_runs():
    diff = diff_row("abcd", "abXd", granularity=GRANULARITY_CHAR)
    assert diff.segments == [("ab", GREEN), ("X", RED), ("d", GREEN)]
    longer = diff_row("ab", "abcd", granularity=GRANULARITY_CHAR)
    assert longer.segments == [("ab", GREEN), ("cd", PURPLE)]


def test_diff_custom_delimiter():
    diff = diff_row("1;2", "1;9", delimiter=";")
    assert diff.segments == [("1", GREEN), (";9", RED)]


def test_diff_rejects_unknown_granularity():
    with pytest.raises(ValueError):
        diff_row("1", "1", granularity="word")


short_row = st.text(alphabet="019,.x", max_size=14)


@settings(max_examples=300, deadline=None)
@given(short_row, short_row)
def test_diff_all_green_iff_equal(gt, gen):
    for granularity in ("cell", "char"):
        diff = diff_row(gt, gen, granularity=granularity)
        assert is_perfect(diff) == (gt == gen)


def test_ansi_uses_exactly_three_codes():
    out = ansi_diff(diff_row("1,2,3", "1,9,3,4", extra_lines=["5,5"]))
    assert "\x1b[32m1\x1b[0m" in out
    assert "\x1b[31m,9\x1b[0m" in out
    assert "\x1b[35m,4\x1b[0m" in out
    starts = [i for i in range(len(out)) if out.startswith("\x1b[", i)]
    seqs = {out[i:out.index("m", i) + 1] for i in starts}
    assert seqs <= {"\x1b[32m", "\x1b[31m", "\x1b[35m", "\x1b[0m"}


def test_ansi_skips_empty_segments():
    out = ansi_diff(diff_row("1,2,3", "1,2"))
    assert "\x1b[31m\x1b[0m" not in out


# --------------------------------------------------------- full reports


def build_report(tmp_name="walk.csv", n_trials=4, seed=9, rows=None):
    file = as_file(rows or distinct_rows(60, seed=seed), name=tmp_name)
    cfg = AuditConfig(n_trials=n_trials, seed=seed)
    plan = build_trial_plan(file, cfg)
    backend = MemorizerBackend(file)
    params = GenParams()
    scores = []
    trials = []
    for i, trial in enumerate(plan.trials):
        tr = assemble_transcript(trial.test, trial.fewshot, trial_id=i,
                                 file_ref=file.source_name)
        result = backend.complete(tr, params)
        score = score_trial(trial.test.target_row, result,
                            trial.test.prefix_rows[-1], trial_id=i)
        scores.append(score)
        trials.append(ReportTrial(
            file=file.source_name,
            score=score,
            diff=diff_row(score.ground_truth, score.generated_row,
                          score.extra_lines),
        ))
    dataset = aggregate_scores({file.source_name: scores})
    confound = merge_confounds({file.source_name: file_confound(file, plan)})
    verdict = memorization_verdict(dataset, confound)
    return AuditReport(
        audit_config=cfg,
        gen_params=params,
        thresholds=Thresholds(),
        backend="memorizer",
        granularity="cell",
        dataset_score=dataset,
        confound=confound,
        verdict=verdict,
        trials=trials,
        provenance=Provenance(
            tool_version="0.1.0",
            generator="splitmix64",
            backend_id="memorizer",
            started_utc="2026-08-10T00:00:00.000000Z",
            finished_utc="2026-08-10T00:00:09.000000Z",
        ),
    )


def test_render_json_is_deterministic_bytes():
    report = build_report()
    assert render_json(report) == render_json(report)


def test_json_round_trip_equality():
    report = build_report()
    loaded = from_jsonable(json.loads(render_json(report).decode("utf-8")))
    assert loaded == report


def test_to_jsonable_histogram_keys_are_strings():
    obj = to_jsonable(build_report())
    hist = obj["confound"]["run_length_histogram"]
    assert all(isinstance(k, str) for k in hist)
    assert obj["schema"] == "tabaudit-report-v1"


def test_save_and_load_round_trip(tmp_path):
    report = build_report()
    paths = save_report(report, tmp_path)
    assert set(paths) == {"summary", "trials", "html"}
    assert (tmp_path / "summary.json").exists()
    assert (tmp_path / "trials.jsonl").exists()
    assert (tmp_path / "report.html").exists()
    loaded = load_results(tmp_path)
    assert loaded == report
    # Summary alone omits trials but still loads.
    summary_only = json.loads((tmp_path / "summary.json").read_text())
    assert "trials" not in summary_only


def test_load_results_accepts_file_path(tmp_path):
    report = build_report()
    save_report(report, tmp_path)
    loaded = load_results(tmp_path / "summary.json")
    assert loaded == report


def test_tampered_trial_ratio_detected(tmp_path):
    report = build_report()
    save_report(report, tmp_path)
    lines = (tmp_path / "trials.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    rec["ratio"] = 0.123
    lines[0] = json.dumps(rec)
    (tmp_path / "trials.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(IntegrityMismatch):
        load_results(tmp_path)


def test_tampered_dataset_mean_detected(tmp_path):
    report = build_report()
    save_report(report, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    summary["dataset_score"]["dataset_mean"] += 0.01
    (tmp_path / "summary.json").write_text(json.dumps(summary))
    with pytest.raises(IntegrityMismatch):
        load_results(tmp_path)


def test_tampered_verdict_detected(tmp_path):
    report = build_report()
    save_report(report, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    summary["verdict"]["level"] = "no_evidence"
    (tmp_path / "summary.json").write_text(json.dumps(summary))
    with pytest.raises(IntegrityMismatch):
        load_results(tmp_path)


def test_malformed_summary_is_parse_error(tmp_path):
    (tmp_path / "summary.json").write_text("{not json")
    with pytest.raises(ParseError):
        load_results(tmp_path)
    (tmp_path / "summary.json").write_text(json.dumps({"schema": "x"}))
    with pytest.raises(ParseError):
        load_results(tmp_path)


def test_missing_results_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_results(tmp_path / "nowhere")


def test_render_formats():
    report = build_report()
    ansi = render_report(report, "ansi").decode("utf-8")
    assert "memorizer" in ansi
    assert "strong_evidence" in ansi
    html = render_report(report, "html").decode("utf-8")
    assert html.startswith("<!DOCTYPE html>") or html.startswith("<!doctype html>")
    assert "</html>" in html
    assert render_report(report, "json") == render_json(report)
    with pytest.raises(UnsupportedFormat):
        render_report(report, "pdf")


def test_html_escapes_row_content():
    rows = [f"<b>{i}&x,{i}.5" for i in range(40)]
    report = build_report(rows=rows)
    html = render_html(report).decode("utf-8")
    assert "<b>" not in html.split("<body>", 1)[-1].replace("<br>", "")
    assert "&lt;b&gt;" in html


def test_provenance_requires_fields():
    with pytest.raises(ValueError):
        Provenance(tool_version="", generator="g", backend_id="b",
                   started_utc="s", finished_utc="f")


def test_provenance_from_timestamps():
    stamps = [
        "2026-08-10T00:00:05.000000Z",
        "2026-08-10T00:00:01.000000Z",
        "2026-08-10T00:00:03.000000Z",
    ]
    prov = provenance_from_timestamps(stamps, "http")
    assert prov.started_utc == "2026-08-10T00:00:01.000000Z"
    assert prov.finished_utc == "2026-08-10T00:00:05.000000Z"
    assert prov.backend_id == "http"
    assert prov.generator == "splitmix64"
    empty = provenance_from_timestamps([], "http")
    assert empty.started_utc == "unrecorded"
    assert empty.finished_utc == "unrecorded"


# ----------------------------------------------------- reference reloads


REFERENCE_MEANS = {
    "capture24": 0.9357,
    "hhar": 0.863,
    "mhealth": 0.7789,
    "daphnet_fog": 0.8074,
    "pamap2": 0.7417,
}


@pytest.mark.parametrize("name,mean_value", sorted(REFERENCE_MEANS.items()))
def test_reference_reports_reload_to_exact_means(name, mean_value):
    report = load_results(FIXTURES / f"{name}.json")
    assert report.dataset_score.dataset_mean == mean_value
    assert report.dataset_score.trial_count == 50
    assert len(report.dataset_score.per_file) == 2


def test_reference_verdict_levels():
    levels = {
        name: load_results(FIXTURES / f"{name}.json").verdict.level
        for name in REFERENCE_MEANS
    }
    assert levels == {
        "capture24": "confounded",
        "hhar": "strong_evidence",
        "mhealth": "weak_evidence",
        "daphnet_fog": "strong_evidence",
        "pamap2": "no_evidence",
    }
