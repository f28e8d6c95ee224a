"""Command-line front end: full audits plus one subcommand per stage.

Stages are exposed individually (inspect, plan, prompt, score, report) so
confound analysis and cost estimation run before any model spend, and so
completions obtained elsewhere can be scored offline. ``audit`` wires the
whole pipeline; ``baseline`` and ``replay`` are the zero-network paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from . import report as report_mod
from .backends import (
    AuthError,
    CacheMiss,
    CompletionCache,
    CompletionError,
    CopyLastBackend,
    GenParams,
    HttpChatBackend,
    MemorizerBackend,
    NoisyMemorizerBackend,
    PrefixNotFound,
    RandomBackend,
    RecordingBackend,
    ReplayBackend,
    cache_key,
)
from .confound import (
    Thresholds,
    classify_predictable_columns,
    duplicate_profile,
    detect_stuck_columns,
    file_confound,
    memorization_verdict,
    merge_confounds,
)
from .ingest import (
    DatasetFile,
    IngestError,
    NoConsistentDelimiter,
    ParseConfig,
    infer_format,
    parse_dataset_file,
    profile_columns,
)
from .prompting import ROLE_MAPS, assemble_transcript
from .report import (
    GRANULARITIES,
    GRANULARITY_CELL,
    GRANULARITY_CHAR,
    AuditReport,
    ReportTrial,
    diff_row,
    load_results,
    provenance_from_timestamps,
    render_report,
    save_report,
)
from .sampler import (
    AuditConfig,
    SamplerError,
    Trial,
    TrialPlan,
    WindowSample,
    build_trial_plan,
)
from .scoring import NoTrials, aggregate_scores, score_trial

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_NETWORK = 4

BACKEND_CHOICES = ("http", "replay", "memorizer", "copy", "random", "noisy")

_PLAN_SCHEMA = "tabaudit-plan-v1"


class ConfigError(Exception):
    pass


@dataclass
class RunManifest:
    """Everything a run needs; TOML file first, flags override."""

    data: list[str] = field(default_factory=list)
    backend: str = "memorizer"
    model: str = "gpt-4"
    trials: int = 25
    window: int = 10
    fewshot: int = 7
    seed: int = 0
    out: str | None = None
    cache: str | None = None
    allow_overlap: bool = False
    granularity: str | None = None
    yes: bool = False
    temperature: float = 0.0
    max_output_tokens: int = 256
    timeout: float = 60.0
    concurrency: int = 4
    noise_p: float = 0.1
    role_map: str = "user_assistant"
    base_url: str | None = None
    delimiter: str | None = None
    has_header: bool | None = None
    comment_prefix: str | None = None
    margin_min: float = 0.10
    confound_dup: float = 0.5
    min_run: int = 20
    label_max_cardinality: int = 10
    label_min_run: int = 50

    def audit_config(self) -> AuditConfig:
        return AuditConfig(
            window_len=self.window,
            n_fewshot=self.fewshot,
            n_trials=self.trials,
            seed=self.seed,
            allow_overlap=self.allow_overlap,
        )

    def gen_params(self) -> GenParams:
        return GenParams(
            model_id=self.model,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            timeout=self.timeout,
        )

    def thresholds(self) -> Thresholds:
        return Thresholds(
            margin_min=self.margin_min,
            confound_dup=self.confound_dup,
            min_run=self.min_run,
            label_max_cardinality=self.label_max_cardinality,
            label_min_run=self.label_min_run,
        )

    def validate(self, require_data: bool = True) -> None:
        if require_data and not self.data:
            raise ConfigError("no input data: pass --data or set data in the manifest")
        if self.backend not in BACKEND_CHOICES:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.granularity is not None and self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ConfigError("noise-p must be in [0, 1]")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.role_map not in ROLE_MAPS:
            raise ConfigError(f"unknown role map {self.role_map!r}")
        try:
            self.audit_config()
            self.gen_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunManifest)}
_THRESHOLD_KEYS = {f.name for f in dataclasses.fields(Thresholds)}
_PARSE_KEYS = {"delimiter", "has_header", "comment_prefix"}


def _apply_toml(manifest: RunManifest, obj: dict, source: str) -> None:
    for key, value in obj.items():
        if key == "data":
            if not isinstance(value, list):
                raise ConfigError(f"{source}: data must be a list of paths")
            manifest.data = [str(v) for v in value]
        elif key == "thresholds":
            for sub, v in value.items():
                if sub not in _THRESHOLD_KEYS:
                    raise ConfigError(f"{source}: unknown threshold {sub!r}")
                setattr(manifest, sub, v)
        elif key == "parse":
            for sub, v in value.items():
                if sub not in _PARSE_KEYS:
                    raise ConfigError(f"{source}: unknown parse option {sub!r}")
                setattr(manifest, sub, v)
        elif key in _FIELD_NAMES:
            setattr(manifest, key, value)
        else:
            raise ConfigError(f"{source}: unknown manifest key {key!r}")


def manifest_from_args(args: argparse.Namespace, require_data: bool = True) -> RunManifest:
    manifest = RunManifest()
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "rb") as fh:
                obj = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"manifest not found: {config_path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{config_path}: {exc}") from exc
        _apply_toml(manifest, obj, str(config_path))
    for name in _FIELD_NAMES:
        if hasattr(args, name):
            value = getattr(args, name)
            if value is not None:
                setattr(manifest, name, list(value) if name == "data" else value)
    manifest.validate(require_data=require_data)
    return manifest


def resolve_data_paths(patterns: list[str]) -> list[Path]:
    paths: list[Path] = []
    seen = set()
    for pattern in patterns:
        candidate = Path(pattern)
        if candidate.is_file():
            matches = [candidate]
        else:
            matches = [Path(m) for m in sorted(glob.glob(pattern, recursive=True))
                       if Path(m).is_file()]
            if not matches:
                raise ConfigError(f"no files match {pattern!r}")
        for m in matches:
            if m not in seen:
                seen.add(m)
                paths.append(m)
    return paths


def _load_one(path: Path, manifest: RunManifest, source_name: str) -> DatasetFile:
    raw = path.read_bytes().decode("utf-8", errors="replace")
    overrides = (manifest.delimiter, manifest.has_header, manifest.comment_prefix)
    if all(v is None for v in overrides):
        return parse_dataset_file(raw, infer_format(raw), source_name=source_name)
    base = None
    if any(v is None for v in overrides):
        try:
            base = infer_format(raw)
        except (IngestError, ValueError):
            base = None
    if manifest.delimiter is None and base is None:
        raise NoConsistentDelimiter(f"{source_name}: pass --delimiter explicitly")
    cfg = ParseConfig(
        delimiter=manifest.delimiter if manifest.delimiter is not None
        else base.delimiter,
        has_header=manifest.has_header if manifest.has_header is not None
        else (base.has_header if base else False),
        comment_prefix=manifest.comment_prefix if manifest.comment_prefix is not None
        else (base.comment_prefix if base else None),
    )
    return parse_dataset_file(raw, cfg, source_name=source_name)


def load_files(manifest: RunManifest) -> tuple[dict[str, DatasetFile], list[str]]:
    """Parse every input; a file that fails is skipped with a note."""
    files: dict[str, DatasetFile] = {}
    notes: list[str] = []
    last_error: IngestError | None = None
    for path in resolve_data_paths(manifest.data):
        ref = path.name if path.name not in files else str(path)
        try:
            files[ref] = _load_one(path, manifest, ref)
        except IngestError as exc:
            notes.append(f"{path}: skipped: {exc}")
            last_error = exc
        except ValueError as exc:
            notes.append(f"{path}: skipped: {exc}")
            last_error = IngestError(str(exc))
    if not files:
        raise last_error if last_error else ConfigError("no input files resolved")
    return files, notes


def build_plans(
    files: dict[str, DatasetFile],
    manifest: RunManifest,
) -> tuple[dict[str, TrialPlan], list[str]]:
    cfg = manifest.audit_config()
    plans: dict[str, TrialPlan] = {}
    notes: list[str] = []
    last_error: SamplerError | None = None
    for ref in sorted(files):
        try:
            plans[ref] = build_trial_plan(files[ref], cfg)
        except SamplerError as exc:
            notes.append(f"{ref}: skipped: {exc}")
            last_error = exc
    if not plans:
        raise last_error if last_error else ConfigError("no plannable files")
    return plans, notes


def make_backend(manifest: RunManifest, files: dict[str, DatasetFile]):
    name = manifest.backend
    if name == "replay":
        if not manifest.cache:
            raise ConfigError("backend replay requires --cache")
        return ReplayBackend(CompletionCache(manifest.cache))
    if name == "memorizer":
        inner = MemorizerBackend(files)
    elif name == "copy":
        inner = CopyLastBackend()
    elif name == "random":
        inner = RandomBackend(manifest.seed)
    elif name == "noisy":
        inner = NoisyMemorizerBackend(files, manifest.noise_p, manifest.seed)
    elif name == "http":
        try:
            inner = HttpChatBackend(base_url=manifest.base_url)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"unknown backend {name!r}")
    if manifest.cache:
        inner = RecordingBackend(inner, CompletionCache(manifest.cache))
    return inner


def _effective_granularity(manifest: RunManifest, file: DatasetFile) -> str:
    if manifest.granularity is not None:
        return manifest.granularity
    return GRANULARITY_CHAR if file.non_canonical_spacing else GRANULARITY_CELL


def _confirm_cost(manifest: RunManifest, plans: dict[str, TrialPlan],
                  sample_chars: int) -> None:
    n_requests = sum(len(p.trials) for p in plans.values())
    print(
        f"remote audit: {n_requests} requests over {len(plans)} file(s), "
        f"about {sample_chars} prompt characters each",
        file=sys.stderr,
    )
    if manifest.yes:
        return
    if not sys.stdin.isatty():
        raise ConfigError("remote backend without --yes in a non-interactive session")
    answer = input(f"send {n_requests} requests to the remote model? [y/N] ")
    if not answer.strip().lower().startswith("y"):
        raise ConfigError("aborted by user")


def _assemble_all(plan: TrialPlan, manifest: RunManifest, ref: str):
    return [
        assemble_transcript(t.test, t.fewshot, manifest.role_map,
                            trial_id=i, file_ref=ref)
        for i, t in enumerate(plan.trials)
    ]


def _build_report(
    manifest: RunManifest,
    files: dict[str, DatasetFile],
    plans: dict[str, TrialPlan],
    trials_by_file: dict[str, list],
    timestamps: list[str],
    backend_ids: set[str],
    notes: list[str],
) -> AuditReport:
    thresholds = manifest.thresholds()
    dataset_score = aggregate_scores(trials_by_file)
    confounds = {
        ref: file_confound(files[ref], plans[ref], thresholds)
        for ref in sorted(trials_by_file)
    }
    profile = merge_confounds(confounds)
    verdict = memorization_verdict(dataset_score, profile, thresholds)
    provenance = provenance_from_timestamps(
        timestamps, "+".join(sorted(backend_ids)))
    report_trials = []
    for ref in sorted(trials_by_file):
        file = files[ref]
        granularity = _effective_granularity(manifest, file)
        for t in trials_by_file[ref]:
            diff = diff_row(
                t.ground_truth, t.generated_row, t.extra_lines,
                delimiter=file.config.delimiter, granularity=granularity,
            )
            report_trials.append(ReportTrial(file=ref, score=t, diff=diff))
    return AuditReport(
        audit_config=manifest.audit_config(),
        gen_params=manifest.gen_params(),
        thresholds=thresholds,
        backend=provenance.backend_id,
        granularity=manifest.granularity or GRANULARITY_CELL,
        dataset_score=dataset_score,
        confound=profile,
        verdict=verdict,
        trials=report_trials,
        provenance=provenance,
        notes=notes,
    )


def run_audit(manifest: RunManifest) -> AuditReport:
    """Parse, plan, prompt, complete, score, analyze, and assemble."""
    files, notes = load_files(manifest)
    plans, plan_notes = build_plans(files, manifest)
    notes += plan_notes
    backend = make_backend(manifest, files)
    params = manifest.gen_params()

    if manifest.backend == "http":
        first = plans[sorted(plans)[0]]
        sample = _assemble_all(first, manifest, first.file_ref)[0]
        _confirm_cost(manifest, plans, sum(len(m.content) for m in sample.messages))

    results_by_file: dict[str, list] = {}
    last_error: CompletionError | None = None
    with ThreadPoolExecutor(max_workers=manifest.concurrency) as pool:
        for ref in sorted(plans):
            transcripts = _assemble_all(plans[ref], manifest, ref)
            try:
                results = list(pool.map(
                    lambda tr: backend.complete(tr, params), transcripts))
            except (CacheMiss, PrefixNotFound) as exc:
                notes.append(f"{ref}: skipped: {exc}")
                last_error = exc
                continue
            results_by_file[ref] = results
    if not results_by_file:
        raise last_error if last_error else ConfigError("no trials completed")

    trials_by_file = {}
    for ref, results in results_by_file.items():
        plan = plans[ref]
        trials_by_file[ref] = [
            score_trial(
                plan.trials[i].test.target_row,
                results[i],
                plan.trials[i].test.prefix_rows[-1],
                trial_id=i,
            )
            for i in range(len(results))
        ]
    all_results = [r for ref in sorted(results_by_file) for r in results_by_file[ref]]
    return _build_report(
        manifest, files, plans, trials_by_file,
        timestamps=[r.timestamp_utc for r in all_results],
        backend_ids={r.backend_id for r in all_results},
        notes=notes,
    )


def _emit(report: AuditReport, manifest: RunManifest) -> None:
    if manifest.out:
        paths = save_report(report, manifest.out)
        print(f"wrote {paths['summary']}, {paths['trials']}, {paths['html']}")
        print(
            f"dataset mean {report.dataset_score.dataset_mean:.4f}, "
            f"copy baseline {report.confound.copy_baseline_mean:.4f}, "
            f"verdict {report.verdict.level}"
        )
    else:
        sys.stdout.buffer.write(render_report(report, "ansi"))
        sys.stdout.buffer.flush()


def cmd_audit(args: argparse.Namespace) -> int:
    manifest = manifest_from_args(args)
    if manifest.backend == "replay" and not manifest.cache:
        raise ConfigError("backend replay requires --cache")
    report = run_audit(manifest)
    _emit(report, manifest)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    args.backend = "replay"
    return cmd_audit(args)


def cmd_baseline(args: argparse.Namespace) -> int:
    """Copy baselines and confound stats with zero model calls."""
    manifest = manifest_from_args(args)
    files, notes = load_files(manifest)
    plans, plan_notes = build_plans(files, manifest)
    notes += plan_notes
    thresholds = manifest.thresholds()
    confounds = {
        ref: file_confound(files[ref], plans[ref], thresholds)
        for ref in sorted(plans)
    }
    profile = merge_confounds(confounds)
    if args.json:
        obj = {
            "files": {ref: _confound_jsonable(c) for ref, c in confounds.items()},
            "dataset": _confound_jsonable(profile),
            "notes": notes,
        }
        print(json.dumps(obj, sort_keys=True, indent=2))
        return EXIT_OK
    for ref in sorted(confounds):
        c = confounds[ref]
        print(
            f"{ref}: copy baseline {c.copy_baseline_mean:.4f} "
            f"(best-of-window {c.copy_baseline_best_mean:.4f}), "
            f"duplicate fraction {c.duplicate_row_fraction:.4f}"
        )
        if c.stuck_columns:
            print(f"  stuck columns: {c.stuck_columns}")
        if c.predictable_columns:
            print(f"  predictable columns: {c.predictable_columns}")
    print(
        f"dataset: copy baseline {profile.copy_baseline_mean:.4f} "
        f"(best-of-window {profile.copy_baseline_best_mean:.4f}), "
        f"duplicate fraction {profile.duplicate_row_fraction:.4f}"
    )
    for note in notes:
        print(f"note: {note}")
    return EXIT_OK


def _confound_jsonable(c) -> dict:
    obj = dataclasses.asdict(c)
    obj["stuck_columns"] = [list(t) for t in c.stuck_columns]
    obj["predictable_columns"] = [list(t) for t in c.predictable_columns]
    obj["run_length_histogram"] = {
        str(k): v for k, v in sorted(c.run_length_histogram.items())
    }
    return obj


def cmd_inspect(args: argparse.Namespace) -> int:
    manifest = manifest_from_args(args)
    files, notes = load_files(manifest)
    out: dict[str, dict] = {}
    for ref in sorted(files):
        file = files[ref]
        profiles = profile_columns(file)
        dup = duplicate_profile(file)
        info = {
            "rows": file.row_count,
            "columns": file.column_count,
            "delimiter": file.config.delimiter,
            "has_header": file.config.has_header,
            "non_canonical_spacing": file.non_canonical_spacing,
            "duplicate_row_fraction": dup.fraction,
            "stuck_columns": [list(t) for t in detect_stuck_columns(
                file, manifest.min_run, profiles)],
            "predictable_columns": [list(t) for t in classify_predictable_columns(
                file, manifest.thresholds(), profiles)],
            "columns_detail": [
                {
                    "index": p.index,
                    "distinct": p.distinct_count,
                    "max_run": p.max_run_length,
                    "numeric": p.is_numeric,
                    "monotone": p.strictly_monotone,
                }
                for p in profiles
            ],
        }
        out[ref] = info
    if args.json:
        print(json.dumps({"files": out, "notes": notes}, sort_keys=True, indent=2))
        return EXIT_OK
    for ref, info in out.items():
        print(
            f"{ref}: {info['rows']} rows x {info['columns']} cols, "
            f"delimiter {info['delimiter']!r}, header "
            f"{'yes' if info['has_header'] else 'no'}, spacing "
            f"{'non-canonical' if info['non_canonical_spacing'] else 'canonical'}"
        )
        print(f"  duplicate successor fraction: {info['duplicate_row_fraction']:.4f}")
        print(f"  stuck columns (run >= {manifest.min_run}): "
              f"{info['stuck_columns'] or 'none'}")
        print(f"  predictable columns: {info['predictable_columns'] or 'none'}")
        for col in info["columns_detail"]:
            print(
                f"  col {col['index']}: distinct {col['distinct']}, "
                f"max run {col['max_run']}, "
                f"{'numeric' if col['numeric'] else 'text'}"
                f"{', monotone' if col['monotone'] else ''}"
            )
    for note in notes:
        print(f"note: {note}")
    return EXIT_OK


def _window_jsonable(w: WindowSample) -> dict:
    return {
        "start_index": w.start_index,
        "prefix_rows": list(w.prefix_rows),
        "target_row": w.target_row,
    }


def _window_from_jsonable(obj: dict) -> WindowSample:
    return WindowSample(
        start_index=obj["start_index"],
        prefix_rows=list(obj["prefix_rows"]),
        target_row=obj["target_row"],
    )


def plan_to_jsonable(
    plans: dict[str, TrialPlan],
    files: dict[str, DatasetFile],
) -> dict:
    entries = []
    for ref in sorted(plans):
        plan = plans[ref]
        file = files[ref]
        entries.append({
            "source_name": ref,
            "delimiter": file.config.delimiter,
            "non_canonical_spacing": file.non_canonical_spacing,
            "rows": list(file.rows),
            "trials": [
                {
                    "trial_id": i,
                    "test": _window_jsonable(t.test),
                    "fewshot": [_window_jsonable(w) for w in t.fewshot],
                }
                for i, t in enumerate(plan.trials)
            ],
        })
    cfg = plans[sorted(plans)[0]].config
    return {
        "schema": _PLAN_SCHEMA,
        "config": dataclasses.asdict(cfg),
        "files": entries,
    }


def load_plan(path: str | Path) -> tuple[AuditConfig, list[dict]]:
    """Read a plan file back into config plus per-file entries.

    Each entry carries the reconstructed DatasetFile and TrialPlan, so the
    later stages need no access to the original data files.
    """
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"plan not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("schema") != _PLAN_SCHEMA:
        raise ConfigError(f"{path}: not a {_PLAN_SCHEMA} file")
    try:
        cfg = AuditConfig(**obj["config"])
        entries = []
        for entry in obj["files"]:
            ref = entry["source_name"]
            file = parse_dataset_file(
                "\n".join(entry["rows"]) + "\n",
                ParseConfig(delimiter=entry["delimiter"]),
                source_name=ref,
            )
            trials = [
                Trial(
                    test=_window_from_jsonable(t["test"]),
                    fewshot=[_window_from_jsonable(w) for w in t["fewshot"]],
                )
                for t in entry["trials"]
            ]
            entries.append({
                "ref": ref,
                "file": file,
                "plan": TrialPlan(file_ref=ref, trials=trials, config=cfg),
            })
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed plan: {exc}") from exc
    return cfg, entries


def _write_text(payload: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(payload, encoding="utf-8")
        print(f"wrote {out}")
    else:
        sys.stdout.write(payload)


def cmd_plan(args: argparse.Namespace) -> int:
    manifest = manifest_from_args(args)
    files, notes = load_files(manifest)
    plans, plan_notes = build_plans(files, manifest)
    for note in notes + plan_notes:
        print(f"note: {note}", file=sys.stderr)
    payload = json.dumps(plan_to_jsonable(plans, files), sort_keys=True, indent=2) + "\n"
    _write_text(payload, manifest.out)
    return EXIT_OK


def cmd_prompt(args: argparse.Namespace) -> int:
    manifest = manifest_from_args(args, require_data=False)
    _, entries = load_plan(args.plan)
    params = manifest.gen_params()
    lines = []
    for entry in entries:
        transcripts = _assemble_all(entry["plan"], manifest, entry["ref"])
        for i, transcript in enumerate(transcripts):
            lines.append(json.dumps({
                "file": entry["ref"],
                "trial_id": i,
                "key": cache_key(transcript, params),
                "messages": [
                    {"role": m.role, "content": m.content}
                    for m in transcript.messages
                ],
            }, sort_keys=True, ensure_ascii=False))
    _write_text("".join(line + "\n" for line in lines), manifest.out)
    return EXIT_OK


def _load_completions(path: str | Path) -> dict[tuple[str, int], dict]:
    records: dict[tuple[str, int], dict] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    records[(rec["file"], int(rec["trial_id"]))] = rec
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(
                        f"{path}:{line_no}: bad completion record: {exc}"
                    ) from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"completions not found: {path}") from exc
    return records


def cmd_score(args: argparse.Namespace) -> int:
    """Score externally obtained completions against a saved plan."""
    manifest = manifest_from_args(args, require_data=False)
    plan_cfg, entries = load_plan(args.plan)
    # The plan owns the sampling parameters; stamp them into the report.
    manifest.window = plan_cfg.window_len
    manifest.fewshot = plan_cfg.n_fewshot
    manifest.trials = plan_cfg.n_trials
    manifest.seed = plan_cfg.seed
    manifest.allow_overlap = plan_cfg.allow_overlap
    completions = _load_completions(args.completions)
    files = {e["ref"]: e["file"] for e in entries}
    plans = {e["ref"]: e["plan"] for e in entries}
    trials_by_file = {}
    timestamps = []
    backend_ids = set()
    missing = 0
    for entry in entries:
        ref = entry["ref"]
        plan = entry["plan"]
        scores = []
        for i, trial in enumerate(plan.trials):
            rec = completions.get((ref, i))
            if rec is None:
                missing += 1
                continue
            scores.append(score_trial(
                trial.test.target_row, str(rec.get("text", "")),
                trial.test.prefix_rows[-1], trial_id=i,
            ))
            timestamps.append(rec.get("timestamp", ""))
            backend_ids.add(rec.get("backend_id", "offline"))
        if scores:
            trials_by_file[ref] = scores
    if missing:
        raise ConfigError(f"{missing} trial(s) have no completion record")
    if not trials_by_file:
        raise ConfigError("no scorable trials")
    report = _build_report(
        manifest, files, plans, trials_by_file,
        timestamps=timestamps, backend_ids=backend_ids or {"offline"},
        notes=[],
    )
    _emit(report, manifest)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    report = load_results(args.results)
    payload = render_report(report, args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(payload)
        print(f"wrote {args.out}")
    else:
        sys.stdout.buffer.write(payload)
        sys.stdout.buffer.flush()
    return EXIT_OK


def _data_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--data", action="append", metavar="PATH",
                   help="dataset file or glob; repeatable")
    p.add_argument("--config", metavar="TOML",
                   help="manifest file; command-line flags override it")
    p.add_argument("--delimiter", help="cell delimiter (default: inferred)")
    p.add_argument("--header", dest="has_header", action="store_const", const=True,
                   help="treat the first line as a header")
    p.add_argument("--no-header", dest="has_header", action="store_const", const=False,
                   help="treat the first line as data")
    p.add_argument("--comment", dest="comment_prefix", metavar="PREFIX",
                   help="drop lines starting with PREFIX")
    return p


def _sampling_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--trials", type=int, help="trials per file (default 25)")
    p.add_argument("--window", type=int, help="context rows per trial (default 10)")
    p.add_argument("--fewshot", type=int, help="example windows per prompt (default 7)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--allow-overlap", dest="allow_overlap", action="store_const",
                   const=True, help="let example windows overlap the test window")
    return p


def _gen_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--model", help="model id sent to the backend (default gpt-4)")
    p.add_argument("--temperature", type=float, help="sampling temperature (default 0)")
    p.add_argument("--max-tokens", dest="max_output_tokens", type=int,
                   help="completion token cap (default 256)")
    p.add_argument("--timeout", type=float, help="per-request timeout seconds")
    p.add_argument("--role-map", dest="role_map", choices=ROLE_MAPS,
                   help="role for few-shot answers (default user_assistant)")
    return p


def _backend_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--backend", choices=BACKEND_CHOICES,
                   help="completion backend (default memorizer)")
    p.add_argument("--cache", metavar="JSONL",
                   help="completion cache to record into / replay from")
    p.add_argument("--noise-p", dest="noise_p", type=float,
                   help="per-character corruption rate for the noisy backend")
    p.add_argument("--base-url", dest="base_url",
                   help="chat-completions base URL (or TABAUDIT_BASE_URL)")
    p.add_argument("--concurrency", type=int, help="parallel requests (default 4)")
    p.add_argument("--yes", action="store_const", const=True,
                   help="skip the remote-cost confirmation")
    return p


def _out_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--out", help="output directory (audit/score) or file (plan/prompt)")
    p.add_argument("--granularity", choices=GRANULARITIES,
                   help="diff granularity (default: cell, char for non-canonical spacing)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabaudit",
        description="Row-completion memorization audits for tabular datasets.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    data, sampling, gen, backend, out = (
        _data_parent(), _sampling_parent(), _gen_parent(), _backend_parent(),
        _out_parent(),
    )

    p = sub.add_parser("inspect", parents=[data],
                       help="parse files and show column and confound stats")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("plan", parents=[data, sampling],
                       help="write the deterministic trial plan as JSON")
    p.add_argument("--out", help="plan file (default: stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("prompt", parents=[gen],
                       help="render a plan's prompts as JSON lines")
    p.add_argument("--plan", required=True, help="plan file from `tabaudit plan`")
    p.add_argument("--out", help="prompts file (default: stdout)")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("score", parents=[gen, out],
                       help="score externally obtained completions against a plan")
    p.add_argument("--plan", required=True, help="plan file from `tabaudit plan`")
    p.add_argument("--completions", required=True,
                   help="JSON lines with file, trial_id, text")
    p.add_argument("--config", metavar="TOML", help="manifest file for thresholds")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="re-render saved results")
    p.add_argument("--results", required=True,
                   help="run directory or summary.json")
    p.add_argument("--format", choices=report_mod.FORMATS, default="ansi")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", parents=[data, sampling, gen, backend, out],
                       help="run the full audit pipeline")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("baseline", parents=[data, sampling],
                       help="copy baselines and confound stats, no model calls")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("replay", parents=[data, sampling, gen, out],
                       help="re-run an audit from a recorded completion cache")
    p.add_argument("--cache", required=True, metavar="JSONL",
                   help="completion cache recorded by a previous audit")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuthError as exc:
        print(f"error: authentication failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, SamplerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (report_mod.ParseError, report_mod.IntegrityMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NoTrials as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompletionError as exc:
        print(f"error: completions failed: {exc}", file=sys.stderr)
        return EXIT_NETWORK


if __name__ == "__main__":
    sys.exit(main())
