"""Deterministic selection of test windows and few-shot example windows.

A trial plan is a pure function of (file, config): the per-file stream is
seeded from the manifest seed and the file's source name, so runs are
reproducible bit-for-bit while distinct files still get distinct draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ingest import DatasetFile
from .rng import SplitMix64, derive_seed

_MAX_REDRAWS = 1000


class SamplerError(Exception):
    pass


class FileTooShort(SamplerError):
    """The file has no room for a prefix window plus its target row."""


class OverlapUnsatisfiable(SamplerError):
    """Redraws exhausted without finding a non-leaking example window."""


@dataclass(frozen=True)
class AuditConfig:
    window_len: int = 10
    n_fewshot: int = 7
    n_trials: int = 25
    seed: int = 0
    allow_overlap: bool = False

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.n_fewshot < 0:
            raise ValueError("n_fewshot must be >= 0")


@dataclass(frozen=True)
class WindowSample:
    start_index: int
    prefix_rows: list[str]
    target_row: str

    def covers(self, row_index: int) -> bool:
        # The window occupies its prefix rows plus its own target row; all
        # of them end up in the transcript.
        return self.start_index <= row_index <= self.start_index + len(self.prefix_rows)

    @property
    def target_index(self) -> int:
        return self.start_index + len(self.prefix_rows)


@dataclass(frozen=True)
class Trial:
    test: WindowSample
    fewshot: list[WindowSample] = field(default_factory=list)


@dataclass(frozen=True)
class TrialPlan:
    file_ref: str
    trials: list[Trial]
    config: AuditConfig


def sample_window(file: DatasetFile, rng: SplitMix64, window_len: int) -> WindowSample:
    """Draw one window uniformly over all feasible start indices."""
    n = file.row_count
    if n < window_len + 1:
        raise FileTooShort(
            f"{file.source_name}: {n} rows < window_len {window_len} + 1"
        )
    start = rng.randrange(n - window_len)
    return WindowSample(
        start_index=start,
        prefix_rows=file.rows[start:start + window_len],
        target_row=file.rows[start + window_len],
    )


def build_trial_plan(file: DatasetFile, cfg: AuditConfig) -> TrialPlan:
    """Draw n_trials test windows, each with n_fewshot fresh example windows.

    Unless overlap is explicitly allowed, an example window whose row range
    covers the trial's target index would leak the answer into the prompt
    context, so it is redrawn (up to a bounded number of attempts; tiny
    files where every window covers every target raise instead).
    """
    if file.row_count < cfg.window_len + 1:
        raise FileTooShort(
            f"{file.source_name}: {file.row_count} rows < window_len {cfg.window_len} + 1"
        )
    rng = SplitMix64(derive_seed(cfg.seed, file.source_name))
    trials = []
    for _ in range(cfg.n_trials):
        test = sample_window(file, rng, cfg.window_len)
        fewshot = []
        for _ in range(cfg.n_fewshot):
            example = sample_window(file, rng, cfg.window_len)
            if not cfg.allow_overlap:
                attempts = 0
                while example.covers(test.target_index):
                    attempts += 1
                    if attempts > _MAX_REDRAWS:
                        raise OverlapUnsatisfiable(
                            f"{file.source_name}: no example window avoids "
                            f"target row {test.target_index} after {_MAX_REDRAWS} redraws"
                        )
                    example = sample_window(file, rng, cfg.window_len)
            fewshot.append(example)
        trials.append(Trial(test=test, fewshot=fewshot))
    return TrialPlan(file_ref=file.source_name, trials=trials, config=cfg)
