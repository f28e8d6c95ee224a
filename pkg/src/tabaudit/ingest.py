"""Parsing of raw tabular sensor files into an ordered, verbatim row model.

Rows are never re-formatted: the audit compares model output against the
file text byte-for-byte, so any canonicalization here would corrupt the
scores downstream. Cells are a parallel tokenized view used for column
profiling and cell-level diffs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

SUPPORTED_DELIMITERS = (",", " ", "\t", ";")

# Inference order doubles as the tie-break when two delimiters are equally
# consistent on the sampled lines.
_CANDIDATE_ORDER = (",", "\t", ";", " ")

_INFER_SAMPLE_LINES = 50
_INFER_MIN_CONSISTENT = 0.9


class IngestError(Exception):
    pass


class NoConsistentDelimiter(IngestError):
    """No supported delimiter splits the sampled lines uniformly."""


class ColumnCountMismatch(IngestError):
    def __init__(self, line_no: int, expected: int, actual: int):
        super().__init__(
            f"line {line_no}: expected {expected} columns, found {actual}"
        )
        self.line_no = line_no
        self.expected = expected
        self.actual = actual


class EmptyAfterFiltering(IngestError):
    """No data rows remain once comments and blank lines are removed."""


@dataclass(frozen=True)
class ParseConfig:
    delimiter: str
    has_header: bool = False
    comment_prefix: str | None = None
    expected_column_count: int | None = None

    def __post_init__(self):
        if self.delimiter not in SUPPORTED_DELIMITERS:
            raise ValueError(f"unsupported delimiter {self.delimiter!r}")
        if self.expected_column_count is not None and self.expected_column_count < 1:
            raise ValueError("expected_column_count must be >= 1")


@dataclass(frozen=True)
class DatasetFile:
    source_name: str
    header: list[str] | None
    rows: list[str]
    cells: list[list[str]]
    column_count: int
    config: ParseConfig
    # True when cell tokens cannot be re-joined into the raw row (multi-space
    # runs in space-delimited files); such files fall back to char-level
    # diffs and whole-row confound analysis.
    non_canonical_spacing: bool = False

    @property
    def row_count(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class ColumnProfile:
    index: int
    distinct_fraction: float
    max_run_length: int
    is_numeric: bool
    increment_stats: frozenset | None = None
    # Extra facts the confound classifier needs; cheap to collect in the
    # same pass.
    distinct_count: int = 0
    strictly_monotone: bool = False


def _numeric(token: str) -> float | None:
    try:
        return float(token)
    except ValueError:
        return None


def _split_cells(row: str, delimiter: str) -> list[str]:
    # Multi-space runs collapse to one separator; the raw row string keeps
    # its original spacing.
    if delimiter == " ":
        return row.split()
    return row.split(delimiter)


def _data_lines(raw_text: str, comment_prefix: str | None):
    """Yield (line_no, line) for non-blank, non-comment lines, 1-based."""
    for line_no, line in enumerate(raw_text.splitlines(), start=1):
        if not line.strip():
            continue
        if comment_prefix and line.startswith(comment_prefix):
            continue
        yield line_no, line


def infer_format(raw_text: str) -> ParseConfig:
    """Guess delimiter and header presence from the first data lines.

    The delimiter maximizing the fraction of sampled lines with the modal
    token count wins; a candidate only qualifies when that fraction is at
    least 90% and the modal count is at least two (a delimiter that never
    splits anything is not a delimiter).
    """
    if not raw_text:
        raise ValueError("raw_text is empty")
    sample = []
    for _, line in _data_lines(raw_text, "#"):
        sample.append(line)
        if len(sample) >= _INFER_SAMPLE_LINES:
            break
    if not sample:
        raise NoConsistentDelimiter("no data lines to sample")

    best = None
    for candidate in _CANDIDATE_ORDER:
        counts = [len(_split_cells(line, candidate)) for line in sample]
        modal = max(set(counts), key=counts.count)
        if modal < 2:
            continue
        fraction = counts.count(modal) / len(counts)
        if fraction < _INFER_MIN_CONSISTENT:
            continue
        key = (fraction, modal)
        if best is None or key > best[0]:
            best = (key, candidate)
    if best is None:
        raise NoConsistentDelimiter(
            f"none of {_CANDIDATE_ORDER!r} splits >= "
            f"{_INFER_MIN_CONSISTENT:.0%} of the first {len(sample)} lines uniformly"
        )
    delimiter = best[1]

    first_tokens = _split_cells(sample[0], delimiter)
    has_header = False
    if len(sample) >= 2:
        second_tokens = _split_cells(sample[1], delimiter)
        first_has_text = any(_numeric(t) is None for t in first_tokens)
        second_all_numeric = all(_numeric(t) is not None for t in second_tokens)
        has_header = first_has_text and second_all_numeric
    return ParseConfig(delimiter=delimiter, has_header=has_header, comment_prefix="#")


def parse_dataset_file(raw_text: str, cfg: ParseConfig, source_name: str = "<memory>") -> DatasetFile:
    """Parse text into verbatim rows plus tokenized cells.

    Rows keep their original content minus line terminators. Comment and
    blank lines are dropped; the header line, when present, is stored
    separately and never appears in ``rows``.
    """
    if not raw_text:
        raise ValueError("raw_text is empty")

    header = None
    rows: list[str] = []
    cells: list[list[str]] = []
    line_nos: list[int] = []
    for line_no, line in _data_lines(raw_text, cfg.comment_prefix):
        if cfg.has_header and header is None and not rows:
            header = _split_cells(line, cfg.delimiter)
            continue
        rows.append(line)
        cells.append(_split_cells(line, cfg.delimiter))
        line_nos.append(line_no)

    if not rows:
        raise EmptyAfterFiltering(f"{source_name}: no data rows after filtering")

    if cfg.expected_column_count is not None:
        for row_cells, line_no in zip(cells, line_nos):
            if len(row_cells) != cfg.expected_column_count:
                raise ColumnCountMismatch(
                    line_no, cfg.expected_column_count, len(row_cells)
                )
        column_count = cfg.expected_column_count
    else:
        lengths = [len(c) for c in cells]
        column_count = max(set(lengths), key=lengths.count)

    non_canonical = False
    if cfg.delimiter == " ":
        non_canonical = any(
            " ".join(row_cells) != row for row, row_cells in zip(rows, cells)
        )

    return DatasetFile(
        source_name=source_name,
        header=header,
        rows=rows,
        cells=cells,
        column_count=column_count,
        config=cfg,
        non_canonical_spacing=non_canonical,
    )


def load_dataset_file(path: str | Path, cfg: ParseConfig | None = None) -> DatasetFile:
    """Read a local file (UTF-8, lossy) and parse it.

    A user-supplied config always wins; inference runs only when none is
    given.
    """
    path = Path(path)
    raw_text = path.read_bytes().decode("utf-8", errors="replace")
    if cfg is None:
        cfg = infer_format(raw_text)
    return parse_dataset_file(raw_text, cfg, source_name=path.name)


def profile_columns(file: DatasetFile) -> list[ColumnProfile]:
    """One profile per column: cardinality, stuck runs, increment deltas.

    Ragged rows degrade gracefully: a column's statistics cover the rows
    that actually have that column. Increment deltas are integer-exact when
    every value parses as an integer.
    """
    profiles = []
    for index in range(file.column_count):
        values = [row_cells[index] for row_cells in file.cells if len(row_cells) > index]
        if not values:
            profiles.append(
                ColumnProfile(index=index, distinct_fraction=0.0, max_run_length=1,
                              is_numeric=False, distinct_count=0)
            )
            continue
        distinct_count = len(set(values))
        max_run = run = 1
        for prev, cur in zip(values, values[1:]):
            run = run + 1 if cur == prev else 1
            if run > max_run:
                max_run = run

        parsed = [_numeric(v) for v in values]
        is_numeric = all(p is not None for p in parsed)
        increments = None
        monotone = False
        if is_numeric and len(parsed) > 1:
            try:
                exact = [int(v) for v in values]
                deltas = [b - a for a, b in zip(exact, exact[1:])]
            except ValueError:
                deltas = [b - a for a, b in zip(parsed, parsed[1:])]
            increments = frozenset(deltas)
            monotone = all(d > 0 for d in deltas) or all(d < 0 for d in deltas)
        elif is_numeric:
            increments = frozenset()

        profiles.append(
            ColumnProfile(
                index=index,
                distinct_fraction=distinct_count / len(values),
                max_run_length=max_run,
                is_numeric=is_numeric,
                increment_stats=increments,
                distinct_count=distinct_count,
                strictly_monotone=monotone,
            )
        )
    return profiles
