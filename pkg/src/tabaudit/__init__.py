"""Row-completion memorization audits for tabular sensor datasets."""

__version__ = "0.1.0"
