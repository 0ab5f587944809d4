"""
Exception hierarchy for the DialStory toolkit.
Library code raises these; the command-line entry point maps them onto process exit codes:
0 success, 1 usage/configuration, 2 data or constraint failure, 3 numerical failure.
"""


class DialStoryError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = 2


class ConfigError(DialStoryError):
    """Invalid or unparsable configuration. The message names the offending field."""
    exit_code = 1


class UsageError(DialStoryError):
    """Invalid combination of command-line arguments."""
    exit_code = 1


class DataError(DialStoryError):
    """Corpus or dataset content violates a constraint."""
    exit_code = 2


class CorpusError(DataError):
    """Story-level failure: infeasible generator settings, unbalanced quotes, missing mentions."""

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (token index {position})")
        self.position = position


class ShapeError(DialStoryError):
    """Tensor shapes do not line up."""
    exit_code = 3


class NumericalError(DialStoryError):
    """Non-finite values, NaN losses or misuse of the gradient tape."""
    exit_code = 3
