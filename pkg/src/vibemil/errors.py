"""Exception hierarchy shared by every vibemil module.

Three coarse families map onto the CLI exit codes: configuration problems
(exit 2), missing upstream artifacts (exit 3), and violations of the data
contracts that the pipeline stages promise each other (exit 4).
"""

from __future__ import annotations


class VibemilError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VibemilError):
    """A run configuration or synthesis spec is malformed or inconsistent."""


class DependencyError(VibemilError):
    """A required upstream artifact is absent; an earlier command must run first."""


class DataContractError(VibemilError):
    """Input data violates a documented contract."""


# ingest ----------------------------------------------------------------

class ParseError(DataContractError):
    """A day file or label file could not be parsed at all."""

    def __init__(self, message: str, source: str = "<memory>", line_no: int | None = None):
        self.source = source
        self.line_no = line_no
        where = source if line_no is None else f"{source}:{line_no}"
        super().__init__(f"{where}: {message}")


class SchemaError(DataContractError):
    """Parsed content does not match the expected record schema."""

    def __init__(self, message: str, source: str = "<memory>", line_no: int | None = None):
        self.source = source
        self.line_no = line_no
        where = source if line_no is None else f"{source}:{line_no}"
        super().__init__(f"{where}: {message}")


class DuplicateRecording(DataContractError):
    """Two recordings share the same (subject, day) key."""


class UnknownSubject(DataContractError):
    """A recording references a subject absent from the label file."""


class EmptyInput(DataContractError):
    """A cohort directory contains no usable recordings."""


# featurize -------------------------------------------------------------

class EmptyBag(DataContractError):
    """An operation that needs at least one window received none."""


class NoUsableDays(DataContractError):
    """Every day of every subject produced zero windows."""


class NoTrainingRows(DataContractError):
    """Scaler fitting received no window rows."""


# validation / metrics --------------------------------------------------

class TooFewSubjects(DataContractError):
    """A class has fewer subjects than requested folds."""


class OneClassOnly(DataContractError):
    """A metric or split needs both classes but saw only one."""


class MissingSubject(DataContractError):
    """Pooled out-of-fold predictions do not cover every expected subject."""


class DuplicateSubject(DataContractError):
    """A subject appears more than once where uniqueness is required."""


# gradient boosting ------------------------------------------------------

class DegenerateData(DataContractError):
    """Training data cannot support fitting (for example single-class labels)."""


class ArityMismatch(DataContractError):
    """A feature matrix width differs from what the model was trained on."""


# MIL network -------------------------------------------------------------

class StaleCache(VibemilError):
    """A backward pass received a cache built against different parameters."""


class NoPositiveBags(DataContractError):
    """MIL training requires at least one positive and one negative bag."""


# ensemble ----------------------------------------------------------------

class MissingFoldModel(DependencyError):
    """Test-time application expected one model per fold and found a gap."""


# synthesis ---------------------------------------------------------------

class InvalidSpec(ConfigError):
    """A cohort synthesis spec fails validation."""


# pipeline orchestration ----------------------------------------------------

class MissingArtifact(DependencyError):
    """A pipeline stage needs an artifact that an earlier command produces."""

    def __init__(self, path, producer: str):
        self.path = str(path)
        self.producer = producer
        super().__init__(f"missing artifact {self.path}; run `{producer}` first")


class ProvenanceMismatch(DataContractError):
    """An artifact was produced under a different config hash or seed."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, DependencyError):
        return 3
    if isinstance(exc, DataContractError):
        return 4
    return 1
