"""Exception hierarchy shared by all gaitlock modules."""

from __future__ import annotations


class GaitlockError(Exception):
    """Base class for every error this package raises deliberately."""


class SchemaError(GaitlockError):
    """A feature schema is empty, unordered, or does not match a model."""


class ParseError(GaitlockError):
    """A file could not be parsed; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class VersionError(GaitlockError):
    """A file declares a schema_version this code does not understand."""


class DataError(GaitlockError):
    """Well-formed file, invalid content (non-finite sample, duplicate id...)."""

    def __init__(self, message: str, session_id: str | None = None):
        super().__init__(message if session_id is None else f"{session_id}: {message}")
        self.session_id = session_id


class IoError(GaitlockError):
    """A read or write failed at the OS level."""


class EmptyTraceError(GaitlockError):
    """A feature was requested from a trace or series with no samples."""


class MissingTraceError(GaitlockError):
    """A session lacks a (device, sensor) trace required by the schema."""

    def __init__(self, device, sensor):
        super().__init__(f"missing trace {device.value}.{sensor.value}")
        self.device = device
        self.sensor = sensor


class TrainError(GaitlockError):
    """Training preconditions violated (single-label data, bad params...)."""


class CrossvalError(GaitlockError):
    """Cross-validation is infeasible for the given data and fold count."""


class DimError(GaitlockError):
    """Vectors passed to a correlation have mismatched or too-short lengths."""


class SelectionError(GaitlockError):
    """Subset-selection preconditions violated (threshold range, size cap)."""


class AttackEvalError(GaitlockError):
    """An attack harness was invoked with an infeasible configuration."""


class ScenarioError(GaitlockError):
    """A simulation scenario script is malformed or references unknown parties."""


class ConfigError(GaitlockError):
    """CLI/experiment configuration is inconsistent or incomplete."""
