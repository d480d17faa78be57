"""Per-trace statistics and session feature vectors.

Each trace yields 7 channels (x, y, z, their squares, and the per-sample
magnitude) summarized by mean, sample standard deviation and range: 21
features per (device, sensor) pair, 336 for a full two-device session.
Features use every sample in the trace; there is no windowing, resampling
or normalization, and timestamps are ignored entirely.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .errors import DataError, EmptyTraceError, MissingTraceError, SchemaError
from .model import (
    Channel,
    FeatureId,
    FeatureVector,
    Role,
    SensorTrace,
    Stat,
    TraceKey,
    WalkSession,
    schema_pairs,
    validate_schema,
)

# Sample (n-1) standard deviation, defined as 0 for a single sample. The
# population estimator (ddof=0) is deliberately not used; experiments are
# labeled with this constant.
STD_DDOF = 1

MISSING_STRICT = "strict"
MISSING_ZERO_FILL = "zero_fill"


@dataclass(frozen=True)
class ChannelSeries:
    """One derived per-sample series of a trace."""

    channel: Channel
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if len(vals) and not np.all(np.isfinite(vals)):
            raise DataError(f"non-finite value in channel {self.channel.value}")


def _channel_matrix(trace: SensorTrace) -> np.ndarray:
    """(n, 7) matrix of channel values in canonical channel order."""
    xyz = trace.xyz
    out = np.empty((len(xyz), 7), dtype=np.float64)
    out[:, 0:3] = xyz
    out[:, 3:6] = xyz * xyz
    out[:, 6] = np.sqrt(np.einsum("ij,ij->i", xyz, xyz))
    return out


def derive_channels(trace: SensorTrace) -> list[ChannelSeries]:
    """The 7 channel series of a non-empty trace, canonical channel order."""
    if len(trace) == 0:
        raise EmptyTraceError(
            f"empty trace {trace.device.value}.{trace.sensor.value}")
    mat = _channel_matrix(trace)
    return [ChannelSeries(ch, mat[:, i]) for i, ch in enumerate(Channel)]


def _stats_of(values: np.ndarray) -> tuple[float, float, float]:
    mean = float(np.mean(values))
    std = 0.0 if len(values) < 2 else float(np.std(values, ddof=STD_DDOF))
    rng = float(np.max(values) - np.min(values))
    return mean, std, rng


def stats(series: ChannelSeries) -> tuple[float, float, float]:
    """(mean, sample std, range) of one channel series."""
    if len(series.values) == 0:
        raise EmptyTraceError(f"empty channel {series.channel.value}")
    return _stats_of(series.values)


def trace_features(trace: SensorTrace) -> np.ndarray:
    """All 21 features of one trace, channel-major then stat order."""
    if len(trace) == 0:
        raise EmptyTraceError(
            f"empty trace {trace.device.value}.{trace.sensor.value}")
    mat = _channel_matrix(trace)
    out = np.empty(21, dtype=np.float64)
    n = mat.shape[0]
    means = mat.mean(axis=0)
    stds = np.zeros(7) if n < 2 else mat.std(axis=0, ddof=STD_DDOF)
    ranges = mat.max(axis=0) - mat.min(axis=0)
    out[0::3] = means
    out[1::3] = stds
    out[2::3] = ranges
    return out


_STAT_OFFSET = {st: i for i, st in enumerate(Stat)}
_CHANNEL_OFFSET = {ch: i for i, ch in enumerate(Channel)}


def _block_index(fid: FeatureId) -> int:
    return _CHANNEL_OFFSET[fid.channel] * 3 + _STAT_OFFSET[fid.stat]


def extract(session: WalkSession, schema, policy: str = MISSING_STRICT,
            ) -> FeatureVector:
    """Feature vector of one session, aligned to ``schema`` order.

    Under the strict policy a (device, sensor) pair referenced by the
    schema but absent or empty in the session raises MissingTraceError;
    under zero_fill its 21 features are 0.0 (for provers running without
    the companion device).
    """
    ids = validate_schema(schema)
    blocks: dict[TraceKey, np.ndarray] = {}
    for dev, sen in schema_pairs(ids):
        trace = session.trace(dev, sen)
        if trace is None or len(trace) == 0:
            if policy == MISSING_ZERO_FILL:
                blocks[(dev, sen)] = np.zeros(21)
                continue
            raise MissingTraceError(dev, sen)
        blocks[(dev, sen)] = trace_features(trace)
    values = np.empty(len(ids), dtype=np.float64)
    for i, fid in enumerate(ids):
        values[i] = blocks[(fid.device, fid.sensor)][_block_index(fid)]
    return FeatureVector(ids, values)


@dataclass
class FeatureMatrix:
    """Feature vectors of a whole corpus, one row per session."""

    schema: tuple[FeatureId, ...]
    session_ids: tuple[str, ...]
    user_ids: tuple[str, ...]
    roles: tuple[Role, ...]
    X: np.ndarray  # (n_sessions, len(schema))


def extract_matrix(corpus: Corpus, schema, policy: str = MISSING_STRICT,
                   ) -> FeatureMatrix:
    ids = validate_schema(schema)
    rows = np.empty((len(corpus.sessions), len(ids)), dtype=np.float64)
    missing: list[str] = []
    for i, session in enumerate(corpus.sessions):
        try:
            rows[i] = extract(session, ids, policy).values
        except MissingTraceError:
            missing.append(session.session_id)
    if missing:
        raise DataError(
            "sessions missing schema traces under strict policy: "
            + ", ".join(missing))
    return FeatureMatrix(
        schema=ids,
        session_ids=tuple(s.session_id for s in corpus.sessions),
        user_ids=tuple(s.user_id for s in corpus.sessions),
        roles=tuple(s.role for s in corpus.sessions),
        X=rows,
    )


def write_matrix_csv(matrix: FeatureMatrix, path, positive_user: str | None = None,
                     meta: dict | None = None) -> None:
    """Feature-matrix CSV: session_id, user_id, label, then feature columns.

    label is 1 for the positive user when given, otherwise 1 for sessions
    with the genuine role. An optional leading ``#`` comment line carries
    run metadata.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta:
            pairs = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
            fh.write(f"# {pairs}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["session_id", "user_id", "label"]
                        + [fid.render() for fid in matrix.schema])
        for i in range(len(matrix.session_ids)):
            if positive_user is not None:
                label = 1 if matrix.user_ids[i] == positive_user else 0
            else:
                label = 1 if matrix.roles[i] is Role.GENUINE else 0
            writer.writerow([matrix.session_ids[i], matrix.user_ids[i], label]
                            + [repr(v) for v in matrix.X[i].tolist()])


def feature_csv_row(vector: FeatureVector, session_id: str, user_id: str,
                    label: int = 0) -> str:
    """Header plus one data row in the matrix-CSV format (pair-channel payload)."""
    header = ",".join(["session_id", "user_id", "label"]
                      + [fid.render() for fid in vector.schema])
    row = ",".join([session_id, user_id, str(label)]
                   + [repr(v) for v in vector.values.tolist()])
    return header + "\n" + row


def parse_feature_csv_row(text: str) -> tuple[FeatureVector, str, str]:
    """Inverse of feature_csv_row; returns (vector, session_id, user_id)."""
    lines = text.strip("\n").split("\n")
    if len(lines) != 2:
        raise SchemaError("feature row payload must be header + one row")
    head = lines[0].split(",")
    row = lines[1].split(",")
    if len(head) != len(row) or head[:3] != ["session_id", "user_id", "label"]:
        raise SchemaError("malformed feature row payload")
    ids = [FeatureId.parse(h) for h in head[3:]]
    values = np.array([float(v) for v in row[3:]], dtype=np.float64)
    return FeatureVector(tuple(ids), values), row[0], row[1]
