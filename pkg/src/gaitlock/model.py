"""Domain vocabulary: devices, sensors, samples, sessions, feature identifiers.

Every module downstream depends on the canonical orderings defined here:
devices (phone, watch), the eight sensors in their fixed table order, the
seven derived channels and the three summary statistics. A full two-device
schema is 2 x 8 x 7 x 3 = 336 feature ids.

All sensors are modeled as 3-axis (x, y, z); rotation-style sensors that
report a fourth component on real hardware are truncated at ingestion,
because features are defined over the three axes only. Timestamps are
integer milliseconds relative to session start.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from .errors import DataError, SchemaError


class DeviceKind(Enum):
    PHONE = "phone"
    WATCH = "watch"


class SensorKind(Enum):
    ACCELEROMETER = "accelerometer"
    GYROSCOPE = "gyroscope"
    LINEAR_ACCELERATION = "linear_acceleration"
    ROTATION_VECTOR = "rotation_vector"
    GRAVITY = "gravity"
    GAME_ROTATION = "game_rotation"
    MAGNETIC_FIELD = "magnetic_field"
    ORIENTATION = "orientation"


class Channel(Enum):
    X = "x"
    Y = "y"
    Z = "z"
    X2 = "x2"
    Y2 = "y2"
    Z2 = "z2"
    MAG = "mag"


class Stat(Enum):
    MEAN = "mean"
    STD = "std"
    RANGE = "range"


class Role(Enum):
    GENUINE = "genuine"
    IMPOSTER = "imposter"
    SYNTHETIC = "synthetic"


_DEVICE_INDEX = {d: i for i, d in enumerate(DeviceKind)}
_SENSOR_INDEX = {s: i for i, s in enumerate(SensorKind)}
_CHANNEL_INDEX = {c: i for i, c in enumerate(Channel)}
_STAT_INDEX = {s: i for i, s in enumerate(Stat)}

FEATURES_PER_SENSOR = len(Channel) * len(Stat)  # 21


@functools.total_ordering
@dataclass(frozen=True)
class FeatureId:
    """One named feature: (device, sensor, channel, statistic).

    Total order is device, then sensor (table order), then channel, then
    stat. Text form is lowercase dot-separated, e.g.
    ``phone.accelerometer.x.mean``.
    """

    device: DeviceKind
    sensor: SensorKind
    channel: Channel
    stat: Stat

    @property
    def sort_index(self) -> tuple[int, int, int, int]:
        return (
            _DEVICE_INDEX[self.device],
            _SENSOR_INDEX[self.sensor],
            _CHANNEL_INDEX[self.channel],
            _STAT_INDEX[self.stat],
        )

    def __lt__(self, other: "FeatureId") -> bool:
        return self.sort_index < other.sort_index

    def render(self) -> str:
        return f"{self.device.value}.{self.sensor.value}.{self.channel.value}.{self.stat.value}"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "FeatureId":
        parts = text.split(".")
        if len(parts) != 4:
            raise SchemaError(f"feature id must have 4 dot-separated parts: {text!r}")
        try:
            return cls(
                DeviceKind(parts[0]), SensorKind(parts[1]),
                Channel(parts[2]), Stat(parts[3]),
            )
        except ValueError as exc:
            raise SchemaError(f"unknown feature id component in {text!r}") from exc


class SensorSample(NamedTuple):
    """One timestamped 3-axis reading."""

    t_ms: int
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class SensorTrace:
    """Sample stream of one (device, sensor) pair, stored as arrays.

    ``t_ms`` is an int64 vector sorted non-decreasing; ``xyz`` is an
    (n, 3) float64 matrix of finite readings in the sensor's native unit.
    """

    device: DeviceKind
    sensor: SensorKind
    t_ms: np.ndarray
    xyz: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_ms, dtype=np.int64)
        v = np.asarray(self.xyz, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or len(t) != len(v):
            raise DataError(f"trace {self.device.value}.{self.sensor.value}: "
                            f"need t ({len(t)}) aligned with (n, 3) readings {v.shape}")
        if len(t) and (t[0] < 0 or np.any(np.diff(t) < 0)):
            raise DataError(f"trace {self.device.value}.{self.sensor.value}: "
                            "timestamps must be >= 0 and non-decreasing")
        if len(v) and not np.all(np.isfinite(v)):
            raise DataError(f"trace {self.device.value}.{self.sensor.value}: "
                            "non-finite reading")
        object.__setattr__(self, "t_ms", t)
        object.__setattr__(self, "xyz", v)

    def __len__(self) -> int:
        return len(self.t_ms)

    def samples(self) -> Iterator[SensorSample]:
        for i in range(len(self.t_ms)):
            yield SensorSample(int(self.t_ms[i]), *map(float, self.xyz[i]))

    @classmethod
    def from_samples(cls, device: DeviceKind, sensor: SensorKind,
                     samples: Iterable[tuple]) -> "SensorTrace":
        rows = list(samples)
        t = np.array([r[0] for r in rows], dtype=np.int64)
        v = np.array([[r[1], r[2], r[3]] for r in rows], dtype=np.float64)
        if not rows:
            v = v.reshape(0, 3)
        return cls(device, sensor, t, v)

    def __eq__(self, other) -> bool:
        return (isinstance(other, SensorTrace)
                and self.device is other.device and self.sensor is other.sensor
                and np.array_equal(self.t_ms, other.t_ms)
                and np.array_equal(self.xyz, other.xyz))


TraceKey = tuple[DeviceKind, SensorKind]


@dataclass
class WalkSession:
    """One walk instance: the unit of feature extraction and classification."""

    session_id: str
    user_id: str
    role: Role
    traces: dict[TraceKey, SensorTrace]
    duration_ms: int

    def __post_init__(self):
        if len(self.traces) > len(DeviceKind) * len(SensorKind):
            raise DataError("more traces than (device, sensor) pairs",
                            self.session_id)
        for (dev, sen), tr in self.traces.items():
            if tr.device is not dev or tr.sensor is not sen:
                raise DataError(f"trace keyed {dev.value}.{sen.value} holds "
                                f"{tr.device.value}.{tr.sensor.value}", self.session_id)
        last = self.max_t_ms()
        if self.duration_ms < last:
            raise DataError(f"duration_ms {self.duration_ms} < last sample {last}",
                            self.session_id)

    def max_t_ms(self) -> int:
        last = 0
        for tr in self.traces.values():
            if len(tr):
                last = max(last, int(tr.t_ms[-1]))
        return last

    def trace(self, device: DeviceKind, sensor: SensorKind) -> SensorTrace | None:
        return self.traces.get((device, sensor))

    def device_part(self, device: DeviceKind) -> "WalkSession":
        """Sub-session holding only one device's traces (same ids and duration)."""
        sub = {k: t for k, t in self.traces.items() if k[0] is device}
        return WalkSession(self.session_id, self.user_id, self.role, sub,
                           self.duration_ms)


@dataclass(frozen=True)
class FeatureVector:
    """Values aligned to a strictly increasing canonical feature schema."""

    schema: tuple[FeatureId, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if len(self.schema) != len(vals):
            raise SchemaError(f"{len(self.schema)} ids vs {len(vals)} values")
        validate_schema(self.schema)
        if len(vals) and not np.all(np.isfinite(vals)):
            raise DataError("non-finite feature value")

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureVector) and self.schema == other.schema
                and np.array_equal(self.values, other.values))


def validate_schema(schema: Iterable[FeatureId]) -> tuple[FeatureId, ...]:
    """Reject schemas that are empty or not strictly canonical-sorted."""
    ids = tuple(schema)
    if not ids:
        raise SchemaError("empty feature schema")
    for a, b in zip(ids, ids[1:]):
        if not a < b:
            raise SchemaError(f"schema not strictly increasing at {a} >= {b}")
    return ids


def canonical_schema(devices: Iterable[DeviceKind],
                     sensors: Mapping[DeviceKind, Iterable[SensorKind]],
                     ) -> list[FeatureId]:
    """All FeatureIds for the requested (device, sensor) pairs, in order.

    Length is 21 per pair. Raises SchemaError on an empty device set, a
    sensors entry for an unrequested device, or an empty sensor set.
    """
    devs = set(devices)
    if not devs:
        raise SchemaError("empty device set")
    extra = set(sensors) - devs
    if extra:
        raise SchemaError(f"sensors given for unrequested devices: "
                          f"{sorted(d.value for d in extra)}")
    ids: list[FeatureId] = []
    for dev in DeviceKind:
        if dev not in devs:
            continue
        wanted = set(sensors.get(dev, ()))
        if not wanted:
            raise SchemaError(f"no sensors requested for {dev.value}")
        for sen in SensorKind:
            if sen not in wanted:
                continue
            for ch in Channel:
                for st in Stat:
                    ids.append(FeatureId(dev, sen, ch, st))
    return ids


def schema_for_mode(mode: str) -> list[FeatureId]:
    """Full schema for a device mode: phone (168), watch (168) or both (336)."""
    all_sensors = list(SensorKind)
    if mode == "phone":
        return canonical_schema([DeviceKind.PHONE], {DeviceKind.PHONE: all_sensors})
    if mode == "watch":
        return canonical_schema([DeviceKind.WATCH], {DeviceKind.WATCH: all_sensors})
    if mode == "both":
        return canonical_schema(list(DeviceKind),
                                {d: all_sensors for d in DeviceKind})
    raise SchemaError(f"unknown device mode {mode!r}")


def schema_devices(schema: Iterable[FeatureId]) -> set[DeviceKind]:
    return {fid.device for fid in schema}


def schema_pairs(schema: Iterable[FeatureId]) -> list[TraceKey]:
    """Distinct (device, sensor) pairs of a schema, canonical order."""
    seen: dict[TraceKey, None] = {}
    for fid in schema:
        seen.setdefault((fid.device, fid.sensor))
    return sorted(seen, key=lambda p: (_DEVICE_INDEX[p[0]], _SENSOR_INDEX[p[1]]))
