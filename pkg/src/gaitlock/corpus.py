"""Session corpora: JSON ingest/persist plus deterministic synthetic gait.

The synthetic generator is a stand-in for human data collection at desk
scale, not a biomechanical model: each user walks at a fixed cadence and
every (device, sensor, axis) signal is a 3-harmonic sum at that cadence
plus Gaussian noise. Phone and watch share the cadence (one body) but have
independent amplitude/phase structure (hip vs. wrist motion). Session-level
cadence/energy wobble makes features co-vary across sensors the way one
gait characteristic moves many features at once.

Users are kept learnably distinct by quantization: cadence sits on a
0.08 Hz grid (25 cells) and the overall amplitude scale on a x1.1 ladder
(40 rungs), both keyed by a salted SHA-256 of the user id. Two distinct
user ids therefore differ by >= 0.08 Hz in cadence or >= 10% in mean
amplitude unless both digests collide on the same of 1000 cells.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable

import numpy as np

from . import seeds
from .errors import DataError, IoError, ParseError, VersionError
from .model import (
    DeviceKind,
    Role,
    SensorKind,
    SensorTrace,
    TraceKey,
    WalkSession,
)

CORPUS_SCHEMA_VERSION = 1

# Nominal full-scale magnitude per sensor, in its native unit. Amplitudes,
# baselines and noise are expressed relative to these.
SENSOR_SCALE: dict[SensorKind, float] = {
    SensorKind.ACCELEROMETER: 3.0,
    SensorKind.GYROSCOPE: 1.2,
    SensorKind.LINEAR_ACCELERATION: 2.0,
    SensorKind.ROTATION_VECTOR: 0.8,
    SensorKind.GRAVITY: 2.5,
    SensorKind.GAME_ROTATION: 0.8,
    SensorKind.MAGNETIC_FIELD: 25.0,
    SensorKind.ORIENTATION: 40.0,
}

N_HARMONICS = 3
STEP_HZ_CELLS = 25
STEP_HZ_BASE = 1.04
STEP_HZ_SPACING = 0.08
AMP_RUNGS = 40
AMP_RATIO = 1.1

# Latent walk characteristics. Each session draws one independent energy
# factor per characteristic, shared by both devices (one body): features
# from sensors of the same characteristic co-vary session to session, the
# way one controllable gait trait moves a whole correlated feature group.
CHARACTERISTIC_OF: dict[SensorKind, int] = {
    SensorKind.ACCELEROMETER: 0,
    SensorKind.LINEAR_ACCELERATION: 0,
    SensorKind.GYROSCOPE: 1,
    SensorKind.ROTATION_VECTOR: 1,
    SensorKind.GAME_ROTATION: 1,
    SensorKind.GRAVITY: 2,
    SensorKind.ORIENTATION: 2,
    SensorKind.MAGNETIC_FIELD: 3,
}
N_CHARACTERISTICS = 4
# Chosen so the canonical rosters (user01..user60, u1..u12, victim/attacker/
# decoy) land on pairwise-distinct (cadence, amplitude) cells.
_PROFILE_SALT = "gaitlock/profile/v6"

DEFAULT_DURATION_RANGE_MS = (4000, 9000)
DEFAULT_SAMPLE_RATE_HZ = 50.0
DEFAULT_AMP_JITTER = 0.08
DEFAULT_CADENCE_JITTER = 0.02
DEFAULT_START_JITTER = 1.0     # per-trace recording start, in cadence periods
DEFAULT_BASELINE_JITTER = 0.01  # per-trace bias drift, relative to sensor scale


class Provenance(Enum):
    INGESTED = "ingested"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class AxisMotion:
    """Harmonic content of one axis: amplitudes/phases for harmonics 1..3."""

    amplitudes: tuple[float, float, float]
    phases: tuple[float, float, float]
    baseline: float


MotionMap = dict[TraceKey, tuple[AxisMotion, AxisMotion, AxisMotion]]


@dataclass(frozen=True)
class GaitProfile:
    """Per-user generator parameters for synthetic walk sessions."""

    user_id: str
    step_hz: float
    motion: MotionMap
    noise_sigma: float
    duration_range_ms: tuple[int, int]
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    amp_jitter: float = DEFAULT_AMP_JITTER
    cadence_jitter: float = DEFAULT_CADENCE_JITTER
    start_jitter: float = DEFAULT_START_JITTER
    baseline_jitter: float = DEFAULT_BASELINE_JITTER

    def __post_init__(self):
        if not 1.0 <= self.step_hz <= 3.0:
            raise DataError(f"step_hz {self.step_hz} outside [1.0, 3.0]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        lo, hi = self.duration_range_ms
        if lo > hi or lo <= 0:
            raise DataError(f"bad duration range {self.duration_range_ms}")
        if self.sample_rate_hz <= 0:
            raise DataError("sample_rate_hz must be > 0")

    def mean_amplitude(self) -> float:
        """Mean harmonic amplitude relative to each sensor's nominal scale."""
        total = 0.0
        count = 0
        for (dev, sen), axes in self.motion.items():
            scale = SENSOR_SCALE[sen]
            for axis in axes:
                for a in axis.amplitudes:
                    total += a / scale
                    count += 1
        return total / count if count else 0.0


def profiles_separated(a: GaitProfile, b: GaitProfile,
                       step_gap: float = STEP_HZ_SPACING,
                       amp_gap: float = 0.10, rel_tol: float = 1e-9) -> bool:
    """True when two profiles differ enough to be learnably distinct."""
    if abs(a.step_hz - b.step_hz) >= step_gap * (1 - rel_tol):
        return True
    ma, mb = a.mean_amplitude(), b.mean_amplitude()
    lo = min(ma, mb)
    if lo <= 0:
        return abs(ma - mb) > 0
    return abs(ma - mb) >= amp_gap * lo * (1 - rel_tol)


def _user_key(user_id: str) -> int:
    return seeds.string_key(f"{_PROFILE_SALT}|{user_id}")


def synth_profile(seed: int, user_id: str) -> GaitProfile:
    """Deterministic per-user profile; distinct users land on distinct cells.

    The same (seed, user_id) always yields the same profile; the same
    user_id under a different seed keeps its cadence/amplitude cell but
    redraws the fine harmonic structure.
    """
    key = _user_key(user_id)
    step_hz = STEP_HZ_BASE + STEP_HZ_SPACING * (key % STEP_HZ_CELLS)
    amp_scale = AMP_RATIO ** ((key >> 20) % AMP_RUNGS)
    rng = seeds.generator(seed, "profile", key)

    raw: dict[TraceKey, list[list[float]]] = {}
    raw_sum = 0.0
    raw_n = 0
    for dev in DeviceKind:
        for sen in SensorKind:
            per_axis = []
            for _axis in range(3):
                amps = [float(rng.uniform(0.25, 1.0)) / (h + 1)
                        for h in range(N_HARMONICS)]
                per_axis.append(amps)
                raw_sum += sum(amps)
                raw_n += len(amps)
            raw[(dev, sen)] = per_axis
    # Normalize so the scale-relative mean amplitude is exactly
    # 0.5 * amp_scale: adjacent ladder rungs then differ by exactly 10%.
    factor = 0.5 * amp_scale / (raw_sum / raw_n)

    motion: MotionMap = {}
    for dev in DeviceKind:
        for sen in SensorKind:
            scale = SENSOR_SCALE[sen]
            axes = []
            for axis in range(3):
                amps = tuple(a * factor * scale for a in raw[(dev, sen)][axis])
                phases = tuple(float(rng.uniform(0.0, 2.0 * math.pi))
                               for _ in range(N_HARMONICS))
                baseline = float(rng.uniform(-0.6, 0.6)) * scale
                axes.append(AxisMotion(amps, phases, baseline))
            motion[(dev, sen)] = tuple(axes)

    noise_sigma = float(rng.uniform(0.03, 0.08))
    # one fixed walking distance: per-user typical duration, small wobble
    lo, hi = DEFAULT_DURATION_RANGE_MS
    typical = float(rng.uniform(lo + 500, hi - 500))
    return GaitProfile(
        user_id=user_id,
        step_hz=step_hz,
        motion=motion,
        noise_sigma=noise_sigma,
        duration_range_ms=(int(typical - 400), int(typical + 400)),
    )


def harmonic_value(axis: AxisMotion, step_hz: float, t_s: float,
                   amp_factor: float = 1.0) -> float:
    """Closed-form noiseless signal value for one axis at time t seconds."""
    total = axis.baseline
    for h in range(N_HARMONICS):
        total += amp_factor * axis.amplitudes[h] * math.sin(
            2.0 * math.pi * (h + 1) * step_hz * t_s + axis.phases[h])
    return total


def synth_session(profile: GaitProfile, session_index: int, seed: int) -> WalkSession:
    """One synthetic walk: all 16 traces, deterministic in all arguments."""
    rng = seeds.generator(seed, "session", _user_key(profile.user_id), session_index)
    lo, hi = profile.duration_range_ms
    duration = int(rng.integers(lo, hi + 1))
    z = rng.standard_normal(N_CHARACTERISTICS)
    amp_factors = np.maximum(0.2, 1.0 + profile.amp_jitter * z)
    step_hz = profile.step_hz * max(
        0.25, 1.0 + profile.cadence_jitter * float(rng.standard_normal()))

    period_ms = 1000.0 / profile.sample_rate_hz
    n = int(duration / period_ms) + 1
    t_ms = np.rint(np.arange(n) * period_ms).astype(np.int64)
    t_s = t_ms.astype(np.float64) / 1000.0
    omega = 2.0 * math.pi * step_hz

    traces: dict[TraceKey, SensorTrace] = {}
    for dev in DeviceKind:
        for sen in SensorKind:
            axes = profile.motion[(dev, sen)]
            scale = SENSOR_SCALE[sen]
            amp_factor = float(amp_factors[CHARACTERISTIC_OF[sen]])
            # sensors do not all start sampling at the same walk phase, and
            # each carries a little bias drift per walk
            start_s = (profile.start_jitter / step_hz) * float(rng.random())
            xyz = np.empty((n, 3), dtype=np.float64)
            for axis in range(3):
                m = axes[axis]
                drift = profile.baseline_jitter * scale * float(
                    rng.standard_normal())
                sig = np.full(n, m.baseline + drift)
                for h in range(N_HARMONICS):
                    sig += amp_factor * m.amplitudes[h] * np.sin(
                        (h + 1) * omega * (t_s + start_s) + m.phases[h])
                if profile.noise_sigma > 0:
                    sig += (profile.noise_sigma * scale
                            * rng.standard_normal(n))
                xyz[:, axis] = sig
            traces[(dev, sen)] = SensorTrace(dev, sen, t_ms, xyz)

    return WalkSession(
        session_id=f"{profile.user_id}-s{session_index:04d}",
        user_id=profile.user_id,
        role=Role.SYNTHETIC,
        traces=traces,
        duration_ms=duration,
    )


def _lerp(a: float, b: float, s: float) -> float:
    return (1.0 - s) * a + s * b


def _lerp_axis(a: AxisMotion, b: AxisMotion, s: float) -> AxisMotion:
    return AxisMotion(
        amplitudes=tuple(_lerp(x, y, s) for x, y in zip(a.amplitudes, b.amplitudes)),
        phases=tuple(_lerp(x, y, s) for x, y in zip(a.phases, b.phases)),
        baseline=_lerp(a.baseline, b.baseline, s),
    )


def synth_imitator(victim: GaitProfile, attacker: GaitProfile, strength: float,
                   devices: Iterable[DeviceKind] = tuple(DeviceKind),
                   ) -> GaitProfile:
    """Attacker profile converging on the victim's observable traits.

    Cadence and walk duration interpolate attacker -> victim by
    ``strength``. Motion (amplitudes, phases, baselines) interpolates only
    for devices in ``devices``; other devices keep the attacker's own
    motion, modeling an attacker who matches one body location but not the
    other.
    """
    if not 0.0 <= strength <= 1.0:
        raise DataError(f"strength {strength} outside [0, 1]")
    imitated = set(devices)
    motion: MotionMap = {}
    for key, axes in attacker.motion.items():
        if key[0] in imitated:
            vic = victim.motion[key]
            motion[key] = tuple(_lerp_axis(a, v, strength)
                                for a, v in zip(axes, vic))
        else:
            motion[key] = axes
    lo = round(_lerp(attacker.duration_range_ms[0], victim.duration_range_ms[0], strength))
    hi = round(_lerp(attacker.duration_range_ms[1], victim.duration_range_ms[1], strength))
    return replace(
        attacker,
        step_hz=_lerp(attacker.step_hz, victim.step_hz, strength),
        motion=motion,
        duration_range_ms=(int(lo), int(hi)),
    )


@dataclass
class Corpus:
    """A set of walk sessions with unique ids."""

    sessions: list[WalkSession]
    provenance: Provenance = Provenance.INGESTED
    seed: int | None = None

    def __post_init__(self):
        seen: set[str] = set()
        for s in self.sessions:
            if s.session_id in seen:
                raise DataError("duplicate session_id", s.session_id)
            seen.add(s.session_id)

    def user_ids(self) -> list[str]:
        out: dict[str, None] = {}
        for s in self.sessions:
            out.setdefault(s.user_id)
        return list(out)

    def by_user(self, user_id: str) -> list[WalkSession]:
        return [s for s in self.sessions if s.user_id == user_id]


def synth_corpus(seed: int, n_users: int, n_sessions: int,
                 user_prefix: str = "user") -> Corpus:
    """n_users x n_sessions deterministic corpus, users named user01.. ."""
    sessions = []
    for u in range(n_users):
        profile = synth_profile(seed, f"{user_prefix}{u + 1:02d}")
        for i in range(n_sessions):
            sessions.append(synth_session(profile, i, seed))
    return Corpus(sessions, Provenance.SYNTHETIC, seed)


# ---------------------------------------------------------------------------
# JSON persistence. Floats are rendered with Python's shortest round-trip
# repr, so save -> load -> save is byte-identical.
# ---------------------------------------------------------------------------

def corpus_to_dict(corpus: Corpus) -> dict:
    sessions = []
    for s in corpus.sessions:
        traces = []
        for key in sorted(s.traces, key=lambda k: (list(DeviceKind).index(k[0]),
                                                   list(SensorKind).index(k[1]))):
            tr = s.traces[key]
            samples = [[int(t), float(x), float(y), float(z)]
                       for t, (x, y, z) in zip(tr.t_ms.tolist(), tr.xyz.tolist())]
            traces.append({"device": tr.device.value, "sensor": tr.sensor.value,
                           "samples": samples})
        sessions.append({
            "session_id": s.session_id,
            "user_id": s.user_id,
            "role": s.role.value,
            "duration_ms": int(s.duration_ms),
            "traces": traces,
        })
    doc = {"schema_version": CORPUS_SCHEMA_VERSION,
           "provenance": corpus.provenance.value,
           "sessions": sessions}
    if corpus.seed is not None:
        doc["seed"] = int(corpus.seed)
    return doc


def save_corpus(corpus: Corpus, path, extra: dict | None = None) -> None:
    doc = corpus_to_dict(corpus)
    if extra:
        doc.update(extra)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, separators=(",", ":"), sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write corpus to {path}: {exc}") from exc


def _session_from_dict(rec: dict) -> WalkSession:
    sid = rec.get("session_id")
    if not isinstance(sid, str) or not sid:
        raise ParseError("session without session_id")
    try:
        role = Role(rec["role"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad role in session {sid!r}") from exc
    traces: dict[TraceKey, SensorTrace] = {}
    for t in rec.get("traces", []):
        try:
            dev = DeviceKind(t["device"])
            sen = SensorKind(t["sensor"])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad device/sensor in session {sid!r}") from exc
        if (dev, sen) in traces:
            raise DataError(f"duplicate trace {dev.value}.{sen.value}", sid)
        samples = t.get("samples", [])
        t_ms = np.empty(len(samples), dtype=np.int64)
        xyz = np.empty((len(samples), 3), dtype=np.float64)
        for i, row in enumerate(samples):
            if len(row) != 4:
                raise ParseError(f"sample row of length {len(row)} in {sid!r}")
            t_ms[i] = int(row[0])
            xyz[i] = row[1:4]
        if len(samples) and not np.all(np.isfinite(xyz)):
            raise DataError("non-finite sample", sid)
        try:
            traces[(dev, sen)] = SensorTrace(dev, sen, t_ms, xyz)
        except DataError as exc:
            raise DataError(str(exc), sid) from exc
    try:
        return WalkSession(sid, str(rec.get("user_id", "")), role, traces,
                           int(rec.get("duration_ms", 0)))
    except DataError:
        raise


def load_corpus(path) -> Corpus:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read corpus from {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ParseError("corpus document must be a JSON object")
    version = doc.get("schema_version")
    if version != CORPUS_SCHEMA_VERSION:
        raise VersionError(f"schema_version {version!r}, expected {CORPUS_SCHEMA_VERSION}")
    provenance = Provenance(doc.get("provenance", "ingested"))
    seed = doc.get("seed")
    sessions = [_session_from_dict(rec) for rec in doc.get("sessions", [])]
    return Corpus(sessions, provenance, None if seed is None else int(seed))
