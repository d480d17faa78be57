"""Challenge-response authentication gated by the walk classifier.

The verifier issues a random challenge on proximity; the prover answers
only when its gait gate accepts the current sensor window, returning an
authenticated encryption of the challenge nonce. A rejected gate stays
silent so a stolen device yields no accept/reject oracle. Unlocking
requires a verified response bound to the outstanding nonce; deadlines,
replays and wrong keys all lock the session with a reason. Deauthentication
locks only when the RF signal drops AND the gait gate recently confirmed
the legitimate user walking away.

Authenticated encryption is ChaCha20-Poly1305 (RFC 8439) with 32-byte keys,
12-byte counter nonces unique per sender, and the receiver id as associated
data; a known-answer self-test lives in the test suite. The phone-watch
pair exchange reuses the challenge frame: the watch's feature payload is
sealed under the pair key and bound to the phone's fresh pair nonce.

Everything runs over a simulated transport with deterministic per-link FIFO
delivery; a seeded run reproduces its transcript byte for byte.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from . import seeds
from .errors import DataError, MissingTraceError, ScenarioError, SchemaError
from .features import extract, feature_csv_row, parse_feature_csv_row
from .forest import ForestModel, predict
from .model import (
    DeviceKind,
    FeatureVector,
    SensorTrace,
    WalkSession,
)

KEY_BYTES = 32
AE_NONCE_BYTES = 12
CHALLENGE_NONCE_BYTES = 16
MAX_WINDOW_MS = 10_000
CHALLENGE_DEADLINE_MS = 10_000

FRAME_CHALLENGE = "challenge"
FRAME_RESPONSE = "response"
FRAME_PAIR_FEATURES = "pair_features"


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


# ---------------------------------------------------------------------------
# Keys and sealing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SharedKey:
    key_id: str
    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) != KEY_BYTES:
            raise DataError(f"key must be {KEY_BYTES} bytes")

    def __repr__(self):  # key material never appears in logs or transcripts
        return f"SharedKey(key_id={self.key_id!r})"


def provision(prover_id: str, verifier_id: str, rng_seed: int) -> SharedKey:
    """Shared key installed on both parties of one prover-verifier pairing."""
    rng = seeds.generator(rng_seed, "key", prover_id, verifier_id)
    raw = rng.bytes(KEY_BYTES)
    return SharedKey(key_id=f"{prover_id}|{verifier_id}", key_bytes=raw)


def provision_pair(phone_id: str, watch_id: str, rng_seed: int) -> SharedKey:
    """Separate key for the phone-watch pair channel."""
    rng = seeds.generator(rng_seed, "pairkey", phone_id, watch_id)
    return SharedKey(key_id=f"{phone_id}|{watch_id}", key_bytes=rng.bytes(KEY_BYTES))


def seal(key: SharedKey, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
    if len(nonce) != AE_NONCE_BYTES:
        raise DataError(f"AE nonce must be {AE_NONCE_BYTES} bytes")
    return ChaCha20Poly1305(key.key_bytes).encrypt(nonce, plaintext, aad)


def open_sealed(key: SharedKey, nonce: bytes, ciphertext: bytes, aad: bytes,
                ) -> bytes:
    """Raises InvalidTag on any bit flip, wrong key, nonce or aad."""
    return ChaCha20Poly1305(key.key_bytes).decrypt(nonce, ciphertext, aad)


# ---------------------------------------------------------------------------
# Wire frames: 4-byte big-endian length prefix + UTF-8 JSON body
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    type: str
    sender: str
    receiver: str
    payload: bytes

    def encode(self) -> bytes:
        body = json.dumps(
            {"type": self.type, "sender": self.sender,
             "receiver": self.receiver, "payload_b64": _b64(self.payload)},
            sort_keys=True, separators=(",", ":")).encode("utf-8")
        return len(body).to_bytes(4, "big") + body


def decode_frame(buf: bytes) -> tuple[Frame, bytes]:
    """Decode one frame from the front of buf; returns (frame, rest)."""
    if len(buf) < 4:
        raise DataError("frame shorter than its length prefix")
    n = int.from_bytes(buf[:4], "big")
    if len(buf) < 4 + n:
        raise DataError("truncated frame body")
    doc = json.loads(buf[4:4 + n].decode("utf-8"))
    frame = Frame(doc["type"], doc["sender"], doc["receiver"],
                  _unb64(doc["payload_b64"]))
    return frame, buf[4 + n:]


# ---------------------------------------------------------------------------
# Gait gate
# ---------------------------------------------------------------------------

@dataclass
class GaitGate:
    """On-prover acceptance test over at most window_ms of sensor data."""

    model: ForestModel
    window_ms: int = MAX_WINDOW_MS
    decision_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.window_ms <= MAX_WINDOW_MS:
            raise DataError(f"window_ms must be in (0, {MAX_WINDOW_MS}]")

    def devices(self) -> set[DeviceKind]:
        return {fid.device for fid in self.model.schema}

    def schema_for(self, device: DeviceKind):
        return tuple(f for f in self.model.schema if f.device is device)


def trim_window(session: WalkSession, window_ms: int) -> WalkSession:
    """Keep only the trailing window_ms of every trace."""
    cutoff = session.duration_ms - window_ms
    if cutoff <= 0:
        return session
    traces = {}
    for key, tr in session.traces.items():
        keep = tr.t_ms >= cutoff
        traces[key] = SensorTrace(tr.device, tr.sensor, tr.t_ms[keep],
                                  tr.xyz[keep])
    return WalkSession(session.session_id, session.user_id, session.role,
                       traces, session.duration_ms)


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProximityDetected:
    pass


@dataclass(frozen=True)
class FrameReceived:
    frame: Frame


@dataclass(frozen=True)
class ChallengeTimeout:
    nonce: bytes


@dataclass(frozen=True)
class PairTimeout:
    nonce: bytes


@dataclass(frozen=True)
class RssiUpdate:
    rssi: float
    recent_gait: str = "none"  # accept | reject | none


@dataclass(frozen=True)
class SensorWindow:
    session: WalkSession


@dataclass
class StepResult:
    frames: list[Frame] = field(default_factory=list)
    timers: list[tuple[int, object]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Verifier
# ---------------------------------------------------------------------------

class VState(Enum):
    IDLE = "idle"
    CHALLENGED = "challenged"
    UNLOCKED = "unlocked"
    LOCKED = "locked"


@dataclass
class SessionState:
    state: VState = VState.IDLE
    outstanding_nonce: bytes | None = None
    rssi: float = 0.0
    lock_reason: str | None = None
    unlock_count: int = 0
    alerts: int = 0


def deauth_step(state: SessionState, rssi: float, recent_gait: str,
                rssi_threshold: float) -> tuple[SessionState, bool]:
    """Departure rule: lock only on weak signal AND a recent gait accept.

    A signal drop without gait confirmation keeps the session unlocked and
    raises an alert instead (someone else carried the device away).
    Returns (state, alert_raised).
    """
    state.rssi = rssi
    if state.state is not VState.UNLOCKED:
        return state, False
    if rssi >= rssi_threshold:
        return state, False
    if recent_gait == "accept":
        state.state = VState.LOCKED
        state.lock_reason = "departure"
        return state, False
    state.alerts += 1
    return state, True


class Verifier:
    """Terminal-side state machine; emits challenges, verifies responses."""

    def __init__(self, verifier_id: str, prover_id: str, key: SharedKey,
                 rng_seed: int, rssi_threshold: float = -70.0,
                 deadline_ms: int = CHALLENGE_DEADLINE_MS,
                 log: Callable[..., None] = lambda *a, **k: None):
        self.verifier_id = verifier_id
        self.prover_id = prover_id
        self.key = key
        self.rssi_threshold = rssi_threshold
        self.deadline_ms = deadline_ms
        self.session = SessionState()
        self.rng = seeds.generator(rng_seed, "verifier", verifier_id)
        self.used_nonces: set[bytes] = set()
        self.log = log

    def _lock(self, reason: str):
        self.session.state = VState.LOCKED
        self.session.lock_reason = reason
        self.session.outstanding_nonce = None
        self.log("state", state="locked", reason=reason)

    def step(self, event, now_ms: int) -> StepResult:
        out = StepResult()
        s = self.session

        if isinstance(event, ProximityDetected):
            if s.state is not VState.IDLE:
                self.log("proximity_ignored", state=s.state.value)
                return out
            nonce = self.rng.bytes(CHALLENGE_NONCE_BYTES)
            s.outstanding_nonce = nonce
            s.state = VState.CHALLENGED
            payload = json.dumps(
                {"nonce_b64": _b64(nonce), "issued_at_ms": now_ms,
                 "verifier_id": self.verifier_id},
                sort_keys=True, separators=(",", ":")).encode("utf-8")
            out.frames.append(Frame(FRAME_CHALLENGE, self.verifier_id,
                                    self.prover_id, payload))
            out.timers.append((self.deadline_ms, ChallengeTimeout(nonce)))
            self.log("challenge_sent", nonce_b64=_b64(nonce))
            return out

        if isinstance(event, ChallengeTimeout):
            if s.state is VState.CHALLENGED and s.outstanding_nonce == event.nonce:
                self._lock("timeout")
            return out

        if isinstance(event, RssiUpdate):
            was_unlocked = s.state is VState.UNLOCKED
            _, alert = deauth_step(s, event.rssi, event.recent_gait,
                                   self.rssi_threshold)
            if alert:
                self.log("alert", kind="companion_departure",
                         rssi=event.rssi)
            elif was_unlocked and s.state is VState.LOCKED:
                self.log("state", state="locked", reason="departure")
            return out

        if isinstance(event, FrameReceived):
            frame = event.frame
            if frame.type != FRAME_RESPONSE:
                self.log("frame_ignored", type=frame.type)
                return out
            if s.state is VState.UNLOCKED:
                # duplicate delivery after unlock: reject, do not re-unlock
                self.log("replay_rejected")
                return out
            if s.state is not VState.CHALLENGED:
                self.log("stray_response", state=s.state.value)
                return out
            payload = frame.payload
            if len(payload) <= AE_NONCE_BYTES:
                self._lock("bad_auth")
                return out
            ae_nonce, ct = payload[:AE_NONCE_BYTES], payload[AE_NONCE_BYTES:]
            try:
                plain = open_sealed(self.key, ae_nonce, ct,
                                    self.verifier_id.encode("utf-8"))
                doc = json.loads(plain.decode("utf-8"))
                nonce = _unb64(doc["nonce_b64"])
                decision = doc["gait_decision"]
            except (InvalidTag, KeyError, ValueError):
                self._lock("bad_auth")
                return out
            if nonce != s.outstanding_nonce or nonce in self.used_nonces:
                self._lock("replay")
                return out
            self.used_nonces.add(nonce)
            if decision == "accept":
                s.state = VState.UNLOCKED
                s.outstanding_nonce = None
                s.unlock_count += 1
                self.log("state", state="unlocked",
                         nonce_b64=doc["nonce_b64"])
            else:
                self._lock("gait_reject")
            return out

        raise ScenarioError(f"verifier cannot handle event {event!r}")


# ---------------------------------------------------------------------------
# Provers
# ---------------------------------------------------------------------------

@dataclass
class _PendingChallenge:
    challenge_nonce: bytes
    verifier_id: str
    pair_nonce: bytes | None = None
    phone_vector: FeatureVector | None = None


class PhoneProver:
    """Phone-side prover: gait-gates responses, fuses watch features.

    On a challenge the phone evaluates its newest sensor window. With a
    two-device gate it first requests the watch's feature vector over the
    encrypted pair channel (a challenge frame bound to a fresh pair nonce)
    and concatenates both blocks in schema order before predicting. A
    negative gait decision emits nothing at all.
    """

    def __init__(self, prover_id: str, verifier_id: str, key: SharedKey,
                 gate: GaitGate, rng_seed: int,
                 watch_id: str | None = None, pair_key: SharedKey | None = None,
                 fallback_gate: GaitGate | None = None,
                 fallback_policy: str = "refuse", pair_timeout_ms: int = 2000,
                 log: Callable[..., None] = lambda *a, **k: None):
        if fallback_policy not in ("refuse", "fallback"):
            raise ScenarioError(f"bad fallback policy {fallback_policy!r}")
        self.prover_id = prover_id
        self.verifier_id = verifier_id
        self.key = key
        self.gate = gate
        self.watch_id = watch_id
        self.pair_key = pair_key
        self.fallback_gate = fallback_gate
        self.fallback_policy = fallback_policy
        self.pair_timeout_ms = pair_timeout_ms
        self.buffer: WalkSession | None = None
        self.pending: _PendingChallenge | None = None
        self.send_counter = 0
        self.rng = seeds.generator(rng_seed, "prover", prover_id)
        self.log = log

    def _next_ae_nonce(self) -> bytes:
        nonce = self.send_counter.to_bytes(AE_NONCE_BYTES, "big")
        self.send_counter += 1
        return nonce

    def _respond(self, challenge_nonce: bytes) -> Frame:
        plain = json.dumps(
            {"nonce_b64": _b64(challenge_nonce), "prover_id": self.prover_id,
             "gait_decision": "accept"},
            sort_keys=True, separators=(",", ":")).encode("utf-8")
        ae_nonce = self._next_ae_nonce()
        ct = seal(self.key, ae_nonce, plain, self.verifier_id.encode("utf-8"))
        return Frame(FRAME_RESPONSE, self.prover_id, self.verifier_id,
                     ae_nonce + ct)

    def _phone_vector(self, gate: GaitGate) -> FeatureVector | None:
        if self.buffer is None:
            self.log("gate_skip", reason="no_sensor_data")
            return None
        window = trim_window(self.buffer, gate.window_ms)
        schema = gate.schema_for(DeviceKind.PHONE)
        try:
            return extract(window, schema)
        except (MissingTraceError, DataError) as exc:
            self.log("gate_skip", reason="bad_window", detail=str(exc))
            return None

    def _decide(self, gate: GaitGate, vector: FeatureVector,
                challenge_nonce: bytes) -> list[Frame]:
        accept, score = predict(gate.model, vector, gate.decision_threshold)
        self.log("gait_eval", decision="accept" if accept else "reject",
                 score=score)
        if accept:
            return [self._respond(challenge_nonce)]
        return []  # silent drop: a thief learns nothing

    def step(self, event, now_ms: int) -> StepResult:
        out = StepResult()

        if isinstance(event, SensorWindow):
            self.buffer = event.session
            self.log("sensor_window", session_id=event.session.session_id)
            return out

        if isinstance(event, FrameReceived):
            frame = event.frame
            if frame.type == FRAME_CHALLENGE:
                return self._on_challenge(frame, out)
            if frame.type == FRAME_PAIR_FEATURES:
                return self._on_pair_features(frame, out)
            self.log("frame_ignored", type=frame.type)
            return out

        if isinstance(event, PairTimeout):
            if (self.pending is None or self.pending.pair_nonce != event.nonce):
                return out
            pending, self.pending = self.pending, None
            self.log("pair_timeout")
            gate = self.fallback_gate
            if self.fallback_policy == "fallback" and gate is not None \
                    and self.buffer is not None:
                window = trim_window(self.buffer, gate.window_ms)
                try:
                    vector = extract(window, gate.model.schema)
                except (MissingTraceError, DataError) as exc:
                    self.log("gate_skip", reason="bad_window", detail=str(exc))
                    return out
                out.frames.extend(self._decide(gate, vector,
                                               pending.challenge_nonce))
            else:
                self.log("gate_skip", reason="watch_unavailable")
            return out

        raise ScenarioError(f"phone cannot handle event {event!r}")

    def _on_challenge(self, frame: Frame, out: StepResult) -> StepResult:
        try:
            doc = json.loads(frame.payload.decode("utf-8"))
            challenge_nonce = _unb64(doc["nonce_b64"])
        except (KeyError, ValueError):
            self.log("frame_ignored", type="challenge", reason="malformed")
            return out
        self.log("challenge_received", from_=frame.sender)
        if self.buffer is None:
            self.log("gate_skip", reason="no_sensor_data")
            return out

        needs_watch = DeviceKind.WATCH in self.gate.devices()
        if not needs_watch:
            window = trim_window(self.buffer, self.gate.window_ms)
            try:
                vector = extract(window, self.gate.model.schema)
            except (MissingTraceError, DataError) as exc:
                self.log("gate_skip", reason="bad_window", detail=str(exc))
                return out
            out.frames.extend(self._decide(self.gate, vector, challenge_nonce))
            return out

        if self.watch_id is None or self.pair_key is None:
            self.log("gate_skip", reason="no_watch_configured")
            return out
        phone_vector = self._phone_vector(self.gate)
        if phone_vector is None:
            return out
        pair_nonce = self.rng.bytes(CHALLENGE_NONCE_BYTES)
        self.pending = _PendingChallenge(challenge_nonce, frame.sender,
                                         pair_nonce, phone_vector)
        payload = json.dumps(
            {"nonce_b64": _b64(pair_nonce), "window_ms": self.gate.window_ms},
            sort_keys=True, separators=(",", ":")).encode("utf-8")
        out.frames.append(Frame(FRAME_CHALLENGE, self.prover_id,
                                self.watch_id, payload))
        out.timers.append((self.pair_timeout_ms, PairTimeout(pair_nonce)))
        self.log("pair_request", nonce_b64=_b64(pair_nonce))
        return out

    def _on_pair_features(self, frame: Frame, out: StepResult) -> StepResult:
        if self.pending is None or self.pending.pair_nonce is None:
            self.log("frame_ignored", type=frame.type, reason="not_pending")
            return out
        pending = self.pending
        payload = frame.payload
        if len(payload) <= AE_NONCE_BYTES:
            self.log("pair_reject", reason="bad_auth")
            return out
        ae_nonce, ct = payload[:AE_NONCE_BYTES], payload[AE_NONCE_BYTES:]
        try:
            plain = open_sealed(self.pair_key, ae_nonce, ct,
                                self.prover_id.encode("utf-8"))
            doc = json.loads(plain.decode("utf-8"))
            nonce = _unb64(doc["nonce_b64"])
            vector, _, _ = parse_feature_csv_row(doc["csv"])
        except (InvalidTag, KeyError, ValueError, SchemaError):
            self.log("pair_reject", reason="bad_auth")
            return out
        if nonce != pending.pair_nonce:
            self.log("pair_reject", reason="nonce_mismatch")
            return out
        expected = self.gate.schema_for(DeviceKind.WATCH)
        if tuple(vector.schema) != expected:
            self.log("pair_reject", reason="schema_mismatch")
            return out
        self.pending = None
        fused = FeatureVector(
            self.gate.model.schema,
            np.concatenate([pending.phone_vector.values, vector.values]))
        out.frames.extend(self._decide(self.gate, fused,
                                       pending.challenge_nonce))
        return out


class WatchProver:
    """Watch-side prover: answers pair challenges with sealed features."""

    def __init__(self, watch_id: str, phone_id: str, pair_key: SharedKey,
                 schema, window_ms: int = MAX_WINDOW_MS,
                 log: Callable[..., None] = lambda *a, **k: None):
        self.watch_id = watch_id
        self.phone_id = phone_id
        self.pair_key = pair_key
        self.schema = tuple(schema)
        self.window_ms = window_ms
        self.buffer: WalkSession | None = None
        self.send_counter = 0
        self.log = log

    def step(self, event, now_ms: int) -> StepResult:
        out = StepResult()
        if isinstance(event, SensorWindow):
            self.buffer = event.session
            self.log("sensor_window", session_id=event.session.session_id)
            return out
        if isinstance(event, FrameReceived):
            frame = event.frame
            if frame.type != FRAME_CHALLENGE:
                self.log("frame_ignored", type=frame.type)
                return out
            if self.buffer is None:
                self.log("pair_skip", reason="no_sensor_data")
                return out
            try:
                doc = json.loads(frame.payload.decode("utf-8"))
                nonce_b64 = doc["nonce_b64"]
                window_ms = int(doc.get("window_ms", self.window_ms))
            except (KeyError, ValueError):
                self.log("frame_ignored", type="challenge", reason="malformed")
                return out
            window = trim_window(self.buffer, min(window_ms, self.window_ms))
            try:
                vector = extract(window, self.schema)
            except (MissingTraceError, DataError) as exc:
                self.log("pair_skip", reason="bad_window", detail=str(exc))
                return out
            plain = json.dumps(
                {"nonce_b64": nonce_b64,
                 "csv": feature_csv_row(vector, window.session_id,
                                        window.user_id)},
                sort_keys=True, separators=(",", ":")).encode("utf-8")
            ae_nonce = self.send_counter.to_bytes(AE_NONCE_BYTES, "big")
            self.send_counter += 1
            ct = seal(self.pair_key, ae_nonce, plain,
                      self.phone_id.encode("utf-8"))
            self.log("pair_features_sent")
            out.frames.append(Frame(FRAME_PAIR_FEATURES, self.watch_id,
                                    self.phone_id, ae_nonce + ct))
            return out
        raise ScenarioError(f"watch cannot handle event {event!r}")
