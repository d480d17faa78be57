"""Scripted end-to-end runs of the authentication protocol.

A scenario is a JSON event script (sensor windows, proximity, RF signal
updates, frame replays) plus per-link latencies and scheduled drops. The
simulator delivers frames over per-link FIFO queues ordered by (time,
sequence), so a given (scenario, corpus, models, seed) reproduces its
transcript byte for byte. Transcripts are JSON lines, one event per line,
with a meta line first.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field

from .corpus import Corpus
from .errors import ScenarioError
from .forest import ForestModel
from .model import DeviceKind
from .protocol import (
    CHALLENGE_DEADLINE_MS,
    FRAME_RESPONSE,
    Frame,
    FrameReceived,
    GaitGate,
    PhoneProver,
    ProximityDetected,
    RssiUpdate,
    SensorWindow,
    StepResult,
    Verifier,
    WatchProver,
    decode_frame,
    provision,
    provision_pair,
)

TRANSCRIPT_SCHEMA_VERSION = 1
SCENARIO_SCHEMA_VERSION = 1

_EVENT_KINDS = {"sensor_window", "proximity", "rssi", "replay_response"}


@dataclass
class Transcript:
    """Ordered simulation record; every entry is a plain JSON-able dict."""

    meta: dict
    events: list[dict] = field(default_factory=list)

    def log(self, t_ms: int, actor: str, event: str, **details):
        entry = {"t_ms": t_ms, "actor": actor, "event": event}
        entry.update(details)
        self.events.append(entry)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"meta": self.meta}, sort_keys=True,
                            separators=(",", ":"))]
        lines += [json.dumps(e, sort_keys=True, separators=(",", ":"))
                  for e in self.events]
        return "\n".join(lines) + "\n"

    def of_kind(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def final_state(self) -> dict:
        for e in reversed(self.events):
            if e["event"] == "final":
                return e
        raise ScenarioError("transcript has no final event")


def scenario_hash(scenario: dict) -> str:
    blob = json.dumps(scenario, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _validate_scenario(scenario: dict) -> None:
    if not isinstance(scenario, dict):
        raise ScenarioError("scenario must be a JSON object")
    if scenario.get("schema_version") != SCENARIO_SCHEMA_VERSION:
        raise ScenarioError(
            f"scenario schema_version {scenario.get('schema_version')!r}")
    for key in ("verifier_id", "phone_id", "gate_model"):
        if not isinstance(scenario.get(key), str) or not scenario[key]:
            raise ScenarioError(f"scenario missing {key}")
    events = scenario.get("events")
    if not isinstance(events, list):
        raise ScenarioError("scenario events must be a list")
    last_t = 0
    for ev in events:
        if not isinstance(ev, dict) or "t_ms" not in ev or "kind" not in ev:
            raise ScenarioError(f"malformed event {ev!r}")
        if ev["kind"] not in _EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {ev['kind']!r}")
        if not isinstance(ev["t_ms"], int) or ev["t_ms"] < 0:
            raise ScenarioError(f"bad event time {ev.get('t_ms')!r}")
        if ev["kind"] == "sensor_window":
            if ev.get("device") not in ("phone", "watch", "both"):
                raise ScenarioError(f"bad sensor_window device in {ev!r}")
            if not isinstance(ev.get("session_id"), str):
                raise ScenarioError("sensor_window needs a session_id")
        if ev["kind"] == "rssi" and "value" not in ev:
            raise ScenarioError("rssi event needs a value")
        last_t = max(last_t, ev["t_ms"])


class _Sim:
    def __init__(self, scenario: dict, corpus: Corpus | None,
                 models: dict[str, ForestModel], seed: int):
        _validate_scenario(scenario)
        self.scenario = scenario
        self.corpus = corpus
        self.seed = seed
        self.now = 0
        self._seq = 0
        self._queue: list[tuple[int, int, tuple]] = []
        self._link_count: dict[str, int] = {}
        self._last_response: bytes | None = None

        self.verifier_id = scenario["verifier_id"]
        self.phone_id = scenario["phone_id"]
        self.watch_id = scenario.get("watch_id")
        drop = {}
        for rule in scenario.get("drop", []):
            drop.setdefault(rule["link"], set()).add(int(rule["seq"]))
        self._drop = drop
        self._latency = scenario.get("latency_ms", {})

        self.transcript = Transcript(meta={
            "schema_version": TRANSCRIPT_SCHEMA_VERSION,
            "seed": seed,
            "scenario_hash": scenario_hash(scenario),
        })

        def model_for(key: str | None) -> ForestModel | None:
            if key is None:
                return None
            if key not in models:
                raise ScenarioError(f"scenario references unknown model {key!r}")
            return models[key]

        gate_model = model_for(scenario["gate_model"])
        window_ms = int(scenario.get("window_ms", 8000))
        threshold = float(scenario.get("decision_threshold", 0.5))
        gate = GaitGate(gate_model, window_ms, threshold)
        fallback_model = model_for(scenario.get("fallback_model"))
        fallback_gate = (None if fallback_model is None
                         else GaitGate(fallback_model, window_ms, threshold))

        verifier_key = provision(self.phone_id, self.verifier_id, seed)
        prover_key = verifier_key
        if scenario.get("wrong_key"):
            prover_key = provision(self.phone_id, self.verifier_id,
                                   seed + 1)

        def actor_log(actor):
            return lambda event, **details: self.transcript.log(
                self.now, actor, event, **details)

        self.verifier = Verifier(
            self.verifier_id, self.phone_id, verifier_key, seed,
            rssi_threshold=float(scenario.get("rssi_threshold", -70.0)),
            deadline_ms=int(scenario.get("deadline_ms", CHALLENGE_DEADLINE_MS)),
            log=actor_log(self.verifier_id))

        pair_key = None
        watch_pair_key = None
        if self.watch_id:
            pair_key = provision_pair(self.phone_id, self.watch_id, seed)
            watch_pair_key = pair_key
            if scenario.get("wrong_pair_key"):
                watch_pair_key = provision_pair(self.phone_id, self.watch_id,
                                                seed + 1)

        self.phone = PhoneProver(
            self.phone_id, self.verifier_id, prover_key, gate, seed,
            watch_id=self.watch_id, pair_key=pair_key,
            fallback_gate=fallback_gate,
            fallback_policy=scenario.get("fallback_policy", "refuse"),
            pair_timeout_ms=int(scenario.get("pair_timeout_ms", 2000)),
            log=actor_log(self.phone_id))

        self.watch = None
        if self.watch_id:
            watch_schema = tuple(f for f in gate.model.schema
                                 if f.device is DeviceKind.WATCH)
            if watch_schema:
                self.watch = WatchProver(
                    self.watch_id, self.phone_id, watch_pair_key,
                    watch_schema, window_ms, log=actor_log(self.watch_id))

        self._actors = {self.verifier_id: self.verifier,
                        self.phone_id: self.phone}
        if self.watch is not None:
            self._actors[self.watch_id] = self.watch

    # -- scheduling --------------------------------------------------------

    def _push(self, t_ms: int, item: tuple):
        heapq.heappush(self._queue, (t_ms, self._seq, item))
        self._seq += 1

    def _latency_of(self, link: str) -> int:
        if link in self._latency:
            return int(self._latency[link])
        return int(self._latency.get("default", 20))

    def _send(self, frame: Frame):
        link = f"{frame.sender}->{frame.receiver}"
        seq = self._link_count.get(link, 0)
        self._link_count[link] = seq + 1
        raw = frame.encode()
        if frame.type == FRAME_RESPONSE:
            self._last_response = raw
        if seq in self._drop.get(link, ()):
            self.transcript.log(self.now, "net", "frame_dropped", link=link,
                                seq=seq, type=frame.type)
            return
        self.transcript.log(self.now, "net", "frame_sent", link=link,
                            seq=seq, type=frame.type)
        self._push(self.now + self._latency_of(link), ("deliver", raw))

    def _apply(self, actor_id: str, event):
        actor = self._actors.get(actor_id)
        if actor is None:
            self.transcript.log(self.now, "net", "no_such_actor",
                                actor_id=actor_id)
            return
        result: StepResult = actor.step(event, self.now)
        for frame in result.frames:
            self._send(frame)
        for delay, timer in result.timers:
            self._push(self.now + int(delay), ("timer", actor_id, timer))

    def _session_for(self, session_id: str):
        if self.corpus is None:
            raise ScenarioError("scenario uses sensor windows but no corpus given")
        for s in self.corpus.sessions:
            if s.session_id == session_id:
                return s
        raise ScenarioError(f"unknown session_id {session_id!r}")

    # -- run ----------------------------------------------------------------

    def run(self) -> Transcript:
        for ev in self.scenario["events"]:
            self._push(int(ev["t_ms"]), ("script", ev))

        while self._queue:
            t, _, item = heapq.heappop(self._queue)
            self.now = t
            kind = item[0]
            if kind == "script":
                self._script_event(item[1])
            elif kind == "deliver":
                frame, _ = decode_frame(item[1])
                self.transcript.log(t, "net", "frame_delivered",
                                    link=f"{frame.sender}->{frame.receiver}",
                                    type=frame.type)
                self._apply(frame.receiver, FrameReceived(frame))
            elif kind == "timer":
                self._apply(item[1], item[2])

        v = self.verifier.session
        self.transcript.log(self.now, self.verifier_id, "final",
                            state=v.state.value, lock_reason=v.lock_reason,
                            unlock_count=v.unlock_count, alerts=v.alerts,
                            responses_seen=self._last_response is not None)
        return self.transcript

    def _script_event(self, ev: dict):
        kind = ev["kind"]
        if kind == "proximity":
            self.transcript.log(self.now, "net", "proximity")
            self._apply(self.verifier_id, ProximityDetected())
        elif kind == "rssi":
            self._apply(self.verifier_id,
                        RssiUpdate(float(ev["value"]),
                                   ev.get("recent_gait", "none")))
        elif kind == "sensor_window":
            session = self._session_for(ev["session_id"])
            device = ev["device"]
            if device in ("phone", "both"):
                self._apply(self.phone_id, SensorWindow(
                    session.device_part(DeviceKind.PHONE)))
            if device in ("watch", "both") and self.watch is not None:
                self._apply(self.watch_id, SensorWindow(
                    session.device_part(DeviceKind.WATCH)))
        elif kind == "replay_response":
            if self._last_response is None:
                self.transcript.log(self.now, "net", "replay_noop")
                return
            frame, _ = decode_frame(self._last_response)
            self.transcript.log(self.now, "net", "frame_replayed",
                                link=f"{frame.sender}->{frame.receiver}")
            self._push(self.now + self._latency_of(
                f"{frame.sender}->{frame.receiver}"),
                ("deliver", self._last_response))


def run_simulation(scenario: dict, corpus: Corpus | None,
                   models: dict[str, ForestModel], seed: int) -> Transcript:
    """Execute a scenario script; returns the full transcript."""
    return _Sim(scenario, corpus, models, seed).run()


def load_scenario(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            scenario = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot load scenario {path}: {exc}") from exc
    _validate_scenario(scenario)
    return scenario


def write_transcript(transcript: Transcript, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(transcript.to_jsonl())
