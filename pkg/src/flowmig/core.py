"""Domain types shared by all modules: packets, flows, events, traces.

A trace is the append-only log of one simulation.  Checkers never mutate a
trace; everything they need (packet admissions, NF steps with state snapshot
ids, message sends/applies, buffer/drop decisions, exit order) is recoverable
from the event list plus the interned state-snapshot table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator

EVENT_KINDS = (
    "Admit",
    "RouteDecision",
    "NFProcess",
    "NFStateChange",
    "MsgSend",
    "MsgApply",
    "Buffer",
    "Drop",
    "Reroute",
    "MigrationStart",
    "MigrationEnd",
    "ExitFMS",
)

PACKET_KINDS = ("SYN", "DATA", "FIN", "ACK")


class MalformedTraceError(Exception):
    """Raised when a trace or packet sequence violates a structural invariant."""


@dataclass(frozen=True, order=True)
class FlowKey:
    """Directional five-tuple.  The migrated flow is the forward direction;
    its reverse (swapped endpoints) is a distinct flow that shares NF state."""

    src: str
    sport: int
    dst: str
    dport: int
    proto: str = "TCP"

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst, self.dport, self.src, self.sport, self.proto)

    def __str__(self) -> str:
        return f"{self.src}:{self.sport}>{self.dst}:{self.dport}/{self.proto}"

    @classmethod
    def parse(cls, s: str) -> "FlowKey":
        addr, proto = s.rsplit("/", 1)
        a, b = addr.split(">")
        src, sport = a.rsplit(":", 1)
        dst, dport = b.rsplit(":", 1)
        return cls(src, int(sport), dst, int(dport), proto)


@dataclass(frozen=True)
class Packet:
    flow: FlowKey
    seq_id: int
    kind: str  # one of PACKET_KINDS
    payload_len: int
    direction: str  # "fwd" | "rev"
    admit_ts: int = -1  # assigned at admission; unique per simulation

    def admitted(self, ts: int) -> "Packet":
        return replace(self, admit_ts=ts)

    def ident(self) -> tuple:
        """Identity of this admitted packet instance (retransmits of the same
        seq_id are distinct admissions and must compare unequal)."""
        return (self.admit_ts, str(self.flow), self.seq_id, self.kind)

    def digest(self) -> str:
        """Digest of the (possibly transformed) headers."""
        return f"{self.flow}|{self.kind}|{self.payload_len}"

    def to_json(self) -> dict:
        return {
            "flow": str(self.flow),
            "seq": self.seq_id,
            "kind": self.kind,
            "len": self.payload_len,
            "dir": self.direction,
            "ts": self.admit_ts,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Packet":
        return cls(FlowKey.parse(d["flow"]), d["seq"], d["kind"], d["len"], d["dir"], d["ts"])


# A transformed output sequence is a plain tuple of packets; the empty tuple
# encodes "no packet".  Each item keeps the admit_ts of the input packet.
OutputSeq = tuple


@dataclass(frozen=True)
class Event:
    time: int
    kind: str
    site: str
    data: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"t": self.time, "k": self.kind, "site": self.site, **self.data}

    @classmethod
    def from_json(cls, d: dict) -> "Event":
        d = dict(d)
        t = d.pop("t")
        k = d.pop("k")
        site = d.pop("site")
        return cls(t, k, site, d)


def encode_value(v: Any) -> Any:
    """JSON-safe encoding for substate values (lossless round trip)."""
    if v is None or isinstance(v, (int, str, float, bool)):
        return v
    if isinstance(v, tuple):
        return {"t": [encode_value(x) for x in v]}
    if isinstance(v, frozenset):
        return {"s": sorted(encode_value(x) for x in v)}
    raise TypeError(f"unsupported substate value type: {type(v)!r}")


def decode_value(v: Any) -> Any:
    if isinstance(v, dict):
        if "t" in v:
            return tuple(decode_value(x) for x in v["t"])
        if "s" in v:
            return frozenset(decode_value(x) for x in v["s"])
        raise MalformedTraceError(f"bad encoded value: {v!r}")
    return v


class Trace:
    """Append-only event log plus interned state snapshots and run metadata."""

    def __init__(self, meta: dict | None = None):
        self.meta: dict = meta or {}
        self.events: list[Event] = []
        self.states: list[tuple] = []  # id -> canonical substate value tuple
        self._state_ids: dict[tuple, int] = {}
        self.transport: list[dict] = []  # send/delivery records from endpoints

    def intern_state(self, values: tuple) -> int:
        sid = self._state_ids.get(values)
        if sid is None:
            sid = len(self.states)
            self.states.append(values)
            self._state_ids[values] = sid
        return sid

    def append(self, event: Event) -> None:
        if self.events and event.time < self.events[-1].time:
            raise MalformedTraceError(
                f"time regression: {event.kind}@{event.time} after t={self.events[-1].time}"
            )
        self.events.append(event)

    # -- serialization: one JSON record per line, lossless round trip --

    def to_jsonl(self) -> str:
        lines = [json.dumps({"meta": self.meta}, sort_keys=True, separators=(",", ":"))]
        for sid, values in enumerate(self.states):
            rec = {"state": sid, "v": [encode_value(v) for v in values]}
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        for ev in self.events:
            lines.append(json.dumps(ev.to_json(), sort_keys=True, separators=(",", ":")))
        for rec in self.transport:
            lines.append(json.dumps({"tp": rec}, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        trace = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "meta" in rec:
                trace.meta = rec["meta"]
            elif "state" in rec:
                values = tuple(decode_value(v) for v in rec["v"])
                sid = trace.intern_state(values)
                if sid != rec["state"]:
                    raise MalformedTraceError("state table out of order")
            elif "tp" in rec:
                trace.transport.append(rec["tp"])
            else:
                trace.append(Event.from_json(rec))
        return trace

    def state_values(self, sid: int) -> tuple:
        return self.states[sid]

    def migration_window(self) -> tuple[int, int] | None:
        """(start, end) times of the migration, end falling back to the last
        event when MigrationEnd is absent."""
        start = end = None
        for ev in self.events:
            if ev.kind == "MigrationStart":
                start = ev.time
            elif ev.kind == "MigrationEnd":
                end = ev.time
        if start is None:
            return None
        if end is None:
            end = self.events[-1].time if self.events else start
        return (start, end)

    def primary_flow(self) -> FlowKey:
        return FlowKey.parse(self.meta["flow"])


def merge_by_timestamp(a: Iterable[Packet], b: Iterable[Packet]) -> list[Packet]:
    """Multiset union of two packet sequences, sorted by admission timestamp.

    Duplicate admit_ts across the inputs means the trace is malformed (the
    Action Manager assigns unique timestamps)."""
    merged = list(a) + list(b)
    seen: set[int] = set()
    for p in merged:
        if p.admit_ts in seen:
            raise MalformedTraceError(f"duplicate admit_ts {p.admit_ts}")
        seen.add(p.admit_ts)
    return sorted(merged, key=lambda p: p.admit_ts)


def _flow_matches(data: dict, flow_str: str) -> bool:
    return data.get("pkt", {}).get("flow") == flow_str


def iter_events(trace: Trace, kind: str) -> Iterator[Event]:
    for ev in trace.events:
        if ev.kind == kind:
            yield ev


def project_trace(trace: Trace, which: str, flow: FlowKey | None = None,
                  window: tuple[int, int] | None = None):
    """Deterministic projections of a trace.

    P1/P2: packets NFProcess'd at the source/destination NF, in processing
    order.  Pstar_delta: transformed-packet identities in FMS exit order.
    Q1/Q2: state snapshots (value tuples) at the source/destination NF inside
    the migration window.  buffered/dropped: admitted packets held or dropped
    by the Action Manager.
    """
    _validate_times(trace)
    flow = flow or trace.primary_flow()
    fstr = str(flow)
    src = trace.meta.get("src_nf", "nf_src")
    dst = trace.meta.get("dst_nf", "nf_dst")

    if which in ("P1", "P2"):
        site = src if which == "P1" else dst
        out = []
        for ev in iter_events(trace, "NFProcess"):
            if ev.site == site and _flow_matches(ev.data, fstr):
                if window and not (window[0] <= ev.time <= window[1]):
                    continue
                out.append(Packet.from_json(ev.data["pkt"]))
        return out
    if which == "Pstar_delta":
        out = []
        for ev in iter_events(trace, "ExitFMS"):
            if ev.data.get("flow") == fstr:
                out.append(tuple(ev.data["ident"]))
        return out
    if which in ("Q1", "Q2"):
        if window is None:
            window = trace.migration_window()
        if window is None:
            return []
        site = src if which == "Q1" else dst
        out = []
        for ev in trace.events:
            # packet-induced state changes only: message applies replicate
            # changes that already appear in the peer's sequence
            if ev.kind == "NFProcess" and ev.site == site:
                if not (window[0] <= ev.time <= window[1]):
                    continue
                before, after = ev.data["st_before"], ev.data["st_after"]
                if before != after:
                    out.append(trace.state_values(after))
        return out
    if which in ("buffered", "dropped"):
        kind = "Buffer" if which == "buffered" else "Drop"
        return [Packet.from_json(ev.data["pkt"]) for ev in iter_events(trace, kind)
                if _flow_matches(ev.data, fstr)]
    if which == "P":
        return [Packet.from_json(ev.data["pkt"]) for ev in iter_events(trace, "Admit")
                if _flow_matches(ev.data, fstr)]
    raise ValueError(f"unknown projection {which!r}")


def _validate_times(trace: Trace) -> None:
    last = None
    for ev in trace.events:
        if last is not None and ev.time < last:
            raise MalformedTraceError("trace has time regression")
        last = ev.time
