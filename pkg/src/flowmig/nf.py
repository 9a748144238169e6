"""NF behavioral contract: per-flow state as an ordered sequence of substates,
a deterministic transition function producing outputs plus state-update
deltas, and a merge-based apply for deltas received from a peer instance.

Three example NFs ship with the package:

* ``nat`` -- rewrites the source tuple of the forward flow; the mapping
  substate must be synchronized with a peer before it can forward anything
  (it has a cohesive packet subsequence: the initial SYN).
* ``dpi`` -- reordering-resilient pattern bookkeeping; all substates merge
  commutatively, so no immediate synchronization is ever needed.
* ``counter`` -- per-flow packet count and max payload; commutative only.

Substate updates are restricted to forward-direction packets; reverse packets
may read state (the NAT translates returning traffic) but never mutate it,
which keeps the per-flow state owned by exactly one flow.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from flowmig.core import Packet

CSP_IN = "InCSP"
CSP_END = "EndOfCSP"
CSP_NONE = "NotInCSP"


class StateConflictError(Exception):
    """A CSS delta disagreed with a locally created CSS value."""


@dataclass(frozen=True)
class SubstateSpec:
    name: str
    cls: str  # "CSS" | "RCSS" | "NSS"
    merge: str  # "lww" | "add" | "max" | "union"


@dataclass(frozen=True)
class NFSchema:
    """Descriptor serialized alongside traces so checkers stay NF-agnostic."""

    name: str
    substates: tuple  # tuple[SubstateSpec, ...], indices are 1..e
    requires_order: bool = False

    @property
    def css_indices(self) -> frozenset:
        return frozenset(i + 1 for i, s in enumerate(self.substates) if s.cls == "CSS")

    def spec(self, index: int) -> SubstateSpec:
        return self.substates[index - 1]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "substates": [[s.name, s.cls, s.merge] for s in self.substates],
            "requires_order": self.requires_order,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NFSchema":
        subs = tuple(SubstateSpec(*row) for row in d["substates"])
        return cls(d["name"], subs, d.get("requires_order", False))


@dataclass(frozen=True)
class NFState:
    """Immutable snapshot of one flow's state at one NF instance.

    ``values`` is positional (index i lives at values[i-1]); ``index_ts``
    tracks, per index, the admission timestamp of the packet whose update is
    currently reflected (used for last-writer-wins applies); ``applied_keys``
    records (index, source_ts) pairs already applied so re-delivery is a
    no-op.  Equality of *state values* deliberately ignores the bookkeeping
    fields: use ``canonical()``.
    """

    values: tuple
    index_ts: tuple
    version: int = 0
    last_update_ts: int = -1
    applied_keys: frozenset = field(default_factory=frozenset)

    def canonical(self) -> tuple:
        return self.values

    def get(self, index: int):
        return self.values[index - 1]

    def with_updates(self, updates: dict, ts: int) -> "NFState":
        vals = list(self.values)
        its = list(self.index_ts)
        for idx, v in updates.items():
            vals[idx - 1] = v
            its[idx - 1] = ts
        return NFState(tuple(vals), tuple(its), self.version + 1, ts, self.applied_keys)


@dataclass(frozen=True)
class StateDelta:
    index: int
    value: object
    source_ts: int
    cls: str  # CSS | RCSS | NSS


@dataclass(frozen=True)
class StateUpdateMessage:
    target_nf: str
    deltas: tuple  # tuple[StateDelta, ...]
    msg_class: str  # CSS | RCSS | NSS


@dataclass(frozen=True)
class StepResult:
    output: tuple  # OutputSeq: zero or more transformed packets
    next_state: NFState
    message: Optional[StateUpdateMessage]
    updated_indices: frozenset
    csp_marker: str


class NF:
    """Base for NF kinds.  Subclasses define the schema and the pure
    transition; message construction and delta bookkeeping live here."""

    schema: NFSchema

    def initial_state(self) -> NFState:
        n = len(self.schema.substates)
        return NFState(tuple(self._initial_values()), (-1,) * n)

    def _initial_values(self) -> list:
        out = []
        for s in self.schema.substates:
            if s.merge == "add":
                out.append(0)
            elif s.merge == "union":
                out.append(frozenset())
            elif s.merge == "max":
                out.append(0)
            else:
                out.append(None)
        return out

    def step(self, state: NFState, p: Packet) -> StepResult:
        output, updates, marker = self._transition(state, p)
        if not updates:
            return StepResult(output, state, None, frozenset(), marker)
        nxt = state.with_updates(updates, p.admit_ts)
        deltas = []
        for idx in sorted(updates):
            spec = self.schema.spec(idx)
            deltas.append(StateDelta(idx, self._delta_value(spec, state, nxt, idx),
                                     p.admit_ts, spec.cls))
        msg = StateUpdateMessage("peer", tuple(deltas),
                                 "CSS" if any(d.cls == "CSS" for d in deltas) else deltas[0].cls)
        return StepResult(output, nxt, msg, frozenset(updates), marker)

    @staticmethod
    def _delta_value(spec: SubstateSpec, before: NFState, after: NFState, idx: int):
        if spec.merge == "add":
            return after.get(idx) - before.get(idx)
        if spec.merge == "union":
            return after.get(idx) - before.get(idx)
        return after.get(idx)

    def _transition(self, state: NFState, p: Packet):
        raise NotImplementedError


class NatNF(NF):
    """Source-NAT for a single flow: index 1 is the public (ip, port) tuple
    chosen for the flow (CSS), index 2 the timestamp of the latest forward
    packet (RCSS, last-writer-wins)."""

    schema = NFSchema("nat", (
        SubstateSpec("mapping", "CSS", "lww"),
        SubstateSpec("last_fwd_ts", "RCSS", "lww"),
    ))

    def __init__(self, pool=None, private=None):
        # Lowest-available allocation from a fixed pool keeps allocation
        # deterministic across instances.  ``private`` is the inside endpoint
        # reverse traffic is translated back to.
        self.pool = tuple(tuple(t) for t in (pool or (("203.0.113.1", 40000),)))
        self.private = tuple(private) if private else None

    def _transition(self, state: NFState, p: Packet):
        mapping = state.get(1)
        if p.direction == "fwd":
            if mapping is None:
                if p.kind != "SYN":
                    return (), {}, CSP_NONE  # unknown flow: NF-level drop
                mapping = self.pool[0]
                rewritten = self._rewrite_fwd(p, mapping)
                return (rewritten,), {1: mapping, 2: p.admit_ts}, CSP_END
            rewritten = self._rewrite_fwd(p, mapping)
            return (rewritten,), {2: p.admit_ts}, CSP_NONE
        # reverse direction: translate back, no state update
        if mapping is None:
            return (), {}, CSP_NONE
        if self.private is None:
            return (p,), {}, CSP_NONE
        return (self._rewrite_rev(p, self.private),), {}, CSP_NONE

    @staticmethod
    def _rewrite_fwd(p: Packet, mapping) -> Packet:
        from dataclasses import replace
        from flowmig.core import FlowKey
        f = p.flow
        return replace(p, flow=FlowKey(mapping[0], mapping[1], f.dst, f.dport, f.proto))

    @staticmethod
    def _rewrite_rev(p: Packet, private) -> Packet:
        from dataclasses import replace
        from flowmig.core import FlowKey
        f = p.flow
        return replace(p, flow=FlowKey(f.src, f.sport, private[0], private[1], f.proto))


class ReorderResilientDpiNF(NF):
    """Pattern bookkeeping that tolerates out-of-order arrival: per packet a
    deterministic token is derived from the headers; tokens matching the
    configured pattern predicate accumulate in a commutative set.  No substate
    ever needs immediate synchronization."""

    schema = NFSchema("dpi", (
        SubstateSpec("matched", "NSS", "union"),
        SubstateSpec("scanned", "NSS", "add"),
    ))

    def __init__(self, pattern_mod: int = 2):
        self.pattern_mod = pattern_mod

    def token(self, p: Packet) -> int:
        return zlib.crc32(f"{p.flow}|{p.seq_id}".encode()) & 0xFFFF

    def _transition(self, state: NFState, p: Packet):
        if p.direction != "fwd":
            return (p,), {}, CSP_NONE
        tok = self.token(p)
        updates = {2: state.get(2) + 1}
        if tok % self.pattern_mod == 0:
            updates[1] = state.get(1) | {tok}
        return (p,), updates, CSP_NONE


class CounterNF(NF):
    """Per-flow packet counter and max payload size; purely commutative."""

    schema = NFSchema("counter", (
        SubstateSpec("pkt_count", "NSS", "add"),
        SubstateSpec("max_payload", "NSS", "max"),
    ))

    def _transition(self, state: NFState, p: Packet):
        if p.direction != "fwd":
            return (p,), {}, CSP_NONE
        updates = {1: state.get(1) + 1}
        if p.payload_len > state.get(2):
            updates[2] = p.payload_len
        return (p,), updates, CSP_NONE


_REGISTRY: dict[str, Callable[..., NF]] = {
    "nat": NatNF,
    "dpi": ReorderResilientDpiNF,
    "counter": CounterNF,
}


def register_nf(name: str, factory: Callable[..., NF]) -> None:
    _REGISTRY[name] = factory


def get_nf(kind: str, **config) -> NF:
    try:
        factory = _REGISTRY[kind]
    except KeyError:
        raise KeyError(f"unknown NF kind {kind!r}") from None
    return factory(**config)


def nf_step(nf: NF, state: NFState, p: Packet) -> StepResult:
    """Deterministic transition; provided as a function to match the checker
    call sites, equivalent to ``nf.step``."""
    return nf.step(state, p)


def nf_apply(schema: NFSchema, state: NFState, deltas) -> NFState:
    """Apply a batch of substate deltas received from a peer instance.

    Per index, deltas are applied in source_ts order; re-applying a delta
    (same index and source_ts) is a no-op.  CSS deltas that conflict with a
    differing locally created value raise StateConflictError -- that is a
    migration-strategy bug, not a recoverable condition.
    """
    applied = set(state.applied_keys)
    vals = list(state.values)
    its = list(state.index_ts)
    changed = False
    for d in sorted(deltas, key=lambda d: (d.index, d.source_ts)):
        key = (d.index, d.source_ts)
        if key in applied:
            continue
        applied.add(key)
        spec = schema.spec(d.index)
        cur = vals[d.index - 1]
        if spec.cls == "CSS" and cur is not None and cur != d.value:
            raise StateConflictError(
                f"CSS conflict at index {d.index}: local {cur!r} vs delta {d.value!r}")
        if spec.merge == "lww":
            if d.source_ts >= its[d.index - 1]:
                if cur != d.value:
                    vals[d.index - 1] = d.value
                    changed = True
                its[d.index - 1] = d.source_ts
        elif spec.merge == "add":
            if d.value:
                vals[d.index - 1] = cur + d.value
                changed = True
        elif spec.merge == "union":
            new = cur | d.value
            if new != cur:
                vals[d.index - 1] = new
                changed = True
        elif spec.merge == "max":
            if d.value > cur:
                vals[d.index - 1] = d.value
                changed = True
    if not changed and applied == state.applied_keys:
        return state
    version = state.version + (1 if changed else 0)
    ts = max([state.last_update_ts] + [d.source_ts for d in deltas])
    return NFState(tuple(vals), tuple(its), version, ts, frozenset(applied))


def partial_equiv(qb: NFState, qc: NFState, idx) -> bool:
    """True iff the two states agree on every substate index in ``idx``."""
    return all(qb.get(i) == qc.get(i) for i in idx)


def step_partial_equiv(nf: NF, p: Packet, qa: NFState, qb: NFState, idx) -> bool:
    """Partial equivalence of the transition outputs: the output packet
    sequences must be equal and the successor states partially equivalent
    with respect to ``idx``."""
    ra = nf.step(qa, p)
    rb = nf.step(qb, p)
    outs_a = tuple(q.digest() for q in ra.output)
    outs_b = tuple(q.digest() for q in rb.output)
    return outs_a == outs_b and partial_equiv(ra.next_state, rb.next_state, idx)
