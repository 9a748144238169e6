"""Consistency properties over simulation traces.

Every checker takes a finished trace and judges the migrated (forward) flow
against an ideal single-NF replay reconstructed from the trace metadata:

* ``L``   -- loss-freedom: the multiset of transformed packets leaving the
  FMS equals what one never-migrated NF would have emitted.
* ``N``   -- no packet of the flow was buffered by the Action Manager.
* ``O``   -- order: the source's state sequence during migration is a prefix,
  and the destination's a suffix, of the state sequence of one NF processing
  the same packets.
* ``SO``  -- strong order: O plus both instances' packet sequences being
  subsequences of the admitted sequence.
* ``E``   -- exit order: packets leave the FMS in the ideal emission order
  (drops allowed, reordering not).
* Weak-O  -- R1: every substate requiring immediate synchronization is applied
  at the destination before the destination processes any later packet;
  R2: the destination eventually converges to the ideal final state.

Checkers never look at simulator internals, only at the event log, so they
apply equally to traces read back from disk.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from itertools import combinations

from flowmig.core import (
    FlowKey,
    Packet,
    Trace,
    iter_events,
    merge_by_timestamp,
    project_trace,
)
from flowmig.nf import NF, NFSchema, NFState, get_nf


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    detail: str = ""

    def __bool__(self) -> bool:
        return self.passed


def _nf_from_trace(trace: Trace) -> NF:
    info = trace.meta["nf"]
    cfg = dict(info.get("config", {}))
    for key in ("pool", "private"):
        if key in cfg and cfg[key] is not None:
            v = cfg[key]
            cfg[key] = tuple(tuple(x) for x in v) if key == "pool" else tuple(v)
    return get_nf(info["kind"], **cfg)


def _schema_from_trace(trace: Trace) -> NFSchema:
    return NFSchema.from_json(trace.meta["nf"]["schema"])


def _state_from_values(values: tuple) -> NFState:
    return NFState(tuple(values), (-1,) * len(values))


def ideal_replay(trace: Trace, packets=None):
    """Replay admitted packets through one fresh NF.

    Returns (records, final_state) where records is a list of
    (input_packet, output_idents) in admission order and each output ident is
    (admit_ts, seq_id, digest) -- the same shape the FMS logs at exit.
    """
    nf = _nf_from_trace(trace)
    if packets is None:
        packets = sorted(
            (Packet.from_json(ev.data["pkt"]) for ev in iter_events(trace, "Admit")),
            key=lambda p: p.admit_ts)
    state = nf.initial_state()
    records = []
    for p in packets:
        step = nf.step(state, p)
        state = step.next_state
        records.append((p, tuple((p.admit_ts, p.seq_id, q.digest()) for q in step.output)))
    return records, state


def _ideal_outputs_for_flow(trace: Trace, flow: FlowKey) -> list:
    fstr = str(flow)
    records, _ = ideal_replay(trace)
    out = []
    for p, idents in records:
        if str(p.flow) == fstr:
            out.extend(idents)
    return out


def check_L(trace: Trace, flow: FlowKey | None = None) -> Verdict:
    flow = flow or trace.primary_flow()
    ideal = Counter(_ideal_outputs_for_flow(trace, flow))
    actual = Counter(tuple(i) for i in project_trace(trace, "Pstar_delta", flow=flow))
    if ideal == actual:
        return Verdict("L", True)
    missing = list((ideal - actual).keys())[:3]
    extra = list((actual - ideal).keys())[:3]
    return Verdict("L", False, f"missing={missing} extra={extra}")


def check_N(trace: Trace, flow: FlowKey | None = None) -> Verdict:
    flow = flow or trace.primary_flow()
    buffered = project_trace(trace, "buffered", flow=flow)
    if not buffered:
        return Verdict("N", True)
    return Verdict("N", False, f"{len(buffered)} packets buffered, "
                               f"first ts={buffered[0].admit_ts}")


def _source_state_before(trace: Trace, t: int) -> tuple:
    src = trace.meta.get("src_nf", "nf_src")
    nf = _nf_from_trace(trace)
    values = nf.initial_state().canonical()
    for ev in trace.events:
        if ev.time >= t:
            break
        if ev.kind == "NFProcess" and ev.site == src:
            values = trace.state_values(ev.data["st_after"])
    return values


def _single_nf_state_seq(trace: Trace, flow: FlowKey, window) -> list:
    """State-change sequence of one NF fed the merged P1+P2 inside the
    window, starting from the source's state at window open."""
    nf = _nf_from_trace(trace)
    p1 = project_trace(trace, "P1", flow=flow, window=window)
    p2 = project_trace(trace, "P2", flow=flow, window=window)
    merged = merge_by_timestamp(p1, p2)
    state = _state_from_values(_source_state_before(trace, window[0]))
    seq = []
    for p in merged:
        nxt = nf.step(state, p).next_state
        if nxt.canonical() != state.canonical():
            seq.append(nxt.canonical())
        state = nxt
    return seq


def _order_window(trace: Trace):
    w = trace.migration_window()
    if w is None:
        end = trace.events[-1].time if trace.events else 0
        w = (0, end)
    return w


def check_O(trace: Trace, flow: FlowKey | None = None) -> Verdict:
    """Order across the handover: the source processed a prefix and the
    destination a suffix of the merged packet sequence, each in admission
    order, and the source walked exactly the state sequence one NF would.

    Whether the destination held the *right* state while doing so is judged
    separately (``check_weak_o`` / ``check_eventual_sync``): substates that
    synchronize lazily make the destination's interim values differ from the
    single-NF replay without any ordering fault.
    """
    flow = flow or trace.primary_flow()
    window = _order_window(trace)
    p1 = project_trace(trace, "P1", flow=flow, window=window)
    p2 = project_trace(trace, "P2", flow=flow, window=window)
    for name, seq in (("source", p1), ("destination", p2)):
        ts = [p.admit_ts for p in seq]
        if ts != sorted(ts):
            return Verdict("O", False, f"{name} processed packets out of admission order")
    if p1 and p2 and max(p.admit_ts for p in p1) > min(p.admit_ts for p in p2):
        return Verdict("O", False,
                       f"interleaved handover: source processed ts="
                       f"{max(p.admit_ts for p in p1)} after destination started at ts="
                       f"{min(p.admit_ts for p in p2)}")
    q1 = project_trace(trace, "Q1", flow=flow, window=window)
    q_ref = _single_nf_state_seq(trace, flow, window)
    if q_ref[:len(q1)] != q1:
        return Verdict("O", False, f"source state sequence diverges from the "
                                   f"single-NF replay (len {len(q1)})")
    return Verdict("O", True)


def is_subsequence(sub, seq) -> bool:
    it = iter(seq)
    for x in sub:
        for y in it:
            if y == x:
                break
        else:
            return False
    return True


def check_SO(trace: Trace, flow: FlowKey | None = None) -> Verdict:
    flow = flow or trace.primary_flow()
    o = check_O(trace, flow)
    if not o.passed:
        return Verdict("SO", False, f"O failed: {o.detail}")
    window = _order_window(trace)
    admitted = [p.admit_ts for p in project_trace(trace, "P", flow=flow)]
    for name in ("P1", "P2"):
        seq = [p.admit_ts for p in project_trace(trace, name, flow=flow, window=window)]
        if not is_subsequence(seq, admitted):
            return Verdict("SO", False, f"{name} is not a subsequence of the admissions")
    return Verdict("SO", True)


def check_E(trace: Trace, flow: FlowKey | None = None) -> Verdict:
    flow = flow or trace.primary_flow()
    ideal = _ideal_outputs_for_flow(trace, flow)
    actual = [tuple(i) for i in project_trace(trace, "Pstar_delta", flow=flow)]
    if is_subsequence(actual, ideal):
        return Verdict("E", True)
    # find the first exit that appears out of ideal order
    pos = {ident: i for i, ident in enumerate(ideal)}
    last = -1
    for ident in actual:
        i = pos.get(ident)
        if i is None:
            return Verdict("E", False, f"exit {ident} never emitted by the ideal NF")
        if i < last:
            return Verdict("E", False, f"exit {ident} overtaken (ideal pos {i} after {last})")
        last = i
    return Verdict("E", False, "exit order diverges from the ideal emission order")


def check_eventual_sync(trace: Trace, flow: FlowKey | None = None) -> Verdict:
    """Some suffix of the destination's state sequence must be a suffix of
    the single-NF state sequence; with deterministic transitions that reduces
    to the final states agreeing (convergence, regardless of interim order)."""
    flow = flow or trace.primary_flow()
    if trace.migration_window() is None:
        return Verdict("EventualSync", True, "no migration occurred")
    start = trace.migration_window()[0]
    dst = trace.meta.get("dst_nf", "nf_dst")
    nf = _nf_from_trace(trace)
    # destination state changes from migration start, packet- or apply-induced
    q2 = []
    for ev in trace.events:
        if (ev.site == dst and ev.kind in ("NFProcess", "NFStateChange")
                and ev.time >= start and ev.data["st_before"] != ev.data["st_after"]):
            q2.append(trace.state_values(ev.data["st_after"]))
    if not q2:
        return Verdict("EventualSync", True, "destination state never changed")
    # single-NF state changes over the union of processed packets of the flow
    seen = {}
    for ev in iter_events(trace, "NFProcess"):
        p = Packet.from_json(ev.data["pkt"])
        if str(p.flow) == str(flow):
            seen.setdefault(p.admit_ts, p)
    state = nf.initial_state()
    ref = []
    for ts in sorted(seen):
        nxt = nf.step(state, seen[ts]).next_state
        if nxt.canonical() != state.canonical():
            ref.append(nxt.canonical())
        state = nxt
    if not ref or q2[-1] != ref[-1]:
        return Verdict("EventualSync", False,
                       f"destination ended at {q2[-1]!r}, ideal is "
                       f"{ref[-1] if ref else state.canonical()!r}")
    k = 1
    while k < min(len(q2), len(ref)) and q2[-(k + 1)] == ref[-(k + 1)]:
        k += 1
    return Verdict("EventualSync", True, f"longest matching suffix: {k} states")


def check_weak_o(trace: Trace, flow: FlowKey | None = None):
    """Returns (R1, R2) verdicts.

    R1: for every substate delta that requires immediate synchronization, the
    destination applies it before processing any packet admitted after the
    delta's source packet.  R2: eventual convergence (``check_eventual_sync``).
    """
    flow = flow or trace.primary_flow()
    schema = _schema_from_trace(trace)
    css = schema.css_indices
    src = trace.meta.get("src_nf", "nf_src")
    dst = trace.meta.get("dst_nf", "nf_dst")
    r2 = check_eventual_sync(trace, flow)
    if not css:
        return Verdict("WeakO_R1", True, "no substate requires immediate sync"), r2

    # event index orders same-time events exactly as they occurred
    creations = []  # (source_ts, index)
    applies = {}  # (index, source_ts) -> event position
    dst_procs = []  # (event position, admit_ts)
    for pos, ev in enumerate(trace.events):
        if ev.kind == "NFProcess" and ev.site == src:
            p = Packet.from_json(ev.data["pkt"])
            for idx in ev.data.get("upd", []):
                if idx in css:
                    creations.append((p.admit_ts, idx))
        elif ev.kind == "MsgApply" and ev.site == dst:
            for idx, _val, src_ts, cls in ev.data["deltas"]:
                if cls == "CSS":
                    applies.setdefault((idx, src_ts), pos)
        elif ev.kind == "NFProcess" and ev.site == dst:
            p = Packet.from_json(ev.data["pkt"])
            if str(p.flow) == str(flow):
                dst_procs.append((pos, p.admit_ts))

    for src_ts, idx in creations:
        later = [(pos, ts) for pos, ts in dst_procs if ts > src_ts]
        if not later:
            continue
        apply_pos = applies.get((idx, src_ts))
        first_pos, first_ts = min(later)
        if apply_pos is None:
            return (Verdict("WeakO_R1", False,
                            f"premature destination NFProcess of packet ts={first_ts} "
                            f"(event #{first_pos}): CSS substate {idx} from ts={src_ts} "
                            f"was never applied there"), r2)
        if first_pos < apply_pos:
            return (Verdict("WeakO_R1", False,
                            f"premature destination NFProcess of packet ts={first_ts} "
                            f"(event #{first_pos}) before the apply of CSS substate "
                            f"{idx} from ts={src_ts} (event #{apply_pos})"), r2)
    return Verdict("WeakO_R1", True), r2


CHECKS = ("L", "N", "O", "SO", "E", "WeakO_R1", "WeakO_R2", "EventualSync")


def check_all(trace: Trace, flow: FlowKey | None = None) -> dict:
    flow = flow or trace.primary_flow()
    r1, r2 = check_weak_o(trace, flow)
    es = check_eventual_sync(trace, flow)
    return {
        "L": check_L(trace, flow),
        "N": check_N(trace, flow),
        "O": check_O(trace, flow),
        "SO": check_SO(trace, flow),
        "E": check_E(trace, flow),
        "WeakO_R1": r1,
        "WeakO_R2": Verdict("WeakO_R2", r2.passed, r2.detail),
        "EventualSync": es,
    }


# ---------------------------------------------------------------------------
# cohesive-run detection oracle


@dataclass(frozen=True)
class CspReport:
    css_indices: frozenset  # substate indices that must sync immediately
    runs: tuple  # ((start, end), ...) packet index ranges that must stay together


def detect_csp_oracle(nf: NF, packets, max_pkts: int = 200) -> CspReport:
    """Brute-force detection of which substates need immediate synchronization
    and which packet runs are cohesive, using only the NF's transition.

    A handover point after packet x is unsafe when some later packet p_y
    produces different outputs from the stale state q_x than from the
    up-to-date state q_{y-1}.  The immediate-sync substates are the minimal
    index set whose values, copied from the up-to-date state into the stale
    one, repair the outputs of every such witness.  Cohesive runs are the
    maximal consecutive stretches of packets that update those substates.
    """
    packets = list(packets)
    if len(packets) > max_pkts:
        raise ValueError(f"oracle limited to {max_pkts} packets, got {len(packets)}")
    states = [nf.initial_state()]
    steps = []
    for p in packets:
        step = nf.step(states[-1], p)
        steps.append(step)
        states.append(step.next_state)

    def outs(state, p):
        return tuple(q.digest() for q in nf.step(state, p).output)

    # candidate followers: the actual remaining packets, plus synthetic
    # forward/reverse data packets standing in for "any later packet"
    synthetic = []
    if packets:
        fwd = next((p.flow for p in packets if p.direction == "fwd"), None)
        if fwd is not None:
            synthetic = [Packet(fwd, 10_000, "DATA", 100, "fwd", 10_000),
                         Packet(fwd.reversed(), 10_000, "DATA", 100, "rev", 10_001)]

    # a witness (x, yi, p_y) means: with handover after x packets, follower
    # p_y (whose up-to-date pre-state is states[yi]) produces different outputs
    witnesses = []
    for x in range(len(packets)):
        for y in range(x + 1, len(packets)):
            p_y = packets[y]
            if outs(states[x], p_y) != outs(states[y], p_y):
                witnesses.append((x, y, p_y))
        for p_y in synthetic:
            if outs(states[x], p_y) != outs(states[-1], p_y):
                witnesses.append((x, len(packets), p_y))

    n_idx = len(nf.schema.substates)
    css: frozenset = frozenset()
    if witnesses:
        def hybrid(stale, fresh, indices):
            vals = list(stale.values)
            for i in indices:
                vals[i - 1] = fresh.values[i - 1]
            return _state_from_values(tuple(vals))

        found = None
        for k in range(1, n_idx + 1):
            for combo in combinations(range(1, n_idx + 1), k):
                if all(outs(hybrid(states[x], states[yi], combo), p_y)
                       == outs(states[yi], p_y) for x, yi, p_y in witnesses):
                    found = frozenset(combo)
                    break
            if found:
                break
        if found is None:
            raise ValueError("no substate subset repairs the stale-state outputs; "
                             "the NF transition is not migration-safe")
        css = found

    runs = []
    for i, step in enumerate(steps):
        if css & step.updated_indices:
            if runs and runs[-1][1] == i - 1:
                runs[-1][1] = i
            else:
                runs.append([i, i])
    return CspReport(css, tuple((a, b) for a, b in runs))


def declared_csp_runs(nf: NF, packets) -> tuple:
    """Cohesive runs as the NF itself declares them through its per-packet
    markers: a run opens at the first in-run marker and closes at end-of-run."""
    runs = []
    current = None
    state = nf.initial_state()
    for i, p in enumerate(packets):
        step = nf.step(state, p)
        state = step.next_state
        if step.csp_marker == "InCSP":
            if current is None:
                current = i
        elif step.csp_marker == "EndOfCSP":
            runs.append((current if current is not None else i, i))
            current = None
    return tuple(runs)


# ---------------------------------------------------------------------------
# reordering metrics


@dataclass(frozen=True)
class ReorderMetrics:
    total: int
    displaced: int  # packets whose exit position differs from admission rank
    max_displacement: int  # largest forward jump (positions gained by overtaking)


def reorder_metrics(trace: Trace, flow: FlowKey | None = None) -> ReorderMetrics:
    flow = flow or trace.primary_flow()
    exits = [tuple(i) for i in project_trace(trace, "Pstar_delta", flow=flow)]
    order = sorted(range(len(exits)), key=lambda i: exits[i][0])
    rank = {i: r for r, i in enumerate(order)}
    displaced = 0
    max_disp = 0
    for pos, _ident in enumerate(exits):
        d = rank[pos] - pos
        if d != 0:
            displaced += 1
        if d > 0:
            max_disp = max(max_disp, d)
    return ReorderMetrics(len(exits), displaced, max_disp)
