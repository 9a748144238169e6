"""Flow Migration System simulator.

One simulation is one deterministic single-threaded event loop over the
six-node topology (h1, s1, nf_src, nf_dst, s2, h2).  The Action Manager sits
at the ingress switches (s1 for forward traffic, s2 for reverse), assigns the
admission timestamps that totally order the flow, and applies the current
strategy's directive (route to source/destination, buffer, drop).  The State
Migration Manager drives state transfer over a reliable in-order channel
between the NF instances and decides when to re-route the flow.

Time is integer microseconds.  All randomness comes from the scenario seed
and is used only to sample the workload, so identical (scenario, seed) pairs
produce byte-identical traces.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import random
from dataclasses import dataclass, field, replace

from flowmig.core import Event, FlowKey, Packet, Trace, encode_value, decode_value
from flowmig.nf import (
    CSP_END,
    CSP_IN,
    NF,
    StateDelta,
    get_nf,
    nf_apply,
)
from flowmig import transport as tp

NODES = ("h1", "s1", "nf_src", "nf_dst", "s2", "h2")
OLD_PATH_PAIRS = (("h1", "s1"), ("s1", "nf_src"), ("nf_src", "s2"), ("s2", "h2"))
NEW_PATH_PAIRS = (("s1", "nf_dst"), ("nf_dst", "s2"))
ALL_PAIRS = OLD_PATH_PAIRS + NEW_PATH_PAIRS

STRATEGIES = ("NoMigration", "WeakO", "BufferAll", "FreezeDrop", "AdversarialEager")

HEADER_BYTES = 40


class ConfigError(Exception):
    def __init__(self, field_path: str, msg: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {msg}")


class BufferOverflowError(Exception):
    """The Action Manager buffer exceeded the configured cap."""


class ProtocolViolationError(Exception):
    """A CSS delta was created at the source after re-route was issued."""


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class LinkSpec:
    bandwidth_bps: int
    delay_us: int


@dataclass(frozen=True)
class FlowSpec:
    total_bytes: int
    payload_bytes: int
    arrival: str = "fixed"  # "fixed" | "poisson"


@dataclass(frozen=True)
class TransportSpec:
    initial_cwnd: int = 10
    ssthresh: int = 1 << 30
    min_rto_us: int = 200_000


@dataclass(frozen=True)
class Scenario:
    links: dict  # (from, to) -> LinkSpec, directed
    flow: FlowSpec
    strategy: str
    t1_us: int
    t_r_us: int
    seed: int
    nf_kind: str = "nat"
    nf_config: dict = field(default_factory=dict)
    msg_delay_us: int = 10_000
    buffer_cap: int | None = None
    transport: TransportSpec = field(default_factory=TransportSpec)
    css_lag_us: int = 0  # extra CSS send delay, used by the adversarial strategy

    def scenario_id(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_json(self) -> dict:
        return {
            "topology": {"links": [
                {"from": a, "to": b, "bandwidth_bps": ls.bandwidth_bps,
                 "delay_ms": ls.delay_us / 1000.0}
                for (a, b), ls in sorted(self.links.items())
            ]},
            "flow": {"total_bytes": self.flow.total_bytes,
                     "payload_bytes": self.flow.payload_bytes,
                     "arrival": self.flow.arrival},
            "strategy": self.strategy,
            "t1_s": self.t1_us / 1e6,
            "t_r_ticks": self.t_r_us,
            "seed": self.seed,
            "nf": {"kind": self.nf_kind, "config": self.nf_config},
            "msg_delay_ms": self.msg_delay_us / 1000.0,
            "buffer_cap": self.buffer_cap,
            "transport": {"initial_cwnd": self.transport.initial_cwnd,
                          "ssthresh": self.transport.ssthresh,
                          "min_rto_us": self.transport.min_rto_us},
            "css_lag_us": self.css_lag_us,
        }


def default_links(bandwidth_bps: int = 10_000_000, delay_ms: float = 10.0) -> dict:
    links = {}
    for a, b in ALL_PAIRS:
        spec = LinkSpec(bandwidth_bps, int(delay_ms * 1000))
        links[(a, b)] = spec
        links[(b, a)] = spec
    return links


def scenario_from_dict(d: dict) -> Scenario:
    """Parse and validate a scenario config mapping (the on-disk format)."""
    def need(container, key, path):
        if key not in container:
            raise ConfigError(f"{path}.{key}", "missing")
        return container[key]

    topo = d.get("topology")
    if topo is None:
        links = default_links()
    else:
        raw = need(topo, "links", "topology")
        links = {}
        for i, entry in enumerate(raw):
            path = f"topology.links[{i}]"
            a = need(entry, "from", path)
            b = need(entry, "to", path)
            bw = need(entry, "bandwidth_bps", path)
            dl = need(entry, "delay_ms", path)
            if a not in NODES or b not in NODES:
                raise ConfigError(path, f"unknown node in link {a}->{b}")
            if not isinstance(bw, int) or bw <= 0:
                raise ConfigError(f"{path}.bandwidth_bps", "must be a positive integer")
            if dl < 0:
                raise ConfigError(f"{path}.delay_ms", "must be >= 0")
            links[(a, b)] = LinkSpec(bw, int(dl * 1000))
        for a, b in ALL_PAIRS:
            if (a, b) in links and (b, a) not in links:
                links[(b, a)] = links[(a, b)]
            if (b, a) in links and (a, b) not in links:
                links[(a, b)] = links[(b, a)]
        missing = [p for p in ALL_PAIRS if p not in links]
        if missing:
            raise ConfigError("topology.links", f"missing links for pairs {missing}")

    fd = need(d, "flow", "")
    total = need(fd, "total_bytes", "flow")
    payload = need(fd, "payload_bytes", "flow")
    arrival = fd.get("arrival", "fixed")
    if total <= 0:
        raise ConfigError("flow.total_bytes", "must be > 0")
    if not (1 <= payload <= 1460):
        raise ConfigError("flow.payload_bytes", "must be in 1..1460")
    if arrival not in ("fixed", "poisson"):
        raise ConfigError("flow.arrival", "must be 'fixed' or 'poisson'")

    strategy = need(d, "strategy", "")
    if strategy not in STRATEGIES:
        raise ConfigError("strategy", f"must be one of {STRATEGIES}")
    t1_s = need(d, "t1_s", "")
    if t1_s < 0:
        raise ConfigError("t1_s", "must be >= 0")
    seed = need(d, "seed", "")

    max_prop = max(ls.delay_us for ls in links.values())
    max_ser = max(tx_time_us(1460 + HEADER_BYTES, ls.bandwidth_bps) for ls in links.values())
    default_t_r = 2 * (max_prop + max_ser)
    t_r = d.get("t_r_ticks", default_t_r)
    if t_r < max_prop + max_ser:
        raise ConfigError("t_r_ticks", f"must cover the worst path flip latency "
                                       f"({max_prop + max_ser} ticks)")

    nfd = d.get("nf", {"kind": "nat", "config": {}})
    td = d.get("transport", {})
    ts = TransportSpec(td.get("initial_cwnd", 10), td.get("ssthresh", 1 << 30),
                       td.get("min_rto_us", 200_000))
    return Scenario(
        links=links,
        flow=FlowSpec(total, payload, arrival),
        strategy=strategy,
        t1_us=int(t1_s * 1e6),
        t_r_us=int(t_r),
        seed=seed,
        nf_kind=nfd.get("kind", "nat"),
        nf_config=nfd.get("config", {}),
        msg_delay_us=int(d.get("msg_delay_ms", 10.0) * 1000),
        buffer_cap=d.get("buffer_cap"),
        transport=ts,
        css_lag_us=int(d.get("css_lag_us", 0)),
    )


def tx_time_us(size_bytes: int, bandwidth_bps: int) -> int:
    return max(1, math.ceil(size_bytes * 8 * 1_000_000 / bandwidth_bps))


# ---------------------------------------------------------------------------
# event loop primitives


class EventLoop:
    def __init__(self):
        self._heap: list = []
        self._n = 0
        self.now = 0

    def schedule(self, at: int, fn) -> None:
        if at < self.now:
            at = self.now
        heapq.heappush(self._heap, (at, self._n, fn))
        self._n += 1

    def step(self) -> bool:
        if not self._heap:
            return False
        at, _, fn = heapq.heappop(self._heap)
        self.now = at
        fn()
        return True


class Frame:
    """A packet plus its transport side-band (ack record / data seq)."""

    __slots__ = ("pkt", "ack", "data_seq", "retx")

    def __init__(self, pkt: Packet, ack=None, data_seq=None, retx=False):
        self.pkt = pkt
        self.ack = ack
        self.data_seq = data_seq
        self.retx = retx


class Link:
    """FIFO link: per-packet transit = serialization (queued) + propagation."""

    def __init__(self, loop: EventLoop, spec: LinkSpec, deliver):
        self.loop = loop
        self.spec = spec
        self.deliver = deliver
        self.next_free = 0
        self.in_flight = 0

    def send(self, frame: Frame) -> None:
        size = frame.pkt.payload_len + HEADER_BYTES
        start = max(self.loop.now, self.next_free)
        fin = start + tx_time_us(size, self.spec.bandwidth_bps)
        self.next_free = fin
        self.in_flight += 1

        def arrive():
            self.in_flight -= 1
            self.deliver(frame)

        self.loop.schedule(fin + self.spec.delay_us, arrive)


# ---------------------------------------------------------------------------
# migration strategies


class Strategy:
    """SMM behavior.  The simulation calls the hooks; the strategy replies via
    the simulation's primitives (flip routing, send state, emit events)."""

    name = "base"

    def __init__(self, sim: "FMSSimulation"):
        self.sim = sim
        self.started = False
        self.ended = False
        self.rerouted = False

    def on_migration_timer(self) -> None:  # fires at t1
        pass

    def directive(self, p: Packet) -> str:  # "src" | "dst" | "buffer" | "drop"
        return "dst" if self.rerouted else "src"

    def on_src_step(self, p: Packet, step) -> None:
        pass

    def on_applied(self, deltas) -> None:
        pass

    def migration_complete(self) -> bool:
        return True


class NoMigrationStrategy(Strategy):
    name = "NoMigration"


class WeakOStrategy(Strategy):
    """Algorithm: queue CSS and RCSS/NSS deltas at the source, ship them over
    the reliable channel; once the CSS queue has fully drained at the
    destination and the source is not inside a cohesive packet run, ask the
    controller to re-route and start the T_r timer; finish when the timer has
    expired, the remaining-state queue is empty and the source has processed
    everything that was routed to it."""

    name = "WeakO"

    def __init__(self, sim):
        super().__init__(sim)
        self.css_outstanding = 0  # sent but not yet applied at destination
        self.in_csp = False
        self.seen_csp_end = False
        self.any_admitted = False
        self.timer_expired = False

    def on_migration_timer(self) -> None:
        self.started = True
        self.sim.log("MigrationStart", "smm")
        self.sim.send_state_snapshot(on_applied=self._note_applied)
        self._maybe_reroute()

    def directive(self, p: Packet) -> str:
        if p.direction == "fwd" or True:
            self.any_admitted = True
        return "dst" if self.rerouted else "src"

    def on_src_step(self, p: Packet, step) -> None:
        if step.csp_marker == CSP_IN:
            self.in_csp = True
        elif step.csp_marker == CSP_END:
            self.in_csp = False
            self.seen_csp_end = True
        if not self.started or self.ended:
            return
        if step.message is not None:
            css = [d for d in step.message.deltas if d.cls == "CSS"]
            if css and self.rerouted:
                raise ProtocolViolationError(
                    f"CSS delta for packet ts={p.admit_ts} created after re-route")
            self.sim.send_deltas(step.message.deltas, on_applied=self._note_applied)
        self._maybe_reroute()
        self._maybe_end()

    def _note_applied(self, deltas) -> None:
        self.css_outstanding -= sum(1 for d in deltas if d.cls == "CSS")
        self._maybe_reroute()
        self._maybe_end()

    def note_sent(self, deltas) -> None:
        self.css_outstanding += sum(1 for d in deltas if d.cls == "CSS")

    def _maybe_reroute(self) -> None:
        if self.rerouted or not self.started:
            return
        if self.css_outstanding > 0 or self.in_csp:
            return
        schema = self.sim.nf.schema
        if schema.css_indices and self.any_admitted and not self.seen_csp_end:
            # a cohesive run may still be in flight towards the source;
            # wait for the source to report its end
            return
        self.rerouted = True
        self.sim.log("Reroute", "smm")
        self.sim.loop.schedule(self.sim.loop.now + self.sim.sc.t_r_us, self._timer_fired)

    def _timer_fired(self) -> None:
        self.timer_expired = True
        self._maybe_end()

    def _maybe_end(self) -> None:
        if self.ended or not self.timer_expired:
            return
        if self.sim.routed_to_src != self.sim.src_processed:
            return
        if self.css_outstanding or self.sim.channel_pending:
            return
        self.ended = True
        self.sim.log("MigrationEnd", "smm")

    def migration_complete(self) -> bool:
        return self.ended


class DrainCopyStrategy(Strategy):
    """Shared machinery for the buffer-all and freeze-and-drop baselines:
    hold (or drop) new packets at the AM, wait until the source NF has
    processed everything already routed to it, copy the full state, then
    flip."""

    holds = True  # buffer if True, drop if False
    name = "DrainCopy"

    def __init__(self, sim):
        super().__init__(sim)
        self.holding = False
        self.buffered: list = []
        self.copied = False

    def on_migration_timer(self) -> None:
        self.started = True
        self.holding = True
        self.sim.log("MigrationStart", "smm")
        self._maybe_copy()

    def directive(self, p: Packet) -> str:
        if self.holding:
            if self.holds:
                cap = self.sim.sc.buffer_cap
                if cap is not None and len(self.buffered) >= cap:
                    raise BufferOverflowError(
                        f"AM buffer exceeded cap of {cap} packets")
                return "buffer"
            return "drop"
        return "dst" if self.rerouted else "src"

    def on_src_step(self, p: Packet, step) -> None:
        if self.started and not self.copied:
            self._maybe_copy()

    def _maybe_copy(self) -> None:
        if self.copied or self.sim.routed_to_src != self.sim.src_processed:
            return
        self.copied = True
        self.sim.send_state_snapshot(on_applied=self._on_copy_applied)

    def _on_copy_applied(self, deltas) -> None:
        # allow the last source output to clear the egress before the
        # destination starts producing
        guard = max(ls.delay_us for ls in self.sim.sc.links.values()) + \
            tx_time_us(1500, min(ls.bandwidth_bps for ls in self.sim.sc.links.values()))
        self.sim.loop.schedule(self.sim.loop.now + guard, self._release)

    def _release(self) -> None:
        self.rerouted = True
        self.holding = False
        self.sim.log("Reroute", "smm")
        for frame, site in self.buffered:
            self.sim.route_frame(frame, site, "dst", released=True)
        self.buffered.clear()
        self.ended = True
        self.sim.log("MigrationEnd", "smm")

    def migration_complete(self) -> bool:
        return self.ended


class BufferAllStrategy(DrainCopyStrategy):
    holds = True
    name = "BufferAll"


class FreezeDropStrategy(DrainCopyStrategy):
    holds = False
    name = "FreezeDrop"


class AdversarialEagerStrategy(Strategy):
    """Scripted bad strategy: re-routes immediately at t1 without waiting for
    CSS migration; state is shipped only after an extra lag.  Realizes the
    premature-forwarding cases the Weak-O requirement R1 must flag."""

    name = "AdversarialEager"

    def __init__(self, sim):
        super().__init__(sim)
        self.timer_expired = False
        self.sent = False

    def on_migration_timer(self) -> None:
        self.started = True
        self.sim.log("MigrationStart", "smm")
        self.rerouted = True
        self.sim.log("Reroute", "smm")
        lag = max(self.sim.sc.css_lag_us, 1)
        self.sim.loop.schedule(self.sim.loop.now + lag, self._late_send)
        self.sim.loop.schedule(self.sim.loop.now + self.sim.sc.t_r_us + lag,
                               self._timer_fired)

    def _late_send(self) -> None:
        self.sent = True
        self.sim.send_state_snapshot()
        self._maybe_end()

    def on_src_step(self, p: Packet, step) -> None:
        if self.started and not self.ended and step.message is not None:
            self.sim.send_deltas(step.message.deltas)

    def _timer_fired(self) -> None:
        self.timer_expired = True
        self._maybe_end()

    def _maybe_end(self) -> None:
        if self.ended or not self.timer_expired or not self.sent:
            return
        if self.sim.channel_pending:
            self.sim.loop.schedule(self.sim.loop.now + self.sim.sc.msg_delay_us,
                                   self._maybe_end)
            return
        self.ended = True
        self.sim.log("MigrationEnd", "smm")

    def migration_complete(self) -> bool:
        return self.ended


STRATEGY_CLASSES = {
    "NoMigration": NoMigrationStrategy,
    "WeakO": WeakOStrategy,
    "BufferAll": BufferAllStrategy,
    "FreezeDrop": FreezeDropStrategy,
    "AdversarialEager": AdversarialEagerStrategy,
}


# ---------------------------------------------------------------------------
# the simulation


CLIENT = ("10.0.0.1", 5000)
SERVER = ("10.0.1.2", 80)


class FMSSimulation:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.loop = EventLoop()
        self.nf: NF = get_nf(sc.nf_kind, **self._nf_config())
        self.trace = Trace()
        self.admit_counter = 0
        self.msg_counter = 0
        self.routed_to_src = 0
        self.src_processed = 0
        self.channel_pending = 0
        self.channel_clear_at = 0  # FIFO floor for message delivery
        self.rng = random.Random(sc.seed)

        self.fwd_flow = FlowKey(CLIENT[0], CLIENT[1], SERVER[0], SERVER[1], "TCP")
        self.states = {"nf_src": self.nf.initial_state(),
                       "nf_dst": self.nf.initial_state()}

        self.strategy: Strategy = STRATEGY_CLASSES[sc.strategy](self)

        # links
        self.links = {}
        wiring = {
            ("h1", "s1"): self._s1_from_h1,
            ("s1", "nf_src"): lambda f: self._nf_ingress("nf_src", f),
            ("s1", "nf_dst"): lambda f: self._nf_ingress("nf_dst", f),
            ("nf_src", "s2"): lambda f: self._egress("s2", f),
            ("nf_dst", "s2"): lambda f: self._egress("s2", f),
            ("s2", "h2"): self._h2_receive,
            ("h2", "s2"): self._s2_from_h2,
            ("s2", "nf_src"): lambda f: self._nf_ingress("nf_src", f),
            ("s2", "nf_dst"): lambda f: self._nf_ingress("nf_dst", f),
            ("nf_src", "s1"): lambda f: self._egress("s1", f),
            ("nf_dst", "s1"): lambda f: self._egress("s1", f),
            ("s1", "h1"): self._h1_receive,
        }
        for pair, deliver in wiring.items():
            self.links[pair] = Link(self.loop, sc.links[pair], deliver)

        # transport endpoints
        self.sender = tp.Sender(sc.flow.total_bytes, sc.flow.payload_bytes,
                                sc.flow.arrival, self.rng, sc.transport)
        self.receiver = tp.Receiver()
        self.ack_seq = 0
        self.completed_at: int | None = None
        self._rto_gen = 0
        self._pump_wake = -1  # dedupe wake-ups for not-yet-available packets

    def _nf_config(self) -> dict:
        cfg = dict(self.sc.nf_config)
        if self.sc.nf_kind == "nat":
            cfg.setdefault("private", CLIENT)
        return cfg

    # -- trace helpers --

    def log(self, kind: str, site: str, **data) -> None:
        self.trace.append(Event(self.loop.now, kind, site, data))

    def intern(self, state) -> int:
        return self.trace.intern_state(state.canonical())

    # -- admission & routing (Action Manager) --

    def _admit(self, frame: Frame, site: str) -> None:
        ts = self.admit_counter
        self.admit_counter += 1
        frame.pkt = frame.pkt.admitted(ts)
        self.log("Admit", site, pkt=frame.pkt.to_json())
        route = self.strategy.directive(frame.pkt)
        if route == "buffer":
            self.log("Buffer", site, pkt=frame.pkt.to_json())
            self.strategy.buffered.append((frame, site))
            return
        if route == "drop":
            self.log("Drop", site, pkt=frame.pkt.to_json())
            return
        self.route_frame(frame, site, route)

    def route_frame(self, frame: Frame, site: str, route: str, released: bool = False) -> None:
        self.log("RouteDecision", site, pkt=frame.pkt.to_json(), target=route)
        target = "nf_src" if route == "src" else "nf_dst"
        if target == "nf_src":
            self.routed_to_src += 1
        self.links[(site, target)].send(frame)

    def _s1_from_h1(self, frame: Frame) -> None:
        self._admit(frame, "s1")

    def _s2_from_h2(self, frame: Frame) -> None:
        self._admit(frame, "s2")

    # -- NF processing --

    def _nf_ingress(self, nf_site: str, frame: Frame) -> None:
        p = frame.pkt
        state = self.states[nf_site]
        step = self.nf.step(state, p)
        self.states[nf_site] = step.next_state
        if nf_site == "nf_src":
            self.src_processed += 1
        self.log("NFProcess", nf_site,
                 pkt=p.to_json(),
                 st_before=self.intern(state),
                 st_after=self.intern(step.next_state),
                 outs=[q.digest() for q in step.output],
                 upd=sorted(step.updated_indices),
                 csp=step.csp_marker)
        if nf_site == "nf_src":
            self.strategy.on_src_step(p, step)
        # forward outputs (zero or one in the shipped NFs)
        egress = "s2" if p.direction == "fwd" else "s1"
        for out in step.output:
            frame.pkt = out
            self.links[(nf_site, egress)].send(frame)

    def _egress(self, switch: str, frame: Frame) -> None:
        p = frame.pkt
        # the merge point where packets leave the FMS
        orig_flow = self.fwd_flow if p.direction == "fwd" else self._rev_admitted_flow()
        self.log("ExitFMS", switch,
                 flow=str(orig_flow),
                 ident=[p.admit_ts, p.seq_id, p.digest()])
        dest = "h2" if p.direction == "fwd" else "h1"
        self.links[(switch, dest)].send(frame)

    def _rev_admitted_flow(self) -> FlowKey:
        # reverse packets are admitted as seen at s2: addressed to the
        # public tuple when the NF is a NAT, the plain reverse otherwise
        if self.sc.nf_kind == "nat":
            pub = self.nf.pool[0]
            return FlowKey(SERVER[0], SERVER[1], pub[0], pub[1], "TCP")
        return self.fwd_flow.reversed()

    # -- state migration channel --

    def send_state_snapshot(self, on_applied=None) -> None:
        """Ship the source NF's full current state (initial q0 transfer)."""
        state = self.states["nf_src"]
        init = self.nf.initial_state()
        deltas = []
        for i, spec in enumerate(self.nf.schema.substates, start=1):
            if state.get(i) == init.get(i):
                continue
            val = state.get(i)
            src_ts = state.index_ts[i - 1]
            deltas.append(StateDelta(i, val, src_ts, spec.cls))
        if deltas:
            self.send_deltas(tuple(deltas), on_applied=on_applied)
        elif on_applied:
            on_applied(())

    def send_deltas(self, deltas, on_applied=None) -> None:
        if not deltas:
            if on_applied:
                on_applied(())
            return
        by_cls: dict[str, list] = {}
        for d in deltas:
            by_cls.setdefault(d.cls, []).append(d)
        group = []
        for cls in ("CSS", "RCSS", "NSS"):
            if cls not in by_cls:
                continue
            mid = self.msg_counter
            self.msg_counter += 1
            msg_deltas = tuple(by_cls[cls])
            self.log("MsgSend", "nf_src", to="nf_dst", cls=cls, mid=mid,
                     deltas=[[d.index, encode_value(d.value), d.source_ts, d.cls]
                             for d in msg_deltas])
            group.append((mid, cls, msg_deltas))
        if isinstance(self.strategy, WeakOStrategy):
            self.strategy.note_sent([d for _, _, ds in group for d in ds])
        self.channel_pending += 1
        arrival = max(self.loop.now + self.sc.msg_delay_us, self.channel_clear_at)
        self.channel_clear_at = arrival
        self.loop.schedule(arrival, lambda: self._deliver_group(group, on_applied))

    def _deliver_group(self, group, on_applied) -> None:
        self.channel_pending -= 1
        all_deltas = tuple(d for _, _, ds in group for d in ds)
        before = self.states["nf_dst"]
        after = nf_apply(self.nf.schema, before, all_deltas)
        self.states["nf_dst"] = after
        for mid, cls, msg_deltas in group:
            self.log("MsgApply", "nf_dst", mid=mid, cls=cls,
                     deltas=[[d.index, encode_value(d.value), d.source_ts, d.cls]
                             for d in msg_deltas])
        if after.canonical() != before.canonical():
            self.log("NFStateChange", "nf_dst", cause="apply",
                     st_before=self.intern(before), st_after=self.intern(after))
        if on_applied:
            on_applied(all_deltas)
        self.strategy.on_applied(all_deltas)

    # -- transport endpoints --

    def _send_data(self, seq: int, retx: bool) -> None:
        size = self.sender.sizes[seq - 1]
        kind = "SYN" if seq == 1 else "DATA"
        pkt = Packet(self.fwd_flow, seq, kind, size, "fwd")
        self.trace.transport.append(
            {"e": "send", "t": self.loop.now, "seq": seq, "bytes": size,
             "retx": 1 if retx else 0})
        self.links[("h1", "s1")].send(Frame(pkt, data_seq=seq, retx=retx))
        self._arm_rto()

    def _pump_sender(self) -> None:
        now = self.loop.now
        for seq, retx in self.sender.sendable(now):
            self._send_data(seq, retx)
        wake = self.sender.next_available_at(now)
        if wake is not None and wake != self._pump_wake:
            self._pump_wake = wake
            self.loop.schedule(wake, self._pump_sender)

    def _h2_receive(self, frame: Frame) -> None:
        if frame.data_seq is None:
            return
        ack, delivered, dup = self.receiver.on_data(frame.data_seq,
                                                    self.sender.sizes[frame.data_seq - 1])
        for seq in delivered:
            self.trace.transport.append(
                {"e": "dlv", "t": self.loop.now, "seq": seq,
                 "bytes": self.sender.sizes[seq - 1], "dup": 0})
        if dup:
            self.trace.transport.append(
                {"e": "dlv", "t": self.loop.now, "seq": frame.data_seq,
                 "bytes": self.sender.sizes[frame.data_seq - 1], "dup": 1})
        self.ack_seq += 1
        rev = Packet(frame.pkt.flow.reversed(), self.ack_seq, "ACK", 0, "rev")
        self.links[("h2", "s2")].send(Frame(rev, ack=ack))

    def _h1_receive(self, frame: Frame) -> None:
        if frame.ack is None:
            return
        actions = self.sender.on_ack(frame.ack, self.loop.now)
        for seq in actions.retransmits:
            self._send_data(seq, retx=True)
        if actions.advanced:
            self._rto_gen += 1
            self._arm_rto()
        if self.sender.complete() and self.completed_at is None:
            self.completed_at = self.loop.now
        self._pump_sender()

    def _arm_rto(self) -> None:
        if self.sender.complete():
            return
        gen = self._rto_gen
        rto = self.sender.rto_us()
        self.loop.schedule(self.loop.now + rto, lambda: self._rto_fire(gen))

    def _rto_fire(self, gen: int) -> None:
        if gen != self._rto_gen or self.sender.complete():
            return
        seq = self.sender.on_rto()
        if seq is not None:
            self._send_data(seq, retx=True)
        self._rto_gen += 1
        self._arm_rto()

    # -- main entry --

    def run(self) -> Trace:
        sc = self.sc
        self.trace.meta = {
            "scenario_id": sc.scenario_id(),
            "seed": sc.seed,
            "strategy": sc.strategy,
            "flow": str(self.fwd_flow),
            "rev_flow": str(self._rev_admitted_flow()),
            "src_nf": "nf_src",
            "dst_nf": "nf_dst",
            "nf": {"kind": sc.nf_kind, "config": self._nf_config_json(),
                   "schema": self.nf.schema.to_json()},
            "t1_us": sc.t1_us,
            "t_r_us": sc.t_r_us,
            "msg_delay_us": sc.msg_delay_us,
            "total_bytes": sc.flow.total_bytes,
            "scenario": sc.to_json(),
        }
        if sc.strategy != "NoMigration":
            self.loop.schedule(sc.t1_us, self.strategy.on_migration_timer)
        self.loop.schedule(0, self._pump_sender)

        budget = 5_000_000 * max(1, sc.flow.total_bytes // 10_000) + 120_000_000
        while True:
            done = (self.completed_at is not None
                    and (sc.strategy == "NoMigration" or self.strategy.migration_complete()))
            if done:
                break
            if not self.loop.step():
                raise SimulationError("event loop drained before completion "
                                      f"(delivered={self.receiver.cum})")
            if self.loop.now > budget:
                raise SimulationError(f"simulation exceeded time budget at {self.loop.now}us")

        summary = self.sender.summary()
        summary.update(self.receiver.summary())
        first_send = next((r["t"] for r in self.trace.transport if r["e"] == "send"), 0)
        last_dlv = max((r["t"] for r in self.trace.transport
                        if r["e"] == "dlv" and not r["dup"]), default=first_send)
        elapsed = max(1, last_dlv - first_send)
        summary["goodput_bps"] = round(sc.flow.total_bytes * 8 * 1e6 / elapsed, 3)
        self.trace.transport.append({"e": "summary", **summary})
        return self.trace

    def _nf_config_json(self) -> dict:
        cfg = self._nf_config()
        return {k: (list(map(list, v)) if k == "pool" else
                    (list(v) if isinstance(v, tuple) else v))
                for k, v in cfg.items()}


def run_simulation(sc: Scenario) -> Trace:
    """Run one scenario to completion and return its trace."""
    return FMSSimulation(sc).run()


# ---------------------------------------------------------------------------
# feasibility estimate


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    t_m_us: int
    t_r_us: int
    nsp_duration_us: int | None
    reason: str


def validate_feasibility(sc: Scenario, nf: NF | None = None) -> FeasibilityReport:
    """Advisory check of the no-buffer migration condition: a non-cohesive
    packet run must exist at migration start and be long enough for state
    transfer plus re-route (t_m + t_r < nsp duration)."""
    nf = nf or get_nf(sc.nf_kind, **sc.nf_config)
    t_m = sc.msg_delay_us
    if not nf.schema.css_indices:
        return FeasibilityReport(True, t_m, sc.t_r_us, None,
                                 "no substate requires immediate synchronization")
    old_path = [sc.links[p] for p in OLD_PATH_PAIRS]
    handshake_end = sum(ls.delay_us + tx_time_us(HEADER_BYTES, ls.bandwidth_bps)
                        for ls in old_path[:2])
    bottleneck = min(ls.bandwidth_bps for ls in sc.links.values())
    est_duration = int(sc.flow.total_bytes * 8 * 1e6 / bottleneck) + 4 * handshake_end
    nsp = est_duration - handshake_end
    if sc.t1_us < handshake_end:
        return FeasibilityReport(False, t_m, sc.t_r_us, nsp,
                                 "migration starts before the cohesive run has completed")
    if t_m + sc.t_r_us >= nsp:
        return FeasibilityReport(False, t_m, sc.t_r_us, nsp,
                                 "state transfer plus re-route does not fit the "
                                 "non-cohesive interval")
    return FeasibilityReport(True, t_m, sc.t_r_us, nsp, "ok")
