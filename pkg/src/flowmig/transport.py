"""TCP-like transport endpoints at packet granularity.

Sequence numbers are whole packets (1..N), not bytes.  The model keeps the
pieces that matter for studying reordering during a path flip:

* cumulative ACKs plus selective-ack blocks, and duplicate-ack counting;
* SACK-scoreboard fast retransmit once enough packets above a hole have been
  selectively acked (``dupthresh``, default 3);
* duplicate-SACK reporting by the receiver, used by the sender to detect
  spurious retransmits, restore the congestion window saved on entry to
  recovery, and raise ``dupthresh`` from the observed reordering extent;
* slow start / congestion avoidance and a coarse retransmission timer as a
  safety net.

The functions mutate the passed-in state and are deterministic; all policy
lives here so the simulator only moves frames around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class AckRecord:
    """What one ACK carries back to the sender."""

    cum: int  # highest in-order packet received
    sacks: tuple = ()  # ((lo, hi), ...) inclusive runs above cum
    dsack: tuple | None = None  # (lo, hi) duplicate-arrival report


@dataclass
class ReceiverState:
    cum: int = 0
    ooo: set = field(default_factory=set)  # out-of-order seqs held above cum
    dup_arrivals: int = 0
    max_arrived: int = 0
    max_reorder_extent: int = 0


def _sack_blocks(ooo: set) -> tuple:
    blocks = []
    for s in sorted(ooo):
        if blocks and s == blocks[-1][1] + 1:
            blocks[-1][1] = s
        else:
            blocks.append([s, s])
    return tuple((a, b) for a, b in blocks)


def receiver_on_data(rs: ReceiverState, seq: int):
    """Process one arriving data packet.

    Returns (ack, delivered, dup): the ACK to emit, the list of seqs newly
    released in order to the application, and whether this arrival was a
    duplicate.
    """
    dup = seq <= rs.cum or seq in rs.ooo
    delivered: list = []
    if dup:
        rs.dup_arrivals += 1
    else:
        if rs.max_arrived > seq:
            rs.max_reorder_extent = max(rs.max_reorder_extent, rs.max_arrived - seq)
        rs.max_arrived = max(rs.max_arrived, seq)
        if seq == rs.cum + 1:
            rs.cum = seq
            delivered.append(seq)
            while rs.cum + 1 in rs.ooo:
                rs.cum += 1
                rs.ooo.discard(rs.cum)
                delivered.append(rs.cum)
        else:
            rs.ooo.add(seq)
    ack = AckRecord(rs.cum, _sack_blocks(rs.ooo),
                    (seq, seq) if dup else None)
    return ack, delivered, dup


@dataclass
class SenderState:
    total_pkts: int
    cwnd: float = 10.0
    ssthresh: float = float(1 << 30)
    dupthresh: int = 3
    cum: int = 0
    highest_sent: int = 0
    sacked: set = field(default_factory=set)
    srtt_us: float | None = None
    min_rto_us: int = 200_000
    # recovery bookkeeping
    in_recovery: bool = False
    recover_point: int = 0
    rto_recover_point: int = 0  # retransmit holes up to here after a timeout
    undo: tuple | None = None  # (cwnd, ssthresh) saved on entering recovery
    retx_pending: dict = field(default_factory=dict)  # seq -> outstanding retx count
    retx_this_episode: set = field(default_factory=set)
    # counters
    dup_acks: int = 0
    retransmits: int = 0
    spurious_retransmits: int = 0
    max_reorder_extent: int = 0
    rto_count: int = 0


@dataclass
class SenderActions:
    retransmits: list = field(default_factory=list)
    advanced: bool = False


def _pipe(ss: SenderState) -> int:
    return sum(1 for s in range(ss.cum + 1, ss.highest_sent + 1) if s not in ss.sacked)


class TransportProtocolError(Exception):
    pass


def sender_on_ack(ss: SenderState, ack: AckRecord, rtt_sample_us: int | None = None) -> SenderActions:
    acts = SenderActions()
    if ack.cum > ss.highest_sent:
        raise TransportProtocolError(
            f"ack for {ack.cum} beyond highest sent {ss.highest_sent}")

    if ack.dsack is not None:
        _on_dsack(ss, ack.dsack)

    new_sacked = set()
    for lo, hi in ack.sacks:
        for s in range(lo, hi + 1):
            if s > ss.cum and s not in ss.sacked:
                new_sacked.add(s)
    ss.sacked.update(new_sacked)
    if new_sacked:
        # a packet sacked below already-sacked data arrived out of order;
        # the distance to the top of the scoreboard is the reordering extent
        top = max(ss.sacked | {ss.cum})
        for s in new_sacked:
            if top > s:
                ss.max_reorder_extent = max(ss.max_reorder_extent, top - s)

    if ack.cum > ss.cum:
        if ss.sacked:
            # a cumulative jump past never-sacked holes while later data is
            # already sacked means those packets arrived late, not lost
            top = max(ss.sacked)
            for s in range(ss.cum + 1, min(ack.cum, top) + 1):
                if s not in ss.sacked:
                    ss.max_reorder_extent = max(ss.max_reorder_extent, top - s)
                    if s not in ss.retx_pending and s not in ss.retx_this_episode:
                        # the hole filled without a retransmit: provably pure
                        # reordering, so tolerate this much in the future
                        ss.dupthresh = max(ss.dupthresh, ss.max_reorder_extent + 1)
        newly = ack.cum - ss.cum
        ss.cum = ack.cum
        ss.sacked = {s for s in ss.sacked if s > ss.cum}
        for s in list(ss.retx_pending):
            if s <= ss.cum and ss.retx_pending[s] <= 0:
                del ss.retx_pending[s]
        acts.advanced = True
        if rtt_sample_us is not None:
            ss.srtt_us = (rtt_sample_us if ss.srtt_us is None
                          else 0.875 * ss.srtt_us + 0.125 * rtt_sample_us)
        if ss.in_recovery and ss.cum >= ss.recover_point:
            ss.in_recovery = False
            ss.retx_this_episode.clear()
        if not ss.in_recovery:
            if ss.cwnd < ss.ssthresh:
                ss.cwnd += newly  # slow start
            else:
                ss.cwnd += newly / ss.cwnd  # congestion avoidance
    elif ack.dsack is None:
        ss.dup_acks += 1

    # post-timeout slow-start recovery: keep retransmitting the first hole on
    # every advancing ACK until the pre-timeout frontier is reached, instead
    # of paying one full RTO per lost packet
    if acts.advanced and ss.cum < ss.rto_recover_point:
        nxt = ss.cum + 1
        if (nxt <= ss.highest_sent and nxt not in ss.sacked
                and ss.retx_pending.get(nxt, 0) == 0):
            ss.retx_pending[nxt] = 1
            ss.retransmits += 1
            acts.retransmits.append(nxt)

    # SACK scoreboard: retransmit any hole with >= dupthresh sacked packets
    # above it (at most once per recovery episode)
    if ss.sacked:
        top = max(ss.sacked)
        for hole in range(ss.cum + 1, top):
            if hole in ss.sacked or hole in ss.retx_this_episode:
                continue
            above = sum(1 for s in ss.sacked if s > hole)
            if above >= ss.dupthresh:
                if not ss.in_recovery:
                    ss.in_recovery = True
                    ss.recover_point = ss.highest_sent
                    ss.undo = (ss.cwnd, ss.ssthresh)
                    ss.ssthresh = max(_pipe(ss) / 2.0, 2.0)
                    ss.cwnd = ss.ssthresh
                ss.retx_this_episode.add(hole)
                ss.retx_pending[hole] = ss.retx_pending.get(hole, 0) + 1
                ss.retransmits += 1
                acts.retransmits.append(hole)
    return acts


def _on_dsack(ss: SenderState, block: tuple) -> None:
    for seq in range(block[0], block[1] + 1):
        if ss.retx_pending.get(seq, 0) > 0:
            ss.retx_pending[seq] -= 1
            ss.spurious_retransmits += 1
            if ss.undo is not None:
                # every loss signal in this episode was reordering: put the
                # congestion state back and stop recovery
                ss.cwnd, ss.ssthresh = ss.undo
                ss.undo = None
                ss.in_recovery = False
                ss.retx_this_episode.clear()
            if ss.max_reorder_extent + 1 > ss.dupthresh:
                ss.dupthresh = ss.max_reorder_extent + 1


def sender_on_rto(ss: SenderState) -> int | None:
    """Timer expiry: retransmit the first hole and collapse the window."""
    if ss.cum >= ss.total_pkts:
        return None
    seq = ss.cum + 1
    if seq > ss.highest_sent:
        return None
    ss.rto_count += 1
    ss.rto_recover_point = ss.highest_sent
    ss.ssthresh = max(_pipe(ss) / 2.0, 2.0)
    ss.cwnd = 1.0
    ss.in_recovery = False
    ss.retx_this_episode.clear()
    ss.undo = None
    ss.retx_pending[seq] = ss.retx_pending.get(seq, 0) + 1
    ss.retransmits += 1
    return seq


# ---------------------------------------------------------------------------
# endpoint drivers used by the simulator


class Receiver:
    def __init__(self):
        self.state = ReceiverState()

    @property
    def cum(self) -> int:
        return self.state.cum

    def on_data(self, seq: int, nbytes: int):
        return receiver_on_data(self.state, seq)

    def summary(self) -> dict:
        rs = self.state
        return {"dup_arrivals": rs.dup_arrivals,
                "rcv_max_reorder_extent": rs.max_reorder_extent}


class Sender:
    """Workload plus sender-side transport state.

    ``arrival`` models the application: "fixed" makes the whole transfer of
    equal-size packets available at t=0; "poisson" draws payload sizes
    exponential with mean ``payload_bytes`` and makes packets available with
    exponential inter-arrival gaps of mean ``payload_bytes`` microseconds."""

    def __init__(self, total_bytes: int, payload_bytes: int, arrival: str,
                 rng, spec) -> None:
        if arrival == "poisson":
            self.sizes = []
            remaining = total_bytes
            while remaining > 0:
                sz = min(remaining, max(1, min(1460, round(rng.expovariate(1.0 / payload_bytes)))))
                self.sizes.append(sz)
                remaining -= sz
            self.avail = []
            t = 0.0
            for _ in self.sizes:
                t += rng.expovariate(1.0 / payload_bytes)
                self.avail.append(int(t))
        else:
            n_full, rem = divmod(total_bytes, payload_bytes)
            self.sizes = [payload_bytes] * n_full + ([rem] if rem else [])
            self.sizes = self.sizes or [0]
            self.avail = [0] * len(self.sizes)
        self.state = SenderState(total_pkts=len(self.sizes),
                                 cwnd=float(spec.initial_cwnd),
                                 ssthresh=float(spec.ssthresh),
                                 min_rto_us=spec.min_rto_us)
        self.send_time: dict = {}  # seq -> (time, was_retx)
        self._next = 1

    # -- hooks called by the simulator --

    def sendable(self, now: int):
        """New (never-sent) packets allowed out right now."""
        ss = self.state
        out = []
        while (self._next <= ss.total_pkts
               and self.avail[self._next - 1] <= now
               and _pipe(ss) + len(out) < max(1, int(ss.cwnd))):
            out.append((self._next, False))
            self._next += 1
        for seq, _ in out:
            ss.highest_sent = max(ss.highest_sent, seq)
            self.send_time[seq] = (now, False)
        return out

    def next_available_at(self, now: int):
        ss = self.state
        if self._next <= ss.total_pkts and self.avail[self._next - 1] > now:
            if _pipe(ss) < max(1, int(ss.cwnd)):
                return self.avail[self._next - 1]
        return None

    def on_ack(self, ack: AckRecord, now: int) -> SenderActions:
        rtt = None
        if ack.cum > self.state.cum:
            st = self.send_time.get(ack.cum)
            if st is not None and not st[1]:
                rtt = now - st[0]
        acts = sender_on_ack(self.state, ack, rtt)
        for seq in acts.retransmits:
            self.send_time[seq] = (now, True)
        return acts

    def on_rto(self):
        return sender_on_rto(self.state)

    def rto_us(self) -> int:
        ss = self.state
        if ss.srtt_us is None:
            return 1_000_000
        return max(ss.min_rto_us, int(4 * ss.srtt_us))

    def complete(self) -> bool:
        return self.state.cum >= self.state.total_pkts

    def summary(self) -> dict:
        ss = self.state
        return {
            "dup_acks": ss.dup_acks,
            "retransmits": ss.retransmits,
            "spurious_retransmits": ss.spurious_retransmits,
            "snd_max_reorder_extent": ss.max_reorder_extent,
            "final_dupthresh": ss.dupthresh,
            "rto_count": ss.rto_count,
        }


def compute_goodput(trace) -> float:
    """Application goodput in bits/second: unique delivered payload bytes over
    the interval from first send to last unique delivery.

    Raises ValueError when the trace does not contain a completed transfer.
    """
    sends = [r for r in trace.transport if r.get("e") == "send"]
    dlvs = [r for r in trace.transport if r.get("e") == "dlv" and not r.get("dup")]
    if not sends or not dlvs:
        raise ValueError("trace has no completed transfer")
    unique_bytes = sum(r["bytes"] for r in dlvs)
    total = trace.meta.get("total_bytes")
    if total is not None and unique_bytes < total:
        raise ValueError(f"transfer incomplete: {unique_bytes} of {total} bytes delivered")
    first = min(r["t"] for r in sends)
    last = max(r["t"] for r in dlvs)
    if last <= first:
        raise ValueError("degenerate transfer interval")
    return unique_bytes * 8 * 1e6 / (last - first)
