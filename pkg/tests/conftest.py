import json

import pytest

from flowmig.core import FlowKey, Packet
from flowmig.fms import run_simulation, scenario_from_dict

CLIENT_FLOW = FlowKey("10.0.0.1", 5000, "10.0.1.2", 80)


def make_scenario_dict(**overrides) -> dict:
    d = {
        "flow": {"total_bytes": 100_000, "payload_bytes": 1000, "arrival": "fixed"},
        "strategy": "WeakO",
        "t1_s": 0.2,
        "seed": 1,
        "nf": {"kind": "nat", "config": {}},
    }
    for k, v in overrides.items():
        if k == "flow":
            d["flow"].update(v)
        else:
            d[k] = v
    return d


def run_scenario(**overrides):
    return run_simulation(scenario_from_dict(make_scenario_dict(**overrides)))


def asym_topology(old_delay_ms=30.0, old_bw=3_000_000):
    """Slow old path so a flip creates backlog and reordering."""
    base = [
        {"from": "h1", "to": "s1", "bandwidth_bps": 10_000_000, "delay_ms": 1.0},
        {"from": "s1", "to": "nf_src", "bandwidth_bps": old_bw, "delay_ms": old_delay_ms},
        {"from": "s1", "to": "nf_dst", "bandwidth_bps": 10_000_000, "delay_ms": 1.0},
        {"from": "nf_src", "to": "s2", "bandwidth_bps": 10_000_000, "delay_ms": 1.0},
        {"from": "nf_dst", "to": "s2", "bandwidth_bps": 10_000_000, "delay_ms": 1.0},
        {"from": "s2", "to": "h2", "bandwidth_bps": 10_000_000, "delay_ms": 1.0},
    ]
    return {"links": base}


def make_packets(shape: str, flow: FlowKey = CLIENT_FLOW):
    """Build an admitted packet list from a shape string: S=SYN, F=forward
    data, R=reverse data."""
    pkts = []
    for i, s in enumerate(shape):
        if s == "S":
            pkts.append(Packet(flow, i + 1, "SYN", 0, "fwd", i))
        elif s == "F":
            pkts.append(Packet(flow, i + 1, "DATA", 100, "fwd", i))
        elif s == "R":
            pkts.append(Packet(flow.reversed(), i + 1, "DATA", 100, "rev", i))
        else:
            raise ValueError(s)
    return pkts


@pytest.fixture
def scenario_file(tmp_path):
    def write(**overrides):
        p = tmp_path / "scenario.json"
        p.write_text(json.dumps(make_scenario_dict(**overrides)))
        return p
    return write
