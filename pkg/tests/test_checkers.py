import pytest

from flowmig.core import Event, Trace
from flowmig.checkers import (
    CspReport,
    check_E,
    check_L,
    check_N,
    check_O,
    check_all,
    check_eventual_sync,
    check_weak_o,
    declared_csp_runs,
    detect_csp_oracle,
    ideal_replay,
    is_subsequence,
    reorder_metrics,
)
from flowmig.nf import CounterNF, NatNF, ReorderResilientDpiNF

from conftest import CLIENT_FLOW, asym_topology, make_packets, run_scenario


def test_is_subsequence():
    assert is_subsequence([1, 3], [1, 2, 3])
    assert is_subsequence([], [1])
    assert not is_subsequence([3, 1], [1, 2, 3])


# -- ideal replay --

def test_ideal_replay_empty():
    trace = run_scenario()
    records, final = ideal_replay(trace, packets=[])
    assert records == []
    assert final.canonical() == (None, None)


def test_ideal_replay_nat_two_packets():
    trace = run_scenario()
    syn, data = make_packets("SF")
    records, final = ideal_replay(trace, packets=[syn, data])
    assert final.get(1) == ("203.0.113.1", 40000)
    assert final.get(2) == data.admit_ts
    (p0, out0), (p1, out1) = records
    assert out0[0][2].startswith("203.0.113.1:40000")
    assert out0[0][0] == syn.admit_ts and out1[0][0] == data.admit_ts


def test_no_migration_exits_equal_ideal_exactly():
    trace = run_scenario(strategy="NoMigration")
    from flowmig.core import project_trace
    from flowmig.checkers import _ideal_outputs_for_flow
    actual = [tuple(i) for i in project_trace(trace, "Pstar_delta")]
    assert actual == _ideal_outputs_for_flow(trace, trace.primary_flow())


# -- property checkers on real runs --

def test_check_L_flags_freeze_drop():
    trace = run_scenario(strategy="FreezeDrop", t1_s=0.1)
    v = check_L(trace)
    assert not v.passed
    assert "missing=" in v.detail


def test_check_N_flags_buffer_all():
    trace = run_scenario(strategy="BufferAll", t1_s=0.1)
    v = check_N(trace)
    assert not v.passed
    assert "buffered" in v.detail
    assert check_L(trace).passed  # nothing was lost, only delayed


def test_weak_o_run_passes_everything():
    for kind in ("nat", "dpi", "counter"):
        trace = run_scenario(nf={"kind": kind, "config": {}})
        verdicts = check_all(trace)
        failed = [n for n, v in verdicts.items() if not v.passed]
        assert failed == [], f"{kind}: {failed}"


def test_check_O_flags_interleaved_handover():
    trace = run_scenario()
    src = [ev for ev in trace.events if ev.kind == "NFProcess"
           and ev.site == "nf_src" and ev.data["pkt"]["dir"] == "fwd"]
    dst = [ev for ev in trace.events if ev.kind == "NFProcess"
           and ev.site == "nf_dst" and ev.data["pkt"]["dir"] == "fwd"]
    assert src and len(dst) >= 2
    # teleport a destination packet back into the source's sequence
    src[-1].data["pkt"], dst[1].data["pkt"] = dst[1].data["pkt"], src[-1].data["pkt"]
    v = check_O(trace)
    assert not v.passed
    assert "order" in v.detail or "interleaved" in v.detail


def test_check_E_flags_exit_reordering():
    trace = run_scenario(topology=asym_topology(old_delay_ms=60.0), seed=3,
                         t1_s=0.15, flow={"total_bytes": 300_000})
    m = reorder_metrics(trace)
    assert m.max_displacement > 0
    v = check_E(trace)
    assert not v.passed
    assert "overtaken" in v.detail


def test_eventual_sync_detects_suppressed_final_state():
    trace = run_scenario()
    changed = [ev for ev in trace.events
               if ev.site == "nf_dst" and ev.kind in ("NFProcess", "NFStateChange")
               and ev.data.get("st_before") != ev.data.get("st_after")]
    assert changed
    bogus = trace.intern_state((("9.9.9.9", 9), 999))
    changed[-1].data["st_after"] = bogus
    v = check_eventual_sync(trace)
    assert not v.passed
    assert "destination ended at" in v.detail


def test_weak_o_r1_flags_premature_forwarding():
    trace = run_scenario(strategy="AdversarialEager", css_lag_us=80_000)
    r1, r2 = check_weak_o(trace)
    assert not r1.passed
    assert "premature destination NFProcess" in r1.detail


def test_weak_o_r1_vacuous_without_sync_requirement():
    trace = run_scenario(nf={"kind": "dpi", "config": {}})
    r1, _ = check_weak_o(trace)
    assert r1.passed
    assert "no substate requires immediate sync" in r1.detail


def test_hierarchy_E_implies_SO_implies_O():
    runs = [
        run_scenario(strategy="NoMigration"),
        run_scenario(),
        run_scenario(nf={"kind": "dpi", "config": {}}),
        run_scenario(nf={"kind": "counter", "config": {}}),
        run_scenario(strategy="BufferAll", t1_s=0.1),
        run_scenario(strategy="FreezeDrop", t1_s=0.1),
        run_scenario(strategy="AdversarialEager", css_lag_us=80_000),
        run_scenario(topology=asym_topology(old_delay_ms=60.0), seed=3,
                     t1_s=0.15, flow={"total_bytes": 300_000}),
    ]
    for trace in runs:
        v = check_all(trace)
        if v["E"].passed:
            assert v["SO"].passed
        if v["SO"].passed:
            assert v["O"].passed


# -- cohesive-run oracle --

def test_oracle_nat_initial_syn_is_cohesive():
    nat = NatNF(private=("10.0.0.1", 5000))
    rep = detect_csp_oracle(nat, make_packets("SFF"))
    assert rep == CspReport(frozenset({1}), ((0, 0),))


def test_oracle_commutative_nfs_have_no_runs():
    pkts = make_packets("SFFR")
    assert detect_csp_oracle(CounterNF(), pkts) == CspReport(frozenset(), ())
    assert detect_csp_oracle(ReorderResilientDpiNF(), pkts) == CspReport(frozenset(), ())


def test_oracle_rejects_oversized_input():
    with pytest.raises(ValueError):
        detect_csp_oracle(CounterNF(), make_packets("F" * 5), max_pkts=3)


@pytest.mark.parametrize("shape", ["S", "SF", "SFF", "SFRF", "FFS", "SFFRFR"])
def test_oracle_agrees_with_declared_runs(shape):
    nat = NatNF(private=("10.0.0.1", 5000))
    pkts = make_packets(shape)
    assert detect_csp_oracle(nat, pkts).runs == declared_csp_runs(nat, pkts)


# -- reordering metrics --

def test_reorder_metrics_in_order_run():
    trace = run_scenario(strategy="NoMigration")
    m = reorder_metrics(trace)
    assert m.total > 0
    assert m.displaced == 0 and m.max_displacement == 0


def test_reorder_metrics_synthetic_displacement():
    trace = Trace(meta={"flow": str(CLIENT_FLOW)})
    for t, ts in enumerate([1, 3, 2]):
        trace.append(Event(t, "ExitFMS", "s2",
                           {"flow": str(CLIENT_FLOW), "ident": [ts, ts, "d"]}))
    m = reorder_metrics(trace)
    assert m == type(m)(total=3, displaced=2, max_displacement=1)
