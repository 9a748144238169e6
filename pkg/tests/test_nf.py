import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmig.nf import (
    CounterNF,
    NatNF,
    NFSchema,
    ReorderResilientDpiNF,
    StateConflictError,
    StateDelta,
    get_nf,
    nf_apply,
    nf_step,
    partial_equiv,
    step_partial_equiv,
)

from conftest import make_packets


@pytest.fixture
def nat():
    return NatNF(private=("10.0.0.1", 5000))


def test_nat_syn_allocates_lowest_public_tuple(nat):
    syn = make_packets("S")[0]
    res = nf_step(nat, nat.initial_state(), syn)
    assert res.next_state.get(1) == ("203.0.113.1", 40000)
    assert len(res.output) == 1
    out = res.output[0]
    assert out.flow.src == "203.0.113.1" and out.flow.sport == 40000
    assert res.message is not None and res.message.msg_class == "CSS"
    assert res.csp_marker == "EndOfCSP"
    assert 1 in res.updated_indices


def test_nat_data_with_mapping_updates_latest_timestamp(nat):
    syn, data = make_packets("SF")
    st1 = nf_step(nat, nat.initial_state(), syn).next_state
    res = nf_step(nat, st1, data)
    assert res.output[0].flow.src == "203.0.113.1"
    assert res.next_state.get(2) == data.admit_ts
    assert res.csp_marker == "NotInCSP"
    assert res.message.msg_class == "RCSS"


def test_nat_data_without_mapping_outputs_nothing(nat):
    data = make_packets("F")[0]
    res = nf_step(nat, nat.initial_state(), data)
    assert res.output == ()
    assert res.next_state is nat.initial_state() or \
        res.next_state.canonical() == nat.initial_state().canonical()


def test_nat_reverse_translates_back_without_state_update(nat):
    syn = make_packets("S")[0]
    st1 = nf_step(nat, nat.initial_state(), syn).next_state
    rev = make_packets("SR")[1]
    res = nf_step(nat, st1, rev)
    assert res.output[0].flow.dst == "10.0.0.1"
    assert res.output[0].flow.dport == 5000
    assert res.updated_indices == frozenset()
    assert res.next_state.canonical() == st1.canonical()


def test_nat_reverse_without_mapping_dropped(nat):
    rev = make_packets("R")[0]
    res = nf_step(nat, nat.initial_state(), rev)
    assert res.output == ()


def test_step_determinism(nat):
    syn = make_packets("S")[0]
    a = nf_step(nat, nat.initial_state(), syn)
    b = nf_step(nat, nat.initial_state(), syn)
    assert a == b


def test_nat_css_updates_only_on_csp_marker_steps(nat):
    state = nat.initial_state()
    for p in make_packets("SFRFFR"):
        res = nf_step(nat, state, p)
        if 1 in res.updated_indices:
            assert res.csp_marker in ("InCSP", "EndOfCSP")
        state = res.next_state


def test_dpi_never_declares_runs_and_has_no_css():
    dpi = ReorderResilientDpiNF()
    assert dpi.schema.css_indices == frozenset()
    state = dpi.initial_state()
    for p in make_packets("SFFRF"):
        res = nf_step(dpi, state, p)
        assert res.csp_marker == "NotInCSP"
        state = res.next_state
    assert state.get(2) == 4  # forward packets scanned


def test_apply_css_delta_to_empty_state():
    nat = NatNF()
    state = nat.initial_state()
    after = nf_apply(nat.schema, state, [StateDelta(1, ("1.2.3.4", 1), 0, "CSS")])
    assert after.get(1) == ("1.2.3.4", 1)
    assert after.version == state.version + 1


def test_apply_out_of_order_equals_in_order():
    nat = NatNF()
    d5 = StateDelta(2, 5, 5, "RCSS")
    d9 = StateDelta(2, 9, 9, "RCSS")
    q0 = nat.initial_state()
    in_order = nf_apply(nat.schema, nf_apply(nat.schema, q0, [d5]), [d9])
    reordered = nf_apply(nat.schema, nf_apply(nat.schema, q0, [d9]), [d5])
    assert in_order.canonical() == reordered.canonical() == (None, 9)


def test_apply_same_delta_twice_is_noop():
    counter = CounterNF()
    d = StateDelta(1, 3, 7, "NSS")
    once = nf_apply(counter.schema, counter.initial_state(), [d])
    twice = nf_apply(counter.schema, once, [d])
    assert twice.canonical() == once.canonical() == (3, 0)


def test_apply_conflicting_css_raises():
    nat = NatNF()
    local = nf_apply(nat.schema, nat.initial_state(),
                     [StateDelta(1, ("1.1.1.1", 1), 0, "CSS")])
    with pytest.raises(StateConflictError):
        nf_apply(nat.schema, local, [StateDelta(1, ("2.2.2.2", 2), 1, "CSS")])


def test_get_nf_unknown_kind():
    with pytest.raises(KeyError):
        get_nf("firewall")


def test_schema_json_roundtrip():
    s = NatNF.schema
    assert NFSchema.from_json(s.to_json()) == s
    assert s.css_indices == frozenset({1})


# -- commutativity / idempotence of eventually-synchronized merges --

_delta_strategy = st.lists(
    st.tuples(st.sampled_from([1, 2]), st.integers(0, 50), st.integers(0, 999)),
    min_size=0, max_size=8,
)


@settings(max_examples=200, deadline=None)
@given(_delta_strategy, st.randoms())
def test_counter_apply_commutes_under_permutation(raw, rnd):
    counter = CounterNF()
    deltas = [StateDelta(idx, val, ts * 10 + i, "NSS")
              for i, (idx, val, ts) in enumerate(raw)]
    shuffled = list(deltas)
    rnd.shuffle(shuffled)
    a = counter.initial_state()
    b = counter.initial_state()
    for d in deltas:
        a = nf_apply(counter.schema, a, [d])
    for d in shuffled:
        b = nf_apply(counter.schema, b, [d])
    assert a.canonical() == b.canonical()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 0xFFFF), min_size=0, max_size=10, unique=True),
       st.randoms())
def test_dpi_union_apply_commutes(tokens, rnd):
    dpi = ReorderResilientDpiNF()
    deltas = [StateDelta(1, frozenset({t}), i, "NSS") for i, t in enumerate(tokens)]
    shuffled = list(deltas)
    rnd.shuffle(shuffled)
    a = dpi.initial_state()
    b = dpi.initial_state()
    for d in deltas:
        a = nf_apply(dpi.schema, a, [d])
    for d in shuffled:
        b = nf_apply(dpi.schema, b, [d])
    assert a.canonical() == b.canonical()
    again = b
    for d in deltas:
        again = nf_apply(dpi.schema, again, [d])
    assert again.canonical() == b.canonical()  # redelivery is a no-op


def test_message_fidelity_replays_state():
    """Replaying every delta message from scratch reproduces the state."""
    nat = NatNF(private=("10.0.0.1", 5000))
    state = nat.initial_state()
    replica = nat.initial_state()
    for p in make_packets("SFFRFF"):
        res = nf_step(nat, state, p)
        state = res.next_state
        if res.message:
            replica = nf_apply(nat.schema, replica, res.message.deltas)
    assert replica.canonical() == state.canonical()


# -- partial equivalence --

def test_partial_equiv_identical_states(nat):
    q = nat.initial_state()
    assert partial_equiv(q, q, {1, 2})


def test_partial_equiv_ignores_out_of_set_indices():
    counter = CounterNF()
    qa = counter.initial_state()
    qb = nf_apply(counter.schema, qa, [StateDelta(1, 4, 0, "NSS")])
    assert partial_equiv(qa, qb, {2})
    assert not partial_equiv(qa, qb, {1})


def test_step_partial_equiv_nat_mapping_divergence(nat):
    data = make_packets("SF")[1]
    with_map = nf_step(nat, nat.initial_state(), make_packets("S")[0]).next_state
    assert not step_partial_equiv(nat, data, with_map, nat.initial_state(), {1})
    assert step_partial_equiv(nat, data, with_map, with_map, {1, 2})


def test_step_partial_equiv_counter_transparent():
    counter = CounterNF()
    qa = counter.initial_state()
    qb = nf_apply(counter.schema, qa, [StateDelta(1, 9, 0, "NSS")])
    data = make_packets("F")[0]
    assert step_partial_equiv(counter, data, qa, qb, set())
