import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cingal.bundle import SIGNATURE_SCHEME, Datum, canonical_encode, Guid, compute_guid, entity_id, generate_keypair, script_bundle, sign_bundle
from cingal.errors import (
    BadSignature,
    CorruptState,
    InvalidInstances,
    PermissionDenied,
    UnknownEntity,
    UnknownKey,
    UnknownService,
    Unsigned,
)
from cingal.node_state import ALL_RIGHTS, NodeState, Right, parse_rights, render_rights
from oracles import SetBinderModel

OWNER_KEY, OWNER_CERT = generate_keypair()
OWNER = entity_id(OWNER_CERT)


def fresh(data_dir=None) -> NodeState:
    return NodeState.with_owner(OWNER_CERT, data_dir)


def payload(text: str):
    return script_bundle("halt", data=[Datum("v", text)])


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=30).filter(lambda s: all(ord(c) >= 0x20 and c != "\x7f" or c in "\t\n" for c in s)))
def test_store_get_after_put_is_identity(text):
    state = fresh()
    b = payload(text)
    key = state.store_put(OWNER, b)
    assert state.store_get(OWNER, key) == b
    assert key == b.guid
    assert state.store_put(OWNER, payload(text)) == key
    assert len(state.store_keys()) == 1


@settings(max_examples=1000, deadline=None)
@given(st.binary(min_size=16, max_size=16))
def test_store_unknown_key_fails(digest):
    state = fresh()
    state.store_put(OWNER, payload("present"))
    key = Guid(digest)
    if key == payload("present").guid:
        return
    with pytest.raises(UnknownKey):
        state.store_get(OWNER, key)


def test_store_remove():
    state = fresh()
    key = state.store_put(OWNER, payload("x"))
    state.store_remove(OWNER, key)
    with pytest.raises(UnknownKey):
        state.store_get(OWNER, key)
    with pytest.raises(UnknownKey):
        state.store_remove(OWNER, key)


GUIDS = [compute_guid(bytes([i])) for i in range(4)]
binder_ops = st.lists(
    st.tuples(st.sampled_from(["put", "get", "remove"]), st.sampled_from(["a", "b", "c"]), st.sampled_from(GUIDS)),
    max_size=30,
)


@settings(max_examples=1000, deadline=None)
@given(binder_ops)
def test_sbinder_matches_set_model(ops):
    state, model = fresh(), SetBinderModel()
    for op, name, guid in ops:
        if op == "put":
            state.sbinder_put(OWNER, name, guid)
            model.put(name, guid)
        elif op == "remove":
            state.sbinder_remove(OWNER, name, guid)
            model.remove(name, guid)
        assert state.sbinder_get(OWNER, name) == model.get(name)
    for name in "abc":
        assert state.sbinder_get(OWNER, name) == model.get(name)


def test_sbinder_unbound_name_is_empty():
    assert fresh().sbinder_get(OWNER, "nothing") == frozenset()


def test_sbinder_many_to_many_and_clue():
    state = fresh()
    state.sbinder_put(OWNER, "app", GUIDS[0], "v1")
    state.sbinder_put(OWNER, "app", GUIDS[1])
    state.sbinder_put(OWNER, "other", GUIDS[0])
    assert state.sbinder_get(OWNER, "app") == {GUIDS[0], GUIDS[1]}
    assert state.sbinder_get(OWNER, "other") == {GUIDS[0]}
    clues = {b.guid: b.clue for b in state.sbinder_items() if b.name == "app"}
    assert clues == {GUIDS[0]: "v1", GUIDS[1]: None}


def test_rights_parse_and_render():
    assert parse_rights("ALL") == ALL_RIGHTS
    assert parse_rights("store_get, SBIND_PUT") == {Right.STORE_GET, Right.SBIND_PUT}
    assert parse_rights("") == frozenset()
    assert render_rights({Right.STORE_PUT, Right.FIRE_LOCAL}) == "FIRE_LOCAL STORE_PUT"
    with pytest.raises(ValueError):
        parse_rights("FLY")


def _stripped_state():
    state = fresh()
    key, cert = generate_keypair()
    entity = state.ver_put(OWNER, cert, SIGNATURE_SCHEME, "weak", frozenset())
    return state, entity


def _snapshot(state):
    return (state.store_keys(), state.sbinder_items(), state.pbinder_items(), state.ver_entries())


def test_denied_calls_change_nothing():
    state, weak = _stripped_state()
    key = state.store_put(OWNER, payload("kept"))
    before = _snapshot(state)
    calls = [
        lambda: state.store_put(weak, payload("new")),
        lambda: state.store_get(weak, key),
        lambda: state.store_remove(weak, key),
        lambda: state.sbinder_put(weak, "n", key),
        lambda: state.sbinder_get(weak, "n"),
        lambda: state.sbinder_remove(weak, "n", key),
        lambda: state.pbinder_put(weak, "svc", key, 1),
        lambda: state.pbinder_remove(weak, "svc"),
        lambda: state.ver_put(weak, generate_keypair()[1], SIGNATURE_SCHEME, "x", ALL_RIGHTS),
        lambda: state.ver_remove(weak, OWNER),
    ]
    for call in calls:
        with pytest.raises(PermissionDenied):
            call()
    assert _snapshot(state) == before


def test_unknown_caller():
    with pytest.raises(UnknownEntity):
        fresh().store_put("0" * 32, payload("x"))


def test_single_right_grants_only_that_operation():
    state = fresh()
    _, cert = generate_keypair()
    e = state.ver_put(OWNER, cert, SIGNATURE_SCHEME, "putter", {Right.STORE_PUT})
    key = state.store_put(e, payload("x"))
    with pytest.raises(PermissionDenied):
        state.store_get(e, key)


def test_ver_verify_paths():
    state = fresh()
    b = script_bundle("halt")
    with pytest.raises(Unsigned):
        state.ver_verify(b)
    stranger, _ = generate_keypair()
    with pytest.raises(UnknownEntity):
        state.ver_verify(sign_bundle(stranger, b))
    assert state.ver_verify(sign_bundle(OWNER_KEY, b)) == OWNER
    forged = sign_bundle(stranger, b, entity=OWNER)
    with pytest.raises(BadSignature):
        state.ver_verify(forged)


def test_ver_remove():
    state = fresh()
    _, cert = generate_keypair()
    e = state.ver_put(OWNER, cert, SIGNATURE_SCHEME, "tmp", ALL_RIGHTS)
    state.ver_remove(OWNER, e)
    assert state.ver_entry(e) is None
    with pytest.raises(UnknownEntity):
        state.ver_remove(OWNER, e)


def test_pbinder_reserve_spawns_then_attaches_round_robin():
    state = fresh()
    state.pbinder_put(OWNER, "svc", GUIDS[0], 2)
    first = state.pbinder_reserve("svc")
    second = state.pbinder_reserve("svc")
    assert first.spawn and second.spawn and first.owner == OWNER
    state.pbinder_commit(first, "m1")
    state.pbinder_commit(second, "m2")
    attached = [state.pbinder_reserve("svc").machine_id for _ in range(4)]
    assert attached == ["m1", "m2", "m1", "m2"]
    state.pbinder_machine_gone("m1")
    assert state.pbinder_reserve("svc").spawn


def test_pbinder_release_frees_slot():
    state = fresh()
    state.pbinder_put(OWNER, "svc", GUIDS[0], 1)
    r = state.pbinder_reserve("svc")
    state.pbinder_release(r)
    assert state.pbinder_reserve("svc").spawn


def test_pbinder_waits_for_pending_spawn():
    state = fresh()
    state.pbinder_put(OWNER, "svc", GUIDS[0], 1)
    state.pbinder_reserve("svc")
    with pytest.raises(TimeoutError):
        state.pbinder_reserve("svc", timeout=0.05)


def test_pbinder_errors():
    state = fresh()
    assert state.pbinder_reserve("missing") is None
    with pytest.raises(InvalidInstances):
        state.pbinder_put(OWNER, "svc", GUIDS[0], 0)
    with pytest.raises(UnknownService):
        state.pbinder_remove(OWNER, "svc")


def test_persistence_round_trip(tmp_path):
    state = fresh(tmp_path)
    key = state.store_put(OWNER, payload("persisted"))
    state.sbinder_put(OWNER, "name", key, "clue")
    state.pbinder_put(OWNER, "svc", key, 3)
    _, cert = generate_keypair()
    other = state.ver_put(OWNER, cert, SIGNATURE_SCHEME, "other", {Right.STORE_GET})
    state.close()

    again = NodeState(tmp_path)
    assert again.store_get(OWNER, key) == payload("persisted")
    assert again.sbinder_items()[0].clue == "clue"
    svc = again.pbinder_lookup("svc")
    assert (svc.guid, svc.instances, svc.owner, svc.live) == (key, 3, OWNER, [])
    assert again.ver_entry(other).rights == {Right.STORE_GET}
    again.close()


def test_data_dir_is_exclusive(tmp_path):
    state = fresh(tmp_path)
    with pytest.raises(CorruptState):
        NodeState(tmp_path)
    state.close()
    NodeState(tmp_path).close()


def test_tampered_store_file_detected(tmp_path):
    state = fresh(tmp_path)
    key = state.store_put(OWNER, payload("x"))
    state.close()
    (tmp_path / "store" / f"{key.hex}.xml").write_bytes(canonical_encode(payload("y")))
    with pytest.raises(CorruptState):
        NodeState(tmp_path)


def test_random_ops_persist_identically(tmp_path):
    rng = random.Random(7)
    state = fresh(tmp_path)
    for _ in range(200):
        name, guid = rng.choice("abc"), rng.choice(GUIDS)
        if rng.random() < 0.6:
            state.sbinder_put(OWNER, name, guid)
        else:
            state.sbinder_remove(OWNER, name, guid)
    before = state.sbinder_items()
    state.close()
    again = NodeState(tmp_path)
    assert again.sbinder_items() == before
    again.close()
