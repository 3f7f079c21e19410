import hashlib
import hmac

import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxtrace.dataset import ProximityLabel
from proxtrace.tracing import (
    BroadcastServer,
    CentralServer,
    ClockRegression,
    ConsentDeclined,
    Deployment,
    DiagnosisPayload,
    EncounterRecord,
    LocalStore,
    Mode,
    SlotOutOfRange,
    UnknownDevice,
    broadcast,
    build_diagnosis_payload,
    client_match,
    daily_seed,
    decode_payload,
    encode_payload,
    purge_expired,
    record_encounter,
    risk_score,
    rotate_id,
    seal_log,
    server_match_centralized,
    unseal_log,
)
from proxtrace.tracing.ids import derive_token
from proxtrace.tracing.matching import brute_force_matches
from proxtrace.tracing.payload import PayloadError, SealError

CLOSE, FAR = ProximityLabel.CLOSE, ProximityLabel.FAR
DAY = 86400
SEED = bytes(range(32))


# --------------------------------------------------------------------------
# identifiers
# --------------------------------------------------------------------------


def test_rotate_id_deterministic():
    assert rotate_id(SEED, 0) == rotate_id(SEED, 0)


def test_rotate_id_matches_keyed_hash():
    expected = hmac.new(SEED, b"ephid" + (1).to_bytes(4, "big"), hashlib.sha256).digest()[:16]
    assert rotate_id(SEED, 1).token == expected
    assert rotate_id(SEED, 0).token != rotate_id(SEED, 1).token


def test_rotate_id_window():
    e = rotate_id(SEED, 3, 900, day=2)
    assert len(e.token) == 16
    assert (e.valid_from, e.valid_to) == (2 * DAY + 2700, 2 * DAY + 3600)


@pytest.mark.parametrize("slot", [-1, 96])
def test_slot_out_of_range(slot):
    with pytest.raises(SlotOutOfRange):
        rotate_id(SEED, slot, 900)


def test_daily_seeds_differ_by_day():
    assert daily_seed(b"k", 0) != daily_seed(b"k", 1)
    assert daily_seed(b"k", -1) == daily_seed(b"k", -1)


def test_no_token_collisions_in_a_million():
    seen = set()
    for day in range(10417):  # 10417 * 96 > 10**6
        seed = daily_seed(b"collision-test", day)
        seen.update(derive_token(seed, s) for s in range(96))
    assert len(seen) == 10417 * 96


# --------------------------------------------------------------------------
# local store
# --------------------------------------------------------------------------

TOKEN = b"T" * 16


def store(**kw):
    kw.setdefault("scan_interval_s", 5.0)
    return LocalStore(**kw)


def test_first_sighting_has_zero_duration():
    s = record_encounter(store(), TOKEN, -60, 100.0, CLOSE)
    assert len(s.records) == 1 and s.records[0].close_duration_s == 0.0


def test_close_sighting_accrues_scan_interval():
    s = store()
    record_encounter(s, TOKEN, -60, 100.0, CLOSE)
    record_encounter(s, TOKEN, -62, 105.0, CLOSE)
    (r,) = s.records
    assert r.close_duration_s == 5.0 and (r.first_seen, r.last_seen) == (100.0, 105.0)
    assert r.rss_stats.rss_mean_dbm == -61.0


def test_far_sighting_extends_without_accruing():
    s = store()
    for t, v in ((0, CLOSE), (5, FAR), (10, CLOSE)):
        record_encounter(s, TOKEN, -60, float(t), v)
    assert s.records[0].close_duration_s == 5.0 and s.records[0].last_seen == 10.0


def test_gap_opens_new_record():
    s = store(merge_gap_s=300)
    record_encounter(s, TOKEN, -60, 0.0, CLOSE)
    record_encounter(s, TOKEN, -60, 600.0, CLOSE)
    assert len(s.records) == 2


def test_clock_regression():
    s = store()
    record_encounter(s, TOKEN, -60, 10.0, CLOSE)
    with pytest.raises(ClockRegression):
        record_encounter(s, b"U" * 16, -60, 9.0, CLOSE)


def test_own_tokens_are_not_stored():
    s = store()
    seed = daily_seed(b"me", 0)
    s.add_own_seed(0, seed)
    assert record_encounter(s, derive_token(seed, 4), -50, 0.0, CLOSE).records == []


@pytest.mark.parametrize("retention", [14, 21])
def test_retention_bounds_accepted(retention):
    assert LocalStore(retention_days=retention).retention_days == retention


@pytest.mark.parametrize("retention", [13, 22])
def test_retention_bounds_rejected(retention):
    with pytest.raises(ValueError):
        LocalStore(retention_days=retention)


@pytest.mark.parametrize("age_days, retention, survives", [(15, 14, False), (1, 14, True), (20, 21, True)])
def test_purge_examples(age_days, retention, survives):
    s = store(retention_days=retention)
    record_encounter(s, TOKEN, -60, 0.0, CLOSE)
    s, purged = purge_expired(s, age_days * DAY)
    assert (len(s.records) == 1) is survives and purged == (0 if survives else 1)


def test_purge_drops_old_seeds():
    s = store(retention_days=14)
    for d in range(20):
        s.add_own_seed(d, daily_seed(b"me", d))
    s.purge(19 * DAY + 10)
    assert sorted(s.own_seeds) == list(range(6, 20))
    assert not s.is_own(derive_token(daily_seed(b"me", 5), 0))


@given(st.lists(st.tuples(st.floats(0, 30), st.booleans()), max_size=30), st.floats(1, 20))
def test_record_duration_bounded_by_span(steps, scan):
    s = store(scan_interval_s=scan)
    t = 0.0
    for dt, close in steps:
        t += dt
        record_encounter(s, TOKEN, -60, t, CLOSE if close else FAR)
    for r in s.records:
        assert r.first_seen <= r.last_seen
        assert 0 <= r.close_duration_s <= r.last_seen - r.first_seen


# --------------------------------------------------------------------------
# payloads
# --------------------------------------------------------------------------


def fourteen_day_store():
    s = store()
    for d in range(14):
        s.add_own_seed(d, daily_seed(b"me", d))
    for k in range(3):
        record_encounter(s, bytes([k]) * 16, -60 - k, 1000.0 * k, CLOSE)
    return s


def test_consent_declined():
    with pytest.raises(ConsentDeclined):
        build_diagnosis_payload(fourteen_day_store(), Mode.DECENTRALIZED, consent=False)


def test_decentralized_payload_is_seeds_only():
    p = build_diagnosis_payload(fourteen_day_store(), Mode.DECENTRALIZED, True, now=13 * DAY)
    assert len(p.seeds) == 14 and p.sealed_log == b""
    later = build_diagnosis_payload(fourteen_day_store(), Mode.DECENTRALIZED, True, now=16 * DAY)
    assert len(later.seeds) < 14


def test_centralized_payload_holds_three_records():
    s = fourteen_day_store()
    p = build_diagnosis_payload(s, Mode.CENTRALIZED, True)
    assert p.seeds == () and unseal_log(p.sealed_log) == s.records


def test_payload_exclusive_fields():
    with pytest.raises(PayloadError):
        DiagnosisPayload(Mode.DECENTRALIZED, seeds=((0, SEED),), sealed_log=b"x")


@pytest.mark.parametrize("mode", list(Mode))
def test_wire_roundtrip(mode):
    p = build_diagnosis_payload(fourteen_day_store(), mode, True, now=13 * DAY)
    frame = encode_payload(p)
    assert decode_payload(frame) == p
    assert frame[4] == (1 if mode is Mode.CENTRALIZED else 2)
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4


def test_decentralized_frame_layout():
    frame = encode_payload(DiagnosisPayload(Mode.DECENTRALIZED, seeds=((-1, SEED), (3, SEED))))
    assert frame[5:9] == (2).to_bytes(4, "big")
    assert frame[9:13] == b"\xff\xff\xff\xff" and frame[13:45] == SEED
    assert len(frame) == 4 + 1 + 4 + 2 * 36


def test_tampering_is_detected():
    blob = bytearray(seal_log(fourteen_day_store().records))
    blob[10] ^= 1
    with pytest.raises(SealError):
        unseal_log(bytes(blob))
    with pytest.raises(SealError):
        unseal_log(seal_log([]), key=b"other")


def test_truncated_frame_rejected():
    frame = encode_payload(DiagnosisPayload(Mode.DECENTRALIZED, seeds=((0, SEED),)))
    with pytest.raises(PayloadError):
        decode_payload(frame[:-1])


# --------------------------------------------------------------------------
# matching and servers
# --------------------------------------------------------------------------


@pytest.mark.parametrize("total, triggered", [(1200, True), (600, False), (0, False)])
def test_risk_score(total, triggered):
    recs = [EncounterRecord(TOKEN, 0, total, total)] if total else []
    alert = risk_score(recs, 3, 900)
    assert (alert.day, alert.cumulative_close_s, alert.triggered) == (3, float(total), triggered)


def close_run(s, token, start, seconds, step=5.0):
    t = start
    while t <= start + seconds:
        record_encounter(s, token, -55, t, CLOSE)
        t += step


def test_client_match_sums_two_records_same_day():
    seed = daily_seed(b"d", 0)
    token = derive_token(seed, 10)
    s = store()
    close_run(s, token, 9000.0, 480)
    close_run(s, token, 9000.0 + 480 + 400, 540)
    assert len(s.records) == 2
    (alert,) = client_match(s, DiagnosisPayload(Mode.DECENTRALIZED, seeds=((0, seed),)), 900)
    assert alert.cumulative_close_s == 1020 and alert.triggered and alert.day == 0


def test_client_match_disjoint_and_positive():
    seed = daily_seed(b"d", 0)
    s = store()
    close_run(s, derive_token(seed, 0), 0.0, 1200)
    payload = DiagnosisPayload(Mode.DECENTRALIZED, seeds=((0, seed),))
    assert client_match(s, payload)[0].triggered
    assert client_match(s, DiagnosisPayload(Mode.DECENTRALIZED, seeds=((0, daily_seed(b"x", 0)),))) == []


def _central_world():
    secrets = {d: d.encode() * 8 for d in "DEFG"}
    stores = {d: store() for d in secrets}
    d_tok = lambda slot: derive_token(daily_seed(secrets["D"], 0), slot)
    close_run(stores["E"], d_tok(0), 0.0, 1200)  # 20 min
    close_run(stores["F"], d_tok(2), 1800.0, 300)  # 5 min
    close_run(stores["F"], derive_token(daily_seed(secrets["G"], 0), 3), 2700.0, 1200)
    close_run(stores["G"], d_tok(5), 4500.0, 60)
    db = {d: seal_log(s.records) for d, s in stores.items()}
    diag = build_diagnosis_payload(stores["D"], Mode.CENTRALIZED, True)
    return secrets, stores, db, diag


def test_server_match_examples():
    secrets, stores, db, diag = _central_world()
    out = server_match_centralized(db, secrets, "D", diag, now=3600.0)
    assert set(out) == {"E", "F", "G"}
    assert out["E"][0].triggered and out["E"][0].cumulative_close_s == 1200
    assert not out["F"][0].triggered

    tokens = [(0, derive_token(daily_seed(secrets["D"], 0), s)) for s in range(96)]
    oracle = brute_force_matches({d: s.records for d, s in stores.items() if d != "D"}, tokens)
    assert {(d, a.day): a.cumulative_close_s for d, alerts in out.items() for a in alerts} == oracle


def test_server_match_nobody_saw_diagnosed():
    secrets, stores, db, _ = _central_world()
    diag = build_diagnosis_payload(stores["E"], Mode.CENTRALIZED, True)
    assert server_match_centralized(db, secrets, "E", diag, now=3600.0) == {}


def test_server_match_unknown_device():
    secrets, _, db, diag = _central_world()
    with pytest.raises(UnknownDevice):
        server_match_centralized(db, secrets, "Z", diag, now=0.0)


def test_central_server_notifies_only_triggered():
    secrets, stores, _, diag = _central_world()
    server = CentralServer()
    for d, key in secrets.items():
        server.register(d, key)
        server.upload(d, seal_log(stores[d].records))
    server.report_diagnosis("D", encode_payload(diag), 3600.0)
    assert set(server.outbox) == {"E"}


def test_broadcast_to_five():
    server = BroadcastServer()
    for i in range(5):
        server.register(f"dev{i}")
    payload = DiagnosisPayload(Mode.DECENTRALIZED, seeds=((0, SEED),))
    out = broadcast(server, payload)
    assert len(out) == 5 and all(p == payload for p in out.values())


def test_broadcast_to_nobody_then_replay():
    server = BroadcastServer(retention_days=14)
    payload = DiagnosisPayload(Mode.DECENTRALIZED, seeds=((0, SEED),))
    assert broadcast(server, payload, now=0.0) == {}
    assert server.register("late", now=5 * DAY) == [payload]
    assert server.register("too-late", now=15 * DAY) == []


def test_broadcast_rejects_centralized():
    with pytest.raises(PayloadError):
        broadcast(BroadcastServer(), DiagnosisPayload(Mode.CENTRALIZED, sealed_log=seal_log([])))


# --------------------------------------------------------------------------
# deployments
# --------------------------------------------------------------------------


@pytest.mark.parametrize("mode", list(Mode))
def test_deployment_end_to_end(mode):
    dep = Deployment(mode, ["a", "b", "c"])
    for t in range(0, 1800, 1):
        dep.observe("b", "a", float(t), -55, CLOSE)
        dep.observe("a", "b", float(t), -55, CLOSE)
        if t < 120:
            dep.observe("c", "a", float(t), -55, CLOSE)
    notes = dep.diagnose("a", 1800.0)
    triggered = {(n.device, n.alert.day) for n in notes if n.alert.triggered}
    assert triggered == {("b", 0)}
    assert {n.device for n in notes} == {"b", "c"}


def test_deployment_declined_consent():
    dep = Deployment(Mode.DECENTRALIZED, ["a", "b"])
    dep.observe("b", "a", 0.0, -55, CLOSE)
    assert dep.diagnose("a", 10.0, consent=False) == []
    assert dep.declined == [("a", 10.0)] and dep.server.payloads == []
