import base64
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soafog.cloudtier import CloudStore, handle_cloud_request, ingest, load_cloud_config, query_history, store_raw
from soafog.errors import BadMac, MalformedItem, UnknownNode
from soafog.fogtier import SyncQueue, enqueue_sync
from soafog.service import Request, dumps

KEY = bytes(range(32))
OTHER = bytes(32)


def item(payload: bytes, item_id="i1", node_id="fog-1", key=KEY, kind="summary"):
    q = SyncQueue(None, node_id=node_id, budget_bytes=10**6, id_factory=lambda: item_id)
    return enqueue_sync(q, kind, payload, key, "k1")


def summary(years, key="malaria", layer_id="malaria_x"):
    return dumps({"key": key, "layer_id": layer_id, "years": years, "rows": []})


def test_accepts_valid_item():
    store = CloudStore(nodes={"fog-1": KEY}, clock=lambda: 5.0)
    it = item(b"hello")
    assert ingest(store, it.wire_bytes()) == {"item_id": "i1", "duplicate": False}
    stored = store.summaries["i1"]
    assert stored.payload == b"hello" and stored.received_at == 5.0
    assert store.bytes_stored() == len(it.wire_bytes())


def test_duplicate_is_acknowledged_not_stored_twice():
    store = CloudStore(nodes={"fog-1": KEY})
    body = item(b"x").wire_bytes()
    ingest(store, body)
    assert ingest(store, body) == {"item_id": "i1", "duplicate": True}
    assert len(store.summaries) == 1


def test_unknown_node_rejected():
    store = CloudStore(nodes={"fog-1": KEY})
    with pytest.raises(UnknownNode):
        ingest(store, item(b"x", node_id="rogue").wire_bytes())


def test_bad_mac_rejected_and_audited():
    store = CloudStore(nodes={"fog-1": KEY})
    with pytest.raises(BadMac):
        ingest(store, item(b"x", key=OTHER).wire_bytes())
    assert store.audit[-1]["event"] == "bad_mac" and not store.summaries


def test_forged_resend_of_known_id_is_rejected():
    store = CloudStore(nodes={"fog-1": KEY})
    ingest(store, item(b"real").wire_bytes())
    with pytest.raises(BadMac):
        ingest(store, item(b"fake", key=OTHER).wire_bytes())
    assert store.summaries["i1"].payload == b"real"


@pytest.mark.parametrize("body", [
    b"not json", b"[]", b'{"item_id": "x"}',
    dumps({"item_id": "a", "node_id": "fog-1", "kind": "weird", "payload_b64": "", "key_id": "k", "mac": ""}),
    dumps({"item_id": "a", "node_id": "fog-1", "kind": "summary", "payload_b64": "!!", "key_id": "k",
           "mac": ""}),
])
def test_malformed_items(body):
    with pytest.raises(MalformedItem):
        ingest(CloudStore(nodes={"fog-1": KEY}), body)


@given(st.binary(min_size=1, max_size=200), st.integers(0, 5), st.data())
@settings(max_examples=150, deadline=None)
def test_tampering_anywhere_is_rejected(payload, field, data):
    store = CloudStore(nodes={"fog-1": KEY})
    wire = item(payload).wire()
    if field in (0, 1):
        raw = bytearray(payload)
        i = data.draw(st.integers(0, len(raw) - 1))
        raw[i] ^= data.draw(st.integers(1, 255))
        wire["payload_b64"] = base64.b64encode(bytes(raw)).decode()
    elif field in (2, 3):
        i = data.draw(st.integers(0, 63))
        c = wire["mac"][i]
        wire["mac"] = wire["mac"][:i] + ("0" if c != "0" else "1") + wire["mac"][i + 1:]
    elif field == 4:
        wire["mac"] = wire["mac"][:-2]
    else:
        wire["payload_b64"] = base64.b64encode(payload + b"x").decode()
    with pytest.raises(BadMac):
        ingest(store, dumps(wire))
    assert not store.summaries


@given(st.lists(st.tuples(st.integers(0, 9), st.booleans()), min_size=1, max_size=40))
@settings(max_examples=100, deadline=None)
def test_ingest_is_idempotent_under_any_resend_order(sends):
    store = CloudStore(nodes={"fog-1": KEY})
    bodies = {i: item(f"p{i}".encode(), item_id=f"id{i}").wire_bytes() for i in range(10)}
    fresh = 0
    for i, _ in sends:
        fresh += not ingest(store, bodies[i])["duplicate"]
    assert fresh == len({i for i, _ in sends}) == len(store.summaries)


def test_history_by_year_range():
    store = CloudStore(nodes={"fog-1": KEY})
    clock = iter(range(100))
    store.clock = lambda: float(next(clock))
    for y in (2011, 2012, 2013, 2014):
        ingest(store, item(summary([y, y], layer_id=f"malaria_{y}"), item_id=f"s{y}").wire_bytes())
    ingest(store, item(summary([2012, 2012], key="dengue"), item_id="d").wire_bytes())
    rows = query_history(store, "malaria", 2012, 2013)
    assert [r["payload"]["layer_id"] for r in rows] == ["malaria_2012", "malaria_2013"]
    assert len(query_history(store, "malaria_2014")) == 1
    assert len(query_history(store)) == 5
    assert query_history(store, "malaria", 2020, None) == []


def test_persistence_replay(tmp_path):
    path = str(tmp_path / "cloud.jsonl")
    store = CloudStore(path, {"fog-1": KEY}, fsync=False)
    ingest(store, item(b"a", item_id="a").wire_bytes())
    store_raw(store, "blob", b"rawdata")
    with open(path, "a") as fh:
        fh.write('{"type": "item", "item_')
    again = CloudStore(path, {"fog-1": KEY}, fsync=False)
    assert set(again.summaries) == {"a"} and again.raw_blobs == {"blob": b"rawdata"}
    assert ingest(again, item(b"a", item_id="a").wire_bytes())["duplicate"]


def test_http_routes():
    store = CloudStore(nodes={"fog-1": KEY})
    body = item(summary([2011, 2011])).wire_bytes()
    assert handle_cloud_request(store, Request("POST", "/ingest", body=body)).status == 200
    bad = handle_cloud_request(store, Request("POST", "/ingest", body=item(b"x", key=OTHER).wire_bytes()))
    assert bad.status == 401 and bad.json()["reason"] == "bad_mac"
    rogue = handle_cloud_request(store, Request("POST", "/ingest", body=item(b"x", node_id="r").wire_bytes()))
    assert rogue.status == 403
    raw = handle_cloud_request(store, Request.build("POST", "/raw", {"X-Blob-Id": "b1"}, b"123"))
    assert raw.json() == {"blob_id": "b1", "bytes": 3, "duplicate": False}
    assert handle_cloud_request(store, Request("POST", "/raw", body=b"1")).status == 400
    hist = handle_cloud_request(store, Request.build("GET", "/history?key=malaria&from=2011&to=2011"))
    assert len(hist.json()["summaries"]) == 1
    assert handle_cloud_request(store, Request.build("GET", "/history?from=x")).status == 400
    assert handle_cloud_request(store, Request("GET", "/nope")).status == 404
    assert handle_cloud_request(store, Request("GET", "/health")).json()["items"] == 1


def test_load_cloud_config(tmp_path):
    p = tmp_path / "cloud.json"
    p.write_text(json.dumps({"nodes": {"fog-1": KEY.hex()}, "store_path": "c.jsonl"}))
    cfg = load_cloud_config(p)
    assert cfg["nodes"] == {"fog-1": KEY} and cfg["listen"] == "127.0.0.1:9090"
