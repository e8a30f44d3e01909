"""Mock cloud layer: idempotent ingest of fog summaries, history queries,
and the raw-upload path used as the cloud-direct baseline.
"""
from __future__ import annotations

import base64
import binascii
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import BadMac, MalformedItem, MalformedRequest, Nack, RouteNotFound, SoaFogError, UnknownNode
from .security import Envelope, verify_envelope
from .service import Request, Response, dumps, error_response, json_response

log = logging.getLogger(__name__)

ITEM_KINDS = ("summary", "audit_batch")
WIRE_FIELDS = ("item_id", "node_id", "kind", "payload_b64", "key_id", "mac")


@dataclass(frozen=True)
class StoredItem:
    item_id: str
    node_id: str
    kind: str
    received_at: float
    payload: bytes
    wire_bytes: int

    def to_record(self) -> dict:
        return {"type": "item", "item_id": self.item_id, "node_id": self.node_id, "kind": self.kind,
                "received_at": self.received_at, "wire_bytes": self.wire_bytes,
                "payload_b64": base64.b64encode(self.payload).decode("ascii")}


class CloudStore:
    """Registered fog nodes, ingested items and raw blobs.

    With a ``path`` every accepted write is appended to a JSON-lines file and
    replayed on construction.
    """

    def __init__(self, path: Optional[str] = None, nodes: Optional[dict] = None,
                 clock: Callable[[], float] = time.time, fsync: bool = True):
        self.path = path
        self.clock = clock
        self.fsync = fsync
        self.registered_nodes: dict[str, bytes] = dict(nodes or {})
        self.summaries: dict[str, StoredItem] = {}
        self.raw_blobs: dict[str, bytes] = {}
        self.audit: list[dict] = []
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            self._replay()

    def register_node(self, node_id: str, key: bytes) -> None:
        with self._lock:
            self.registered_nodes[node_id] = bytes(key)

    def _replay(self):
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    # torn final line from a crash mid-append
                    continue
                if rec.get("type") == "item":
                    self.summaries.setdefault(rec["item_id"], StoredItem(
                        rec["item_id"], rec["node_id"], rec["kind"], rec["received_at"],
                        base64.b64decode(rec["payload_b64"]), rec["wire_bytes"]))
                elif rec.get("type") == "raw":
                    self.raw_blobs.setdefault(rec["blob_id"], base64.b64decode(rec["data_b64"]))

    def _append(self, rec: dict):
        if not self.path:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def bytes_stored(self) -> int:
        return sum(s.wire_bytes for s in self.summaries.values()) + sum(map(len, self.raw_blobs.values()))


def _decode_item(body) -> tuple:
    if isinstance(body, (bytes, bytearray)):
        raw = bytes(body)
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise MalformedItem("body is not JSON") from None
    else:
        doc = body
        raw = dumps(doc)
    if not isinstance(doc, dict):
        raise MalformedItem("item must be a JSON object")
    missing = [f for f in WIRE_FIELDS if not isinstance(doc.get(f), str)]
    if missing:
        raise MalformedItem(f"missing or non-string fields: {', '.join(missing)}")
    if doc["kind"] not in ITEM_KINDS:
        raise MalformedItem(f"unknown kind {doc['kind']!r}")
    try:
        payload = base64.b64decode(doc["payload_b64"], validate=True)
    except (binascii.Error, ValueError):
        raise MalformedItem("payload_b64 is not valid base64") from None
    return doc, payload, len(raw)


def ingest(store: CloudStore, request) -> dict:
    """Accept one sync item. Returns ``{"item_id", "duplicate"}``.

    The MAC is checked under the sender's registered key before the
    duplicate check, so a forged resend of a known id is still rejected.
    """
    doc, payload, wire_bytes = _decode_item(request)
    key = store.registered_nodes.get(doc["node_id"])
    if key is None:
        raise UnknownNode(f"node {doc['node_id']!r} is not registered")
    if not verify_envelope(Envelope(payload, doc["key_id"], doc["mac"]), key):
        with store._lock:
            store.audit.append({"timestamp": store.clock(), "event": "bad_mac",
                                "node_id": doc["node_id"], "item_id": doc["item_id"]})
        raise BadMac(f"MAC check failed for item {doc['item_id']}")
    with store._lock:
        if doc["item_id"] in store.summaries:
            return {"item_id": doc["item_id"], "duplicate": True}
        item = StoredItem(doc["item_id"], doc["node_id"], doc["kind"], store.clock(), payload, wire_bytes)
        store._append(item.to_record())
        store.summaries[item.item_id] = item
    return {"item_id": doc["item_id"], "duplicate": False}


def store_raw(store: CloudStore, blob_id: str, data: bytes) -> dict:
    if not blob_id:
        raise MalformedRequest("X-Blob-Id header is required")
    with store._lock:
        if blob_id in store.raw_blobs:
            return {"blob_id": blob_id, "bytes": len(data), "duplicate": True}
        store._append({"type": "raw", "blob_id": blob_id,
                       "data_b64": base64.b64encode(data).decode("ascii")})
        store.raw_blobs[blob_id] = bytes(data)
    return {"blob_id": blob_id, "bytes": len(data), "duplicate": False}


def _summary_view(item: StoredItem) -> dict:
    try:
        payload = json.loads(item.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        payload = None
    return {"item_id": item.item_id, "node_id": item.node_id, "kind": item.kind,
            "received_at": item.received_at, "payload": payload}


def _years_overlap(payload, year_from, year_to) -> bool:
    years = payload.get("years") if isinstance(payload, dict) else None
    if not years:
        return False
    lo, hi = years
    if year_from is not None and hi < year_from:
        return False
    if year_to is not None and lo > year_to:
        return False
    return True


def query_history(store: CloudStore, key: Optional[str] = None, year_from: Optional[int] = None,
                  year_to: Optional[int] = None) -> list:
    """Stored summaries matching ``key`` (dataset key or layer id) and year range,
    ordered by receive time then item id."""
    out = []
    for item in list(store.summaries.values()):
        if item.kind != "summary":
            continue
        view = _summary_view(item)
        p = view["payload"]
        if key is not None and not (isinstance(p, dict) and key in (p.get("key"), p.get("layer_id"))):
            continue
        if (year_from is not None or year_to is not None) and not _years_overlap(p, year_from, year_to):
            continue
        out.append(view)
    out.sort(key=lambda v: (v["received_at"], v["item_id"]))
    return out


def _int_param(query, name):
    v = query.get(name)
    if v in (None, ""):
        return None
    try:
        return int(v)
    except ValueError:
        raise MalformedRequest(f"{name} must be an integer") from None


def handle_cloud_request(store: CloudStore, req: Request) -> Response:
    try:
        if req.path == "/ingest" and req.method == "POST":
            return json_response(200, ingest(store, req.body))
        if req.path == "/raw" and req.method == "POST":
            return json_response(200, store_raw(store, req.headers.get("x-blob-id", ""), req.body))
        if req.path == "/history" and req.method == "GET":
            rows = query_history(store, req.query.get("key") or None,
                                 _int_param(req.query, "from"), _int_param(req.query, "to"))
            return json_response(200, {"summaries": rows})
        if req.path == "/health" and req.method == "GET":
            return json_response(200, {"status": "ok", "items": len(store.summaries),
                                       "raw_blobs": len(store.raw_blobs)})
        raise RouteNotFound(f"no route for {req.method} {req.path}")
    except SoaFogError as exc:
        return error_response(exc)
    except Exception:
        log.exception("cloud handler failed")
        return json_response(500, {"reason": "internal"})


class LocalCloudClient:
    """In-process cloud client with the same failure surface as the HTTP one."""

    def __init__(self, store: CloudStore):
        self.store = store

    def ingest(self, body: bytes) -> bytes:
        resp = handle_cloud_request(self.store, Request("POST", "/ingest", body=body))
        if resp.status != 200:
            raise Nack(resp.status, resp.json().get("reason", "error"))
        return resp.body


def load_cloud_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    nodes = {nid: bytes.fromhex(k) for nid, k in cfg.get("nodes", {}).items()}
    return {"listen": cfg.get("listen", "127.0.0.1:9090"), "store_path": cfg.get("store_path"),
            "nodes": nodes}
