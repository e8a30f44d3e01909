"""Fog node: request pipeline, local layer cache, aggregation and the
store-and-forward queue toward the cloud.

Raw layers stay on the node. Only aggregated summaries, sealed with the
node's sync key, are queued for the cloud. Delivery is at-least-once on the
wire; the cloud deduplicates by item id.
"""
from __future__ import annotations

import base64
import json
import logging
import math
import os
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional
from urllib import error as urlerror
from urllib import request as urlrequest

from . import overlay
from .errors import (
    AccessDenied,
    BadCredentials,
    BudgetUnsatisfiable,
    ConfigError,
    KindMismatch,
    LinkDown,
    LockedOut,
    MalformedRequest,
    MissingAttr,
    Nack,
    ParamError,
    RouteNotFound,
    SoaFogError,
    StorageFull,
    UnknownLayer,
    UnknownProcess,
)
from .geodata import (
    Catalog,
    RasterGrid,
    VectorLayer,
    bbox_intersects,
    catalog_query,
    features_to_collection,
    geometry_bbox,
    layer_bbox,
    layer_size_bytes,
    parse_bbox,
    parse_raster_grid,
    parse_vector_layer,
    union_bbox,
)
from .security import (
    Envelope,
    Permission,
    PolicyStore,
    authenticate,
    authorize,
    manage_policy,
    seal_envelope,
)
from .service import Request, Response, dumps, error_response, json_response

log = logging.getLogger(__name__)


@dataclass
class FogConfig:
    node_id: str
    storage_budget_bytes: int
    key_id: str
    key: bytes
    listen: str = "127.0.0.1:8080"
    cloud_url: Optional[str] = None
    backoff_ms: tuple = (1000, 2000, 5000, 10000, 30000)
    pinned: tuple = ()
    catalog_dir: Optional[str] = None
    policy_path: Optional[str] = None
    queue_dir: Optional[str] = None
    audit_path: Optional[str] = None
    flush_interval_s: float = 5.0
    summary_key: str = "malaria"
    summary_group_by: tuple = ("district", "year")
    summary_measures: tuple = ("positives", "deaths")

    def __post_init__(self):
        if not self.storage_budget_bytes > 0:
            raise ConfigError("storage_budget_bytes must be > 0")
        self.backoff_ms = tuple(self.backoff_ms)
        if not self.backoff_ms:
            raise ConfigError("backoff schedule must be non-empty")
        if any(b > a for b, a in zip(self.backoff_ms, self.backoff_ms[1:])):
            raise ConfigError("backoff schedule must be non-decreasing")
        if len(self.key) != 32:
            raise ConfigError("sync key must be 32 bytes")
        self.pinned = tuple(self.pinned)
        self.summary_group_by = tuple(self.summary_group_by)
        self.summary_measures = tuple(self.summary_measures)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "FogConfig":
        d = dict(d)
        try:
            d["key"] = bytes.fromhex(d.pop("key_hex"))
        except (KeyError, ValueError):
            raise ConfigError("key_hex must be 64 hex characters") from None
        for k in ("catalog_dir", "policy_path", "queue_dir", "audit_path"):
            if d.get(k):
                d[k] = os.path.join(base_dir, d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "FogConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), os.path.dirname(os.path.abspath(path)))


# -- sync queue ------------------------------------------------------------------------

@dataclass
class SyncItem:
    item_id: str
    node_id: str
    created_at: float
    kind: str  # "summary" | "audit_batch"
    payload: Envelope
    attempts: int = 0

    def wire(self) -> dict:
        return {"item_id": self.item_id, "node_id": self.node_id, "kind": self.kind,
                "payload_b64": base64.b64encode(self.payload.payload).decode("ascii"),
                "key_id": self.payload.key_id, "mac": self.payload.mac}

    def wire_bytes(self) -> bytes:
        return dumps(self.wire())

    def to_record(self) -> dict:
        rec = self.wire()
        rec["created_at"] = self.created_at
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SyncItem":
        env = Envelope(base64.b64decode(rec["payload_b64"]), rec["key_id"], rec["mac"])
        return cls(rec["item_id"], rec["node_id"], rec["created_at"], rec["kind"], env)


class SyncQueue:
    """Durable FIFO of sync items.

    ``queue.jsonl`` holds enqueued items and ``journal.jsonl`` records acks
    and send attempts. Every append is fsynced before the call returns, and
    an ack is journaled before the item leaves memory. Opening the queue
    compacts both files. With ``path=None`` the queue is memory-only.
    """

    def __init__(self, path: Optional[str], *, node_id: str, budget_bytes: int,
                 clock: Callable[[], float] = time.time,
                 id_factory: Optional[Callable[[], str]] = None, fsync: bool = True):
        self.path = path
        self.node_id = node_id
        self.budget_bytes = budget_bytes
        self.clock = clock
        self.id_factory = id_factory or (lambda: str(uuid.uuid4()))
        self.fsync = fsync
        self.consecutive_failures = 0
        self.acked_count = 0
        self._items: "OrderedDict[str, SyncItem]" = OrderedDict()
        self._sizes: dict[str, int] = {}
        self._lock = threading.Lock()
        if path:
            os.makedirs(path, exist_ok=True)
            self._recover()

    @property
    def _queue_file(self):
        return os.path.join(self.path, "queue.jsonl")

    @property
    def _journal_file(self):
        return os.path.join(self.path, "journal.jsonl")

    def _recover(self):
        acked, attempts = set(), {}
        for rec in _read_jsonl(self._journal_file):
            if rec.get("op") == "ack":
                acked.add(rec["item_id"])
            elif rec.get("op") == "attempt":
                attempts[rec["item_id"]] = attempts.get(rec["item_id"], 0) + 1
        for rec in _read_jsonl(self._queue_file):
            if rec.get("item_id") in acked or rec.get("item_id") in self._items:
                continue
            item = SyncItem.from_record(rec)
            item.attempts = attempts.get(item.item_id, 0)
            self._items[item.item_id] = item
            self._sizes[item.item_id] = len(item.wire_bytes())
        # compaction: rewrite survivors, then drop the journal
        self._rewrite(self._queue_file, [it.to_record() for it in self._items.values()])
        attempts_left = [{"op": "attempt", "item_id": it.item_id}
                         for it in self._items.values() for _ in range(it.attempts)]
        self._rewrite(self._journal_file, attempts_left)

    def _rewrite(self, path, records):
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _append(self, path, rec):
        if not self.path:
            return
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def __len__(self):
        return len(self._items)

    def bytes_used(self) -> int:
        return sum(self._sizes.values())

    def pending(self) -> list:
        with self._lock:
            return list(self._items.values())

    def enqueue(self, kind: str, payload: bytes, key_id: str, key: bytes) -> SyncItem:
        if not payload:
            raise ValueError("payload must be non-empty")
        env = seal_envelope(payload, key_id, key)
        with self._lock:
            item = SyncItem(self.id_factory(), self.node_id, self.clock(), kind, env)
            size = len(item.wire_bytes())
            if self.bytes_used() + size > self.budget_bytes:
                raise StorageFull(f"queue would grow to {self.bytes_used() + size} bytes, "
                                  f"budget {self.budget_bytes}")
            if self.path:
                self._append(self._queue_file, item.to_record())
            self._items[item.item_id] = item
            self._sizes[item.item_id] = size
            return item

    def note_attempt(self, item_id: str) -> None:
        with self._lock:
            item = self._items.get(item_id)
            if item is None:
                return
            if self.path:
                self._append(self._journal_file, {"op": "attempt", "item_id": item_id})
            item.attempts += 1

    def ack(self, item_id: str) -> None:
        with self._lock:
            if item_id not in self._items:
                return
            if self.path:
                self._append(self._journal_file, {"op": "ack", "item_id": item_id})
            del self._items[item_id]
            del self._sizes[item_id]
            self.acked_count += 1


def _read_jsonl(path) -> list:
    if not os.path.exists(path):
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                # torn tail from a crash mid-append; nothing after it was acknowledged
                break
    return out


def enqueue_sync(queue: SyncQueue, kind: str, payload: bytes, key: bytes, key_id: str = "default") -> SyncItem:
    return queue.enqueue(kind, payload, key_id, key)


# -- flushing -----------------------------------------------------------------------------

class AlwaysUp:
    """Link model for real deployments: the transport itself reports failures."""

    def transmit(self, nbytes: int) -> bool:
        return True


class HttpCloudClient:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def ingest(self, body: bytes) -> bytes:
        req = urlrequest.Request(self.base_url + "/ingest", data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
        try:
            with urlrequest.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urlerror.HTTPError as exc:
            try:
                reason = json.loads(exc.read().decode()).get("reason", "error")
            except (ValueError, AttributeError):
                reason = "error"
            raise Nack(exc.code, reason) from None
        except (urlerror.URLError, OSError) as exc:
            raise LinkDown(str(exc)) from None


@dataclass
class FlushReport:
    sent: int = 0
    acked: int = 0
    failed: int = 0
    bytes: int = 0
    retry_after_ms: int = 0


def flush_sync(queue: SyncQueue, link, cloud_client, backoff_ms=(1000,)) -> FlushReport:
    """Send pending items in FIFO order until the queue is empty or a send fails.

    ``link.transmit(n)`` says whether n bytes got across; it is asked once
    for the request and once for the ack. A lost ack leaves the item queued
    even though the cloud applied it; the resend is deduplicated there.
    """
    report = FlushReport()
    for item in queue.pending():
        body = item.wire_bytes()
        queue.note_attempt(item.item_id)
        if not link.transmit(len(body)):
            report.failed += 1
            break
        report.sent += 1
        report.bytes += len(body)
        try:
            ack_body = cloud_client.ingest(body)
        except (LinkDown, Nack) as exc:
            log.info("sync of %s failed: %s", item.item_id, exc)
            report.failed += 1
            break
        if not link.transmit(len(ack_body)):
            report.failed += 1
            break
        queue.ack(item.item_id)
        report.acked += 1
    if report.failed:
        queue.consecutive_failures += 1
        report.retry_after_ms = backoff_ms[min(queue.consecutive_failures, len(backoff_ms)) - 1]
    else:
        queue.consecutive_failures = 0
    return report


# -- aggregation ------------------------------------------------------------------------------

def _sort_key(values):
    # numbers before strings so mixed-type group keys still order totally
    return tuple((0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v)) for v in values)


@dataclass(frozen=True)
class SummaryTable:
    group_by: tuple
    measures: tuple
    rows: tuple

    def to_dict(self) -> dict:
        return {"group_by": list(self.group_by), "measures": list(self.measures), "rows": list(self.rows)}

    def to_bytes(self) -> bytes:
        return dumps(self.to_dict())


def aggregate_summary(layer: VectorLayer, group_attrs, measure_attrs) -> SummaryTable:
    """Group features by ``group_attrs``; count them and sum each measure."""
    group_attrs, measure_attrs = tuple(group_attrs), tuple(measure_attrs)
    groups: dict = {}
    for i, f in enumerate(layer.features):
        for a in group_attrs + measure_attrs:
            if a not in f.properties:
                raise MissingAttr(f"feature {i} has no attribute {a!r}")
        key = tuple(f.properties[a] for a in group_attrs)
        acc = groups.get(key)
        if acc is None:
            acc = groups[key] = [0] + [0] * len(measure_attrs)
        acc[0] += 1
        for j, m in enumerate(measure_attrs):
            v = f.properties[m]
            if not isinstance(v, (int, float)):
                raise MissingAttr(f"feature {i}: measure {m!r} is not numeric")
            acc[j + 1] += v
    rows = []
    for key in sorted(groups, key=_sort_key):
        acc = groups[key]
        row = dict(zip(group_attrs, key))
        row["count"] = acc[0]
        row.update(zip(measure_attrs, acc[1:]))
        rows.append(row)
    return SummaryTable(group_attrs, measure_attrs, tuple(rows))


# -- the node ------------------------------------------------------------------------------------

@dataclass
class EvictionReport:
    evicted: list = field(default_factory=list)
    freed_bytes: int = 0


PROCESSES = ("intersect", "join", "zonal_stats", "classify")


class FogNode:
    """State of one fog node. Request handling lives in module functions."""

    def __init__(self, config: FogConfig, catalog: Optional[Catalog] = None,
                 policy: Optional[PolicyStore] = None, queue: Optional[SyncQueue] = None,
                 clock: Callable[[], float] = time.time):
        self.config = config
        self.catalog = catalog or Catalog()
        self.policy = policy or PolicyStore(clock=clock)
        self.queue = queue or SyncQueue(config.queue_dir, node_id=config.node_id,
                                        budget_bytes=config.storage_budget_bytes, clock=clock)
        self.clock = clock
        self.engine_calls = 0
        self._access: "OrderedDict[str, None]" = OrderedDict()
        self._sizes: dict[str, int] = {}
        self._evicted: set = set()
        self._in_use: dict[str, int] = {}
        self._lock = threading.RLock()
        for lid in list(self.catalog.entries):
            self._track(self.catalog.get(lid))

    def _track(self, layer):
        lid = layer.metadata.layer_id
        with self._lock:
            self._sizes[lid] = layer_size_bytes(layer)
            self._access[lid] = None
            self._access.move_to_end(lid)
            self._evicted.discard(lid)
            if lid not in self.policy.layer_labels:
                self.policy.set_layer_label(lid, layer.metadata.sensitivity)

    def register_layer(self, layer) -> None:
        self.catalog.register(layer)
        self._track(layer)
        self.policy.set_layer_label(layer.metadata.layer_id, layer.metadata.sensitivity)

    def layer_bytes(self) -> int:
        with self._lock:
            return sum(self._sizes[lid] for lid in self.catalog.entries if lid in self._sizes)

    def acquire(self, layer_id: str):
        """Fetch a layer, mark it recently used and in use. Pair with ``release``."""
        with self._lock:
            if layer_id in self._evicted:
                raise UnknownLayer(layer_id, evicted=True)
            layer = self.catalog.get(layer_id)
            self._access[layer_id] = None
            self._access.move_to_end(layer_id)
            self._in_use[layer_id] = self._in_use.get(layer_id, 0) + 1
            return layer

    def release(self, layer_id: str):
        with self._lock:
            n = self._in_use.get(layer_id, 0) - 1
            if n <= 0:
                self._in_use.pop(layer_id, None)
            else:
                self._in_use[layer_id] = n

    def engine(self, fn, *args, **kwargs):
        """Run an overlay operation, counting invocations."""
        self.engine_calls += 1
        return fn(*args, **kwargs)


def cache_evict(node: FogNode) -> EvictionReport:
    """Evict least-recently-used unpinned layers until layers + queue fit the budget.

    The sync queue is never evicted. Layers in use by a request are skipped.
    """
    report = EvictionReport()
    budget = node.config.storage_budget_bytes
    with node._lock:
        queue_bytes = node.queue.bytes_used()
        pinned = set(node.config.pinned)
        held = sum(node._sizes[lid] for lid in node.catalog.entries if lid in pinned)
        if held + queue_bytes > budget:
            raise BudgetUnsatisfiable(f"pinned layers ({held} B) and queue ({queue_bytes} B) "
                                      f"exceed budget {budget} B")
        total = node.layer_bytes() + queue_bytes
        for lid in list(node._access):
            if total <= budget:
                break
            if lid in pinned or lid in node._in_use or lid not in node.catalog:
                continue
            node.catalog.remove(lid)
            node._access.pop(lid)
            node._evicted.add(lid)
            size = node._sizes.pop(lid)
            total -= size
            report.evicted.append(lid)
            report.freed_bytes += size
        if total > budget:
            raise BudgetUnsatisfiable(f"layers in use keep storage at {total} B over budget {budget} B")
    if report.evicted:
        log.info("evicted %s (%d bytes)", ", ".join(report.evicted), report.freed_bytes)
    return report


def _require(decision):
    if not decision:
        raise AccessDenied(decision.reason)
    return decision


# -- service operations -----------------------------------------------------------------------------

def capabilities(node: FogNode, token, **filters) -> dict:
    """Catalog entries the caller may read, filtered like a catalog search."""
    _require(authorize(node.policy, token, None, Permission.READ_CATALOG))
    layers = []
    for meta in catalog_query(node.catalog, **filters):
        if authorize(node.policy, token, meta.layer_id, Permission.READ_FEATURES):
            layers.append(meta.to_dict())
    return {"node_id": node.config.node_id, "services": ["CSW", "WFS", "WMS", "WPS"],
            "processes": list(PROCESSES), "layers": layers}


def get_features(node: FogNode, token, layer_id: str, bbox=None) -> list:
    _require(authorize(node.policy, token, layer_id, Permission.READ_FEATURES))
    layer = node.acquire(layer_id)
    try:
        if not isinstance(layer, VectorLayer):
            raise KindMismatch(f"{layer_id} is a raster layer")
        if bbox is None:
            return list(layer.features)
        return [f for f in layer.features if bbox_intersects(geometry_bbox(f.geometry), bbox)]
    finally:
        node.release(layer_id)


def _param(params, name, kind, required=True, default=None):
    if name not in params or params[name] is None:
        if required:
            raise ParamError(name, "missing")
        return default
    v = params[name]
    ok = {
        "str": isinstance(v, str),
        "int": isinstance(v, int) and not isinstance(v, bool),
        "num": isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v),
        "list": isinstance(v, list),
    }[kind]
    if not ok:
        raise ParamError(name, f"expected {kind}")
    return v


def _layer_param(node, params, name):
    lid = _param(params, name, "str")
    with node._lock:
        if lid not in node.catalog:
            raise ParamError(name, f"unknown layer {lid!r}" + (" (evicted)" if lid in node._evicted else ""))
    return lid


def _plan_process(node, name, params) -> tuple:
    """Validate params; return (input layer ids, runner taking the acquired layers)."""
    if name == "intersect":
        a, b = _layer_param(node, params, "layer_a"), _layer_param(node, params, "layer_b")
        res = _param(params, "resolution", "num", required=False, default=1.0)
        if res <= 0:
            raise ParamError("resolution", "must be > 0")

        def run(la, lb):
            out = node.engine(overlay.intersect_layers, la, lb, res)
            return {"features": features_to_collection(out.features, out.metadata.layer_id)}
        return [a, b], run
    if name == "join":
        a = _layer_param(node, params, "layer")
        key = _param(params, "key", "str")
        table = _param(params, "table", "list")
        if not all(isinstance(r, dict) for r in table):
            raise ParamError("table", "rows must be objects")

        def run(la):
            out = node.engine(overlay.attribute_join, la, table, key)
            return {"features": features_to_collection(out.features, out.metadata.layer_id)}
        return [a], run
    if name == "zonal_stats":
        r = _layer_param(node, params, "raster")
        z = _layer_param(node, params, "zones")
        attr = _param(params, "zone_attr", "str")

        def run(lr, lz):
            if not isinstance(lr, RasterGrid):
                raise ParamError("raster", "not a raster layer")
            rows = node.engine(overlay.zonal_stats, lr, lz, attr)
            return {"rows": [row.to_dict() for row in rows]}
        return [r, z], run
    if name == "classify":
        k = _param(params, "k", "int")
        if k < 1:
            raise ParamError("k", "must be >= 1")
        scheme = _param(params, "scheme", "str", required=False, default="equal_interval")
        if scheme not in overlay.SCHEMES:
            raise ParamError("scheme", f"must be one of {', '.join(overlay.SCHEMES)}")
        if "values" in params:
            values = _param(params, "values", "list")
            if not values or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
                raise ParamError("values", "must be a non-empty list of numbers")

            def run():
                return {"breaks": node.engine(overlay.classify, values, k, scheme).to_dict()}
            return [], run
        a = _layer_param(node, params, "layer")
        attr = _param(params, "attribute", "str")

        def run(la):
            vals = [f.properties.get(attr) for f in la.features]
            vals = [v for v in vals if isinstance(v, (int, float))]
            if not vals:
                raise ParamError("attribute", f"no numeric values for {attr!r}")
            return {"breaks": node.engine(overlay.classify, vals, k, scheme).to_dict()}
        return [a], run
    raise UnknownProcess(f"unknown process {name!r}")


def execute_process(node: FogNode, token, process_name: str, params: dict) -> dict:
    _require(authorize(node.policy, token, None, Permission.EXECUTE_PROCESS))
    if not isinstance(params, dict):
        raise ParamError("params", "must be an object")
    inputs, run = _plan_process(node, process_name, params)
    for lid in inputs:
        _require(authorize(node.policy, token, lid, Permission.READ_FEATURES))
    layers = []
    try:
        for lid in inputs:
            layers.append(node.acquire(lid))
        result = run(*layers)
    finally:
        for layer in layers:
            node.release(layer.metadata.layer_id)
    result.update({"process": process_name, "params": params, "inputs": inputs})
    return result


def render(node: FogNode, token, layer_ids, bbox=None, width=256, height=256, style=None) -> bytes:
    layer_ids = list(layer_ids)
    for lid in layer_ids:
        _require(authorize(node.policy, token, lid, Permission.RENDER_MAP))
    acquired = []
    try:
        for lid in layer_ids:
            acquired.append(node.acquire(lid))
        if bbox is None:
            bbox = union_bbox(layer_bbox(layer) for layer in acquired)
        req = overlay.MapRequest(tuple(layer_ids), tuple(bbox), width, height, style)
        return node.engine(overlay.render_map, req, node.catalog)
    finally:
        for layer in acquired:
            node.release(layer.metadata.layer_id)


def summary_payload(node: FogNode, layer: VectorLayer, table: SummaryTable) -> bytes:
    doc = table.to_dict()
    doc.update({"key": node.config.summary_key, "layer_id": layer.metadata.layer_id,
                "node_id": node.config.node_id,
                "years": list(layer.metadata.temporal_extent) if layer.metadata.temporal_extent else None})
    return dumps(doc)


def enqueue_layer_summary(node: FogNode, layer: VectorLayer, group_by=None, measures=None) -> SyncItem:
    group_by = tuple(group_by or node.config.summary_group_by)
    measures = tuple(measures or node.config.summary_measures)
    table = aggregate_summary(layer, group_by, measures)
    item = enqueue_sync(node.queue, "summary", summary_payload(node, layer, table),
                        node.config.key, node.config.key_id)
    try:
        cache_evict(node)
    except BudgetUnsatisfiable as exc:
        log.warning("storage over budget after enqueue: %s", exc)
    return item


def write_layer(node: FogNode, token, layer_id: str, body: bytes) -> dict:
    """Replace (or create) a whole layer from a GeoJSON or ASCII-grid body.

    Vector layers carrying the configured summary attributes are aggregated
    and the summary queued for the cloud.
    """
    with node._lock:
        exists = layer_id in node.catalog or layer_id in node._evicted
    d = _require(authorize(node.policy, token, layer_id if exists else None, Permission.WRITE_LAYER))
    label = node.policy.label(layer_id) if exists else node.policy.clearance(d.principal_id)
    text = body.decode("utf-8", errors="replace")
    if text.lstrip().startswith("{"):
        layer = parse_vector_layer(text, layer_id, sensitivity=label, owner=d.principal_id)
    else:
        layer = parse_raster_grid(text, layer_id, sensitivity=label, owner=d.principal_id)
    node.register_layer(layer)
    item = None
    if isinstance(layer, VectorLayer) and layer.features:
        wanted = node.config.summary_group_by + node.config.summary_measures
        if all(a in f.properties for f in layer.features for a in wanted):
            item = enqueue_layer_summary(node, layer)
    if item is None:
        try:
            cache_evict(node)
        except BudgetUnsatisfiable as exc:
            log.warning("storage over budget after write: %s", exc)
    if node.config.catalog_dir:
        node.catalog.save(node.config.catalog_dir)
    return {"layer_id": layer_id, "kind": layer.metadata.kind,
            "features": len(layer.features) if isinstance(layer, VectorLayer) else None,
            "summary_item": item.item_id if item else None}


def sync_layer(node: FogNode, token, layer_id: str, group_by=None, measures=None) -> dict:
    _require(authorize(node.policy, token, layer_id, Permission.SYNC_TO_CLOUD))
    layer = node.acquire(layer_id)
    try:
        if not isinstance(layer, VectorLayer):
            raise KindMismatch(f"{layer_id} is a raster layer")
        item = enqueue_layer_summary(node, layer, group_by, measures)
    finally:
        node.release(layer_id)
    return {"item_id": item.item_id, "queued": len(node.queue)}


# -- HTTP-style dispatch ----------------------------------------------------------------------------------

def _query_bbox(q, name="bbox"):
    if not q.get(name):
        return None
    try:
        return parse_bbox(q[name])
    except ValueError as exc:
        raise MalformedRequest(str(exc)) from None


def _query_int(q, name, default):
    if name not in q:
        return default
    try:
        return int(q[name])
    except ValueError:
        raise MalformedRequest(f"{name} must be an integer") from None


def _route(node: FogNode, req: Request) -> Response:
    token = req.bearer_token()
    q = req.query
    route = (req.method, req.path)
    if route == ("GET", "/health"):
        return json_response(200, {"status": "ok", "node_id": node.config.node_id, "queued": len(node.queue)})
    if route == ("POST", "/auth"):
        body = req.json()
        if not isinstance(body, dict) or not isinstance(body.get("principal_id"), str) \
                or not isinstance(body.get("secret"), str):
            raise MalformedRequest("expected {principal_id, secret}")
        tok = authenticate(node.policy, body["principal_id"], body["secret"])
        return json_response(200, {"token": tok, "expires_in": node.policy.token_ttl})
    if route == ("GET", "/capabilities"):
        filters = {"kind": q.get("kind") or None, "bbox": _query_bbox(q), "text": q.get("q") or None}
        if q.get("year"):
            filters["year"] = _query_int(q, "year", None)
        return json_response(200, capabilities(node, token, **filters))
    if route == ("GET", "/features"):
        if not q.get("layer"):
            raise MalformedRequest("layer is required")
        feats = get_features(node, token, q["layer"], _query_bbox(q))
        return json_response(200, features_to_collection(feats, q["layer"]))
    if route == ("GET", "/map"):
        if not q.get("layers"):
            raise MalformedRequest("layers is required")
        try:
            style = overlay.Style.parse(q["style"]) if q.get("style") else None
        except ValueError as exc:
            raise MalformedRequest(str(exc)) from None
        try:
            img = render(node, token, q["layers"].split(","), _query_bbox(q),
                         _query_int(q, "width", 256), _query_int(q, "height", 256), style)
        except ValueError as exc:
            raise MalformedRequest(str(exc)) from None
        return Response(200, img, "image/x-portable-pixmap")
    if route == ("POST", "/execute"):
        body = req.json()
        if not isinstance(body, dict) or not isinstance(body.get("process"), str):
            raise MalformedRequest("expected {process, params}")
        return json_response(200, execute_process(node, token, body["process"], body.get("params", {})))
    if route == ("POST", "/layers"):
        if not q.get("layer"):
            raise MalformedRequest("layer is required")
        return json_response(200, write_layer(node, token, q["layer"], req.body))
    if route == ("POST", "/sync"):
        body = req.json()
        if not isinstance(body, dict) or not isinstance(body.get("layer"), str):
            raise MalformedRequest("expected {layer, group_by?, measures?}")
        return json_response(200, sync_layer(node, token, body["layer"], body.get("group_by"),
                                             body.get("measures")))
    if route == ("POST", "/admin/policy"):
        manage_policy(node.policy, token, req.json())
        if node.config.policy_path:
            node.policy.save(node.config.policy_path)
        return json_response(200, {"ok": True})
    raise RouteNotFound(f"no route for {req.method} {req.path}")


def handle_request(node: FogNode, req: Request) -> Response:
    """Run one request through token extraction, authorization, execution and audit."""
    try:
        return _route(node, req)
    except AccessDenied as exc:
        return json_response(403, {"reason": exc.reason})
    except (BadCredentials, LockedOut) as exc:
        return json_response(exc.status, {"reason": exc.reason})
    except SoaFogError as exc:
        return error_response(exc)
    except ValueError as exc:
        return json_response(400, {"reason": "malformed", "error": str(exc)})
    except Exception as exc:
        incident = uuid.uuid4().hex[:12]
        log.exception("internal error %s", incident)
        node.policy.record(None, "internal_error", None, "deny", f"{incident}: {exc!r}")
        return json_response(500, {"reason": "internal", "incident": incident})


# -- running a node ---------------------------------------------------------------------------------------

def build_node(config: FogConfig) -> FogNode:
    catalog = Catalog.load(config.catalog_dir) if config.catalog_dir else Catalog()
    if config.policy_path and os.path.exists(config.policy_path):
        policy = PolicyStore.load(config.policy_path, audit_path=config.audit_path)
    else:
        policy = PolicyStore(audit_path=config.audit_path)
    for lid, meta in catalog.entries.items():
        policy.layer_labels.setdefault(lid, meta.sensitivity)
    return FogNode(config, catalog, policy)


class Flusher(threading.Thread):
    """Background single consumer of the sync queue."""

    def __init__(self, node: FogNode, client, link=None):
        super().__init__(daemon=True, name=f"flusher-{node.config.node_id}")
        self.node = node
        self.client = client
        self.link = link or AlwaysUp()
        self.stop_event = threading.Event()

    def run(self):
        while not self.stop_event.is_set():
            wait = self.node.config.flush_interval_s
            if len(self.node.queue):
                rep = flush_sync(self.node.queue, self.link, self.client, self.node.config.backoff_ms)
                if rep.sent or rep.failed:
                    log.info("flush: sent=%d acked=%d failed=%d bytes=%d",
                             rep.sent, rep.acked, rep.failed, rep.bytes)
                if rep.failed:
                    wait = rep.retry_after_ms / 1000.0
            self.stop_event.wait(wait)
