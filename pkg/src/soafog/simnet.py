"""Discrete-event harness comparing fog-mediated and cloud-direct deployments.

Both topologies replay the same seeded open-loop workload on a virtual
clock. Service handlers run in-process through the same entry points as the
HTTP servers, with compute time taken as zero, so differences come from the
links alone.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import io
import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .cloudtier import CloudStore, LocalCloudClient, handle_cloud_request
from .errors import ConfigError, WorkloadMismatch
from .fixtures import FixtureSet, case_reports, parse_years, risk_zones
from .fogtier import FogConfig, FogNode, SyncQueue, cache_evict, flush_sync, handle_request
from .geodata import Catalog, features_to_collection
from .security import DEFAULT_ROLE_PERMISSIONS, Permission, PolicyStore, Role
from .service import Request, dumps

TOPOLOGIES = ("fog_mediated", "cloud_direct")
CLIENT_KINDS = ("mobile", "thin", "thick")
ENDPOINTS = ("capabilities", "features", "map", "execute", "upload")
READ_ENDPOINTS = ("capabilities", "features", "map", "execute")
FIXTURES = ("maharashtra",)
LINK_NAMES = ("client_fog", "fog_cloud", "client_cloud")

FOOTER = ("Storage size and server location are configuration dimensions, not measurements. "
          "bytes_to_cloud stands in for energy use.")

_ROLE_OF_KIND = {"mobile": Role.MOBILE_CLIENT, "thin": Role.THIN_CLIENT, "thick": Role.THICK_CLIENT}


# -- configuration ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkSpec:
    one_way_latency_ms: float
    bandwidth: float  # bytes per second
    outages: tuple = ()
    seed: int = 0
    jitter_ms: float = 0.0

    def __post_init__(self):
        if self.one_way_latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("link latency and jitter must be >= 0")
        if not self.bandwidth > 0:
            raise ConfigError("link bandwidth must be > 0")
        outs = tuple((float(s), float(e)) for s, e in self.outages)
        for s, e in outs:
            if not s < e:
                raise ConfigError(f"outage [{s}, {e}) is empty")
        for (_, e1), (s2, _) in zip(outs, outs[1:]):
            if s2 < e1:
                raise ConfigError("outages must be sorted and disjoint")
        object.__setattr__(self, "outages", outs)

    def transfer_ms(self, nbytes: int) -> float:
        return nbytes / self.bandwidth * 1000.0 + self.one_way_latency_ms

    def down_during(self, t0: float, t1: float) -> bool:
        """True if [t0, t1) touches an outage (a zero-length span counts as the point t0)."""
        for s, e in self.outages:
            if t1 > t0 and s < t1 and t0 < e:
                return True
            if t1 <= t0 and s <= t0 < e:
                return True
        return False

    def outage_ms(self) -> float:
        return sum(e - s for s, e in self.outages)

    def to_dict(self) -> dict:
        return {"one_way_latency_ms": self.one_way_latency_ms, "bandwidth": self.bandwidth,
                "outages": [list(o) for o in self.outages], "seed": self.seed, "jitter_ms": self.jitter_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "LinkSpec":
        try:
            return cls(float(d["one_way_latency_ms"]), float(d["bandwidth"]),
                       tuple(tuple(o) for o in d.get("outages", ())), int(d.get("seed", 0)),
                       float(d.get("jitter_ms", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad link spec: {exc}") from None


@dataclass(frozen=True)
class ClientProfile:
    kind: str
    count: int
    mix: tuple  # ((endpoint, weight), ...)
    think_time_ms: float

    def __post_init__(self):
        if self.kind not in CLIENT_KINDS:
            raise ConfigError(f"client kind must be one of {', '.join(CLIENT_KINDS)}")
        if self.count < 0:
            raise ConfigError("client count must be >= 0")
        if not self.think_time_ms > 0:
            raise ConfigError("think_time_ms must be > 0")
        for ep, w in self.mix:
            if ep not in ENDPOINTS:
                raise ConfigError(f"unknown endpoint {ep!r} in mix")
            if w < 0:
                raise ConfigError("mix weights must be >= 0")
        if abs(sum(w for _, w in self.mix) - 1.0) > 1e-9:
            raise ConfigError(f"{self.kind} mix weights must sum to 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "count": self.count, "mix": dict(self.mix),
                "think_time_ms": self.think_time_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "ClientProfile":
        try:
            mix = tuple(sorted((str(k), float(v)) for k, v in d["mix"].items()))
            return cls(d["kind"], int(d.get("count", 1)), mix, float(d["think_time_ms"]))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"bad client profile: {exc}") from None


@dataclass(frozen=True)
class DatasetSpec:
    fixture: str = "maharashtra"
    districts: int = 6
    years: tuple = (2011, 2012, 2013, 2014)
    seed: int = 7
    reports_per_upload: int = 50

    def __post_init__(self):
        if self.fixture not in FIXTURES:
            raise ConfigError(f"unknown dataset fixture {self.fixture!r}")
        if self.districts < 1 or self.reports_per_upload < 1 or not self.years:
            raise ConfigError("dataset needs >= 1 district, >= 1 year and >= 1 report per upload")

    def to_dict(self) -> dict:
        return {"fixture": self.fixture, "districts": self.districts, "years": list(self.years),
                "seed": self.seed, "reports_per_upload": self.reports_per_upload}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        years = d.get("years", [2011, 2012, 2013, 2014])
        try:
            if isinstance(years, str):
                years = parse_years(years)
            return cls(d.get("fixture", "maharashtra"), int(d.get("districts", 6)),
                       tuple(int(y) for y in years), int(d.get("seed", 7)),
                       int(d.get("reports_per_upload", 50)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad dataset spec: {exc}") from None


@dataclass(frozen=True)
class ScenarioConfig:
    topology: str
    clients: tuple
    duration_ms: float
    links: dict
    dataset: DatasetSpec = DatasetSpec()
    seed: int = 0
    sync_interval_ms: float = 5000.0
    storage_budget_bytes: int = 50_000_000
    backoff_ms: tuple = (1000, 2000, 5000, 10000)
    map_size: tuple = (64, 64)
    drain_ms: float = 60000.0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {', '.join(TOPOLOGIES)}")
        if not self.duration_ms > 0:
            raise ConfigError("duration_ms must be > 0")
        missing = [n for n in LINK_NAMES if n not in self.links]
        if missing:
            raise ConfigError(f"missing links: {', '.join(missing)}")
        if not self.sync_interval_ms > 0 or not self.storage_budget_bytes > 0:
            raise ConfigError("sync_interval_ms and storage_budget_bytes must be > 0")

    def to_dict(self) -> dict:
        return {"topology": self.topology, "clients": [c.to_dict() for c in self.clients],
                "duration_ms": self.duration_ms,
                "links": {n: self.links[n].to_dict() for n in LINK_NAMES},
                "dataset": self.dataset.to_dict(), "seed": self.seed,
                "sync_interval_ms": self.sync_interval_ms,
                "storage_budget_bytes": self.storage_budget_bytes,
                "backoff_ms": list(self.backoff_ms), "map_size": list(self.map_size),
                "drain_ms": self.drain_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ConfigError("scenario must be a JSON object")
        try:
            links = {n: LinkSpec.from_dict(v) for n, v in d["links"].items()}
            return cls(
                topology=d["topology"],
                clients=tuple(ClientProfile.from_dict(c) for c in d.get("clients", [])),
                duration_ms=float(d["duration_ms"]),
                links=links,
                dataset=DatasetSpec.from_dict(d.get("dataset", {})),
                seed=int(d.get("seed", 0)),
                sync_interval_ms=float(d.get("sync_interval_ms", 5000.0)),
                storage_budget_bytes=int(d.get("storage_budget_bytes", 50_000_000)),
                backoff_ms=tuple(d.get("backoff_ms", (1000, 2000, 5000, 10000))),
                map_size=tuple(d.get("map_size", (64, 64))),
                drain_ms=float(d.get("drain_ms", 60000.0)),
            )
        except KeyError as exc:
            raise ConfigError(f"scenario is missing {exc.args[0]!r}") from None
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"bad scenario: {exc}") from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)


def fixture_scenario(topology: str, scale: int = 1, *, outage=(20000.0, 40000.0), seed: int = 7) -> ScenarioConfig:
    """10 clients for 60 s with one WAN outage; ``scale`` multiplies reports per upload.

    The outage hits fog<->cloud and client<->cloud alike, so each topology
    loses its wide-area link for the same window.
    """
    outages = (tuple(outage),) if outage else ()
    mixes = {
        "mobile": {"capabilities": 0.2, "features": 0.4, "map": 0.3, "upload": 0.1},
        "thin": {"capabilities": 0.1, "features": 0.2, "map": 0.6, "upload": 0.1},
        "thick": {"capabilities": 0.1, "features": 0.3, "map": 0.1, "execute": 0.3, "upload": 0.2},
    }
    counts = {"mobile": 4, "thin": 3, "thick": 3}
    clients = tuple(ClientProfile(k, counts[k], tuple(sorted(mixes[k].items())), 1000.0) for k in CLIENT_KINDS)
    links = {
        "client_fog": LinkSpec(5.0, 12_500_000.0),
        "fog_cloud": LinkSpec(50.0, 1_250_000.0, outages),
        "client_cloud": LinkSpec(60.0, 1_250_000.0, outages),
    }
    return ScenarioConfig(topology, clients, 60000.0, links,
                          DatasetSpec(reports_per_upload=50 * scale), seed=seed)


# -- workload ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkItem:
    t_ms: float
    client_id: str
    kind: str
    endpoint: str
    params: tuple  # sorted (name, value) pairs

    def to_list(self) -> list:
        return [round(self.t_ms, 6), self.client_id, self.kind, self.endpoint, [list(p) for p in self.params]]


def _params_for(endpoint: str, rng: random.Random, years) -> dict:
    year = rng.choice(years)
    if endpoint == "features" or endpoint == "map":
        return {"year": year}
    if endpoint == "execute":
        return {"year": year, "process": rng.choice(("classify", "zonal_stats", "intersect"))}
    if endpoint == "upload":
        return {"year": year, "report_seed": rng.getrandbits(32)}
    return {}


def generate_workload(cfg: ScenarioConfig) -> list:
    """Seeded open-loop request schedule. Each client issues one request per think time
    from a random phase; endpoint choice follows the client's mix."""
    items = []
    n = 0
    for prof in cfg.clients:
        endpoints = [ep for ep, _ in prof.mix]
        weights = [w for _, w in prof.mix]
        for _ in range(prof.count):
            cid = f"{prof.kind}-{n}"
            n += 1
            rng = random.Random(f"workload:{cfg.seed}:{cid}")
            t = rng.uniform(0.0, prof.think_time_ms)
            while t < cfg.duration_ms:
                ep = rng.choices(endpoints, weights)[0]
                params = _params_for(ep, rng, cfg.dataset.years)
                items.append(WorkItem(t, cid, prof.kind, ep, tuple(sorted(params.items()))))
                t += prof.think_time_ms
    items.sort(key=lambda w: (w.t_ms, w.client_id))
    return items


def workload_hash(cfg: ScenarioConfig, items) -> str:
    doc = {"dataset": cfg.dataset.to_dict(), "duration_ms": cfg.duration_ms, "map_size": list(cfg.map_size),
           "items": [w.to_list() for w in items]}
    return hashlib.sha256(dumps(doc)).hexdigest()


# -- metrics ----------------------------------------------------------------------------------------

def _r(x: float) -> float:
    return round(float(x), 3)


def _percentile(sorted_vals, p: float) -> float:
    if not sorted_vals:
        return 0.0
    return sorted_vals[max(0, math.ceil(p / 100.0 * len(sorted_vals)) - 1)]


@dataclass
class Outcome:
    t_ms: float
    client_id: str
    kind: str
    endpoint: str
    ok: bool
    status: Optional[int]
    latency_ms: Optional[float]
    in_outage: bool


def _group_stats(outcomes) -> dict:
    lat = sorted(o.latency_ms for o in outcomes if o.ok)
    reads = [o for o in outcomes if o.endpoint in READ_ENDPOINTS]
    return {
        "issued": len(outcomes),
        "succeeded": sum(o.ok for o in outcomes),
        "failed": sum(not o.ok for o in outcomes),
        "latency_ms": {"mean": _r(sum(lat) / len(lat)) if lat else 0.0,
                       "p50": _r(_percentile(lat, 50)), "p95": _r(_percentile(lat, 95))},
        "read_availability": _r(sum(o.ok for o in reads) / len(reads)) if reads else 1.0,
    }


@dataclass
class MetricsReport:
    data: dict
    trace: list = field(default_factory=list, repr=False)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def workload_hash(self) -> str:
        return self.data["workload_hash"]

    def to_json(self) -> bytes:
        return (json.dumps(self.data, sort_keys=True, indent=2) + "\n").encode("utf-8")

    def flat(self) -> list:
        """(metric, value) rows in a fixed order."""
        rows = []

        def walk(prefix, v):
            if isinstance(v, dict):
                for k in sorted(v):
                    walk(f"{prefix}.{k}" if prefix else k, v[k])
            elif not isinstance(v, list):
                rows.append((prefix, v))
        walk("", self.data)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.flat())
        return buf.getvalue()

    @classmethod
    def from_json(cls, text) -> "MetricsReport":
        return cls(json.loads(text))


# -- execution ----------------------------------------------------------------------------------------

class SimLink:
    """Link as seen by the flusher: a cursor in virtual time advanced per transfer."""

    def __init__(self, spec: LinkSpec, start_ms: float, rng: random.Random):
        self.spec = spec
        self.now = start_ms
        self.rng = rng
        self.carried = 0

    def transmit(self, nbytes: int) -> bool:
        dur = _transfer(self.spec, nbytes, self.rng)
        if self.spec.down_during(self.now, self.now + dur):
            return False
        self.now += dur
        self.carried += nbytes
        return True


def _transfer(spec: LinkSpec, nbytes: int, rng: random.Random) -> float:
    jitter = rng.uniform(0.0, spec.jitter_ms) if spec.jitter_ms else 0.0
    return spec.transfer_ms(nbytes) + jitter


class _Clock:
    def __init__(self):
        self.ms = 0.0

    def __call__(self) -> float:
        return self.ms / 1000.0


def _fixture_catalog(ds: DatasetSpec):
    fx = FixtureSet(ds.years, ds.districts, ds.seed)
    cat = Catalog()
    for layer in fx.layers.values():
        cat.register(layer)
    cat.register(fx.raster)
    cat.register(risk_zones(fx.extent, ds.seed, n=6))
    return fx, cat


def _sim_policy(clock, cfg: ScenarioConfig, client_ids) -> tuple:
    # client roles also get execute and write so every mix entry is servable
    matrix = {r.value: sorted(p.value for p in perms) for r, perms in DEFAULT_ROLE_PERMISSIONS.items()}
    for role in _ROLE_OF_KIND.values():
        matrix[role.value] = sorted(set(matrix[role.value]) | {Permission.EXECUTE_PROCESS.value,
                                                                Permission.WRITE_LAYER.value})
    ttl = (cfg.duration_ms + cfg.drain_ms) / 1000.0 + 3600.0
    policy = PolicyStore(matrix, token_ttl=ttl, iterations=1, clock=clock,
                         rng=random.Random(f"tokens:{cfg.seed}"))
    tokens = {}
    for cid, kind in client_ids:
        policy.add_principal(cid, f"secret-{cid}", {_ROLE_OF_KIND[kind]})
        tokens[cid] = policy.open_session(cid)
    return policy, tokens


def _build_request(item: WorkItem, token: str, fx, map_size, ds: DatasetSpec, upload_no: int) -> Request:
    p = dict(item.params)
    hdrs = {"Authorization": f"Bearer {token}"}
    layer = f"malaria_{p['year']}" if "year" in p else None
    if item.endpoint == "capabilities":
        return Request.build("GET", "/capabilities", hdrs)
    if item.endpoint == "features":
        return Request.build("GET", f"/features?layer={layer}", hdrs)
    if item.endpoint == "map":
        w, h = map_size
        return Request.build("GET", f"/map?layers=base_grid,{layer}&width={w}&height={h}"
                                    f"&style=positives:reds:4", hdrs)
    if item.endpoint == "execute":
        proc = p["process"]
        if proc == "classify":
            params = {"layer": layer, "attribute": "positives", "k": 4, "scheme": "quantile"}
        elif proc == "zonal_stats":
            params = {"raster": "base_grid", "zones": layer, "zone_attr": "district"}
        else:
            params = {"layer_a": layer, "layer_b": "risk_zones", "resolution": 1.0}
        return Request.build("POST", "/execute", hdrs, dumps({"process": proc, "params": params}))
    if item.endpoint == "upload":
        lid = f"reports_{item.client_id}_{upload_no}"
        rng = random.Random(p["report_seed"])
        feats = case_reports(fx.layers[p["year"]], p["year"], ds.reports_per_upload, rng, prefix=lid)
        body = dumps(features_to_collection(feats, lid))
        return Request.build("POST", f"/layers?layer={lid}", hdrs, body)
    raise ValueError(item.endpoint)


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    """Replay the workload on the configured topology and collect metrics."""
    clock = _Clock()
    items = generate_workload(cfg)
    whash = workload_hash(cfg, items)
    fx, catalog = _fixture_catalog(cfg.dataset)
    client_ids = sorted({(w.client_id, w.kind) for w in items})
    policy, tokens = _sim_policy(clock, cfg, client_ids)
    fog_mode = cfg.topology == "fog_mediated"
    key = hashlib.sha256(f"simkey:{cfg.seed}".encode()).digest()
    node_id = "fog-sim" if fog_mode else "cloud-app"
    fcfg = FogConfig(node_id, cfg.storage_budget_bytes, "k1", key, backoff_ms=cfg.backoff_ms,
                     pinned=tuple(sorted(catalog.entries)))
    ids = iter(range(10 ** 9))
    queue = SyncQueue(None, node_id=node_id, budget_bytes=cfg.storage_budget_bytes, clock=clock,
                      id_factory=lambda: f"{node_id}-{next(ids):08d}", fsync=False)
    node = FogNode(fcfg, catalog, policy, queue, clock=clock)
    cache_evict(node)
    cloud = CloudStore(nodes={node_id: key}, clock=clock, fsync=False)
    cloud_client = LocalCloudClient(cloud)

    access = cfg.links["client_fog"] if fog_mode else cfg.links["client_cloud"]
    wan = cfg.links["fog_cloud"] if fog_mode else cfg.links["client_cloud"]
    access_rng = random.Random(f"link:{access.seed}:{cfg.seed}:access")
    wan_rng = random.Random(f"link:{wan.seed}:{cfg.seed}:wan")

    # events: (time, seq, kind, payload)
    events = []
    seq = 0

    def push(t, kind, payload=None):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, payload))
        seq += 1

    for item in items:
        push(item.t_ms, "issue", item)
    if fog_mode:
        push(cfg.sync_interval_ms, "flush")

    outcomes = []
    uploads: dict = {}
    bytes_to_cloud = 0
    wan_bytes = 0
    sync = {"flushes": 0, "items_sent": 0, "items_acked": 0, "failed_flushes": 0}
    end_ms = cfg.duration_ms + cfg.drain_ms

    while events:
        t, _, kind, payload = heapq.heappop(events)
        clock.ms = t
        if kind == "flush":
            if t >= cfg.duration_ms and (not len(node.queue) or t > end_ms):
                continue
            link = SimLink(wan, t, wan_rng)
            rep = flush_sync(node.queue, link, cloud_client, cfg.backoff_ms)
            sync["flushes"] += 1
            sync["items_sent"] += rep.sent
            sync["items_acked"] += rep.acked
            bytes_to_cloud += rep.bytes
            wan_bytes += link.carried
            if rep.failed:
                sync["failed_flushes"] += 1
            nxt = link.now + (rep.retry_after_ms if rep.failed else cfg.sync_interval_ms)
            push(max(nxt, t + 1.0), "flush")
            continue
        if kind == "issue":
            item = payload
            n = uploads.get(item.client_id, 0)
            if item.endpoint == "upload":
                uploads[item.client_id] = n + 1
            req = _build_request(item, tokens[item.client_id], fx, cfg.map_size, cfg.dataset, n)
            in_outage = wan.down_during(t, t)
            up = _transfer(access, req.wire_size(), access_rng)
            if access.down_during(t, t + up):
                outcomes.append(Outcome(t, item.client_id, item.kind, item.endpoint, False, None, None, in_outage))
                continue
            push(t + up, "arrive", (item, req, t, in_outage))
            continue
        # arrive: the server handles the request at this instant
        item, req, t0, in_outage = payload
        if fog_mode or item.endpoint != "upload":
            resp = handle_request(node, req)
        else:
            raw = Request.build("POST", "/raw", {"X-Blob-Id": req.query["layer"]}, req.body)
            resp = handle_cloud_request(cloud, raw)
            if resp.status == 200:
                bytes_to_cloud += len(req.body)
        down = _transfer(access, resp.wire_size(), access_rng)
        if not fog_mode:
            wan_bytes += req.wire_size() + resp.wire_size()
        ok = resp.status == 200 and not access.down_during(t, t + down)
        latency = t + down - t0
        outcomes.append(Outcome(t0, item.client_id, item.kind, item.endpoint, ok, resp.status,
                                latency if ok else None, in_outage))

    outcomes.sort(key=lambda o: (o.t_ms, o.client_id))
    reads = [o for o in outcomes if o.endpoint in READ_ENDPOINTS]
    reads_out = [o for o in reads if o.in_outage]
    duplicates = sync["items_sent"] - sync["items_acked"] if fog_mode else 0
    overall = _group_stats(outcomes)
    data = {
        "topology": cfg.topology,
        "workload_hash": whash,
        "seed": cfg.seed,
        "duration_ms": _r(cfg.duration_ms),
        "requests": {k: overall[k] for k in ("issued", "succeeded", "failed")},
        "latency_ms": overall["latency_ms"],
        "availability": overall["read_availability"],
        "availability_during_outages": _r(sum(o.ok for o in reads_out) / len(reads_out)) if reads_out else 1.0,
        "reads": {"issued": len(reads), "succeeded": sum(o.ok for o in reads),
                  "issued_during_outages": len(reads_out)},
        "bytes_to_cloud": bytes_to_cloud,
        "wan_bytes": wan_bytes,
        "cloud_bytes_stored": cloud.bytes_stored(),
        "sync": dict(sync, duplicates=duplicates, queued_at_end=len(node.queue),
                     items_stored=len(cloud.summaries)) if fog_mode else None,
        "by_client_kind": {k: _group_stats([o for o in outcomes if o.kind == k])
                           for k in sorted({o.kind for o in outcomes})},
        "by_endpoint": {e: _group_stats([o for o in outcomes if o.endpoint == e])
                        for e in sorted({o.endpoint for o in outcomes})},
        "dimensions": {"storage_budget_bytes": cfg.storage_budget_bytes,
                       "link_latency_ms": {n: cfg.links[n].one_way_latency_ms for n in LINK_NAMES},
                       "outage_ms": {n: cfg.links[n].outage_ms() for n in LINK_NAMES}},
        "footer": FOOTER,
    }
    if data["sync"] is None:
        del data["sync"]
    return MetricsReport(data, outcomes)


# -- comparison ---------------------------------------------------------------------------------------------

COMPARE_METRICS = (
    "requests.issued", "requests.succeeded", "requests.failed",
    "latency_ms.mean", "latency_ms.p50", "latency_ms.p95",
    "availability", "availability_during_outages",
    "bytes_to_cloud", "wan_bytes", "cloud_bytes_stored",
)


def _lookup(data: dict, dotted: str):
    v = data
    for part in dotted.split("."):
        v = v[part]
    return v


def _ratio(a, b) -> str:
    if a == b:
        return "1.000"
    if b == 0:
        return "inf"
    return f"{a / b:.3f}"


@dataclass(frozen=True)
class Comparison:
    a_label: str
    b_label: str
    rows: tuple  # (metric, a, b, ratio)

    def ratio(self, metric: str) -> str:
        for m, _, _, r in self.rows:
            if m == metric:
                return r
        raise KeyError(metric)

    def to_text(self) -> str:
        header = ("metric", self.a_label, self.b_label, "ratio")
        cells = [header] + [(m, _fmt(a), _fmt(b), r) for m, a, b, r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(4)]
        lines = []
        for row in cells:
            lines.append("  ".join([row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]))
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", self.a_label, self.b_label, "ratio"])
        for m, a, b, r in self.rows:
            w.writerow([m, _fmt(a), _fmt(b), r])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def compare(a, b) -> Comparison:
    """Side-by-side table of two reports over the same workload; ratio is a/b."""
    a = a.data if isinstance(a, MetricsReport) else a
    b = b.data if isinstance(b, MetricsReport) else b
    if a.get("workload_hash") != b.get("workload_hash"):
        raise WorkloadMismatch(f"workload hashes differ: {a.get('workload_hash')} vs {b.get('workload_hash')}")
    rows = tuple((m, _lookup(a, m), _lookup(b, m), _ratio(_lookup(a, m), _lookup(b, m)))
                 for m in COMPARE_METRICS)
    return Comparison(a.get("topology", "a"), b.get("topology", "b"), rows)
