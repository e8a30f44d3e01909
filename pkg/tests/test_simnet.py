import dataclasses
import json

import pytest

from soafog.errors import ConfigError, WorkloadMismatch
from soafog.simnet import (
    COMPARE_METRICS,
    ClientProfile,
    DatasetSpec,
    LinkSpec,
    MetricsReport,
    ScenarioConfig,
    compare,
    fixture_scenario,
    generate_workload,
    run_scenario,
    workload_hash,
)


def small(topology, scale=1, outage=(4000.0, 8000.0), duration=12000.0, seed=3):
    cfg = fixture_scenario(topology, scale, outage=outage, seed=seed)
    return dataclasses.replace(cfg, duration_ms=duration, map_size=(16, 16), drain_ms=30000.0)


@pytest.fixture(scope="module")
def pair():
    return run_scenario(small("fog_mediated")), run_scenario(small("cloud_direct"))


# -- configuration --------------------------------------------------------------------------------

def test_mix_must_sum_to_one():
    with pytest.raises(ConfigError):
        ClientProfile("thin", 1, (("map", 0.5), ("features", 0.4)), 1000.0)
    with pytest.raises(ConfigError):
        ClientProfile("fridge", 1, (("map", 1.0),), 1000.0)
    with pytest.raises(ConfigError):
        ClientProfile("thin", 1, (("teleport", 1.0),), 1000.0)


def test_link_validation():
    with pytest.raises(ConfigError):
        LinkSpec(-1, 10)
    with pytest.raises(ConfigError):
        LinkSpec(1, 0)
    with pytest.raises(ConfigError):
        LinkSpec(1, 10, ((5, 5),))
    with pytest.raises(ConfigError):
        LinkSpec(1, 10, ((0, 10), (5, 20)))
    assert LinkSpec(10, 1000).transfer_ms(1000) == 1010


def test_scenario_validation():
    base = small("fog_mediated").to_dict()
    for patch in ({"topology": "mesh"}, {"duration_ms": 0}, {"links": {}},
                  {"dataset": {"fixture": "atlantis"}}, {"clients": [{"kind": "thin"}]}):
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict(dict(base, **patch))
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"links": {}})
    with pytest.raises(ConfigError):
        DatasetSpec(districts=0)


def test_config_round_trip(tmp_path):
    cfg = small("cloud_direct")
    path = tmp_path / "s.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ScenarioConfig.load(path) == cfg


def test_shipped_scenarios_match_fixture_builder():
    import os
    root = os.path.join(os.path.dirname(__file__), "..", "scenarios")
    for topo, name in (("fog_mediated", "fixture_fog.json"), ("cloud_direct", "fixture_direct.json")):
        assert ScenarioConfig.load(os.path.join(root, name)) == fixture_scenario(topo)


# -- workload ----------------------------------------------------------------------------------------

def test_workload_is_seeded_and_topology_independent():
    a, b = small("fog_mediated"), small("cloud_direct")
    wa, wb = generate_workload(a), generate_workload(b)
    assert wa == wb and workload_hash(a, wa) == workload_hash(b, wb)
    c = small("fog_mediated", seed=4)
    assert workload_hash(c, generate_workload(c)) != workload_hash(a, wa)


def test_workload_rate_and_mix():
    cfg = small("fog_mediated")
    items = generate_workload(cfg)
    per_client = {}
    for w in items:
        per_client.setdefault(w.client_id, []).append(w.t_ms)
    assert len(per_client) == 10
    for ts in per_client.values():
        assert len(ts) == 12
        assert all(abs((b - a) - 1000.0) < 1e-9 for a, b in zip(ts, ts[1:]))
    assert all(w.endpoint != "execute" for w in items if w.kind != "thick")


# -- runs ----------------------------------------------------------------------------------------------

def test_zero_clients():
    cfg = dataclasses.replace(small("fog_mediated"), clients=())
    rep = run_scenario(cfg)
    assert rep["requests"] == {"issued": 0, "succeeded": 0, "failed": 0}
    assert rep["availability"] == 1.0 and rep["bytes_to_cloud"] == 0


def test_full_wan_outage_on_direct_topology():
    cfg = small("cloud_direct", outage=(0.0, 1e9))
    rep = run_scenario(cfg)
    assert rep["requests"]["succeeded"] == 0 and rep["availability"] == 0.0
    assert rep["bytes_to_cloud"] == 0


def test_full_wan_outage_does_not_touch_fog_reads():
    rep = run_scenario(small("fog_mediated", outage=(0.0, 1e9)))
    assert rep["availability"] == 1.0
    assert rep["bytes_to_cloud"] == 0 and rep["sync"]["items_stored"] == 0
    assert rep["sync"]["queued_at_end"] > 0


def test_conservation(pair):
    for rep in pair:
        r = rep["requests"]
        assert r["issued"] == r["succeeded"] + r["failed"] == len(rep.trace)
        assert sum(v["issued"] for v in rep["by_client_kind"].values()) == r["issued"]
        assert sum(v["issued"] for v in rep["by_endpoint"].values()) == r["issued"]
        assert rep["reads"]["issued"] == r["issued"] - rep["by_endpoint"].get("upload", {"issued": 0})["issued"]
    fog = pair[0]
    s = fog["sync"]
    # everything queued reached the cloud exactly once after the drain
    assert s["queued_at_end"] == 0 and s["items_stored"] == s["items_acked"]
    assert fog["cloud_bytes_stored"] <= fog["bytes_to_cloud"]


def test_outage_soundness_on_trace(pair):
    fog, direct = pair
    for o in direct.trace:
        if o.in_outage and o.endpoint != "upload":
            assert not o.ok
        if not o.ok:
            # every failure touches the outage window, give or take one transfer
            assert 4000.0 - 1000.0 <= o.t_ms < 8000.0
    assert all(o.ok for o in fog.trace)


def test_fog_sends_fewer_bytes(pair):
    fog, direct = pair
    assert 0 < fog["bytes_to_cloud"] < direct["bytes_to_cloud"]


def test_bytes_monotone_in_upload_size():
    fog = [run_scenario(small("fog_mediated", scale=s, outage=None))["bytes_to_cloud"] for s in (1, 2, 4)]
    direct = [run_scenario(small("cloud_direct", scale=s, outage=None))["bytes_to_cloud"] for s in (1, 2, 4)]
    assert direct[0] < direct[1] < direct[2]
    assert fog[0] <= fog[1] <= fog[2]
    assert fog[2] < 2 * fog[0]


def test_run_is_byte_deterministic():
    cfg = small("fog_mediated")
    assert run_scenario(cfg).to_json() == run_scenario(cfg).to_json()


def test_report_shape(pair):
    fog, direct = pair
    assert "sync" in fog.data and "sync" not in direct.data
    assert fog["footer"].startswith("Storage size")
    rows = dict(fog.flat())
    assert rows["requests.issued"] == fog["requests"]["issued"]
    assert fog.to_csv().splitlines()[0] == "metric,value"
    assert MetricsReport.from_json(fog.to_json()).data == fog.data


# -- comparison ------------------------------------------------------------------------------------------

def test_compare_identical_reports(pair):
    table = compare(pair[0], pair[0])
    assert [m for m, *_ in table.rows] == list(COMPARE_METRICS)
    assert all(r == "1.000" for *_, r in table.rows)


def test_compare_pair(pair):
    fog, direct = pair
    table = compare(fog, direct)
    assert float(table.ratio("bytes_to_cloud")) < 1.0
    assert table.to_text().splitlines()[0].split() == ["metric", "fog_mediated", "cloud_direct", "ratio"]
    assert table.to_csv().startswith("metric,fog_mediated,cloud_direct,ratio\n")


def test_compare_zero_denominator():
    a = {"workload_hash": "h", **{k: 0 for k in ("availability", "availability_during_outages",
                                                  "bytes_to_cloud", "wan_bytes", "cloud_bytes_stored")},
         "requests": {"issued": 1, "succeeded": 1, "failed": 0},
         "latency_ms": {"mean": 1.0, "p50": 1.0, "p95": 1.0}}
    b = json.loads(json.dumps(a))
    a["bytes_to_cloud"] = 5
    assert compare(a, b).ratio("bytes_to_cloud") == "inf"


def test_compare_rejects_different_workloads(pair):
    other = run_scenario(dataclasses.replace(small("fog_mediated", seed=9), clients=()))
    with pytest.raises(WorkloadMismatch):
        compare(pair[0], other)
