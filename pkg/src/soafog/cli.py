"""``soa-fog`` command line."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from urllib import error as urlerror
from urllib import request as urlrequest

from . import __version__
from .cloudtier import CloudStore, handle_cloud_request, load_cloud_config
from .errors import SoaFogError
from .fixtures import FixtureSet, parse_years
from .fogtier import FogConfig, Flusher, HttpCloudClient, build_node, handle_request
from .geodata import Catalog, parse_bbox, parse_raster_grid, parse_vector_layer, union_bbox, layer_bbox
from .overlay import MapRequest, Style, render_map
from .security import PolicyChange, PolicyStore, SensitivityLabel, apply_change
from .service import parse_listen, serve
from .simnet import MetricsReport, ScenarioConfig, compare, run_scenario

log = logging.getLogger("soafog")


def _write_bytes(path, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- subcommands ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    catalog = Catalog.load(args.catalog)
    with open(args.file, encoding="utf-8") as fh:
        text = fh.read()
    label = SensitivityLabel.parse(args.sensitivity)
    if args.file.endswith(".asc"):
        lid = args.layer_id or os.path.splitext(os.path.basename(args.file))[0]
        layer = parse_raster_grid(text, lid, sensitivity=label)
    else:
        layer = parse_vector_layer(text, args.layer_id, sensitivity=label)
    catalog.register(layer)
    catalog.save(args.catalog)
    print(layer.metadata.layer_id)
    return 0


def _serve_until_interrupt(server, what) -> None:
    log.info("%s listening on %s:%d", what, *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_serve_fog(args) -> int:
    config = FogConfig.load(args.config)
    node = build_node(config)
    flusher = None
    if config.cloud_url:
        flusher = Flusher(node, HttpCloudClient(config.cloud_url))
        flusher.start()
    host, port = parse_listen(config.listen)
    _serve_until_interrupt(serve(lambda req: handle_request(node, req), host, port), "fog node")
    if flusher:
        flusher.stop_event.set()
    return 0


def cmd_serve_cloud(args) -> int:
    cfg = load_cloud_config(args.config)
    store_path = cfg["store_path"]
    if store_path and not os.path.isabs(store_path):
        store_path = os.path.join(os.path.dirname(os.path.abspath(args.config)), store_path)
    store = CloudStore(store_path, cfg["nodes"])
    host, port = parse_listen(cfg["listen"])
    _serve_until_interrupt(serve(lambda req: handle_cloud_request(store, req), host, port), "cloud")
    return 0


def _load_policy(path) -> PolicyStore:
    return PolicyStore.load(path) if os.path.exists(path) else PolicyStore()


def cmd_user(args) -> int:
    store = _load_policy(args.policy)
    if args.user_cmd == "add":
        change = PolicyChange("add_principal", principal_id=args.id, secret=args.secret,
                              roles=tuple(r for r in args.roles.split(",") if r),
                              display_name=args.name, label=args.clearance)
        apply_change(store, change)
    elif args.user_cmd == "grant":
        apply_change(store, PolicyChange("grant_role", principal_id=args.id, role=args.role))
    else:
        apply_change(store, PolicyChange("set_clearance", principal_id=args.id, label=args.label))
    store.save(args.policy)
    print(args.id)
    return 0


def cmd_request(args) -> int:
    data = None
    if args.data is not None:
        if args.data.startswith("@"):
            with open(args.data[1:], "rb") as fh:
                data = fh.read()
        else:
            data = args.data.encode("utf-8")
    method = args.method or ("POST" if data is not None else "GET")
    headers = {"Content-Type": "application/json"} if data is not None else {}
    if args.token:
        headers["Authorization"] = f"Bearer {args.token}"
    req = urlrequest.Request(args.url, data=data, method=method, headers=headers)
    try:
        with urlrequest.urlopen(req, timeout=args.timeout) as resp:
            status, body = resp.status, resp.read()
    except urlerror.HTTPError as exc:
        status, body = exc.code, exc.read()
    except urlerror.URLError as exc:
        raise OSError(f"cannot reach {args.url}: {exc.reason}") from None
    if args.out:
        _write_bytes(args.out, body)
    else:
        sys.stdout.write(body.decode("utf-8", errors="replace"))
        if not body.endswith(b"\n"):
            sys.stdout.write("\n")
    if status >= 400:
        print(f"error: HTTP {status}", file=sys.stderr)
        return 1
    return 0


def cmd_render(args) -> int:
    catalog = Catalog.load(args.catalog)
    layer_ids = [s for s in args.layers.split(",") if s]
    layers = [catalog.get(lid) for lid in layer_ids]
    bbox = parse_bbox(args.bbox) if args.bbox else union_bbox(layer_bbox(layer) for layer in layers)
    style = Style.parse(args.style) if args.style else None
    img = render_map(MapRequest(tuple(layer_ids), bbox, args.width, args.height, style), catalog)
    _write_bytes(args.out, img)
    return 0


def cmd_simulate(args) -> int:
    cfg = ScenarioConfig.load(args.scenario)
    if args.topology:
        cfg = ScenarioConfig.from_dict(dict(cfg.to_dict(), topology=args.topology))
    report = run_scenario(cfg)
    _write_bytes(args.out, report.to_json())
    _write_bytes(os.path.splitext(args.out)[0] + ".csv", report.to_csv().encode("utf-8"))
    d = report.data
    print(f"{d['topology']}: issued={d['requests']['issued']} succeeded={d['requests']['succeeded']} "
          f"availability={d['availability']} bytes_to_cloud={d['bytes_to_cloud']}")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in (args.a, args.b):
        with open(path, encoding="utf-8") as fh:
            reports.append(MetricsReport.from_json(fh.read()))
    table = compare(*reports)
    sys.stdout.write(table.to_text())
    if args.csv:
        _write_bytes(args.csv, table.to_csv().encode("utf-8"))
    return 0


def cmd_fixture_gen(args) -> int:
    fx = FixtureSet(parse_years(args.years), args.districts, args.seed)
    for path in fx.write(args.out):
        print(path)
    return 0


# -- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soa-fog", description="Secure fog node, cloud store and simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("ingest", help="add a GeoJSON or ASCII-grid file to a catalog directory")
    s.add_argument("--catalog", required=True)
    s.add_argument("--file", required=True)
    s.add_argument("--sensitivity", default="public", choices=[x.label for x in SensitivityLabel])
    s.add_argument("--layer-id")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("serve-fog", help="run a fog node")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_serve_fog)

    s = sub.add_parser("serve-cloud", help="run the cloud store")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_serve_cloud)

    s = sub.add_parser("user", help="edit a policy file offline")
    usub = s.add_subparsers(dest="user_cmd", required=True, metavar="ACTION")
    u = usub.add_parser("add")
    u.add_argument("--policy", required=True)
    u.add_argument("--id", required=True)
    u.add_argument("--secret", required=True)
    u.add_argument("--roles", required=True, help="comma-separated roles")
    u.add_argument("--name")
    u.add_argument("--clearance", choices=[x.label for x in SensitivityLabel])
    u = usub.add_parser("grant")
    u.add_argument("--policy", required=True)
    u.add_argument("--id", required=True)
    u.add_argument("--role", required=True)
    u = usub.add_parser("set-clearance")
    u.add_argument("--policy", required=True)
    u.add_argument("--id", required=True)
    u.add_argument("--label", required=True, choices=[x.label for x in SensitivityLabel])
    s.set_defaults(func=cmd_user)

    s = sub.add_parser("request", help="send one HTTP request to a running service")
    s.add_argument("--url", required=True)
    s.add_argument("--token")
    s.add_argument("--method")
    s.add_argument("--data", help="request body, or @file")
    s.add_argument("--out")
    s.add_argument("--timeout", type=float, default=30.0)
    s.set_defaults(func=cmd_request)

    s = sub.add_parser("render", help="render catalog layers to a PPM image")
    s.add_argument("--catalog", required=True)
    s.add_argument("--layers", required=True)
    s.add_argument("--bbox")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--style", help="attr:ramp:k")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("simulate", help="run a scenario and write a metrics report")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--topology", choices=["fog_mediated", "cloud_direct"],
                   help="override the scenario's topology")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", help="compare two metrics reports")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("fixture-gen", help="write the synthetic malaria dataset")
    s.add_argument("--years", default="2011-2014")
    s.add_argument("--districts", type=int, default=6)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fixture_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SoaFogError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
