"""Synthetic Maharashtra-style malaria dataset.

District polygons come from a jittered grid, so neighbours share edges
exactly and every district is a convex quadrilateral. The attribute schema
(district, year, positives, deaths) is this generator's own construction.
"""
from __future__ import annotations

import json
import math
import os
import random

from .geodata import (
    Feature,
    GeoPoint,
    Polygon,
    RasterGrid,
    VectorLayer,
    features_to_collection,
    make_vector_layer,
    serialize_raster_grid,
    with_raster_metadata,
)
from .overlay import point_in_polygon

DISTRICT_NAMES = (
    "Pune", "Mumbai", "Nagpur", "Thane", "Nashik", "Aurangabad", "Solapur", "Kolhapur",
    "Amravati", "Nanded", "Gadchiroli", "Chandrapur", "Latur", "Jalgaon", "Ahmednagar",
    "Satara", "Sangli", "Raigad", "Ratnagiri", "Sindhudurg", "Beed", "Osmanabad", "Parbhani",
    "Hingoli", "Jalna", "Buldhana", "Akola", "Washim", "Yavatmal", "Wardha", "Bhandara",
    "Gondia", "Dhule", "Nandurbar", "Palghar", "Mumbai Suburban",
)

CELL = 100.0
JITTER = 0.15
RASTER_SIDE = 100


def district_name(i: int) -> str:
    if i < len(DISTRICT_NAMES):
        return DISTRICT_NAMES[i]
    return f"District {i + 1}"


def grid_shape(n: int) -> tuple:
    cols = math.ceil(math.sqrt(n))
    return cols, math.ceil(n / cols)


def district_polygons(n: int, seed: int) -> list:
    """``n`` (name, Polygon) pairs tiling a jittered grid, row-major from the bottom."""
    if n < 1:
        raise ValueError("need at least one district")
    rng = random.Random(f"districts:{seed}")
    cols, rows = grid_shape(n)
    verts = {}
    for i in range(rows + 1):
        for j in range(cols + 1):
            x, y = j * CELL, i * CELL
            if 0 < i < rows and 0 < j < cols:
                x = round(x + rng.uniform(-JITTER, JITTER) * CELL, 3)
                y = round(y + rng.uniform(-JITTER, JITTER) * CELL, 3)
            verts[i, j] = GeoPoint(x, y)
    out = []
    for k in range(n):
        i, j = divmod(k, cols)
        ring = (verts[i, j], verts[i, j + 1], verts[i + 1, j + 1], verts[i + 1, j])
        out.append((district_name(k), Polygon(ring)))
    return out


def district_values(names, years, seed: int) -> dict:
    """{(district, year): (positives, deaths)} drawn deterministically from ``seed``."""
    rng = random.Random(f"values:{seed}")
    out = {}
    for name in names:
        base = rng.randint(200, 4000)
        for year in years:
            positives = max(1, int(base * rng.uniform(0.6, 1.4)))
            deaths = int(positives * rng.uniform(0.001, 0.02))
            out[name, year] = (positives, deaths)
    return out


def _year_layer(year, polys, values) -> VectorLayer:
    feats = []
    for name, poly in polys:
        positives, deaths = values[name, year]
        feats.append(Feature(poly, {"district": name, "year": year,
                                    "positives": positives, "deaths": deaths}))
    return make_vector_layer(feats, f"malaria_{year}", title=f"Malaria positives and deaths {year}")


def extent_of(polys) -> tuple:
    xs = [p.x for _, poly in polys for p in poly.exterior]
    ys = [p.y for _, poly in polys for p in poly.exterior]
    return (min(xs), min(ys), max(xs), max(ys))


def gradient_grid(extent, side: int = RASTER_SIDE) -> RasterGrid:
    """Square grid over ``extent`` whose cell (r, c) holds r*side + c."""
    xmin, ymin, xmax, ymax = extent
    cellsize = max(xmax - xmin, ymax - ymin) / side
    cells = tuple(float(r * side + c) for r in range(side) for c in range(side))
    grid = RasterGrid(side, side, xmin, ymin, cellsize, -9999.0, cells)
    return with_raster_metadata(grid, "base_grid", title="Base raster (gradient)")


def risk_zones(extent, seed: int, n: int = 4) -> VectorLayer:
    """Convex "high-risk zone" polygons: points at sorted angles on a circle."""
    rng = random.Random(f"zones:{seed}")
    xmin, ymin, xmax, ymax = extent
    w, h = xmax - xmin, ymax - ymin
    feats = []
    for z in range(n):
        cx = xmin + w * rng.uniform(0.3, 0.7)
        cy = ymin + h * rng.uniform(0.3, 0.7)
        radius = min(w, h) * rng.uniform(0.35, 0.5)
        angles = sorted(rng.uniform(0, 2 * math.pi) for _ in range(rng.randint(5, 9)))
        ring = tuple(GeoPoint(round(cx + radius * math.cos(a), 3), round(cy + radius * math.sin(a), 3))
                     for a in angles)
        feats.append(Feature(Polygon(ring), {"zone": f"zone_{z}", "risk": rng.randint(1, 5)}))
    return make_vector_layer(feats, "risk_zones", title="High-risk zones")


def case_reports(districts: VectorLayer, year: int, count: int, rng: random.Random,
                 prefix: str = "r") -> list:
    """Point case records scattered inside the district polygons."""
    out = []
    feats = districts.features
    for i in range(count):
        f = feats[rng.randrange(len(feats))]
        xmin, ymin, xmax, ymax = f.geometry.bbox
        while True:
            p = GeoPoint(round(rng.uniform(xmin, xmax), 3), round(rng.uniform(ymin, ymax), 3))
            if point_in_polygon(p, f.geometry):
                break
        out.append(Feature(p, {
            "report_id": f"{prefix}-{i}",
            "district": f.properties["district"],
            "year": year,
            "positives": 1,
            "deaths": 1 if rng.random() < 0.02 else 0,
            "age": rng.randint(1, 90),
            "sex": rng.choice("MF"),
        }))
    return out


class FixtureSet:
    """The generated dataset held in memory."""

    def __init__(self, years, districts: int, seed: int):
        self.years = list(years)
        self.seed = seed
        self.polys = district_polygons(districts, seed)
        self.names = [name for name, _ in self.polys]
        self.values = district_values(self.names, self.years, seed)
        self.extent = extent_of(self.polys)
        self.layers = {y: _year_layer(y, self.polys, self.values) for y in self.years}
        self.raster = gradient_grid(self.extent)

    def totals(self) -> dict:
        out = {}
        for y in self.years:
            out[str(y)] = {
                "positives": sum(self.values[n, y][0] for n in self.names),
                "deaths": sum(self.values[n, y][1] for n in self.names),
            }
        return out

    def manifest(self) -> dict:
        files = [{"file": f"maharashtra_malaria_{y}.json", "layer_id": f"malaria_{y}", "kind": "vector",
                  "year": y, "features": len(self.names)} for y in self.years]
        files.append({"file": "base_grid.asc", "layer_id": "base_grid", "kind": "raster",
                      "ncols": self.raster.ncols, "nrows": self.raster.nrows})
        return {
            "generator": "soafog fixture-gen",
            "seed": self.seed,
            "years": self.years,
            "districts": self.names,
            "extent": list(self.extent),
            "files": files,
            "totals": self.totals(),
            "values": {n: {str(y): {"positives": self.values[n, y][0], "deaths": self.values[n, y][1]}
                           for y in self.years} for n in self.names},
        }

    def write(self, out_dir) -> list:
        os.makedirs(out_dir, exist_ok=True)
        written = []
        for y, layer in self.layers.items():
            path = os.path.join(out_dir, f"maharashtra_malaria_{y}.json")
            doc = features_to_collection(layer.features, layer.metadata.layer_id)
            _write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
            written.append(path)
        path = os.path.join(out_dir, "base_grid.asc")
        _write(path, serialize_raster_grid(self.raster))
        written.append(path)
        path = os.path.join(out_dir, "manifest.json")
        _write(path, json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        written.append(path)
        return written


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def parse_years(text: str) -> list:
    """'2011-2014' -> [2011, 2012, 2013, 2014]; a single year is allowed."""
    parts = text.split("-")
    try:
        if len(parts) == 1:
            return [int(parts[0])]
        if len(parts) == 2:
            a, b = int(parts[0]), int(parts[1])
            if a <= b:
                return list(range(a, b + 1))
    except ValueError:
        pass
    raise ValueError(f"years must look like A-B with A <= B, got {text!r}")
