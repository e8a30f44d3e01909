"""Vector and raster layers: parsing, validation, bounding boxes and the
layer catalog.

Coordinates are planar map units. Rings are stored unclosed; a closing
vertex equal to the first is dropped on parse.
"""
from __future__ import annotations

import json
import math
import os
import re
import threading
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import NamedTuple, Optional, Union

from .errors import EmptyLayer, LayerSyntaxError, UnknownLayer, ValidationError
from .security import SensitivityLabel

LAYER_ID_RE = re.compile(r"^[a-z0-9_-]{1,64}$")

BBox = tuple  # (xmin, ymin, xmax, ymax)


class GeoPoint(NamedTuple):
    x: float
    y: float


Ring = tuple  # tuple[GeoPoint, ...], implicitly closed


def ring_signed_area(ring) -> float:
    n = len(ring)
    s = 0.0
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s / 2.0


@dataclass(frozen=True)
class Polygon:
    exterior: Ring
    holes: tuple = ()

    @classmethod
    def from_coords(cls, exterior, holes=()) -> "Polygon":
        """Build and validate a polygon from [x, y] sequences."""
        return cls(_make_ring(exterior), tuple(_make_ring(h) for h in holes)).validated()

    def validated(self) -> "Polygon":
        for ring in (self.exterior, *self.holes):
            if len(set(ring)) < 3:
                raise ValidationError("ring needs at least 3 distinct vertices")
        if ring_signed_area(self.exterior) == 0.0:
            raise ValidationError("exterior ring has zero area")
        return self

    def rings(self):
        return (self.exterior, *self.holes)

    @property
    def bbox(self) -> BBox:
        xs = [p[0] for r in self.rings() for p in r]
        ys = [p[1] for r in self.rings() for p in r]
        return (min(xs), min(ys), max(xs), max(ys))


@dataclass(frozen=True)
class MultiPolygon:
    polygons: tuple

    @property
    def bbox(self) -> BBox:
        return union_bbox(p.bbox for p in self.polygons)


Geometry = Union[GeoPoint, Polygon, MultiPolygon]


def geometry_kind(geom) -> str:
    """'point' or 'polygon'. Polygon and MultiPolygon share the polygon kind."""
    if isinstance(geom, GeoPoint):
        return "point"
    if isinstance(geom, (Polygon, MultiPolygon)):
        return "polygon"
    raise TypeError(f"not a geometry: {geom!r}")


def geometry_bbox(geom) -> BBox:
    if isinstance(geom, GeoPoint):
        return (geom.x, geom.y, geom.x, geom.y)
    return geom.bbox


def polygons_of(geom) -> tuple:
    if isinstance(geom, Polygon):
        return (geom,)
    if isinstance(geom, MultiPolygon):
        return geom.polygons
    return ()


@dataclass(frozen=True)
class Feature:
    geometry: Geometry
    properties: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LayerMetadata:
    layer_id: str
    title: str
    kind: str  # "vector" | "raster"
    bbox: Optional[BBox]
    temporal_extent: Optional[tuple] = None
    sensitivity: SensitivityLabel = SensitivityLabel.PUBLIC
    owner: str = "system"

    def __post_init__(self):
        if not LAYER_ID_RE.match(self.layer_id):
            raise ValidationError(f"invalid layer_id {self.layer_id!r}")
        if self.kind not in ("vector", "raster"):
            raise ValidationError(f"invalid layer kind {self.kind!r}")
        if self.bbox is not None:
            xmin, ymin, xmax, ymax = self.bbox
            if xmin > xmax or ymin > ymax:
                raise ValidationError(f"invalid bbox {self.bbox}")

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "title": self.title,
            "kind": self.kind,
            "bbox": list(self.bbox) if self.bbox is not None else None,
            "temporal_extent": list(self.temporal_extent) if self.temporal_extent else None,
            "sensitivity": self.sensitivity.label,
            "owner": self.owner,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerMetadata":
        return cls(
            layer_id=d["layer_id"],
            title=d.get("title", d["layer_id"]),
            kind=d["kind"],
            bbox=tuple(d["bbox"]) if d.get("bbox") is not None else None,
            temporal_extent=tuple(d["temporal_extent"]) if d.get("temporal_extent") else None,
            sensitivity=SensitivityLabel.parse(d.get("sensitivity", "public")),
            owner=d.get("owner", "system"),
        )


@dataclass(frozen=True)
class VectorLayer:
    metadata: LayerMetadata
    features: tuple

    @property
    def kind(self) -> Optional[str]:
        """Geometry kind shared by every feature, None for an empty layer."""
        return geometry_kind(self.features[0].geometry) if self.features else None

    @property
    def layer_id(self) -> str:
        return self.metadata.layer_id


@dataclass(frozen=True)
class RasterGrid:
    ncols: int
    nrows: int
    x_origin: float
    y_origin: float
    cellsize: float
    nodata: float
    cells: tuple  # row-major, top row first
    metadata: Optional[LayerMetadata] = None

    def cell(self, row: int, col: int) -> float:
        return self.cells[row * self.ncols + col]

    def cell_center(self, row: int, col: int) -> GeoPoint:
        return GeoPoint(self.x_origin + (col + 0.5) * self.cellsize,
                        self.y_origin + (self.nrows - row - 0.5) * self.cellsize)

    @property
    def layer_id(self) -> Optional[str]:
        return self.metadata.layer_id if self.metadata else None


Layer = Union[VectorLayer, RasterGrid]


# -- parsing ---------------------------------------------------------------------------

def _num(v, what, index) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise LayerSyntaxError(f"{what} must be a number", index)
    f = float(v)
    if not math.isfinite(f):
        raise ValidationError(f"non-finite number in {what}", index)
    return f


def _point(c, index) -> GeoPoint:
    if not isinstance(c, (list, tuple)) or len(c) < 2:
        raise LayerSyntaxError("coordinate must be an [x, y] pair", index)
    return GeoPoint(_num(c[0], "coordinate", index), _num(c[1], "coordinate", index))


def _make_ring(coords, index=None) -> Ring:
    if not isinstance(coords, (list, tuple)):
        raise LayerSyntaxError("ring must be a list of coordinates", index)
    pts = [_point(c, index) for c in coords]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts.pop()
    if len(set(pts)) < 3:
        raise ValidationError("ring needs at least 3 distinct vertices", index)
    return tuple(pts)


def _polygon(coords, index) -> Polygon:
    if not isinstance(coords, list) or not coords:
        raise LayerSyntaxError("polygon needs at least one ring", index)
    rings = [_make_ring(r, index) for r in coords]
    poly = Polygon(rings[0], tuple(rings[1:]))
    if ring_signed_area(poly.exterior) == 0.0:
        raise ValidationError("exterior ring has zero area", index)
    return poly


def _geometry(g, index) -> Geometry:
    if not isinstance(g, dict) or "coordinates" not in g:
        raise LayerSyntaxError("geometry must be an object with coordinates", index)
    t = g.get("type")
    c = g["coordinates"]
    if t == "Point":
        return _point(c, index)
    if t == "Polygon":
        return _polygon(c, index)
    if t == "MultiPolygon":
        if not isinstance(c, list) or not c:
            raise LayerSyntaxError("multipolygon needs at least one polygon", index)
        return MultiPolygon(tuple(_polygon(p, index) for p in c))
    raise LayerSyntaxError(f"unsupported geometry type {t!r}", index)


def _properties(props, index) -> dict:
    if props is None:
        return {}
    if not isinstance(props, dict):
        raise LayerSyntaxError("properties must be an object", index)
    out = {}
    for k, v in props.items():
        if isinstance(v, str):
            out[k] = v
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            if not math.isfinite(v):
                raise ValidationError(f"non-finite value for property {k!r}", index)
            out[k] = v
        else:
            raise ValidationError(f"property {k!r} must be a string or number", index)
    return out


def _reject_duplicate_keys(pairs):
    d = {}
    for k, v in pairs:
        if k in d:
            raise LayerSyntaxError(f"duplicate member {k!r}")
        d[k] = v
    return d


def parse_features(doc) -> tuple:
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise LayerSyntaxError("document must be a FeatureCollection")
    feats = doc.get("features")
    if not isinstance(feats, list):
        raise LayerSyntaxError("FeatureCollection needs a features array")
    out = []
    kind = None
    for i, f in enumerate(feats):
        if not isinstance(f, dict) or f.get("type") != "Feature":
            raise LayerSyntaxError("expected a Feature object", i)
        geom = _geometry(f.get("geometry"), i)
        k = geometry_kind(geom)
        if kind is None:
            kind = k
        elif k != kind:
            raise ValidationError(f"mixed geometry kinds ({kind} and {k})", i)
        out.append(Feature(geom, _properties(f.get("properties"), i)))
    return tuple(out)


def parse_vector_layer(text, layer_id: Optional[str] = None, *, title: Optional[str] = None,
                       sensitivity=SensitivityLabel.PUBLIC, owner: str = "system") -> VectorLayer:
    """Parse a GeoJSON FeatureCollection into a validated layer.

    The layer id comes from ``layer_id``, else the document's ``name`` member,
    else ``"layer"``.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise LayerSyntaxError(f"invalid JSON: {exc}") from None
    features = parse_features(doc)
    layer_id = layer_id or doc.get("name") or "layer"
    return make_vector_layer(features, layer_id, title=title, sensitivity=sensitivity, owner=owner)


def make_vector_layer(features, layer_id, *, title=None, sensitivity=SensitivityLabel.PUBLIC,
                      owner="system") -> VectorLayer:
    features = tuple(features)
    bbox = union_bbox(geometry_bbox(f.geometry) for f in features) if features else None
    years = [f.properties["year"] for f in features
             if isinstance(f.properties.get("year"), (int, float))]
    temporal = (int(min(years)), int(max(years))) if years else None
    meta = LayerMetadata(layer_id, title or layer_id, "vector", bbox, temporal,
                         SensitivityLabel.parse(sensitivity), owner)
    return VectorLayer(meta, features)


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def parse_raster_grid(text, layer_id: Optional[str] = None, *, title=None,
                      sensitivity=SensitivityLabel.PUBLIC, owner="system") -> RasterGrid:
    """Parse an ASCII grid: six ``key value`` header lines then cell values, top row first."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = text.splitlines()
    if len(lines) < 6:
        raise LayerSyntaxError("ASCII grid needs six header lines")
    header = {}
    for expected, line in zip(_HEADER_KEYS, lines[:6]):
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() != expected:
            raise LayerSyntaxError(f"expected header {expected!r}, got {line.strip()!r}")
        try:
            header[expected] = float(parts[1])
        except ValueError:
            raise LayerSyntaxError(f"bad value for {expected}: {parts[1]!r}") from None
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise ValidationError("ncols and nrows must be positive integers")
    if not header["cellsize"] > 0:
        raise ValidationError("cellsize must be > 0")
    for k, v in header.items():
        if not math.isfinite(v):
            raise ValidationError(f"non-finite header value {k}")
    try:
        cells = tuple(float(tok) for tok in " ".join(lines[6:]).split())
    except ValueError as exc:
        raise LayerSyntaxError(f"bad cell value: {exc}") from None
    ncols, nrows = int(ncols), int(nrows)
    if len(cells) != ncols * nrows:
        raise ValidationError(f"expected {ncols * nrows} cells, found {len(cells)}")
    grid = RasterGrid(ncols, nrows, header["xllcorner"], header["yllcorner"], header["cellsize"],
                      header["nodata_value"], cells)
    if layer_id is not None:
        grid = with_raster_metadata(grid, layer_id, title=title, sensitivity=sensitivity, owner=owner)
    return grid


def with_raster_metadata(grid: RasterGrid, layer_id, *, title=None,
                         sensitivity=SensitivityLabel.PUBLIC, owner="system") -> RasterGrid:
    meta = LayerMetadata(layer_id, title or layer_id, "raster", layer_bbox(grid), None,
                         SensitivityLabel.parse(sensitivity), owner)
    return replace(grid, metadata=meta)


# -- serialization ------------------------------------------------------------------------

def _coord(p):
    return [p[0], p[1]]


def geometry_to_dict(g) -> dict:
    if isinstance(g, GeoPoint):
        return {"type": "Point", "coordinates": _coord(g)}
    if isinstance(g, Polygon):
        return {"type": "Polygon", "coordinates": [[_coord(p) for p in r] for r in g.rings()]}
    return {"type": "MultiPolygon",
            "coordinates": [[[_coord(p) for p in r] for r in poly.rings()] for poly in g.polygons]}


def feature_to_dict(f: Feature) -> dict:
    return {"type": "Feature", "geometry": geometry_to_dict(f.geometry), "properties": dict(f.properties)}


def features_to_collection(features, name=None) -> dict:
    doc = {"type": "FeatureCollection"}
    if name is not None:
        doc["name"] = name
    doc["features"] = [feature_to_dict(f) for f in features]
    return doc


def serialize_vector_layer(layer: VectorLayer) -> str:
    """Canonical compact GeoJSON text. Rings are written unclosed."""
    doc = features_to_collection(layer.features, layer.metadata.layer_id)
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_raster_grid(grid: RasterGrid) -> str:
    out = [f"ncols {grid.ncols}", f"nrows {grid.nrows}", f"xllcorner {_fmt(grid.x_origin)}",
           f"yllcorner {_fmt(grid.y_origin)}", f"cellsize {_fmt(grid.cellsize)}",
           f"nodata_value {_fmt(grid.nodata)}"]
    for r in range(grid.nrows):
        row = grid.cells[r * grid.ncols:(r + 1) * grid.ncols]
        out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def serialize_layer(layer: Layer) -> str:
    if isinstance(layer, RasterGrid):
        return serialize_raster_grid(layer)
    return serialize_vector_layer(layer)


def layer_size_bytes(layer: Layer) -> int:
    return len(serialize_layer(layer).encode("utf-8"))


# -- bounding boxes --------------------------------------------------------------------------

def union_bbox(boxes) -> BBox:
    boxes = list(boxes)
    if not boxes:
        raise EmptyLayer("no geometry")
    return (min(b[0] for b in boxes), min(b[1] for b in boxes),
            max(b[2] for b in boxes), max(b[3] for b in boxes))


def bbox_intersects(a: BBox, b: BBox) -> bool:
    """Closed-rectangle intersection test (touching counts)."""
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


def layer_bbox(layer: Layer) -> BBox:
    if isinstance(layer, RasterGrid):
        return (layer.x_origin, layer.y_origin,
                layer.x_origin + layer.ncols * layer.cellsize,
                layer.y_origin + layer.nrows * layer.cellsize)
    if not layer.features:
        raise EmptyLayer(f"layer {layer.metadata.layer_id} has no features")
    return union_bbox(geometry_bbox(f.geometry) for f in layer.features)


def parse_bbox(text: str) -> BBox:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValueError(f"bbox must be four numbers, got {text!r}") from None
    if len(parts) != 4 or not all(math.isfinite(v) for v in parts):
        raise ValueError(f"bbox must be four finite numbers, got {text!r}")
    if parts[0] >= parts[2] or parts[1] >= parts[3]:
        raise ValueError(f"bbox needs xmin<xmax and ymin<ymax, got {text!r}")
    return tuple(parts)


# -- catalog ------------------------------------------------------------------------------------

def metadata_of(layer: Layer) -> LayerMetadata:
    meta = layer.metadata
    if meta is None:
        raise ValidationError("layer has no metadata")
    return meta


class Catalog:
    """Layer metadata plus payloads.

    Writers build a new (entries, payloads) pair and swap it in under a lock,
    so readers take one reference and always see a whole registration.
    """

    def __init__(self):
        self._state = (MappingProxyType({}), MappingProxyType({}))
        self._lock = threading.Lock()

    @property
    def entries(self):
        return self._state[0]

    @property
    def payloads(self):
        return self._state[1]

    def register(self, layer: Layer) -> LayerMetadata:
        meta = metadata_of(layer)
        with self._lock:
            entries, payloads = (dict(m) for m in self._state)
            entries[meta.layer_id] = meta
            payloads[meta.layer_id] = layer
            self._state = (MappingProxyType(entries), MappingProxyType(payloads))
        return meta

    def remove(self, layer_id: str) -> Layer:
        with self._lock:
            entries, payloads = (dict(m) for m in self._state)
            if layer_id not in entries:
                raise UnknownLayer(layer_id)
            entries.pop(layer_id)
            layer = payloads.pop(layer_id)
            self._state = (MappingProxyType(entries), MappingProxyType(payloads))
        return layer

    def get(self, layer_id: str) -> Layer:
        try:
            return self._state[1][layer_id]
        except KeyError:
            raise UnknownLayer(layer_id) from None

    def __contains__(self, layer_id) -> bool:
        return layer_id in self._state[0]

    def __len__(self) -> int:
        return len(self._state[0])

    # -- disk layout: DIR/catalog.json + one payload file per layer --

    @staticmethod
    def payload_filename(meta: LayerMetadata) -> str:
        return f"{meta.layer_id}.{'asc' if meta.kind == 'raster' else 'geojson'}"

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        entries, payloads = self._state
        for lid, layer in payloads.items():
            _atomic_write(os.path.join(directory, self.payload_filename(entries[lid])), serialize_layer(layer))
        index = {"layers": [entries[k].to_dict() for k in sorted(entries)]}
        _atomic_write(os.path.join(directory, "catalog.json"),
                      json.dumps(index, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "Catalog":
        cat = cls()
        path = os.path.join(directory, "catalog.json")
        if not os.path.exists(path):
            return cat
        with open(path, encoding="utf-8") as fh:
            index = json.load(fh)
        for d in index.get("layers", []):
            meta = LayerMetadata.from_dict(d)
            with open(os.path.join(directory, cls.payload_filename(meta)), encoding="utf-8") as fh:
                text = fh.read()
            if meta.kind == "raster":
                layer = replace(parse_raster_grid(text), metadata=meta)
            else:
                layer = VectorLayer(meta, parse_vector_layer(text, meta.layer_id).features)
            cat.register(layer)
        return cat


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def catalog_query(catalog: Catalog, kind: Optional[str] = None, bbox: Optional[BBox] = None,
                  year: Optional[int] = None, text: Optional[str] = None) -> list:
    """Entries matching every given predicate, sorted by layer_id.

    ``bbox`` matches by intersection, ``year`` by temporal extent, ``text`` by
    case-insensitive substring of id or title.
    """
    out = []
    for lid in sorted(catalog.entries):
        m = catalog.entries[lid]
        if kind is not None and m.kind != kind:
            continue
        if bbox is not None and (m.bbox is None or not bbox_intersects(m.bbox, bbox)):
            continue
        if year is not None and (m.temporal_extent is None
                                 or not m.temporal_extent[0] <= year <= m.temporal_extent[1]):
            continue
        if text is not None and text.lower() not in (m.layer_id + " " + m.title).lower():
            continue
        out.append(m)
    return out
