"""Overlay engine: point-in-polygon, clipping, layer intersection, attribute
joins, zonal statistics, classification and PPM map rendering.

Everything here is a pure function of its arguments. Boundary points count
as inside, and raster cells are assigned to zones by their center.
"""
from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Optional

from .errors import (
    DuplicateKey,
    KindMismatch,
    MissingAttr,
    MissingKey,
    NonConvexClip,
    OversizeImage,
)
from .geodata import (
    Catalog,
    Feature,
    GeoPoint,
    MultiPolygon,
    Polygon,
    RasterGrid,
    VectorLayer,
    bbox_intersects,
    geometry_bbox,
    make_vector_layer,
    polygons_of,
    ring_signed_area,
)

OUTSIDE, BOUNDARY, INSIDE = 0, 1, 2

MAX_IMAGE_SIDE = 4096
MAX_RASTER_CELLS = 4_000_000


# -- point in polygon ----------------------------------------------------------------

def locate_in_ring(ring, x: float, y: float) -> int:
    """OUTSIDE, BOUNDARY or INSIDE for a point against one closed ring (even-odd)."""
    inside = False
    n = len(ring)
    xj, yj = ring[-1]
    for i in range(n):
        xi, yi = ring[i]
        # exact on-segment test first so edges and vertices are stable
        if (min(xi, xj) <= x <= max(xi, xj) and min(yi, yj) <= y <= max(yi, yj)
                and (xj - xi) * (y - yi) - (yj - yi) * (x - xi) == 0):
            return BOUNDARY
        if (yi > y) != (yj > y):
            xcross = xi + (y - yi) * (xj - xi) / (yj - yi)
            if x < xcross:
                inside = not inside
        xj, yj = xi, yi
    return INSIDE if inside else OUTSIDE


def point_in_polygon(p, poly: Polygon) -> bool:
    x, y = p
    where = locate_in_ring(poly.exterior, x, y)
    if where == OUTSIDE:
        return False
    if where == BOUNDARY:
        return True
    # a point on a hole's edge is on the polygon boundary, hence inside
    return not any(locate_in_ring(h, x, y) == INSIDE for h in poly.holes)


def point_in_geometry(p, geom) -> bool:
    return any(point_in_polygon(p, poly) for poly in polygons_of(geom))


def _ring_crossings(ring, y):
    """Sorted x of edge crossings on the scanline, or None if y hits a vertex.

    Uses the same crossing expression as ``locate_in_ring`` so parity agrees.
    """
    xs = []
    xj, yj = ring[-1]
    for xi, yi in ring:
        if yi == y:
            return None
        if (yi > y) != (yj > y):
            xs.append(xi + (y - yi) * (xj - xi) / (yj - yi))
        xj, yj = xi, yi
    xs.sort()
    return xs


def _row_inside(geom, y, cols, xs) -> list:
    """Columns j in ``cols`` whose sample (xs[j], y) lies in ``geom``.

    Scanline parity per ring; samples within rounding of a crossing, and
    rows through a vertex, go to the exact point test.
    """
    rings = []
    for poly in polygons_of(geom):
        cr = [_ring_crossings(r, y) for r in poly.rings()]
        if any(c is None for c in cr):
            return [j for j in cols if point_in_geometry((xs[j], y), geom)]
        rings.append(cr)
    allc = sorted(c for cr in rings for ring in cr for c in ring)
    out = []
    for j in cols:
        x = xs[j]
        tol = 1e-9 * (1.0 + abs(x))
        k = bisect_left(allc, x)
        if (k < len(allc) and allc[k] - x <= tol) or (k > 0 and x - allc[k - 1] <= tol):
            if point_in_geometry((x, y), geom):
                out.append(j)
            continue
        for cr in rings:
            if (len(cr[0]) - bisect_right(cr[0], x)) % 2 == 1 and \
                    not any((len(h) - bisect_right(h, x)) % 2 == 1 for h in cr[1:]):
                out.append(j)
                break
    return out


def polygon_area(poly: Polygon) -> float:
    return abs(ring_signed_area(poly.exterior)) - sum(abs(ring_signed_area(h)) for h in poly.holes)


def geometry_area(geom) -> float:
    return sum(polygon_area(p) for p in polygons_of(geom))


# -- clipping ---------------------------------------------------------------------------

def is_convex(ring) -> bool:
    """True for a simple convex ring. Collinear vertices are tolerated."""
    n = len(ring)
    sign = 0
    turning = 0.0
    for i in range(n):
        ax, ay = ring[i - 1]
        bx, by = ring[i]
        cx, cy = ring[(i + 1) % n]
        ux, uy, vx, vy = bx - ax, by - ay, cx - bx, cy - by
        cross = ux * vy - uy * vx
        if cross != 0:
            s = 1 if cross > 0 else -1
            if sign and s != sign:
                return False
            sign = s
        turning += math.atan2(cross, ux * vx + uy * vy)
    # a star polygon turns the same way at every vertex but winds more than once
    return sign != 0 and abs(abs(turning) - 2 * math.pi) < 1e-6


def _dedupe(ring) -> list:
    out = []
    for p in ring:
        if not out or out[-1] != p:
            out.append(p)
    while len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return out


def _clip_ring(ring, clip_ccw) -> list:
    out = list(ring)
    n = len(clip_ccw)
    for i in range(n):
        if not out:
            return []
        ax, ay = clip_ccw[i]
        bx, by = clip_ccw[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        src, out = out, []
        sx, sy = src[-1]
        ds = ex * (sy - ay) - ey * (sx - ax)
        for px, py in src:
            dp = ex * (py - ay) - ey * (px - ax)
            if dp >= 0:
                if ds < 0:
                    t = ds / (ds - dp)
                    out.append(GeoPoint(sx + t * (px - sx), sy + t * (py - sy)))
                out.append(GeoPoint(px, py))
            elif ds >= 0:
                if ds > 0:
                    t = ds / (ds - dp)
                    out.append(GeoPoint(sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, ds = px, py, dp
    return _dedupe(out)


def _valid_ring(ring) -> bool:
    return len(set(ring)) >= 3 and ring_signed_area(ring) != 0.0


def clip_polygon(subject: Polygon, clip: Polygon) -> list:
    """Sutherland-Hodgman clip of ``subject`` by a convex ``clip`` polygon.

    Holes of the subject are clipped on their own and re-attached. Returns
    an empty list when nothing of positive area survives.
    """
    if clip.holes or not is_convex(clip.exterior):
        raise NonConvexClip("clip polygon must be convex and without holes")
    clip_ring = clip.exterior
    if ring_signed_area(clip_ring) < 0:
        clip_ring = tuple(reversed(clip_ring))
    ext = _clip_ring(subject.exterior, clip_ring)
    if not _valid_ring(ext):
        return []
    holes = []
    for h in subject.holes:
        ch = _clip_ring(h, clip_ring)
        if _valid_ring(ch):
            holes.append(tuple(ch))
    return [Polygon(tuple(ext), tuple(holes))]


# -- layer intersection -------------------------------------------------------------------

def _convex_operand(p: Polygon) -> bool:
    return not p.holes and is_convex(p.exterior)


def _bbox_overlap(a, b):
    return (max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3]))


def rasterized_intersection(pa: Polygon, pb: Polygon, resolution: float) -> list:
    """Approximate pa ∩ pb as rectangles of grid cells whose centers lie in both.

    The grid is anchored at the lower-left of the bbox overlap, so swapping
    the operands selects the same cells.
    """
    xmin, ymin, xmax, ymax = _bbox_overlap(pa.bbox, pb.bbox)
    ncols = max(1, math.ceil((xmax - xmin) / resolution))
    nrows = max(1, math.ceil((ymax - ymin) / resolution))
    if ncols * nrows > MAX_RASTER_CELLS:
        raise ValueError(f"resolution {resolution} needs {ncols * nrows} cells, limit {MAX_RASTER_CELLS}")
    rects = []
    for r in range(nrows):
        y = ymin + (r + 0.5) * resolution
        start = None
        for c in range(ncols + 1):
            hit = False
            if c < ncols:
                pt = (xmin + (c + 0.5) * resolution, y)
                hit = point_in_polygon(pt, pa) and point_in_polygon(pt, pb)
            if hit and start is None:
                start = c
            elif not hit and start is not None:
                x0, x1 = xmin + start * resolution, xmin + c * resolution
                y0, y1 = ymin + r * resolution, ymin + (r + 1) * resolution
                rects.append(Polygon((GeoPoint(x0, y0), GeoPoint(x1, y0), GeoPoint(x1, y1), GeoPoint(x0, y1))))
                start = None
    return rects


def intersect_polygons(pa: Polygon, pb: Polygon, resolution: float) -> list:
    if not bbox_intersects(pa.bbox, pb.bbox):
        return []
    if _convex_operand(pb):
        return clip_polygon(pa, pb)
    if _convex_operand(pa):
        return clip_polygon(pb, pa)
    return rasterized_intersection(pa, pb, resolution)


def _merge_properties(a: dict, b: dict, skip=()) -> dict:
    out = dict(a)
    for k, v in b.items():
        if k in skip:
            continue
        out[f"b_{k}" if k in a else k] = v
    return out


def _require_polygons(layer: VectorLayer, name: str):
    if layer.kind not in (None, "polygon"):
        raise KindMismatch(f"{name} must be a polygon layer, got {layer.kind}")


def intersect_layers(a: VectorLayer, b: VectorLayer, resolution: float) -> VectorLayer:
    """Pairwise intersection of two polygon layers.

    Exact clipping is used whenever one operand of a pair is convex; other
    pairs fall back to a raster approximation at ``resolution``. Pairs whose
    intersection has no area are omitted.
    """
    _require_polygons(a, "a")
    _require_polygons(b, "b")
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    out = []
    for fa in a.features:
        ba = geometry_bbox(fa.geometry)
        for fb in b.features:
            if not bbox_intersects(ba, geometry_bbox(fb.geometry)):
                continue
            pieces = []
            for pa in polygons_of(fa.geometry):
                for pb in polygons_of(fb.geometry):
                    pieces.extend(intersect_polygons(pa, pb, resolution))
            if not pieces:
                continue
            geom = pieces[0] if len(pieces) == 1 else MultiPolygon(tuple(pieces))
            props = _merge_properties(fa.properties, fb.properties)
            props["area"] = geometry_area(geom)
            out.append(Feature(geom, props))
    layer_id = f"{a.metadata.layer_id}_x_{b.metadata.layer_id}"[:64]
    sensitivity = max(a.metadata.sensitivity, b.metadata.sensitivity)
    return make_vector_layer(out, layer_id, sensitivity=sensitivity, owner=a.metadata.owner)


# -- attribute join ------------------------------------------------------------------------

def attribute_join(a: VectorLayer, b_table, key: str) -> VectorLayer:
    """Left join of a layer with a table of property rows on ``key``."""
    index = {}
    for row in b_table:
        if key not in row:
            raise MissingKey(f"join key {key!r} missing from table row {row!r}")
        if row[key] in index:
            raise DuplicateKey(row[key])
        index[row[key]] = row
    out = []
    for i, f in enumerate(a.features):
        if key not in f.properties:
            raise MissingKey(f"join key {key!r} missing from feature {i}")
        row = index.get(f.properties[key])
        if row is None:
            out.append(f)
        else:
            out.append(Feature(f.geometry, _merge_properties(f.properties, row, skip=(key,))))
    return VectorLayer(a.metadata, tuple(out))


# -- zonal statistics ----------------------------------------------------------------------

@dataclass(frozen=True)
class ZonalRow:
    feature_index: int
    zone: object
    count: int
    sum: Optional[float] = None
    mean: Optional[float] = None
    min: Optional[float] = None
    max: Optional[float] = None

    def to_dict(self) -> dict:
        return {"feature_index": self.feature_index, "zone": self.zone, "count": self.count,
                "sum": self.sum, "mean": self.mean, "min": self.min, "max": self.max}


def _index_range(lo: float, hi: float, n: int) -> range:
    # one cell of slack either side; membership is decided by the point test
    a = max(0, math.floor(lo) - 1)
    b = min(n - 1, math.ceil(hi) + 1)
    return range(a, b + 1)


def zonal_stats(r: RasterGrid, zones: VectorLayer, zone_attr: str) -> list:
    """Per-zone count/sum/mean/min/max over raster cells whose center is inside.

    Sums accumulate in row-major cell order so results are bit-reproducible.
    """
    _require_polygons(zones, "zones")
    rows = []
    cs = r.cellsize
    centers = [r.x_origin + (col + 0.5) * cs for col in range(r.ncols)]
    for idx, f in enumerate(zones.features):
        if zone_attr not in f.properties:
            raise MissingAttr(f"feature {idx} has no attribute {zone_attr!r}")
        xmin, ymin, xmax, ymax = geometry_bbox(f.geometry)
        cols = _index_range((xmin - r.x_origin) / cs - 0.5, (xmax - r.x_origin) / cs - 0.5, r.ncols)
        rws = _index_range(r.nrows - 0.5 - (ymax - r.y_origin) / cs,
                           r.nrows - 0.5 - (ymin - r.y_origin) / cs, r.nrows)
        cols = list(cols)
        count, total, lo, hi = 0, 0.0, math.inf, -math.inf
        for row in rws:
            y = r.y_origin + (r.nrows - row - 0.5) * cs
            base = row * r.ncols
            for col in _row_inside(f.geometry, y, cols, centers):
                v = r.cells[base + col]
                if v != r.nodata:
                    count += 1
                    total += v
                    lo = min(lo, v)
                    hi = max(hi, v)
        zone = f.properties[zone_attr]
        if count:
            rows.append(ZonalRow(idx, zone, count, total, total / count, lo, hi))
        else:
            rows.append(ZonalRow(idx, zone, 0))
    return rows


# -- classification --------------------------------------------------------------------------

SCHEMES = ("equal_interval", "quantile")


@dataclass(frozen=True)
class ClassBreaks:
    scheme: str
    breaks: tuple
    k: int
    degenerate: bool = False

    def class_of(self, value: float) -> int:
        """Class index in [0, k). A value equal to a break falls in the lower class."""
        return bisect_left(self.breaks, value)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "breaks": list(self.breaks), "k": self.k,
                "degenerate": self.degenerate}


def classify(values, k: int, scheme: str = "equal_interval") -> ClassBreaks:
    """Class breaks for ``values``.

    quantile breaks are nearest-rank order statistics: the i-th break is the
    value at 1-based rank ceil(i*n/k) of the sorted data. All-equal input
    collapses to a single class with ``degenerate`` set.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown classification scheme {scheme!r}")
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ValueError("k must be an integer >= 1")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("values must be non-empty")
    if not all(math.isfinite(v) for v in values):
        raise ValueError("values must be finite")
    lo, hi = min(values), max(values)
    if lo == hi:
        return ClassBreaks(scheme, (), 1, degenerate=k > 1)
    if scheme == "equal_interval":
        raw = [lo + i * (hi - lo) / k for i in range(1, k)]
    else:
        s = sorted(values)
        n = len(s)
        raw = [s[-(-i * n // k) - 1] for i in range(1, k)]
    breaks = []
    for b in raw:
        if not breaks or b > breaks[-1]:
            breaks.append(b)
    return ClassBreaks(scheme, tuple(breaks), len(breaks) + 1)


# -- rendering ----------------------------------------------------------------------------------

def _hex(c: str) -> tuple:
    c = c.lstrip("#")
    return tuple(int(c[i:i + 2], 16) for i in (0, 2, 4))


# sequential 4-class ramps, light to dark
RAMPS = {
    "reds": tuple(map(_hex, ("#FEE5D9", "#FCAE91", "#FB6A4A", "#CB181D"))),
    "blues": tuple(map(_hex, ("#EFF3FF", "#BDD7E7", "#6BAED6", "#2171B5"))),
    "greens": tuple(map(_hex, ("#EDF8E9", "#BAE4B3", "#74C476", "#238B45"))),
    "oranges": tuple(map(_hex, ("#FEEDDE", "#FDBE85", "#FD8D3C", "#D94701"))),
    "purples": tuple(map(_hex, ("#F2F0F7", "#CBC9E2", "#9E9AC8", "#6A51A3"))),
    "greys": tuple(map(_hex, ("#F7F7F7", "#CCCCCC", "#969696", "#525252"))),
}
BACKGROUND = (255, 255, 255)
OUTLINE = (64, 64, 64)
DEFAULT_FILL = (204, 204, 204)


@dataclass(frozen=True)
class Style:
    attribute: str
    ramp: str = "reds"
    k: int = 4
    scheme: str = "equal_interval"
    breaks: Optional[ClassBreaks] = None

    @classmethod
    def parse(cls, text: str) -> "Style":
        """``attr:ramp:k`` with ramp and k optional."""
        parts = text.split(":")
        if not parts[0] or len(parts) > 3:
            raise ValueError(f"style must look like attr:ramp:k, got {text!r}")
        ramp = parts[1] if len(parts) > 1 and parts[1] else "reds"
        try:
            k = int(parts[2]) if len(parts) > 2 else 4
        except ValueError:
            raise ValueError(f"style class count must be an integer, got {parts[2]!r}") from None
        return cls(parts[0], ramp, k)


@dataclass(frozen=True)
class MapRequest:
    layer_ids: tuple
    bbox: tuple
    width: int
    height: int
    style: Optional[Style] = None


def class_color(ramp, i: int, k: int) -> tuple:
    """Color of class i out of k, spread evenly along the ramp."""
    if k <= 1:
        return ramp[-1]
    pos = i * (len(ramp) - 1) / (k - 1)
    j = min(int(pos), len(ramp) - 2)
    frac = pos - j
    a, b = ramp[j], ramp[j + 1]
    return tuple(int(round(a[c] + (b[c] - a[c]) * frac)) for c in range(3))


def validate_map_request(req: MapRequest) -> None:
    if req.width > MAX_IMAGE_SIDE or req.height > MAX_IMAGE_SIDE:
        raise OversizeImage(f"image {req.width}x{req.height} exceeds {MAX_IMAGE_SIDE} per side")
    if req.width < 1 or req.height < 1:
        raise ValueError("width and height must be >= 1")
    xmin, ymin, xmax, ymax = req.bbox
    if not (xmin < xmax and ymin < ymax):
        raise ValueError(f"invalid bbox {req.bbox}")
    if req.style is not None:
        if req.style.ramp not in RAMPS:
            raise ValueError(f"unknown color ramp {req.style.ramp!r}")
        if req.style.k < 1:
            raise ValueError("style class count must be >= 1")


def _paint_raster(pixels, grid: RasterGrid, xs, ys, width):
    valid = [v for v in grid.cells if v != grid.nodata]
    if not valid:
        return
    lo, hi = min(valid), max(valid)
    span = hi - lo
    for i, y in enumerate(ys):
        row = grid.nrows - 1 - math.floor((y - grid.y_origin) / grid.cellsize)
        if not 0 <= row < grid.nrows:
            continue
        base = row * grid.ncols
        for j, x in enumerate(xs):
            col = math.floor((x - grid.x_origin) / grid.cellsize)
            if not 0 <= col < grid.ncols:
                continue
            v = grid.cells[base + col]
            if v == grid.nodata:
                continue
            g = 128 if span == 0 else int(round(255 * (v - lo) / span))
            pixels[i * width + j] = (g, g, g)


def _feature_colors(layer: VectorLayer, style: Optional[Style]) -> list:
    if style is None:
        return [DEFAULT_FILL] * len(layer.features)
    vals = [f.properties.get(style.attribute) for f in layer.features]
    nums = [v for v in vals if isinstance(v, (int, float))]
    if not nums:
        return [DEFAULT_FILL] * len(layer.features)
    cb = style.breaks or classify(nums, style.k, style.scheme)
    ramp = RAMPS[style.ramp]
    return [class_color(ramp, cb.class_of(v), cb.k) if isinstance(v, (int, float)) else DEFAULT_FILL
            for v in vals]


def _pixel_span(lo, hi, coords):
    """Indices of sample coordinates within [lo, hi]; coords are monotonic."""
    return [i for i, c in enumerate(coords) if lo <= c <= hi]


def _paint_vector(pixels, layer: VectorLayer, style, xs, ys, width, height):
    if layer.kind == "point":
        for f in layer.features:
            p = f.geometry
            j = _nearest(xs, p.x)
            i = _nearest(ys, p.y)
            if j is not None and i is not None:
                pixels[i * width + j] = OUTLINE
        return
    colors = _feature_colors(layer, style)
    owner = [-1] * (width * height)
    for idx, f in enumerate(layer.features):
        xmin, ymin, xmax, ymax = geometry_bbox(f.geometry)
        cols = _pixel_span(xmin, xmax, xs)
        if not cols:
            continue
        for i in _pixel_span(ymin, ymax, ys):
            base = i * width
            for j in _row_inside(f.geometry, ys[i], cols, xs):
                owner[base + j] = idx
    for i in range(height):
        for j in range(width):
            o = owner[i * width + j]
            if o < 0:
                continue
            edge = ((j > 0 and owner[i * width + j - 1] != o)
                    or (j < width - 1 and owner[i * width + j + 1] != o)
                    or (i > 0 and owner[(i - 1) * width + j] != o)
                    or (i < height - 1 and owner[(i + 1) * width + j] != o))
            pixels[i * width + j] = OUTLINE if edge else colors[o]


def _nearest(coords, v):
    """Index of the pixel whose span contains v, or None if off-image.

    ``coords`` are uniformly spaced pixel centers, ascending or descending.
    """
    n = len(coords)
    if n == 1:
        return 0
    k = math.floor((v - coords[0]) / (coords[1] - coords[0]) + 0.5)
    return k if 0 <= k < n else None


def render_map(req: MapRequest, catalog: Catalog) -> bytes:
    """Render layers bottom-to-top into an ASCII PPM (P3) image.

    Pixel (0, 0) is the top-left pixel; its upper-left corner sits at
    (bbox.xmin, bbox.ymax). Each pixel is sampled at its center.
    """
    validate_map_request(req)
    layers = [catalog.get(lid) for lid in req.layer_ids]
    w, h = req.width, req.height
    xmin, ymin, xmax, ymax = req.bbox
    xs = [xmin + (j + 0.5) * (xmax - xmin) / w for j in range(w)]
    ys = [ymax - (i + 0.5) * (ymax - ymin) / h for i in range(h)]
    pixels = [BACKGROUND] * (w * h)
    for layer in layers:
        if isinstance(layer, RasterGrid):
            _paint_raster(pixels, layer, xs, ys, w)
        else:
            _paint_vector(pixels, layer, req.style, xs, ys, w, h)
    out = [f"P3\n{w} {h}\n255\n"]
    out.extend(f"{r} {g} {b}\n" for r, g, b in pixels)
    return "".join(out).encode("ascii")
