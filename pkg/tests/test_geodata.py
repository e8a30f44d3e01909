import json
import threading

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from soafog.errors import EmptyLayer, LayerSyntaxError, UnknownLayer, ValidationError
from soafog.geodata import (
    Catalog,
    GeoPoint,
    LayerMetadata,
    Polygon,
    catalog_query,
    layer_bbox,
    make_vector_layer,
    parse_bbox,
    parse_raster_grid,
    parse_vector_layer,
    serialize_raster_grid,
    serialize_vector_layer,
    with_raster_metadata,
)
from soafog.security import SensitivityLabel

UNIT_SQUARE = {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]]}


def fc(*features, **extra):
    doc = {"type": "FeatureCollection", "features": list(features)}
    doc.update(extra)
    return json.dumps(doc)


def feat(geometry, **props):
    return {"type": "Feature", "geometry": geometry, "properties": props}


# -- vector parsing -------------------------------------------------------------------------------

def test_unit_square_layer():
    layer = parse_vector_layer(fc(feat(UNIT_SQUARE, positives=4)), "sq")
    assert len(layer.features) == 1
    assert layer.metadata.bbox == (0, 0, 1, 1)
    assert layer.features[0].properties == {"positives": 4}
    # closing vertex dropped; rings are stored unclosed
    assert layer.features[0].geometry.exterior == (GeoPoint(0, 0), GeoPoint(1, 0), GeoPoint(1, 1), GeoPoint(0, 1))


def test_empty_collection_has_no_bbox_until_requested():
    layer = parse_vector_layer(fc(), "empty")
    assert layer.features == () and layer.metadata.bbox is None
    with pytest.raises(EmptyLayer):
        layer_bbox(layer)


def test_fixture_file_parses_field_by_field(fx, tmp_path):
    fx.write(tmp_path)
    layer = parse_vector_layer((tmp_path / "maharashtra_malaria_2011.json").read_text())
    assert layer.metadata.layer_id == "malaria_2011"
    assert len(layer.features) == 6
    for f, (name, poly) in zip(layer.features, fx.polys):
        positives, deaths = fx.values[name, 2011]
        assert f.properties == {"district": name, "year": 2011, "positives": positives, "deaths": deaths}
        assert f.geometry == poly


@pytest.mark.parametrize("text", [
    "{not json",
    json.dumps({"type": "Feature"}),
    json.dumps({"type": "FeatureCollection"}),
    '{"type": "FeatureCollection", "type": "FeatureCollection", "features": []}',
])
def test_syntax_errors(text):
    with pytest.raises(LayerSyntaxError):
        parse_vector_layer(text)


def test_errors_name_the_feature_index():
    two_point = {"type": "Polygon", "coordinates": [[[0, 0], [1, 1], [0, 0]]]}
    with pytest.raises(ValidationError) as e:
        parse_vector_layer(fc(feat(UNIT_SQUARE), feat(two_point)))
    assert e.value.feature_index == 1 and "feature 1" in str(e.value)
    with pytest.raises(LayerSyntaxError) as e:
        parse_vector_layer(fc(feat({"type": "Point", "coordinates": ["a", 1]})))
    assert e.value.feature_index == 0


def test_mixed_kinds_and_non_finite_are_validation_errors():
    with pytest.raises(ValidationError):
        parse_vector_layer(fc(feat(UNIT_SQUARE), feat({"type": "Point", "coordinates": [0, 0]})))
    with pytest.raises(ValidationError):
        parse_vector_layer(fc(feat(UNIT_SQUARE, v=1e400)))
    with pytest.raises(ValidationError):
        parse_vector_layer('{"type":"FeatureCollection","features":[{"type":"Feature",'
                           '"geometry":{"type":"Point","coordinates":[NaN,0]},"properties":{}}]}')
    with pytest.raises(ValidationError):
        parse_vector_layer(fc(feat(UNIT_SQUARE, flag=True)))


def test_zero_area_exterior_rejected():
    flat = {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [2, 0]]]}
    with pytest.raises(ValidationError):
        parse_vector_layer(fc(feat(flat)))


def test_multipolygon_and_polygon_share_a_layer():
    multi = {"type": "MultiPolygon", "coordinates": [UNIT_SQUARE["coordinates"],
                                                     [[[5, 5], [6, 5], [6, 6]]]]}
    layer = parse_vector_layer(fc(feat(UNIT_SQUARE), feat(multi)), "m")
    assert layer.kind == "polygon"
    assert layer.metadata.bbox == (0, 0, 6, 6)


def test_layer_id_rules():
    with pytest.raises(ValidationError):
        parse_vector_layer(fc(), "Bad Id!")
    assert parse_vector_layer(fc(name="from_doc")).metadata.layer_id == "from_doc"


def test_round_trip_on_fixtures(fx):
    for layer in fx.layers.values():
        again = parse_vector_layer(serialize_vector_layer(layer))
        assert again.features == layer.features
        assert again.metadata.bbox == layer.metadata.bbox


@st.composite
def polygon_coords(draw):
    # star-shaped ring around a center: always simple with nonzero area
    import math
    cx = draw(st.integers(-100, 100))
    cy = draw(st.integers(-100, 100))
    n = draw(st.integers(3, 8))
    radii = draw(st.lists(st.integers(1, 50), min_size=n, max_size=n))
    return [[cx + round(r * math.cos(2 * math.pi * i / n), 3), cy + round(r * math.sin(2 * math.pi * i / n), 3)]
            for i, r in enumerate(radii)]


@given(st.lists(polygon_coords(), min_size=1, max_size=5),
       st.lists(st.one_of(st.integers(-10**6, 10**6), st.text(max_size=5)), min_size=1, max_size=5))
@settings(max_examples=100)
def test_round_trip_and_bbox_property(rings, values):
    features = [feat({"type": "Polygon", "coordinates": [r]}, v=values[i % len(values)])
                for i, r in enumerate(rings)]
    layer = parse_vector_layer(fc(*features), "p")
    again = parse_vector_layer(serialize_vector_layer(layer))
    assert again.features == layer.features
    xs = [x for r in rings for x, _ in r]
    ys = [y for r in rings for _, y in r]
    assert layer_bbox(layer) == (min(xs), min(ys), max(xs), max(ys))


def test_fixture_bbox_equals_vertex_envelope(fx):
    layer = fx.layers[2011]
    xs = [p.x for f in layer.features for p in f.geometry.exterior]
    ys = [p.y for f in layer.features for p in f.geometry.exterior]
    assert layer_bbox(layer) == (min(xs), min(ys), max(xs), max(ys)) == fx.extent


# -- raster parsing ----------------------------------------------------------------------------

GRID_2X2 = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -9999\n1 2\n3 4\n"


def test_minimal_grid_top_left_first():
    g = parse_raster_grid(GRID_2X2)
    assert g.cells[0] == 1 and g.cell(0, 0) == 1 and g.cell(1, 1) == 4
    assert g.cell_center(0, 0) == (0.5, 1.5)


def test_cell_count_mismatch_message():
    text = GRID_2X2.replace("3 4\n", "3\n")
    with pytest.raises(ValidationError) as e:
        parse_raster_grid(text)
    assert str(e.value) == "expected 4 cells, found 3"


def test_header_errors():
    with pytest.raises(LayerSyntaxError):
        parse_raster_grid("ncols 2\n")
    with pytest.raises(LayerSyntaxError):
        parse_raster_grid(GRID_2X2.replace("xllcorner", "xcorner"))
    with pytest.raises(ValidationError):
        parse_raster_grid(GRID_2X2.replace("cellsize 1", "cellsize 0"))
    # header keys are case-insensitive
    assert parse_raster_grid(GRID_2X2.upper().replace("NODATA_VALUE", "NODATA_value")).ncols == 2


def test_gradient_fixture_formula(fx):
    g = parse_raster_grid(serialize_raster_grid(fx.raster))
    assert (g.ncols, g.nrows) == (100, 100)
    for r in range(100):
        for c in range(100):
            assert g.cell(r, c) == r * 100 + c


def test_raster_bbox_arithmetic():
    g = parse_raster_grid("ncols 2\nnrows 3\nxllcorner 10\nyllcorner 20\ncellsize 5\nnodata_value -1\n"
                          + "0 " * 6)
    assert layer_bbox(g) == (10, 20, 20, 35)


def test_unit_square_bbox():
    assert layer_bbox(parse_vector_layer(fc(feat(UNIT_SQUARE)), "u")) == (0, 0, 1, 1)


def test_parse_bbox():
    assert parse_bbox("0,1,2,3") == (0, 1, 2, 3)
    for bad in ("1,2,3", "a,b,c,d", "2,0,1,1", "0,0,inf,1"):
        with pytest.raises(ValueError):
            parse_bbox(bad)


# -- catalog -------------------------------------------------------------------------------------

@pytest.fixture
def fixture_catalog(fx):
    cat = Catalog()
    for layer in fx.layers.values():
        cat.register(layer)
    cat.register(fx.raster)
    return cat


def test_query_empty_filter_returns_all_sorted():
    cat = Catalog()
    for lid in ("c", "a", "b"):
        cat.register(make_vector_layer([], lid))
    assert [m.layer_id for m in catalog_query(cat)] == ["a", "b", "c"]


def test_query_by_year(fixture_catalog):
    hits = catalog_query(fixture_catalog, year=2013)
    assert [m.layer_id for m in hits] == ["malaria_2013"] and hits[0].kind == "vector"


def test_query_disjoint_bbox(fixture_catalog):
    assert catalog_query(fixture_catalog, bbox=(1e6, 1e6, 1e6 + 1, 1e6 + 1)) == []


@given(kind=st.sampled_from([None, "vector", "raster"]), year=st.sampled_from([None, 2010, 2011, 2014]),
       text=st.sampled_from([None, "malaria", "grid", "2012", "zzz"]),
       bbox=st.sampled_from([None, (0, 0, 10, 10), (250, 150, 400, 400), (-5, -5, -1, -1)]))
@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_query_predicates_only_shrink(fixture_catalog, kind, year, text, bbox):
    everything = catalog_query(fixture_catalog)
    assert {m.layer_id for m in everything} == set(fixture_catalog.entries)
    filters = {"kind": kind, "year": year, "text": text, "bbox": bbox}
    prev = set(m.layer_id for m in everything)
    active = {}
    for name, value in filters.items():
        if value is None:
            continue
        active[name] = value
        now = {m.layer_id for m in catalog_query(fixture_catalog, **active)}
        assert now <= prev
        prev = now


def test_get_unknown_and_remove():
    cat = Catalog()
    cat.register(make_vector_layer([], "x"))
    assert "x" in cat and len(cat) == 1
    cat.remove("x")
    with pytest.raises(UnknownLayer):
        cat.get("x")


def test_catalog_save_load(tmp_path, fixture_catalog, fx):
    fixture_catalog.register(make_vector_layer(fx.layers[2012].features, "secret",
                                               sensitivity=SensitivityLabel.CONFIDENTIAL))
    fixture_catalog.save(tmp_path)
    loaded = Catalog.load(tmp_path)
    assert dict(loaded.entries) == dict(fixture_catalog.entries)
    assert loaded.get("base_grid").cells == fx.raster.cells
    assert loaded.get("malaria_2011").features == fx.layers[2011].features
    assert loaded.entries["secret"].sensitivity == SensitivityLabel.CONFIDENTIAL


def test_readers_never_see_half_registered_layer(fx):
    cat = Catalog()
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            entries, payloads = cat._state
            if set(entries) != set(payloads):
                bad.append(True)
            for lid in list(entries):
                if payloads[lid].metadata.layer_id != lid:
                    bad.append(lid)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for i in range(300):
        cat.register(make_vector_layer(fx.layers[2011].features, f"l{i % 20}"))
        if i % 3 == 0:
            cat.remove(f"l{i % 20}")
    stop.set()
    for t in threads:
        t.join()
    assert not bad


def test_metadata_validation():
    with pytest.raises(ValidationError):
        LayerMetadata("ok", "t", "vector", (1, 0, 0, 1))
    with pytest.raises(ValidationError):
        LayerMetadata("ok", "t", "tiles", None)
    assert with_raster_metadata(parse_raster_grid(GRID_2X2), "g").metadata.bbox == (0, 0, 2, 2)


def test_polygon_from_coords_validates():
    with pytest.raises(ValidationError):
        Polygon.from_coords([[0, 0], [1, 1], [0, 0]])
    assert Polygon.from_coords([[0, 0], [2, 0], [2, 2], [0, 2]], [[[0.5, 0.5], [1, 0.5], [1, 1]]]).holes
