import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatloc.dataset import (
    classify_query,
    dataset_to_dict,
    load_dataset,
    make_splits,
    map_statistics,
    parse_dataset,
    read_dataset,
    save_dataset,
)
from flatloc.errors import DatasetSchemaError, IntegrityError, PreconditionError
from flatloc.model import (
    ClassRegistry,
    Difficulty,
    GeoAnchor,
    LocalMap,
    LocalObject,
    MapSource,
    Partition,
    Pose3DoF,
    ReferenceMap,
    SemanticClass,
    SplitKind,
    normalize_angle,
)

from .conftest import make_map, query_for

SIGN = SemanticClass(0, "sign")


def minimal_doc():
    return {
        "reference_maps": [
            {
                "scene_id": "s0",
                "city": "Paris",
                "landmarks": [
                    {"id": 1, "class": "sign", "x_m": 0.0, "y_m": 0.0},
                    {"id": 2, "class": "bench", "x_m": 10.0, "y_m": 0.0},
                    {"id": 3, "class": "sign", "x_m": 0.0, "y_m": 10.0},
                ],
            }
        ],
        "queries": [
            {
                "query_id": "q0",
                "scene_id": "s0",
                "gt_pose": {"x_m": 5.0, "y_m": -5.0, "theta_rad": 1.5},
                "objects": [
                    {"slot": 0, "class": "sign", "gt_local": [0.1, 0.5], "landmark_id": 1},
                    {"slot": 1, "class": "bench", "gt_local": [0.4, 0.2], "landmark_id": 2},
                    {"slot": 2, "class": "sign", "gt_local": [-0.3, 1.0], "landmark_id": 3},
                ],
            }
        ],
    }


# -- core types -------------------------------------------------------------------


@given(st.floats(-100, 100), st.integers(-50, 50))
def test_heading_normalization_is_periodic(theta, k):
    a = normalize_angle(theta)
    b = normalize_angle(theta + 2 * math.pi * k)
    assert -math.pi < a <= math.pi
    assert abs(math.remainder(a - b, 2 * math.pi)) < 1e-12 * max(1.0, abs(k))


def test_heading_pi_stays_pi():
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi
    assert Pose3DoF(0, 0, 3 * math.pi).heading == pytest.approx(math.pi)


def test_registry_limits_and_lookup():
    reg = ClassRegistry.from_names(["a", "b"])
    assert reg.by_name("b").id == 1 and "a" in reg and len(reg) == 2
    with pytest.raises(ValueError):
        ClassRegistry.from_names(str(i) for i in range(43))
    with pytest.raises(ValueError):
        ClassRegistry([SemanticClass(0, "a"), SemanticClass(0, "b")])


def test_reference_map_rejects_duplicate_ids_and_empty():
    with pytest.raises(ValueError):
        make_map([[0, 0], [1, 1]], [0, 0], ids=[4, 4])
    with pytest.raises(ValueError):
        ReferenceMap("s", ())


def test_landmark_position_must_be_finite():
    with pytest.raises(ValueError):
        make_map([[0, math.inf]], [0])


def test_local_map_invariants():
    objs = [LocalObject(i, SIGN, (0.1 * i, 0.5)) for i in range(3)]
    q = LocalMap("q", "s", objs)
    assert len(q) == 3
    with pytest.raises(ValueError):
        LocalMap("q", "s", objs[:2])
    with pytest.raises(ValueError):
        LocalMap("q", "s", [objs[0], objs[0], objs[1]])
    with pytest.raises(PreconditionError):
        q.match_dict


def test_anchor_round_trip():
    a = GeoAnchor(48.2, 16.37)
    lat, lon = a.to_geodetic(*a.to_metric(48.201, 16.372))
    assert (lat, lon) == pytest.approx((48.201, 16.372), abs=1e-12)
    with pytest.raises(ValueError):
        GeoAnchor(0.0, 0.0, m_per_deg_lat=-1.0)


# -- loading ------------------------------------------------------------------------


def test_minimal_file(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps(minimal_doc()))
    maps, queries = load_dataset(p)
    assert len(maps) == 1 and len(maps[0]) == 3
    assert len(queries) == 1
    q = queries[0]
    assert q.source is MapSource.GT and q.gt_matches == ((0, 1), (1, 2), (2, 3))
    assert q.gt_pose.heading == pytest.approx(1.5)


def test_both_local_map_kinds_loaded():
    doc = minimal_doc()
    for o in doc["queries"][0]["objects"]:
        o["est_local"] = [o["gt_local"][0] + 0.01, o["gt_local"][1]]
    ds = parse_dataset(doc)
    assert sorted(q.source.value for q in ds.local_maps) == ["DepthBased", "GroundTruthBased"]


def test_unknown_scene_is_integrity_error():
    doc = minimal_doc()
    doc["queries"][0]["scene_id"] = "nowhere"
    with pytest.raises(IntegrityError):
        parse_dataset(doc)


def test_unknown_landmark_is_integrity_error():
    doc = minimal_doc()
    doc["queries"][0]["objects"][0]["landmark_id"] = 99
    with pytest.raises(IntegrityError):
        parse_dataset(doc)


@pytest.mark.parametrize(
    "mutate,key",
    [
        (lambda d: d["reference_maps"][0]["landmarks"][1].pop("x_m"), "reference_maps[0].landmarks[1].x_m"),
        (lambda d: d["queries"][0]["objects"][2].update({"class": 7}), "queries[0].objects[2].class"),
        (lambda d: d["queries"][0]["gt_pose"].update({"theta_rad": "north"}), "queries[0].gt_pose.theta_rad"),
        (lambda d: d.pop("queries"), "queries"),
    ],
)
def test_schema_errors_name_the_key(mutate, key):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(DatasetSchemaError) as info:
        parse_dataset(doc)
    assert info.value.key == key


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(DatasetSchemaError):
        read_dataset(p)


def _local_maps_equal(a, b):
    return (
        a.query_id == b.query_id
        and a.scene_id == b.scene_id
        and a.source == b.source
        and a.gt_matches == b.gt_matches
        and a.gt_pose == b.gt_pose
        and [(o.slot, o.label) for o in a.objects] == [(o.slot, o.label) for o in b.objects]
        and np.array_equal(a.positions, b.positions)
    )


def test_round_trip_of_generated_dataset(tmp_path):
    from flatloc.pipeline import build_reference_map, derive_local_maps
    from flatloc.synthetic import SceneSpec, generate_scene

    scene = generate_scene(SceneSpec(n_objects=30, trajectory_length=12, depth_noise=0.2, seed=4))
    res = build_reference_map(scene)
    local = derive_local_maps(scene, res, MapSource.GT) + derive_local_maps(scene, res, MapSource.DEPTH)
    p = tmp_path / "d.json"
    save_dataset(p, [res.reference_map], local)
    maps, back = load_dataset(p)
    assert maps[0] == res.reference_map
    key = lambda q: (q.query_id, q.source.value)  # noqa: E731
    assert len(back) == len(local)
    for a, b in zip(sorted(local, key=key), sorted(back, key=key)):
        assert _local_maps_equal(a, b)
    # saving again is byte-stable
    p2 = tmp_path / "d2.json"
    save_dataset(p2, maps, back)
    assert p.read_bytes() == p2.read_bytes()


# -- easy split ----------------------------------------------------------------------


def _line_query(n, spacing):
    m = make_map([[i * spacing, 0.0] for i in range(n)], [0] * n)
    q = query_for(m, list(range(n)), pose=Pose3DoF(0.0, -20.0, math.pi / 2))
    return q, m


def test_classify_examples():
    q, m = _line_query(5, 10.0)  # extent 40 m
    assert classify_query(q, m) is Difficulty.EASY
    q, m = _line_query(4, 10.0 / 3)  # extent 10 m, too few objects
    assert classify_query(q, m) is Difficulty.HARD_ONLY
    q, m = _line_query(6, 20.0)  # extent exactly 100 m
    assert classify_query(q, m) is Difficulty.HARD_ONLY


def test_classify_requires_matches():
    q = LocalMap("q", "s0", [LocalObject(i, SIGN, (0.1 * i, 0.5)) for i in range(5)])
    with pytest.raises(PreconditionError):
        classify_query(q, make_map([[0, 0]], [0]))


def test_too_few_objects_stays_hard_when_objects_are_removed():
    rng = np.random.default_rng(0)
    pose = Pose3DoF(-10.0, -10.0, 0.8)
    for _ in range(30):
        m = make_map(rng.uniform(0, 60, size=(4, 2)), [0] * 4)
        full = query_for(m, [0, 1, 2, 3], pose=pose)
        assert classify_query(full, m) is Difficulty.HARD_ONLY
        for drop in range(4):
            ids = [i for i in range(4) if i != drop]
            assert classify_query(query_for(m, ids, pose=pose), m) is Difficulty.HARD_ONLY


# -- splits ----------------------------------------------------------------------------


def _queries(n_scenes, per_scene, n_objects=5):
    maps, queries = [], []
    for s in range(n_scenes):
        m = make_map([[i * 5.0, 0.0] for i in range(n_objects)], [0] * n_objects, scene_id=f"s{s}")
        maps.append(m)
        for k in range(per_scene):
            q = query_for(m, list(range(n_objects)), pose=Pose3DoF(0.0, -10.0 - k, 1.0), query_id=f"s{s}/q{k}")
            queries.append(q)
    return maps, queries


def test_ten_queries_split_8_1_1():
    maps, queries = _queries(1, 10)
    splits = make_splits(queries, maps, seed=0)
    sizes = [len(splits[(SplitKind.ALL, p)].query_ids) for p in (Partition.TRAIN, Partition.VAL, Partition.TEST)]
    assert sizes == [8, 1, 1]


@pytest.mark.parametrize("stratify", ["scene", "global"])
def test_splits_deterministic_disjoint_and_nested(stratify):
    maps, queries = _queries(4, 13)
    # shrink some queries so Easy is a strict subset
    small = [query_for(maps[0], [0, 1, 2], pose=Pose3DoF(0, -5, 1.0), query_id=f"small{i}") for i in range(5)]
    queries = queries + small
    a = make_splits(queries, maps, seed=3, stratify=stratify)
    b = make_splits(queries, maps, seed=3, stratify=stratify)
    assert a == b
    for kind in SplitKind:
        parts = [set(a[(kind, p)].query_ids) for p in Partition]
        assert sum(len(p) for p in parts) == len(set().union(*parts))
    all_ids = set().union(*(a[(SplitKind.ALL, p)].query_ids for p in Partition))
    easy_ids = set().union(*(a[(SplitKind.EASY, p)].query_ids for p in Partition))
    assert easy_ids < all_ids
    n = len(all_ids)
    sizes = [len(a[(SplitKind.ALL, p)].query_ids) for p in (Partition.TRAIN, Partition.VAL, Partition.TEST)]
    for size, frac in zip(sizes, (0.8, 0.1, 0.1)):
        assert abs(size - frac * n) <= 1


def test_scene_stratification_spreads_each_scene():
    maps, queries = _queries(5, 20)
    splits = make_splits(queries, maps, seed=1)
    test_ids = splits[(SplitKind.ALL, Partition.TEST)].query_ids
    per_scene = {f"s{s}": sum(q.startswith(f"s{s}/") for q in test_ids) for s in range(5)}
    assert all(v == 2 for v in per_scene.values())


def test_empty_split_input_rejected():
    with pytest.raises(ValueError):
        make_splits([], [])


# -- statistics ---------------------------------------------------------------------


def test_square_statistics():
    m = make_map([[0, 0], [100, 0], [0, 100], [100, 100]], [0, 0, 0, 0], city="Lisbon")
    q1 = query_for(m, [0, 1, 2], query_id="a")
    q2 = query_for(m, [1, 2, 3], query_id="b")
    rows = map_statistics([m], [q1, q2])
    lisbon, total = rows
    assert lisbon.city == "Lisbon" and total.city == "all"
    assert lisbon.avg_area_km2 == pytest.approx(0.01)
    assert lisbon.avg_density == pytest.approx(400.0)
    assert lisbon.avg_queries == 2 and lisbon.avg_objects == 4


def test_statistics_without_queries_and_degenerate_area():
    m = make_map([[5, 5]], [0])
    (row, _) = map_statistics([m], [])
    assert row.avg_queries == 0
    assert row.avg_area_km2 == 0 and row.avg_density is None and row.undefined_density_scenes == 1
