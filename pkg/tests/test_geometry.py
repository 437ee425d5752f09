import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatloc.errors import DegenerateConfigurationError, InvalidDepthError, TooFewObjectsError
from flatloc.geometry import (
    CameraIntrinsics,
    Detection,
    SimilarityTransform2D,
    align_scene_to_gps,
    angular_error,
    backproject_detection,
    build_local_map,
    camera_to_map,
    gt_local_map,
    pose_from_transform,
    procrustes_align,
)
from flatloc.model import MapSource, Pose3DoF, SemanticClass

from .conftest import make_map
from .oracles import procrustes_grid, ray_march

SIGN = SemanticClass(0, "sign")
K = CameraIntrinsics(500.0, (320.0, 240.0), (640, 480))


def det_at(u, v, depths, half=4.0, label=SIGN):
    return Detection((u - half, v - half, u + half, v + half), label, depths)


# -- procrustes ---------------------------------------------------------------


def test_rotation_90_plus_translation():
    src = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
    tgt = src @ np.array([[0.0, -1.0], [1.0, 0.0]]).T + [1.0, 2.0]
    t, rms = procrustes_align(src, tgt)
    assert t.rotation == pytest.approx(math.pi / 2, abs=1e-12)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    assert t.translation == pytest.approx((1.0, 2.0), abs=1e-12)
    assert rms == pytest.approx(0.0, abs=1e-12)


def test_identity_when_source_equals_target():
    src = np.array([[0.0, 1.0], [2.0, -1.0], [5.0, 3.0]])
    t, rms = procrustes_align(src, src)
    assert t.rotation == pytest.approx(0.0, abs=1e-12)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(t.translation, 0.0, atol=1e-12)
    assert rms == pytest.approx(0.0, abs=1e-12)


def test_noisy_fit_matches_rotation_grid_oracle():
    rng = np.random.default_rng(7)
    for _ in range(5):
        src = rng.uniform(-10, 10, size=(4, 2))
        planted = SimilarityTransform2D(rng.uniform(-math.pi, math.pi), rng.uniform(0.5, 2.0), tuple(rng.normal(size=2)))
        tgt = planted.apply(src) + rng.normal(0, 0.1, size=(4, 2))
        t, rms = procrustes_align(src, tgt)
        theta, scale, trans, rms_oracle = procrustes_grid(src, tgt)
        assert 0.0 <= rms <= 0.2
        assert rms == pytest.approx(rms_oracle, abs=1e-6)
        assert angular_error(t.rotation, theta) < 1e-6
        assert t.scale == pytest.approx(scale, abs=1e-6)
        assert np.allclose(t.translation, trans, atol=1e-5)


def test_rigid_fit_keeps_unit_scale():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(5, 2))
    t, _ = procrustes_align(src, 3.0 * src, with_scale=False)
    assert t.scale == 1.0


def test_coincident_source_is_degenerate():
    with pytest.raises(DegenerateConfigurationError):
        procrustes_align([[1.0, 1.0]] * 3, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def test_mismatched_lengths_rejected():
    with pytest.raises(ValueError):
        procrustes_align([[0, 0], [1, 0]], [[0, 0], [1, 0], [2, 0]])


similarities = st.builds(
    SimilarityTransform2D,
    st.floats(-math.pi, math.pi),
    st.floats(0.1, 10.0),
    st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)),
)


@settings(max_examples=60, deadline=None)
@given(similarities, st.integers(0, 2**32 - 1))
def test_inverse_and_composition(t, seed):
    pts = np.random.default_rng(seed).uniform(-50, 50, size=(6, 2))
    assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-9)
    fit, _ = procrustes_align(t.apply(pts), pts)
    ident = fit.compose(t)
    assert np.allclose(ident.apply(pts), pts, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-math.pi, math.pi), st.tuples(st.floats(-100, 100), st.floats(-100, 100)))
def test_residual_invariant_under_common_rigid_motion(seed, angle, shift):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-10, 10, size=(5, 2))
    tgt = rng.uniform(-10, 10, size=(5, 2))
    motion = SimilarityTransform2D(angle, 1.0, shift)
    _, r0 = procrustes_align(src, tgt)
    _, r1 = procrustes_align(motion.apply(src), motion.apply(tgt))
    assert r1 == pytest.approx(r0, abs=1e-9)


# -- angles -------------------------------------------------------------------


@pytest.mark.parametrize(
    "a,b,expected", [(0.0, 0.0, 0.0), (math.pi - 0.1, -math.pi + 0.1, 0.2), (1.0, 2.5, 1.5)]
)
def test_angular_error_examples(a, b, expected):
    assert angular_error(a, b) == pytest.approx(expected, abs=1e-12)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20))
def test_angular_error_is_a_bounded_metric(a, b, c):
    assert angular_error(a, b) == pytest.approx(angular_error(b, a), abs=1e-12)
    assert 0.0 <= angular_error(a, b) <= math.pi
    assert angular_error(a, c) <= angular_error(a, b) + angular_error(b, c) + 1e-12


# -- gps registration ---------------------------------------------------------


def test_gps_alignment_recovers_planted_similarity():
    rng = np.random.default_rng(3)
    rec = rng.uniform(-100, 100, size=(20, 2))
    planted = SimilarityTransform2D(0.7, 2.5, (10.0, -4.0))
    t = align_scene_to_gps(rec, planted.apply(rec))
    assert t.rotation == pytest.approx(0.7, abs=1e-9)
    assert t.scale == pytest.approx(2.5, abs=1e-9)
    assert np.allclose(t.translation, (10.0, -4.0), atol=1e-9)
    assert t.apply_heading(0.1) == pytest.approx(0.8, abs=1e-12)


def test_gps_alignment_with_noise_recovers_rotation():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        # a random-walk trajectory, like a capture sequence
        steps = rng.normal(0, 5, size=(200, 2)) + [3.0, 1.0]
        rec = np.cumsum(steps, axis=0)
        angle = rng.uniform(-math.pi, math.pi)
        planted = SimilarityTransform2D(angle, rng.uniform(0.5, 3.0), (rng.normal(), rng.normal()))
        gps = planted.apply(rec) + rng.normal(0, 3.0, size=rec.shape)
        t = align_scene_to_gps(rec, gps)
        worst = max(worst, angular_error(t.rotation, angle))
    assert math.degrees(worst) < 0.5


def test_gps_alignment_collinear_cameras():
    rec = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    planted = SimilarityTransform2D(1.2, 3.0, (5.0, 5.0))
    t = align_scene_to_gps(rec, planted.apply(rec))
    assert t.rotation == pytest.approx(1.2, abs=1e-12)


def test_gps_alignment_needs_three_cameras():
    with pytest.raises(ValueError):
        align_scene_to_gps([[0, 0], [1, 0]], [[0, 0], [1, 0]])


# -- camera frames ---------------------------------------------------------------


def test_camera_frame_round_trip():
    pose = Pose3DoF(10.0, -5.0, 0.3)
    t = camera_to_map(pose, 7.0)
    assert np.allclose(t.apply([0.0, 0.0]), pose.position)
    forward = t.apply([0.0, 1.0]) - pose.position
    assert math.atan2(forward[1], forward[0]) == pytest.approx(0.3, abs=1e-12)
    back = pose_from_transform(t)
    assert (back.x, back.y) == pytest.approx((10.0, -5.0))
    assert back.heading == pytest.approx(0.3, abs=1e-12)


def test_gt_local_map_normalizes_by_max_range():
    m = make_map([[0.0, 10.0], [5.0, 5.0], [-4.0, 3.0]], [0, 1, 2])
    q = gt_local_map(m, Pose3DoF(0.0, 0.0, math.pi / 2), [0, 1, 2], "q")
    # heading +y in the map: local +y is map +y, local +x is map +x
    assert np.allclose(q.positions, np.array([[0.0, 10.0], [5.0, 5.0], [-4.0, 3.0]]) / 10.0, atol=1e-12)
    assert q.source is MapSource.GT
    assert q.gt_matches == ((0, 0), (1, 1), (2, 2))


# -- back-projection ------------------------------------------------------------


def test_on_axis_detection():
    assert np.allclose(backproject_detection(det_at(320, 240, [5.0]), K), [0.0, 5.0])


@pytest.mark.parametrize("kind,expected", [("planar", (4.0, 4.0)), ("range", (4.0 / math.sqrt(2), 4.0 / math.sqrt(2)))])
def test_focal_offset_matches_ray_march(kind, expected):
    wide = CameraIntrinsics(300.0, (320.0, 240.0), (640, 480))
    u = 320.0 + wide.focal
    p = backproject_detection(det_at(u, 240, [4.0]), wide, depth_kind=kind)
    assert p == pytest.approx(expected, abs=1e-12)
    assert p == pytest.approx(ray_march(u, 240, wide.focal, wide.principal_point, 4.0, kind), abs=1e-6)


def test_backprojection_random_pixels_match_ray_march():
    rng = np.random.default_rng(5)
    for _ in range(10):
        u, v = rng.uniform(10, 630), rng.uniform(10, 470)
        d = rng.uniform(1, 30)
        for kind in ("planar", "range"):
            p = backproject_detection(det_at(u, v, [d]), K, depth_kind=kind)
            assert p == pytest.approx(ray_march(u, v, K.focal, K.principal_point, d, kind), abs=1e-6)


def test_median_not_mean():
    p = backproject_detection(det_at(320, 240, [3, 100, 3, 3, 3]), K)
    assert p[1] == pytest.approx(3.0)


def test_lower_median_on_even_sample_count():
    assert det_at(320, 240, [1.0, 4.0, 2.0, 8.0]).median_depth == 2.0


def test_nonpositive_depth_rejected():
    with pytest.raises(InvalidDepthError):
        backproject_detection(det_at(320, 240, [-1.0, -2.0, 3.0]), K)


def test_bbox_outside_image_rejected():
    with pytest.raises(ValueError):
        backproject_detection(det_at(638, 240, [2.0]), K)


def test_build_local_map_normalizes():
    q = build_local_map([det_at(320, 240, [d]) for d in (2.0, 4.0, 8.0)], K, query_id="q")
    assert q.source is MapSource.DEPTH
    assert np.allclose(q.positions[:, 1], [0.25, 0.5, 1.0])
    assert len(q) == 3 and all(o.label == SIGN for o in q.objects)


def test_build_local_map_needs_three():
    with pytest.raises(TooFewObjectsError):
        build_local_map([det_at(320, 240, [2.0])] * 2, K)


def test_exact_depths_reproduce_gt_local_map():
    from flatloc.synthetic import SceneSpec, generate_scene, planted_local_maps

    scene = generate_scene(SceneSpec(n_objects=40, seed=2, trajectory_length=15), observations=False)
    gt = {q.query_id: q for q in planted_local_maps(scene, MapSource.GT)}
    est = planted_local_maps(scene, MapSource.DEPTH)
    assert est
    for q in est:
        assert np.allclose(q.positions, gt[q.query_id].positions, atol=1e-9)
