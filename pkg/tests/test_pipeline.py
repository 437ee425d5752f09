import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatloc.dataset import scene_statistics
from flatloc.errors import RefinementDidNotConvergeError
from flatloc.matching import brute_force_localize
from flatloc.geometry import angular_error
from flatloc.model import MapSource
from flatloc.pipeline import (
    ObjectCluster,
    box_centroid,
    build_reference_map,
    cluster_by_class,
    density_cluster,
    derive_local_maps,
    project_objects,
    refine_clusters,
    vote,
    vote_labels,
)
from flatloc.synthetic import SceneSpec, generate_scene, planted_local_maps

from .oracles import dbscan_reference


def as_partition(groups):
    return {frozenset(int(i) for i in g) for g in groups}


def planted_match(result, scene):
    """Max centroid error after pairing each landmark with its nearest planted object of the same class."""
    planted = np.array([p.centroid for p in scene.planted])
    cls = np.array([p.label.id for p in scene.planted])
    worst = 0.0
    used = set()
    for lm in result.reference_map.landmarks:
        d = np.linalg.norm(planted - lm.position, axis=1)
        d[cls != lm.label.id] = np.inf
        k = int(np.argmin(d))
        used.add(k)
        worst = max(worst, float(d[k]))
    return worst, len(used)


# -- voting ------------------------------------------------------------------


@pytest.mark.parametrize(
    "labels, expected",
    [([0, 0, 1], (0, False)), ([0], (0, False)), ([3, 1], (1, True)), ([2, 2, 1, 1, 5], (1, True))],
)
def test_vote_examples(labels, expected):
    assert vote(labels) == expected


def test_vote_labels_vectorized():
    obs_point = [0, 0, 0, 1, 1, 3]
    obs_label = [2, 2, 1, 4, 1, 0]
    labels, ties = vote_labels(obs_point, obs_label, 4)
    assert labels.tolist() == [2, 1, -1, 0]
    assert ties.tolist() == [False, True, False, False]


@given(st.lists(st.integers(0, 5), min_size=1, max_size=20))
def test_vote_labels_agrees_with_vote(labels):
    got, tie = vote_labels([0] * len(labels), labels, 1)
    assert (int(got[0]), bool(tie[0])) == vote(labels)


# -- density clustering --------------------------------------------------------


def test_two_blobs():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.1, (20, 3))
    b = a + [10.0, 0, 0]
    groups = density_cluster(np.vstack([a, b]), eps=1.0, min_pts=4)
    assert as_partition(groups) == {frozenset(range(20)), frozenset(range(20, 40))}


def test_single_core_cluster():
    pts = np.array([[0, 0, 0], [0.5, 0, 0], [-0.5, 0, 0], [0, 0.5, 0], [0, 0, 0.5]], dtype=float)
    assert as_partition(density_cluster(pts, eps=0.6, min_pts=5)) == {frozenset(range(5))}


def test_noise_points_left_out():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [5, 5, 5]], dtype=float)
    assert as_partition(density_cluster(pts, eps=0.5, min_pts=3)) == {frozenset({0, 1, 2})}
    assert density_cluster(np.empty((0, 3))) == []
    with pytest.raises(ValueError):
        density_cluster(pts, eps=0.0)
    with pytest.raises(ValueError):
        density_cluster(pts, min_pts=0)


@pytest.mark.parametrize("seed", range(100))
def test_density_cluster_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 300))
    centers = rng.uniform(0, 20, (int(rng.integers(1, 8)), 3))
    pts = centers[rng.integers(0, len(centers), n)] + rng.normal(0, 0.6, (n, 3))
    if seed % 4 == 0:
        pts = np.round(pts, 1)  # exact distance ties
    eps = float(rng.uniform(0.3, 1.5))
    min_pts = int(rng.integers(1, 7))
    assert as_partition(density_cluster(pts, eps, min_pts)) == dbscan_reference(pts, eps, min_pts)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_density_cluster_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.uniform(0, 6, (80, 3)), 1)
    perm = rng.permutation(80)
    a = as_partition(density_cluster(pts, 0.8, 4))
    b = {frozenset(int(perm[i]) for i in g) for g in density_cluster(pts[perm], 0.8, 4)}
    assert a == b


def test_cluster_by_class_separates_labels():
    pts = np.zeros((10, 3)) + np.arange(10)[:, None] * 0.01
    labels = np.array([0] * 5 + [1] * 4 + [-1])
    out = cluster_by_class(pts, labels, eps=1.0, min_pts=2)
    assert [(c.members, c.label) for c in out] == [((0, 1, 2, 3, 4), 0), ((5, 6, 7, 8), 1)]


def test_cluster_by_class_executor_identical():
    from concurrent.futures import ThreadPoolExecutor

    scene = generate_scene(SceneSpec(seed=3, n_objects=40))
    res = build_reference_map(scene)
    with ThreadPoolExecutor(3) as pool:
        par = build_reference_map(scene, executor=pool)
    assert par.reference_map == res.reference_map


# -- refinement --------------------------------------------------------------


def test_split_by_detection():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [1, 0, 0], [1.1, 0, 0]], dtype=float)
    cl = [ObjectCluster((0, 1, 2, 3), 0)]
    obs_point = [0, 1, 2, 3, 0, 2]
    obs_image = [0, 0, 0, 0, 1, 1]
    obs_det = [0, 0, 1, 1, 4, 7]
    out = refine_clusters(cl, obs_point, obs_image, obs_det, pts)
    assert [c.members for c in out] == [(0, 1), (2, 3)]


def test_split_places_unseen_members_by_co_membership():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0.9, 0, 0], [0.05, 0, 0]], dtype=float)
    cl = [ObjectCluster((0, 1, 2, 3), 0)]
    # image 0 separates 0 from 1; point 2 shares a detection with 0 in image 1
    obs_point = [0, 1, 0, 2, 3]
    obs_image = [0, 0, 1, 1, 2]
    obs_det = [0, 1, 3, 3, 0]
    out = refine_clusters(cl, obs_point, obs_image, obs_det, pts)
    assert sorted(c.members for c in out) == [(0, 2, 3), (1,)]


def test_merge_when_always_sharing_detections():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [0.6, 0, 0], [0.7, 0, 0]], dtype=float)
    cl = [ObjectCluster((0, 1), 2), ObjectCluster((2, 3), 2)]
    obs_point = [0, 2, 1, 3, 0, 3]
    obs_image = [0, 0, 1, 1, 2, 2]
    obs_det = [5, 5, 2, 2, 0, 0]
    out = refine_clusters(cl, obs_point, obs_image, obs_det, pts)
    assert [(c.members, c.label) for c in out] == [((0, 1, 2, 3), 2)]


def test_no_merge_across_classes_or_below_threshold():
    pts = np.zeros((4, 3))
    obs_point = [0, 2, 1, 3, 0, 3]
    obs_image = [0, 0, 1, 1, 2, 2]
    obs_det = [5, 5, 2, 2, 0, 0]
    mixed = [ObjectCluster((0, 1), 1), ObjectCluster((2, 3), 2)]
    assert len(refine_clusters(mixed, obs_point, obs_image, obs_det, pts)) == 2
    same = [ObjectCluster((0, 1), 1), ObjectCluster((2, 3), 1)]
    # one shared image out of three observing either cluster
    obs_point_sparse = [0, 2, 1, 3]
    obs_image_sparse = [0, 0, 1, 2]
    obs_det_sparse = [5, 5, 2, 0]
    args = (obs_point_sparse, obs_image_sparse, obs_det_sparse, pts)
    assert len(refine_clusters(same, *args, merge_threshold=0.5)) == 2
    assert len(refine_clusters(same, *args, merge_threshold=0.3)) == 1


def test_no_merge_when_an_image_separates_them():
    pts = np.zeros((4, 3))
    same = [ObjectCluster((0, 1), 1), ObjectCluster((2, 3), 1)]
    # shared in images 0 and 2, distinct detections in image 1
    obs = ([0, 2, 1, 3, 0, 3], [0, 0, 1, 1, 2, 2], [5, 5, 2, 3, 0, 0], pts)
    assert len(refine_clusters(same, *obs, merge_threshold=0.1)) == 2


def test_refinement_bound():
    pts = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    with pytest.raises(RefinementDidNotConvergeError):
        refine_clusters([ObjectCluster((0, 1), 0)], [0, 1], [0, 0], [0, 1], pts, max_iterations=0)


@pytest.mark.parametrize("seed", range(5))
def test_refinement_fixpoint(seed):
    scene = generate_scene(SceneSpec(seed=seed, n_objects=40, point_noise_m=0.2, clutter_fraction=0.3))
    res = build_reference_map(scene)
    again = refine_clusters(list(res.clusters), scene.obs_point, scene.obs_image, scene.obs_detection, res.points_map)
    assert sorted(c.members for c in again) == sorted(c.members for c in res.clusters)


# -- projection --------------------------------------------------------------


def test_box_centroid():
    pts = np.array([[0, 0, 0], [4, 0, 1], [4, 2, 0], [1, 1, 3]], dtype=float)
    assert box_centroid(pts).tolist() == [2.0, 1.0, 1.5]
    assert box_centroid(pts[:1]).tolist() == [0.0, 0.0, 0.0]


def test_project_objects_orders_by_position():
    pts = np.array([[5, 5, 0], [6, 5, 2], [0, 1, 0], [2, 3, 1], [9, 0, 0]], dtype=float)
    out = project_objects([ObjectCluster((0, 1), 3), ObjectCluster((2, 3), 1), ObjectCluster((4,), 0)], pts)
    assert [(p.tolist(), c) for p, c in out] == [([1.0, 2.0], 1), ([5.5, 5.0], 3), ([9.0, 0.0], 0)]


# -- generator and closure -------------------------------------------------------


def test_generator_deterministic():
    spec = SceneSpec(seed=11, point_noise_m=0.1, gps_noise_m=1.0, depth_noise=0.2, label_noise=0.1)
    assert generate_scene(spec).fingerprint() == generate_scene(spec).fingerprint()
    assert generate_scene(spec).fingerprint() != generate_scene(SceneSpec(seed=12)).fingerprint()


def test_infeasible_spec():
    with pytest.raises(ValueError):
        SceneSpec(n_objects=0)


def test_tiny_visibility_has_no_local_maps():
    scene = generate_scene(SceneSpec(seed=1, visibility_range_m=0.5, ensure_coverage=False))
    assert planted_local_maps(scene) == []
    assert planted_local_maps(scene, MapSource.DEPTH) == []


def test_density_matches_target():
    from flatloc.synthetic import planted_reference_map

    dens = []
    for seed in range(20):
        m = planted_reference_map(generate_scene(SceneSpec(seed=seed), observations=False))
        dens.append(scene_statistics(m, 0).density)
    assert abs(np.mean(dens) / 2967.0 - 1.0) < 0.10


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_pipeline_reproduces_planted(seed):
    scene = generate_scene(SceneSpec(seed=seed))
    res = build_reference_map(scene)
    worst, used = planted_match(res, scene)
    assert len(res.reference_map) == len(scene.planted) == used
    assert worst < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_closure_recovers_camera_poses(seed):
    scene = generate_scene(SceneSpec(seed=seed, n_objects=60))
    res = build_reference_map(scene)
    qs = derive_local_maps(scene, res)
    assert qs
    by_id = {f"{scene.scene_id}/img{c.image_id:04d}": c.pose for c in scene.cameras}
    for q in qs:
        best = brute_force_localize(q, res.reference_map).best
        truth = by_id[q.query_id]
        assert math.hypot(best.pose.x - truth.x, best.pose.y - truth.y) < 1e-6
        assert angular_error(best.pose.heading, truth.heading) < 1e-6
        assert sorted(best.assignment) == sorted(q.gt_matches)


def test_landmark_ids_follow_position_order():
    scene = generate_scene(SceneSpec(seed=2, n_objects=30))
    lms = build_reference_map(scene).reference_map.landmarks
    assert [lm.id for lm in lms] == list(range(len(lms)))
    keys = [(lm.position[0], lm.position[1]) for lm in lms]
    assert keys == sorted(keys)


def test_depth_local_maps_from_pipeline():
    scene = generate_scene(SceneSpec(seed=4, n_objects=50))
    res = build_reference_map(scene)
    gt = derive_local_maps(scene, res)
    depth = derive_local_maps(scene, res, MapSource.DEPTH)
    assert [q.query_id for q in depth] == [q.query_id for q in gt]
    assert all(q.source is MapSource.DEPTH for q in depth)
