"""Reference-map construction from a labeled reconstruction.

Points are labeled by majority vote over their views, clustered per class
with a density-based rule, corrected with per-image detection membership
(split clusters covering several detections, merge fragments of one) and
finally registered to GPS and flattened to 2D landmarks.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import RefinementDidNotConvergeError, TooFewObjectsError
from .geometry import SimilarityTransform2D, align_scene_to_gps, build_local_map, gt_local_map
from .model import MIN_QUERY_OBJECTS, LocalMap, MapSource, ObjectLandmark, Pose3DoF, ReferenceMap
from .synthetic import SyntheticScene

DEFAULT_EPS_M = 1.5
DEFAULT_MIN_PTS = 4
DEFAULT_MERGE_THRESHOLD = 0.5


@dataclass(frozen=True)
class ObjectCluster:
    members: tuple[int, ...]  # point indices, ascending
    label: int  # class id

    def __post_init__(self):
        if not self.members:
            raise ValueError("a cluster needs at least one member")
        object.__setattr__(self, "members", tuple(sorted(int(m) for m in self.members)))

    def __len__(self) -> int:
        return len(self.members)


# -- label voting -------------------------------------------------------------


def vote(labels: Sequence[int]) -> tuple[int, bool]:
    """Majority class of one point's view labels and whether the top count was tied."""
    if len(labels) == 0:
        raise ValueError("a point needs at least one labeled observation")
    counts = Counter(int(c) for c in labels)
    top = max(counts.values())
    winners = sorted(c for c, k in counts.items() if k == top)
    return winners[0], len(winners) > 1


def vote_labels(obs_point: np.ndarray, obs_label: np.ndarray, n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-point majority class (-1 if unobserved) and tie flags."""
    obs_point = np.asarray(obs_point, dtype=int)
    obs_label = np.asarray(obs_label, dtype=int)
    n_cls = int(obs_label.max()) + 1 if len(obs_label) else 1
    counts = np.zeros((n_points, n_cls), dtype=int)
    np.add.at(counts, (obs_point, obs_label), 1)
    top = counts.max(axis=1)
    labels = np.where(top > 0, np.argmax(counts, axis=1), -1)  # argmax takes the smallest id on ties
    ties = (top > 0) & (np.sum(counts == top[:, None], axis=1) > 1)
    return labels, ties


# -- density clustering -------------------------------------------------------


def _eps_neighbors(points: np.ndarray, eps: float) -> list[np.ndarray]:
    tree = cKDTree(points)
    near = tree.query_ball_point(points, eps * (1.0 + 1e-9) + 1e-12)
    eps2 = eps * eps
    out = []
    for i, cand in enumerate(near):
        cand = np.asarray(cand, dtype=int)
        d = points[cand] - points[i]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        out.append(np.sort(cand[d2 <= eps2]))
    return out


def density_cluster(points, eps: float = DEFAULT_EPS_M, min_pts: int = DEFAULT_MIN_PTS) -> list[np.ndarray]:
    """Density-based clustering of 3D points.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Cores within ``eps`` of each other share a cluster; a
    non-core point within ``eps`` of some core joins the cluster of its nearest
    core, ties going to the lexicographically smallest core coordinates, so
    the result does not depend on input order. Remaining points are noise.

    Returns arrays of point indices, ordered by their smallest member.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return []
    nbrs = _eps_neighbors(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in nbrs])
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return []
    rows, cols = [], []
    for i in core_idx:
        nb = nbrs[i][core[nbrs[i]]]
        rows.append(np.full(len(nb), i))
        cols.append(nb)
    r, c = np.concatenate(rows), np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    assign = np.full(n, -1)
    assign[core_idx] = comp[core_idx]
    for i in np.flatnonzero(~core):
        cores = nbrs[i][core[nbrs[i]]]
        if len(cores) == 0:
            continue
        d = pts[cores] - pts[i]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        cp = pts[cores]
        best = cores[np.lexsort((cp[:, 2], cp[:, 1], cp[:, 0], d2))[0]]
        assign[i] = assign[best]
    groups = defaultdict(list)
    for i in np.flatnonzero(assign >= 0):
        groups[assign[i]].append(i)
    return sorted((np.array(g, dtype=int) for g in groups.values()), key=lambda g: g[0])


def cluster_by_class(
    points: np.ndarray, labels: np.ndarray, eps: float = DEFAULT_EPS_M, min_pts: int = DEFAULT_MIN_PTS, executor=None
) -> list[ObjectCluster]:
    """Cluster each class separately. ``executor`` (any ``map``-capable pool) runs classes in parallel."""
    classes = sorted(int(c) for c in np.unique(labels) if c >= 0)
    index = [np.flatnonzero(labels == c) for c in classes]
    jobs = [(points[ix], eps, min_pts) for ix in index]
    mapper = executor.map if executor is not None else map
    results = list(mapper(_cluster_job, jobs))
    out = []
    for c, ix, groups in zip(classes, index, results):
        out.extend(ObjectCluster(tuple(ix[g]), c) for g in groups)
    return sorted(out, key=lambda cl: cl.members[0])


def _cluster_job(job):
    return density_cluster(*job)


# -- split / merge refinement ---------------------------------------------------


class _Views:
    """Per-point observations keyed for membership queries."""

    def __init__(self, obs_point, obs_image, obs_detection):
        self.by_point: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for p, i, d in zip(np.asarray(obs_point), np.asarray(obs_image), np.asarray(obs_detection)):
            self.by_point[int(p)].append((int(i), int(d)))

    def image_detections(self, members) -> dict[int, set[int]]:
        out: dict[int, set[int]] = defaultdict(set)
        for p in members:
            for img, det in self.by_point.get(p, ()):
                out[img].add(det)
        return out


def _split(cluster: ObjectCluster, views: _Views, points: np.ndarray) -> list[ObjectCluster]:
    dets = views.image_detections(cluster.members)
    conflicting = [img for img, ds in dets.items() if len(ds) > 1]
    if not conflicting:
        return [cluster]
    # the image separating the most detections decides the partition
    image = min(conflicting, key=lambda img: (-len(dets[img]), img))
    part: dict[int, int] = {}
    for p in cluster.members:
        for img, det in views.by_point.get(p, ()):
            if img == image:
                part[p] = det
    parts = sorted(set(part.values()))
    # co-membership votes: members sharing a detection elsewhere follow each other
    key_members: dict[tuple[int, int], list[int]] = defaultdict(list)
    for p in cluster.members:
        for img, det in views.by_point.get(p, ()):
            key_members[(img, det)].append(p)
    centroids = {d: points[[p for p, v in part.items() if v == d]].mean(axis=0) for d in parts}
    for p in cluster.members:
        if p in part:
            continue
        votes = Counter()
        for img, det in views.by_point.get(p, ()):
            for other in key_members[(img, det)]:
                if other in part:
                    votes[part[other]] += 1
        dist = {d: float(np.sum((points[p] - centroids[d]) ** 2)) for d in parts}
        part[p] = min(parts, key=lambda d: (-votes[d], dist[d], d))
    return [ObjectCluster(tuple(p for p, v in part.items() if v == d), cluster.label) for d in parts]


def _merge_score(a: dict[int, set[int]], b: dict[int, set[int]]) -> float | None:
    images = set(a) | set(b)
    shared = 0
    for img in set(a) & set(b):
        if a[img] | b[img] != a[img] & b[img]:
            return None  # merged cluster would span two detections here
        shared += 1
    return shared / len(images) if images else None


def refine_clusters(
    clusters: Sequence[ObjectCluster],
    obs_point,
    obs_image,
    obs_detection,
    points: np.ndarray,
    merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
    max_iterations: int | None = None,
) -> list[ObjectCluster]:
    """Split and merge clusters using detection co-membership until nothing changes.

    Split: a cluster whose members fall on different detections of one image
    is partitioned by detection id. Merge: two same-class clusters are joined
    when the images in which their members share a detection make up at least
    ``merge_threshold`` of the images observing either, and no image places
    them on different detections. Each split or merge counts as one step;
    exceeding ``max_iterations`` (default ``max(4, n**2)``) raises.
    """
    views = _Views(obs_point, obs_image, obs_detection)
    pts = np.asarray(points, dtype=float)
    current = list(clusters)
    bound = max_iterations if max_iterations is not None else max(4, len(current) ** 2)
    steps = 0
    while True:
        changed = False
        queue, current = current, []
        while queue:
            cl = queue.pop()
            parts = _split(cl, views, pts)
            if len(parts) > 1:
                steps += 1
                changed = True
                queue.extend(parts)
            else:
                current.append(cl)
            if steps > bound:
                raise RefinementDidNotConvergeError(f"no fixpoint after {bound} refinement steps")

        while True:
            dets = [views.image_detections(c.members) for c in current]
            owners: dict[tuple[int, int], set[int]] = defaultdict(set)
            for k, d in enumerate(dets):
                for img, ds in d.items():
                    for det in ds:
                        owners[(img, det)].add(k)
            best = None
            for group in owners.values():
                for a in group:
                    for b in group:
                        if a >= b or current[a].label != current[b].label:
                            continue
                        s = _merge_score(dets[a], dets[b])
                        if s is None or s < merge_threshold:
                            continue
                        key = (-s, current[a].members[0], current[b].members[0])
                        if best is None or key < best[0]:
                            best = (key, a, b)
            if best is None:
                break
            _, a, b = best
            merged = ObjectCluster(current[a].members + current[b].members, current[a].label)
            current = [c for k, c in enumerate(current) if k not in (a, b)] + [merged]
            steps += 1
            changed = True
            if steps > bound:
                raise RefinementDidNotConvergeError(f"no fixpoint after {bound} refinement steps")
        if not changed:
            return sorted(current, key=lambda c: c.members[0])


# -- projection and registration ----------------------------------------------


def box_centroid(points: np.ndarray) -> np.ndarray:
    """Center of the axis-aligned bounding box."""
    p = np.asarray(points, dtype=float)
    return 0.5 * (p.min(axis=0) + p.max(axis=0))


def project_objects(clusters: Sequence[ObjectCluster], points_map: np.ndarray) -> list[tuple[np.ndarray, int]]:
    """2D map position of each cluster's 3D box centroid, paired with its class id.

    Output order is ascending (x, y) of the projected centroids.
    """
    out = [(box_centroid(points_map[list(c.members)])[:2], c.label) for c in clusters]
    order = sorted(range(len(out)), key=lambda k: (out[k][0][0], out[k][0][1], out[k][1]))
    return [out[k] for k in order]


def register_points(scene: SyntheticScene) -> tuple[SimilarityTransform2D, np.ndarray]:
    """GPS registration of the reconstruction; returns the transform and points in map meters."""
    cam_xy = np.array([c.position_sfm[:2] for c in scene.cameras])
    gps = np.array([c.gps for c in scene.cameras])
    t = align_scene_to_gps(cam_xy, gps)
    pts = np.column_stack([t.apply(scene.points[:, :2]), t.scale * scene.points[:, 2]])
    return t, pts


@dataclass(frozen=True, eq=False)
class PipelineResult:
    reference_map: ReferenceMap
    clusters: tuple[ObjectCluster, ...]  # aligned with reference_map.landmarks
    transform: SimilarityTransform2D
    point_labels: np.ndarray
    label_ties: np.ndarray
    points_map: np.ndarray


def build_reference_map(
    scene: SyntheticScene,
    eps: float = DEFAULT_EPS_M,
    min_pts: int = DEFAULT_MIN_PTS,
    merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
    city: str = "synthetic",
    executor=None,
) -> PipelineResult:
    """Full reconstruction-to-map pipeline for one scene."""
    transform, pts = register_points(scene)
    labels, ties = vote_labels(scene.obs_point, scene.obs_label, len(scene.points))
    clusters = cluster_by_class(pts, labels, eps, min_pts, executor)
    clusters = refine_clusters(clusters, scene.obs_point, scene.obs_image, scene.obs_detection, pts, merge_threshold)
    with_pos = [(box_centroid(pts[list(c.members)])[:2], c) for c in clusters]
    with_pos.sort(key=lambda t: (t[0][0], t[0][1], t[1].label))
    landmarks = tuple(
        ObjectLandmark(k, (float(p[0]), float(p[1])), scene.registry.by_id(c.label)) for k, (p, c) in enumerate(with_pos)
    )
    return PipelineResult(
        ReferenceMap(scene.scene_id, landmarks, city=city),
        tuple(c for _, c in with_pos),
        transform,
        labels,
        ties,
        pts,
    )


def detection_landmarks(scene: SyntheticScene, result: PipelineResult) -> dict[tuple[int, int], int]:
    """Landmark id of each (image, detection) by majority of its observed points."""
    owner = np.full(len(scene.points), -1)
    for lid, c in enumerate(result.clusters):
        owner[list(c.members)] = lid
    votes: dict[tuple[int, int], Counter] = defaultdict(Counter)
    for p, img, det in zip(scene.obs_point, scene.obs_image, scene.obs_detection):
        if owner[p] >= 0:
            votes[(int(img), int(det))][int(owner[p])] += 1
    out = {}
    for key, cnt in votes.items():
        top = max(cnt.values())
        out[key] = min(l for l, k in cnt.items() if k == top)
    return out


def derive_local_maps(
    scene: SyntheticScene, result: PipelineResult, source: MapSource = MapSource.GT
) -> list[LocalMap]:
    """Local maps of every camera with at least three detections tied to distinct landmarks.

    Camera poses come from the registered reconstruction; ground-truth maps
    place the matched landmarks in that camera frame, depth-based maps
    back-project the detections.
    """
    assoc = detection_landmarks(scene, result)
    ref = result.reference_map
    t = result.transform
    dets_by_image = defaultdict(list)
    for d in scene.detections:
        dets_by_image[d.image_id].append(d)
    out = []
    for cam in scene.cameras:
        chosen, used = [], set()
        for d in sorted(dets_by_image[cam.image_id], key=lambda d: d.detection_id):
            lid = assoc.get((cam.image_id, d.detection_id))
            if lid is None or lid in used:
                continue
            used.add(lid)
            chosen.append((d, lid))
        if len(chosen) < MIN_QUERY_OBJECTS:
            continue
        xy = t.apply(cam.position_sfm[:2])
        pose = Pose3DoF(float(xy[0]), float(xy[1]), t.apply_heading(cam.heading_sfm))
        qid = f"{scene.scene_id}/img{cam.image_id:04d}"
        slots = [d.detection_id for d, _ in chosen]
        lids = [lid for _, lid in chosen]
        try:
            if source is MapSource.GT:
                out.append(gt_local_map(ref, pose, lids, qid, slots))
            else:
                out.append(
                    build_local_map(
                        [d.detection for d, _ in chosen],
                        scene.spec.intrinsics,
                        query_id=qid,
                        scene_id=scene.scene_id,
                        slots=slots,
                        gt_pose=pose,
                        gt_matches=tuple(zip(slots, lids)),
                    )
                )
        except TooFewObjectsError:
            continue
    return out
