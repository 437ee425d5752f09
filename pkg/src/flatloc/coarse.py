"""Coarse map localization: spatial graphs, node selection, baselines and metrics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import PreconditionError
from .matching import SimilarityField
from .model import MAX_CLASSES, LocalMap, ReferenceMap

REFERENCE_K = 7
FINE_REFERENCE_K = 3
RADIUS_SELECTION_M = 30.0
COARSE_BB_INFLATION = 0.10
SUCCESS_MIN_CORRECT = 3


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    """Node-attributed graph; edge weight ``exp(-d)`` for node distance ``d``.

    Query graphs measure ``d`` in normalized local-map units, reference
    graphs in meters.
    """

    node_ids: tuple[int, ...]
    embeddings: np.ndarray  # (n, n_classes + 2): one-hot class, then x, y
    edges: np.ndarray  # (E, 2) node indices
    weights: np.ndarray  # (E,)
    directed: bool

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_nodes)

    def neighbors(self, node: int) -> list[int]:
        """Target node indices of edges leaving ``node`` in insertion order."""
        return self.edges[self.edges[:, 0] == node, 1].tolist()


def _embeddings(class_ids: np.ndarray, positions: np.ndarray, n_classes: int) -> np.ndarray:
    if len(class_ids) and class_ids.max() >= n_classes:
        raise ValueError(f"class id {class_ids.max()} does not fit a {n_classes}-wide one-hot")
    one_hot = np.zeros((len(class_ids), n_classes))
    one_hot[np.arange(len(class_ids)), class_ids] = 1.0
    return np.hstack([one_hot, positions])


def build_query_graph(q: LocalMap, n_classes: int = MAX_CLASSES) -> SpatialGraph:
    """Complete undirected graph over the local-map objects."""
    n = len(q)
    i, j = np.triu_indices(n, k=1)
    diff = q.positions[i] - q.positions[j]
    d = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1])
    return SpatialGraph(
        tuple(q.slots),
        _embeddings(q.class_ids, q.positions, n_classes),
        np.stack([i, j], axis=1),
        np.exp(-d),
        directed=False,
    )


def knn_indices(positions: np.ndarray, ids: np.ndarray, k: int, rows: Iterable[int] | None = None) -> np.ndarray:
    """For each requested row, the ``k`` nearest other points.

    Ties on distance are broken by ascending id. Returns ``(R, k)`` indices.
    """
    pts = np.asarray(positions, dtype=float)
    rows = np.arange(len(pts)) if rows is None else np.asarray(list(rows), dtype=int)
    out = np.empty((len(rows), k), dtype=int)
    step = max(1, 4_000_000 // max(1, len(pts)))
    for start in range(0, len(rows), step):
        r = rows[start : start + step]
        dx = pts[None, :, 0] - pts[r, None, 0]
        dy = pts[None, :, 1] - pts[r, None, 1]
        d2 = dx * dx + dy * dy
        d2[np.arange(len(r)), r] = np.inf
        id_key = np.broadcast_to(ids[None, :], d2.shape)
        order = np.lexsort((id_key, d2), axis=1)
        out[start : start + len(r)] = order[:, :k]
    return out


def build_reference_graph(
    m: ReferenceMap, k: int = REFERENCE_K, n_classes: int = MAX_CLASSES, symmetric: bool = False
) -> SpatialGraph:
    """Directed ``k``-nearest-neighbor graph over the landmarks (meters).

    ``symmetric=True`` adds the reverse of every edge.
    """
    n = len(m)
    if n <= k:
        raise ValueError(f"a {k}-NN graph needs more than {k} landmarks, map has {n}")
    nbrs = knn_indices(m.positions, m.ids, k)
    src = np.repeat(np.arange(n), k)
    dst = nbrs.reshape(-1)
    if symmetric:
        pairs = np.unique(np.concatenate([np.stack([src, dst], 1), np.stack([dst, src], 1)]), axis=0)
        src, dst = pairs[:, 0], pairs[:, 1]
    dx = m.positions[dst, 0] - m.positions[src, 0]
    dy = m.positions[dst, 1] - m.positions[src, 1]
    d = np.sqrt(dx * dx + dy * dy)
    return SpatialGraph(
        tuple(int(i) for i in m.ids),
        _embeddings(m.class_ids, m.positions, n_classes),
        np.stack([src, dst], axis=1),
        np.exp(-d),
        directed=not symmetric,
    )


# -- node selection ---------------------------------------------------------


class Policy(str, enum.Enum):
    TOP_N = "TopN_LM"
    TOP_2N = "Top2N_LM"
    RADIUS_30 = "Radius30"
    COARSE_BB = "CoarseBB"
    NOISY_GT = "NoisyGT"
    GT = "GT"


CLI_POLICIES = {
    "nlm": Policy.TOP_N,
    "2nlm": Policy.TOP_2N,
    "r30": Policy.RADIUS_30,
    "coarsebb": Policy.COARSE_BB,
    "noisygt": Policy.NOISY_GT,
}


@dataclass(frozen=True)
class NodeSelection:
    selected: frozenset[int]
    policy: Policy

    def __len__(self) -> int:
        return len(self.selected)


def _ranked_ids(field: SimilarityField) -> list[int]:
    return [i for i, _ in sorted(zip(field.landmark_ids, field.scores), key=lambda t: (-t[1], t[0]))]


def select_nodes(
    field: SimilarityField,
    q: LocalMap,
    m: ReferenceMap,
    policy: Policy,
    radius: float = RADIUS_SELECTION_M,
) -> NodeSelection:
    """Turn a similarity field into a landmark subset."""
    policy = Policy(policy)
    if set(field.landmark_ids) != set(m.index_of):
        raise ValueError("similarity field does not cover the reference map")
    ranked = _ranked_ids(field)
    if policy is Policy.TOP_N:
        chosen = ranked[: len(q)]
    elif policy is Policy.TOP_2N:
        chosen = ranked[: 2 * len(q)]
    elif policy is Policy.RADIUS_30:
        center = m.positions[m.index_of[ranked[0]]]
        d = m.positions - center
        inside = np.flatnonzero(np.sum(d * d, axis=1) <= radius * radius)
        chosen = [int(m.ids[i]) for i in inside]
    else:
        raise ValueError(f"policy {policy.value} does not read a similarity field")
    return NodeSelection(frozenset(chosen), policy)


def coarse_bb_rectangle(
    q: LocalMap, m: ReferenceMap, inflation: float = COARSE_BB_INFLATION
) -> tuple[float, float, float, float]:
    """``(xmin, ymin, xmax, ymax)`` around the matched landmarks and the camera.

    Each dimension grows by ``inflation`` of its size, split evenly on both sides.
    """
    if q.gt_matches is None or q.gt_pose is None:
        raise PreconditionError(f"query {q.query_id!r} needs ground-truth matches and pose")
    pts = np.array([m.landmark(lid).position for _, lid in q.gt_matches] + [(q.gt_pose.x, q.gt_pose.y)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.5 * inflation * (hi - lo)
    lo, hi = lo - pad, hi + pad
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def coarse_bb(q: LocalMap, m: ReferenceMap, inflation: float = COARSE_BB_INFLATION) -> NodeSelection:
    """All landmarks inside the inflated ground-truth rectangle."""
    x0, y0, x1, y1 = coarse_bb_rectangle(q, m, inflation)
    p = m.positions
    inside = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
    chosen = {int(i) for i in m.ids[inside]}
    # matched landmarks sit inside by construction; guard against rounding at the edges
    chosen |= q.gt_landmark_ids()
    return NodeSelection(frozenset(chosen), Policy.COARSE_BB)


def noisy_gt(q: LocalMap, m: ReferenceMap, k: int = REFERENCE_K) -> NodeSelection:
    """Ground-truth landmarks plus each one's ``k`` nearest neighbors."""
    if q.gt_matches is None:
        raise PreconditionError(f"query {q.query_id!r} needs ground-truth matches")
    gt = sorted(q.gt_landmark_ids())
    rows = [m.index_of[i] for i in gt]
    k = min(k, len(m) - 1)
    chosen = set(gt)
    if k > 0:
        chosen |= {int(m.ids[j]) for j in knn_indices(m.positions, m.ids, k, rows).reshape(-1)}
    return NodeSelection(frozenset(chosen), Policy.NOISY_GT)


def gt_selection(q: LocalMap) -> NodeSelection:
    return NodeSelection(frozenset(q.gt_landmark_ids()), Policy.GT)


# -- metrics ----------------------------------------------------------------


@dataclass(frozen=True)
class CoarseMetrics:
    precision: float
    recall: float
    success: float


def coarse_metrics(sel: NodeSelection | Iterable[int], gt: Iterable[int]) -> CoarseMetrics:
    selected = set(sel.selected if isinstance(sel, NodeSelection) else sel)
    truth = set(gt)
    if not truth:
        raise ValueError("ground-truth landmark set is empty")
    hits = len(selected & truth)
    precision = hits / len(selected) if selected else 0.0
    return CoarseMetrics(precision, hits / len(truth), 1.0 if hits >= SUCCESS_MIN_CORRECT else 0.0)


def mean_metrics(rows: Sequence[CoarseMetrics]) -> CoarseMetrics:
    if not rows:
        raise ValueError("no metrics to average")
    return CoarseMetrics(
        float(np.mean([r.precision for r in rows])),
        float(np.mean([r.recall for r in rows])),
        float(np.mean([r.success for r in rows])),
    )


# -- training objectives as plain functions -----------------------------------


def triplet_loss(query_emb, pos_emb, neg_emb, margin: float) -> float:
    """``max(|q - pos| - |q - neg| + margin, 0)``."""
    q, p, n = (np.asarray(v, dtype=float).reshape(-1) for v in (query_emb, pos_emb, neg_emb))
    if not (q.shape == p.shape == n.shape):
        raise ValueError(f"embedding sizes differ: {q.shape}, {p.shape}, {n.shape}")
    return max(float(np.linalg.norm(q - p) - np.linalg.norm(q - n)) + margin, 0.0)


def similarity_distance(score: float) -> float:
    """Target embedding distance for a neighbor-similarity score."""
    return 1.0 - score


def nsim_loss(query_emb, ref_embs, target_d: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted L1 gap between embedding distances and target distances."""
    q = np.asarray(query_emb, dtype=float).reshape(-1)
    refs = np.asarray(ref_embs, dtype=float)
    if refs.ndim == 1:
        refs = refs[None, :]
    t = np.asarray(target_d, dtype=float)
    w = np.asarray(weights, dtype=float)
    if not (len(refs) == len(t) == len(w)):
        raise ValueError(f"lengths differ: {len(refs)} embeddings, {len(t)} targets, {len(w)} weights")
    if refs.shape[1] != q.shape[0]:
        raise ValueError("reference and query embeddings differ in size")
    if not math.isclose(float(w.sum()), 1.0, abs_tol=1e-9):
        raise ValueError(f"weights sum to {w.sum()}, expected 1")
    dist = np.linalg.norm(refs - q[None, :], axis=1)
    return float(np.sum(np.abs(dist - t) * w))
