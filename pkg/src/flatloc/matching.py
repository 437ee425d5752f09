"""Correspondence search between local maps and reference maps.

Two consumers share one search engine:

* :func:`brute_force_localize` certifies that a query admits a unique
  class-consistent alignment onto the full reference map.
* :func:`neighbor_similarity` scores how well the query fits the
  neighborhood of one reference landmark.

Candidate assignments are scored by aligning the *landmark subset onto the
query* with a similarity transform, so residuals are measured in normalized
query units and do not depend on the map's metric scale. Adding
correspondences can only grow that residual, which makes it a valid
branch-and-bound lower bound.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import BudgetExceededError, DegenerateConfigurationError, UnmatchableError
from .geometry import SimilarityTransform2D, alignment_sse, pose_from_transform, procrustes_align
from .model import LocalMap, Pose3DoF, ReferenceMap

DEFAULT_RADIUS_M = 50.0
DEFAULT_SAMPLE_BUDGET = 20_000
DEFAULT_BRUTE_FORCE_BUDGET = 10_000_000
TIE_TOLERANCE = 1e-9

_CHUNK_ROWS = 1 << 18


# -- search engine ----------------------------------------------------------


class _SearchBudgetExceeded(Exception):
    def __init__(self, rows, sse, evaluated):
        super().__init__("alignment budget exceeded")
        self.rows, self.sse, self.evaluated = rows, sse, evaluated


def assignment_count(query_classes: Iterable[int], landmark_classes: Iterable[int]) -> int:
    """Number of class-consistent injective assignments."""
    have = Counter(int(c) for c in landmark_classes)
    total = 1
    for c, k in Counter(int(c) for c in query_classes).items():
        total *= math.perm(have.get(c, 0), k)
    return total


def _expand(rows: np.ndarray, cand: np.ndarray) -> np.ndarray:
    n_rows = len(rows)
    grown = np.repeat(rows, len(cand), axis=0)
    col = np.tile(cand, n_rows)
    fresh = ~np.any(grown == col[:, None], axis=1)
    return np.concatenate([grown[fresh], col[fresh, None]], axis=1)


def _expand_filtered(rows, cand, lm_pts, target, threshold, evaluated, budget, partial):
    """Grow ``rows`` by one column, keeping rows whose SSE stays under ``threshold``."""
    if len(rows) == 0:
        return rows, np.empty(0), evaluated
    step = max(1, _CHUNK_ROWS // max(1, len(cand)))
    kept_rows, kept_sse = [], []
    for start in range(0, len(rows), step):
        grown = _expand(rows[start : start + step], cand)
        evaluated += len(grown)
        if evaluated > budget:
            raise _SearchBudgetExceeded(*partial, evaluated)
        sse = alignment_sse(lm_pts[grown], target)
        keep = sse <= threshold
        kept_rows.append(grown[keep])
        kept_sse.append(sse[keep])
    return np.concatenate(kept_rows), np.concatenate(kept_sse), evaluated


def _best(rows: np.ndarray, sse: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    # lexsort: last key is primary
    order = np.lexsort(tuple(rows[:, j] for j in range(rows.shape[1] - 1, -1, -1)) + (sse,))
    order = order[:k]
    return rows[order], sse[order]


@dataclass
class SearchOutcome:
    rows: np.ndarray  # (R, n) landmark indices in query slot order, best first
    sse: np.ndarray
    evaluated: int
    total: int


def correspondence_search(
    query_pts: np.ndarray,
    query_cls: np.ndarray,
    lm_pts: np.ndarray,
    lm_cls: np.ndarray,
    top_k: int = 1,
    tie_tol: float = TIE_TOLERANCE,
    budget: int = DEFAULT_BRUTE_FORCE_BUDGET,
    beam_width: int = 32,
) -> SearchOutcome:
    """Exact top-``k`` class-consistent assignments by branch and bound.

    Every hypothesis whose SSE ties the ``k``-th best within ``tie_tol`` (as
    RMS) is returned as well. A beam pass first produces complete
    hypotheses so the exact pass can prune from the first level.
    """
    query_pts = np.asarray(query_pts, dtype=float)
    lm_pts = np.asarray(lm_pts, dtype=float)
    query_cls = np.asarray(query_cls, dtype=int)
    lm_cls = np.asarray(lm_cls, dtype=int)
    n = len(query_pts)
    if n < 3:
        raise ValueError("at least three query objects are required")
    total = assignment_count(query_cls, lm_cls)
    if total == 0:
        missing = {
            int(c): k
            for c, k in Counter(query_cls.tolist()).items()
            if int(np.sum(lm_cls == c)) < k
        }
        raise UnmatchableError(f"not enough landmarks for classes {sorted(missing)}")

    cands = [np.flatnonzero(lm_cls == c) for c in query_cls]
    order = sorted(range(n), key=lambda j: (len(cands[j]), j))
    target = query_pts[order]
    centered = target - target.mean(axis=0)
    spread = float(np.sum(centered * centered))
    slack = 1e-12 * (1.0 + spread) + n * tie_tol**2 + 2.0 * math.sqrt(n * spread) * tie_tol

    inverse = np.argsort(order)

    def beam(rows, sse, evaluated):
        # cheap complete hypotheses: keep the best few at every level
        brow, bsse = _best(rows, sse, beam_width)
        for d in range(3, n):
            brow = _expand(brow, cands[order[d]])
            if len(brow) == 0:
                return np.empty((0, n), int), np.empty(0), evaluated
            evaluated += len(brow)
            bsse = alignment_sse(lm_pts[brow], target[: d + 1])
            brow, bsse = _best(brow, bsse, beam_width)
        return brow, bsse, evaluated

    rows = _expand(cands[order[0]][:, None], cands[order[1]])
    width = len(cands[order[2]])
    if len(rows) * width > budget:
        # spend the budget on a prefix of the enumeration, then give up
        rows = _expand(rows[: max(1, budget // max(1, width))], cands[order[2]])
        sse = alignment_sse(lm_pts[rows], target[:3])
        brow, bsse, evaluated = beam(rows, sse, len(rows))
        raise _SearchBudgetExceeded(brow[:, inverse], bsse, evaluated)
    rows = _expand(rows, cands[order[2]])
    evaluated = len(rows)
    sse = alignment_sse(lm_pts[rows], target[:3])
    partial = (np.empty((0, n), int), np.empty(0))

    if n > 3:
        brow, bsse, evaluated = beam(rows, sse, evaluated)
        complete = len(brow) > 0
        if complete and len(bsse) >= top_k:
            tau = float(np.sort(bsse)[top_k - 1]) + slack
        else:
            tau = math.inf
        partial = (brow[:, inverse], bsse)

        keep = sse <= tau
        rows, sse = rows[keep], sse[keep]
        for d in range(3, n):
            rows, sse, evaluated = _expand_filtered(
                rows, cands[order[d]], lm_pts, target[: d + 1], tau, evaluated, budget, partial
            )
    if evaluated > budget:
        raise _SearchBudgetExceeded(*partial, evaluated)

    if len(rows):
        ranked_rows, ranked_sse = _best(rows, sse, len(rows))
        cutoff = ranked_sse[min(top_k, len(ranked_sse)) - 1] + slack
        keep = ranked_sse <= cutoff
        keep[:top_k] = True
        ranked_rows, ranked_sse = ranked_rows[keep], ranked_sse[keep]
    else:
        ranked_rows, ranked_sse = rows, sse
    return SearchOutcome(ranked_rows[:, inverse], ranked_sse, evaluated, total)


# -- brute-force oracle -----------------------------------------------------


@dataclass(frozen=True)
class MatchHypothesis:
    """One class-consistent assignment and its alignment.

    ``transform`` maps normalized query coordinates into the map frame.
    ``residual`` is the RMS misfit in normalized query units and
    ``residual_m`` the same misfit expressed in meters.
    """

    assignment: tuple[tuple[int, int], ...]
    transform: SimilarityTransform2D
    residual: float
    residual_m: float

    @property
    def pose(self) -> Pose3DoF:
        return pose_from_transform(self.transform)

    @property
    def landmark_ids(self) -> tuple[int, ...]:
        return tuple(lid for _, lid in self.assignment)


class Ranking(list):
    """Hypotheses sorted by residual, best first.

    ``ambiguous`` is set when the best residual is shared (within the tie
    tolerance) by more than one assignment.
    """

    def __init__(self, items=(), ambiguous: bool = False, evaluated: int = 0, total: int = 0):
        super().__init__(items)
        self.ambiguous = ambiguous
        self.evaluated = evaluated
        self.total = total

    @property
    def best(self) -> MatchHypothesis:
        return self[0]


def hypothesis_from_rows(q: LocalMap, m: ReferenceMap, idx: Sequence[int]) -> MatchHypothesis | None:
    idx = np.asarray(idx, dtype=int)
    lm = m.positions[idx]
    try:
        _, residual = procrustes_align(lm, q.positions, with_scale=True)
        forward, _ = procrustes_align(q.positions, lm, with_scale=True)
    except DegenerateConfigurationError:
        return None
    assignment = tuple((slot, int(m.ids[i])) for slot, i in zip(q.slots, idx))
    return MatchHypothesis(assignment, forward, residual, residual * forward.scale)


def rank_hypotheses(hyps: Iterable[MatchHypothesis], tol: float = TIE_TOLERANCE) -> tuple[list[MatchHypothesis], bool]:
    """Sort by residual; residuals within ``tol`` of a group's first count as equal
    and are ordered by landmark ids."""
    pool = sorted(hyps, key=lambda h: (h.residual, h.landmark_ids))
    out: list[MatchHypothesis] = []
    i = 0
    ambiguous = False
    while i < len(pool):
        j = i + 1
        while j < len(pool) and pool[j].residual <= pool[i].residual + tol:
            j += 1
        group = sorted(pool[i:j], key=lambda h: h.landmark_ids)
        if i == 0 and len(group) > 1:
            ambiguous = True
        out.extend(group)
        i = j
    return out, ambiguous


def brute_force_localize(
    q: LocalMap,
    m: ReferenceMap,
    top_k: int = 1,
    budget: int = DEFAULT_BRUTE_FORCE_BUDGET,
    tie_tol: float = TIE_TOLERANCE,
) -> Ranking:
    """Exhaustive class-consistent matching of a local map onto a reference map.

    Returns the ``top_k`` best hypotheses plus any assignment tying with them.
    The first hypothesis gives the predicted matches and camera pose.
    """
    try:
        outcome = correspondence_search(
            q.positions, q.class_ids, m.positions, m.class_ids, top_k=top_k, tie_tol=tie_tol, budget=budget
        )
    except _SearchBudgetExceeded as exc:
        hyps = [h for h in (hypothesis_from_rows(q, m, r) for r in exc.rows) if h is not None]
        ranked, _ = rank_hypotheses(hyps, tie_tol)
        raise BudgetExceededError(
            f"brute force for {q.query_id!r} exceeded {budget} alignments", ranked, exc.evaluated
        ) from None
    hyps = [h for h in (hypothesis_from_rows(q, m, r) for r in outcome.rows) if h is not None]
    ranked, ambiguous = rank_hypotheses(hyps, tie_tol)
    return Ranking(ranked, ambiguous, outcome.evaluated, outcome.total)


# -- neighbor similarity ----------------------------------------------------


def _neighborhood(m: ReferenceMap, center_idx: int, radius: float, tree: cKDTree | None = None) -> np.ndarray:
    center = m.positions[center_idx]
    if tree is None:
        d = m.positions - center
        return np.flatnonzero(np.sum(d * d, axis=1) <= radius * radius)
    return np.array(sorted(tree.query_ball_point(center, radius)), dtype=int)


def _sample_assignments(q_cls: np.ndarray, cand_cls: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random class-consistent injective assignments, shape ``(S, n)``."""
    out = np.empty((n_samples, len(q_cls)), dtype=int)
    for c in sorted(set(q_cls.tolist())):
        slots = np.flatnonzero(q_cls == c)
        pool = np.flatnonzero(cand_cls == c)
        picks = np.argsort(rng.random((n_samples, len(pool))), axis=1)[:, : len(slots)]
        out[:, slots] = pool[picks]
    return out


@dataclass(frozen=True)
class NeighborScore:
    score: float
    min_residual: float
    d_sub: float
    subset: tuple[int, ...]  # landmark ids of the best subset in slot order
    exact: bool  # False when the minimum comes from random sampling


def _neighbor_score(
    q: LocalMap,
    m: ReferenceMap,
    center_idx: int,
    radius: float,
    sample_budget: int,
    seed: int,
    tree: cKDTree | None = None,
) -> NeighborScore:
    nbr = _neighborhood(m, center_idx, radius, tree)
    q_cls = q.class_ids
    cand_pts = m.positions[nbr]
    cand_cls = m.class_ids[nbr]
    count = assignment_count(q_cls, cand_cls)
    if count == 0:
        return NeighborScore(0.0, 1.0, 1.0, (), True)

    # Branch and bound gives the exact minimum; above the budget it may still
    # finish within ``sample_budget`` alignments, else random subsets stand in.
    try:
        outcome = correspondence_search(
            q.positions, q_cls, cand_pts, cand_cls, top_k=1,
            budget=math.inf if count <= sample_budget else sample_budget,
        )
        rows = outcome.rows
        exact = True
    except _SearchBudgetExceeded:
        exact = False
        lid = int(m.ids[center_idx])
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, lid & 0xFFFFFFFF])
        rows = _sample_assignments(q_cls, cand_cls, sample_budget, rng)
        sse = alignment_sse(cand_pts[rows], q.positions)
        best = float(sse.min())
        near = np.flatnonzero(sse <= best + 1e-12 * (1.0 + best) + 1e-15)
        rows = np.unique(rows[near], axis=0)

    # residuals are taken with the query scaled to unit RMS spread, which
    # makes them full Procrustes distances and bounds them by 1
    qc = q.positions - q.positions.mean(axis=0)
    spread = math.sqrt(float(np.mean(np.sum(qc * qc, axis=1)))) or 1.0
    center = m.positions[center_idx]
    candidates = []
    for r in rows:
        sub = cand_pts[r]
        try:
            _, res = procrustes_align(sub, q.positions, with_scale=True)
        except DegenerateConfigurationError:
            res = spread
        res /= spread
        d_sub = float(np.linalg.norm(sub.mean(axis=0) - center)) / radius
        candidates.append((res, d_sub, tuple(int(i) for i in m.ids[nbr[r]])))
    best_res = min(c[0] for c in candidates)
    # among residual ties the subset closest to the landmark wins
    res, d_sub, ids = min((c for c in candidates if c[0] <= best_res + TIE_TOLERANCE), key=lambda c: (c[1], c[2]))
    min_r = min(1.0, res)
    d_sub = min(1.0, d_sub)
    return NeighborScore((1.0 - min_r) * (1.0 - d_sub), min_r, d_sub, ids, exact)


def neighbor_similarity(
    q: LocalMap,
    m: ReferenceMap,
    landmark: int,
    radius: float = DEFAULT_RADIUS_M,
    sample_budget: int = DEFAULT_SAMPLE_BUDGET,
    seed: int = 0,
) -> float:
    """Geometric and semantic fit between the query and a landmark's neighborhood.

    Score is ``(1 - min_r) * (1 - d_sub)`` where ``min_r`` is the smallest
    alignment residual over class-consistent subsets within ``radius``,
    measured with the query scaled to unit RMS spread, and
    ``d_sub`` the distance from the best subset's centroid to the landmark,
    divided by ``radius``. Both terms are clamped to ``[0, 1]``.
    """
    return _neighbor_score(q, m, m.index_of[landmark], radius, sample_budget, seed).score


@dataclass(frozen=True)
class SimilarityParams:
    radius: float = DEFAULT_RADIUS_M
    sample_budget: int = DEFAULT_SAMPLE_BUDGET
    seed: int = 0


@dataclass(frozen=True)
class SimilarityField:
    query_id: str
    scene_id: str
    seed: int
    landmark_ids: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.landmark_ids) != len(self.scores):
            raise ValueError("one score per landmark is required")
        for s in self.scores:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score {s} outside [0, 1]")

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.landmark_ids, self.scores))

    def argmax(self) -> int:
        """Highest-scoring landmark id; ties go to the smallest id."""
        return min(zip(self.landmark_ids, self.scores), key=lambda t: (-t[1], t[0]))[0]

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "scene_id": self.scene_id,
            "seed": self.seed,
            "scores": [{"landmark_id": i, "s": s} for i, s in zip(self.landmark_ids, self.scores)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimilarityField":
        return cls(
            doc["query_id"],
            doc["scene_id"],
            int(doc["seed"]),
            tuple(int(e["landmark_id"]) for e in doc["scores"]),
            tuple(float(e["s"]) for e in doc["scores"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def similarity_field(
    q: LocalMap,
    m: ReferenceMap,
    params: SimilarityParams = SimilarityParams(),
    executor=None,
) -> SimilarityField:
    """Neighbor similarity for every landmark of ``m``.

    Landmarks are independent, so an ``executor`` (anything with an ordered
    ``map``) may evaluate them concurrently; results keep landmark order.
    """
    tree = cKDTree(m.positions)
    indices = range(len(m.landmarks))

    def one(i):
        return _neighbor_score(q, m, i, params.radius, params.sample_budget, params.seed, tree).score

    scores = list(executor.map(one, indices)) if executor is not None else [one(i) for i in indices]
    return SimilarityField(q.query_id, m.scene_id, params.seed, tuple(int(i) for i in m.ids), tuple(scores))


def similarity_weights(scores: Sequence[float]) -> list[float]:
    """Scores rescaled to sum to one; all-zero input falls back to uniform weights."""
    if len(scores) == 0:
        raise ValueError("need at least one score")
    s = np.asarray(scores, dtype=float)
    if np.any(s < 0):
        raise ValueError("scores must be non-negative")
    total = float(s.sum())
    if total == 0.0:
        return [1.0 / len(s)] * len(s)
    return (s / total).tolist()
