"""Fine-grained 3DoF localization inside a restricted reference region."""

from __future__ import annotations

import enum
import math
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateConfigurationError
from .geometry import angular_error, pose_from_transform, procrustes_align
from .matching import (
    _SearchBudgetExceeded,
    assignment_count,
    correspondence_search,
    hypothesis_from_rows,
    rank_hypotheses,
)
from .model import LocalMap, Pose3DoF, ReferenceMap

MIN_CORRESPONDENCES = 3


class Provenance(str, enum.Enum):
    COARSE = "CoarseOutput"
    COARSE_BB = "CoarseBB"
    NOISY_GT = "NoisyGT"
    GT = "GT"


class Status(str, enum.Enum):
    LOCALIZED = "Localized"
    FAILED = "Failed"


@dataclass(frozen=True)
class RegionProposal:
    region: ReferenceMap
    provenance: Provenance = Provenance.COARSE

    @classmethod
    def from_ids(cls, m: ReferenceMap, landmark_ids: Iterable[int], provenance=Provenance.COARSE) -> "RegionProposal":
        ids = set(landmark_ids)
        unknown = ids - set(m.index_of)
        if unknown:
            raise ValueError(f"landmarks {sorted(unknown)} are not part of {m.scene_id!r}")
        return cls(m.subset(ids), Provenance(provenance))

    @property
    def scene_id(self) -> str:
        return self.region.scene_id

    @property
    def landmark_ids(self) -> set[int]:
        return {lm.id for lm in self.region.landmarks}


@dataclass(frozen=True)
class FineResult:
    pose: Pose3DoF | None
    status: Status
    failure_reason: str | None = None
    method: str | None = None
    inliers: int = 0

    def __post_init__(self):
        if self.status is Status.LOCALIZED and self.pose is None:
            raise ValueError("a localized result needs a pose")

    @property
    def localized(self) -> bool:
        return self.status is Status.LOCALIZED

    @classmethod
    def failed(cls, reason: str) -> "FineResult":
        return cls(None, Status.FAILED, reason)


@dataclass(frozen=True)
class FineParams:
    brute_force_budget: int = 200_000
    ransac_iterations: int = 2_000
    inlier_threshold: float = 0.05
    seed: int = 0


def matchable_count(query_cls: Sequence[int], region_cls: Sequence[int]) -> int:
    """Largest number of query objects that can receive a same-class landmark."""
    have = Counter(int(c) for c in region_cls)
    return sum(min(k, have.get(c, 0)) for c, k in Counter(int(c) for c in query_cls).items())


def query_rng(query_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(query_id.encode("utf-8"))])


def _inlier_matches(q: LocalMap, region: ReferenceMap, w: complex, mean_a: complex, mean_b: complex, thr: float):
    """One-to-one same-class matches between query objects and transformed landmarks."""
    lm = region.positions[:, 0] + 1j * region.positions[:, 1]
    proj = w * (lm - mean_a) + mean_b
    qz = q.positions[:, 0] + 1j * q.positions[:, 1]
    dist = np.abs(qz[:, None] - proj[None, :])
    dist[q.class_ids[:, None] != region.class_ids[None, :]] = np.inf
    cost = np.where(dist <= thr, dist, 1e6)
    r, c = linear_sum_assignment(cost)
    ok = cost[r, c] <= thr
    return r[ok], c[ok], dist[r[ok], c[ok]]


def _ransac(q: LocalMap, region: ReferenceMap, params: FineParams) -> FineResult:
    rng = query_rng(q.query_id, params.seed)
    q_cls, r_cls = q.class_ids, region.class_ids
    rep = np.flatnonzero(np.isin(q_cls, r_cls))
    n_iter = params.ransac_iterations

    slots = rep[np.argsort(rng.random((n_iter, len(rep))), axis=1)[:, :3]]
    picks = np.empty_like(slots)
    for c in np.unique(q_cls[rep]):
        pool = np.flatnonzero(r_cls == c)
        mask = q_cls[slots] == c
        picks[mask] = pool[rng.integers(0, len(pool), size=int(mask.sum()))]
    distinct = (picks[:, 0] != picks[:, 1]) & (picks[:, 0] != picks[:, 2]) & (picks[:, 1] != picks[:, 2])
    slots, picks = slots[distinct], picks[distinct]
    if len(slots) == 0:
        return FineResult.failed("no consensus")

    lm = region.positions[:, 0] + 1j * region.positions[:, 1]
    qz = q.positions[:, 0] + 1j * q.positions[:, 1]
    a, b = lm[picks], qz[slots]
    mean_a, mean_b = a.mean(axis=1), b.mean(axis=1)
    a0, b0 = a - mean_a[:, None], b - mean_b[:, None]
    saa = np.sum(np.abs(a0) ** 2, axis=1)
    valid = saa > 0
    w = np.where(valid, np.sum(np.conj(a0) * b0, axis=1) / np.where(valid, saa, 1.0), 0.0)
    valid &= np.abs(w) > 0

    proj = w[:, None] * (lm[None, :] - mean_a[:, None]) + mean_b[:, None]  # (S, M) in query units
    dist = np.abs(qz[None, :, None] - proj[:, None, :])  # (S, n, M)
    dist = np.where((q_cls[:, None] == r_cls[None, :])[None], dist, np.inf)
    nearest = dist.min(axis=2)
    inl = nearest <= params.inlier_threshold
    counts = np.where(valid, inl.sum(axis=1), -1)
    sq = np.where(inl, nearest**2, 0.0).sum(axis=1)
    rms = np.sqrt(sq / np.maximum(counts, 1))
    best = int(np.lexsort((np.arange(len(counts)), rms, -counts))[0])
    if counts[best] < MIN_CORRESPONDENCES:
        return FineResult.failed("no consensus")

    cur_w, cur_a, cur_b = w[best], mean_a[best], mean_b[best]
    forward = None
    n_inliers = 0
    for _ in range(3):
        qi, li, _ = _inlier_matches(q, region, cur_w, cur_a, cur_b, params.inlier_threshold)
        if len(qi) < MIN_CORRESPONDENCES:
            break
        try:
            forward, _ = procrustes_align(q.positions[qi], region.positions[li], with_scale=True)
            back, _ = procrustes_align(region.positions[li], q.positions[qi], with_scale=True)
        except DegenerateConfigurationError:
            break
        n_inliers = len(qi)
        cur_w = back.scale * np.exp(1j * back.rotation)
        cur_a = 0.0
        cur_b = back.translation[0] + 1j * back.translation[1]
    if forward is None:
        return FineResult.failed("no consensus")
    return FineResult(pose_from_transform(forward), Status.LOCALIZED, method="ransac", inliers=n_inliers)


def fine_localize(q: LocalMap, region: RegionProposal | ReferenceMap, params: FineParams = FineParams()) -> FineResult:
    """Camera pose of ``q`` from correspondences inside ``region``.

    Exhaustive search runs when every query object can be matched and the
    alignment budget allows it; otherwise a RANSAC search over minimal
    three-correspondence samples takes over.
    """
    ref = region.region if isinstance(region, RegionProposal) else region
    if matchable_count(q.class_ids, ref.class_ids) < MIN_CORRESPONDENCES:
        return FineResult.failed("unmatchable")
    if assignment_count(q.class_ids, ref.class_ids) > 0:
        try:
            outcome = correspondence_search(
                q.positions, q.class_ids, ref.positions, ref.class_ids, top_k=1, budget=params.brute_force_budget
            )
        except _SearchBudgetExceeded:
            pass
        else:
            hyps = [h for h in (hypothesis_from_rows(q, ref, r) for r in outcome.rows) if h is not None]
            ranked, _ = rank_hypotheses(hyps)
            if ranked:
                return FineResult(ranked[0].pose, Status.LOCALIZED, method="brute_force", inliers=len(q))
    return _ransac(q, ref, params)


def pose_loss(est: Pose3DoF, gt: Pose3DoF) -> float:
    """Euclidean position error (meters) plus wrapped heading error (radians)."""
    return math.hypot(est.x - gt.x, est.y - gt.y) + angular_error(est.heading, gt.heading)


@dataclass(frozen=True)
class FineMetrics:
    median_orientation_deg: float | None
    median_position_m: float | None
    failures: int
    localized: int


def fine_metrics(results: Sequence[tuple[FineResult, Pose3DoF]]) -> FineMetrics:
    """Medians over localized results; failures are only counted."""
    if not results:
        raise ValueError("no results to summarize")
    ori, pos = [], []
    failures = 0
    for res, gt in results:
        if not res.localized:
            failures += 1
            continue
        ori.append(math.degrees(angular_error(res.pose.heading, gt.heading)))
        pos.append(math.hypot(res.pose.x - gt.x, res.pose.y - gt.y))
    if not ori:
        return FineMetrics(None, None, failures, 0)
    return FineMetrics(float(np.median(ori)), float(np.median(pos)), failures, len(ori))
