"""2D alignment and projection primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateConfigurationError, InvalidDepthError, TooFewObjectsError
from .model import (
    MIN_QUERY_OBJECTS,
    LocalMap,
    LocalObject,
    MapSource,
    Pose3DoF,
    ReferenceMap,
    SemanticClass,
    normalize_angle,
    normalize_local_positions,
)

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class SimilarityTransform2D:
    """``p -> scale * R(rotation) @ p + translation``."""

    rotation: float
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "rotation", float(self.rotation))
        object.__setattr__(self, "scale", float(self.scale))
        tx, ty = self.translation
        object.__setattr__(self, "translation", (float(tx), float(ty)))

    @classmethod
    def identity(cls) -> "SimilarityTransform2D":
        return cls(0.0)

    @property
    def linear(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.linear.T + np.asarray(self.translation)

    def inverse(self) -> "SimilarityTransform2D":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx, ty = self.translation
        return SimilarityTransform2D(
            -self.rotation,
            inv_scale,
            (-inv_scale * (c * tx - s * ty), -inv_scale * (s * tx + c * ty)),
        )

    def compose(self, other: "SimilarityTransform2D") -> "SimilarityTransform2D":
        """``self ∘ other``: apply ``other`` first."""
        t = self.apply(np.asarray(other.translation))
        return SimilarityTransform2D(self.rotation + other.rotation, self.scale * other.scale, (t[0], t[1]))

    def apply_heading(self, heading: float) -> float:
        return normalize_angle(heading + self.rotation)

    def apply_pose(self, pose: Pose3DoF) -> Pose3DoF:
        p = self.apply(pose.position)
        return Pose3DoF(p[0], p[1], self.apply_heading(pose.heading))


def _as_complex(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts[..., 0] + 1j * pts[..., 1]


def procrustes_align(source, target, with_scale: bool = True) -> tuple[SimilarityTransform2D, float]:
    """Least-squares similarity (or rigid) transform taking ``source`` onto ``target``.

    Points correspond by index. Returns the transform and the RMS distance
    between transformed source points and their targets.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 2)
    tgt = np.asarray(target, dtype=float).reshape(-1, 2)
    if len(src) != len(tgt):
        raise ValueError(f"point counts differ: {len(src)} vs {len(tgt)}")
    if len(src) < 2:
        raise ValueError("at least two correspondences are required")

    a, b = _as_complex(src), _as_complex(tgt)
    mean_a, mean_b = a.mean(), b.mean()
    a0, b0 = a - mean_a, b - mean_b
    saa = float(np.sum(a0.real**2 + a0.imag**2))
    extent = 1.0 + float(np.max(np.abs(a)))
    if saa <= len(a) * (1e-12 * extent) ** 2:
        raise DegenerateConfigurationError("source points coincide; rotation is undetermined")
    z = np.sum(np.conj(a0) * b0)
    if abs(z) == 0.0:
        raise DegenerateConfigurationError("target is orthogonal to source; rotation is undetermined")
    rotation = float(np.angle(z))
    scale = abs(z) / saa if with_scale else 1.0
    t = mean_b - scale * np.exp(1j * rotation) * mean_a
    transform = SimilarityTransform2D(rotation, scale, (t.real, t.imag))
    diff = transform.apply(src) - tgt
    residual = math.sqrt(float(np.mean(np.sum(diff * diff, axis=1))))
    return transform, residual


def alignment_sse(sources: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Batched minimum sum of squared errors of a similarity fit.

    ``sources`` holds ``N`` candidate point sets of shape ``(N, d, 2)`` that
    are each aligned onto the single ``target`` set of shape ``(d, 2)``. The
    result is in the target's units. Collapsed sources fit only the target
    centroid and score the target's full spread.
    """
    a = _as_complex(sources)
    b = _as_complex(target)
    a0 = a - a.mean(axis=-1, keepdims=True)
    b0 = b - b.mean()
    sbb = float(np.sum(b0.real**2 + b0.imag**2))
    saa = np.sum(a0.real**2 + a0.imag**2, axis=-1)
    z = np.conj(a0) @ b0
    zz = z.real**2 + z.imag**2
    with np.errstate(divide="ignore", invalid="ignore"):
        sse = np.where(saa > 0, sbb - zz / np.where(saa > 0, saa, 1.0), sbb)
    return np.maximum(sse, 0.0)


def angular_error(a: float, b: float) -> float:
    """Absolute angular difference in ``[0, pi]``."""
    return abs(normalize_angle(float(a) - float(b)))


def align_scene_to_gps(reconstructed, nominal) -> SimilarityTransform2D:
    """Similarity transform registering reconstructed camera centers to GPS fixes."""
    rec = np.asarray(reconstructed, dtype=float).reshape(-1, 2)
    nom = np.asarray(nominal, dtype=float).reshape(-1, 2)
    if len(rec) != len(nom):
        raise ValueError("camera and GPS lists must pair up")
    if len(rec) < 3:
        raise ValueError("at least three cameras are needed for registration")
    transform, _ = procrustes_align(rec, nom, with_scale=True)
    return transform


# -- camera frames ---------------------------------------------------------


def camera_to_map(pose: Pose3DoF, meters_per_unit: float = 1.0) -> SimilarityTransform2D:
    """Transform taking local-map coordinates to the map frame.

    The local ``+y`` axis maps onto the pose heading.
    """
    return SimilarityTransform2D(pose.heading - HALF_PI, meters_per_unit, (pose.x, pose.y))


def pose_from_transform(transform: SimilarityTransform2D) -> Pose3DoF:
    """Camera pose encoded by a local-to-map transform."""
    tx, ty = transform.translation
    return Pose3DoF(tx, ty, transform.rotation + HALF_PI)


def gt_local_map(
    ref_map: ReferenceMap,
    pose: Pose3DoF,
    landmark_ids: Sequence[int],
    query_id: str,
    slots: Sequence[int] | None = None,
    image_token: str | None = None,
) -> LocalMap:
    """Ground-truth local map: selected landmarks expressed in the camera frame."""
    if len(landmark_ids) < MIN_QUERY_OBJECTS:
        raise TooFewObjectsError(f"{len(landmark_ids)} objects, need {MIN_QUERY_OBJECTS}")
    slots = list(range(len(landmark_ids))) if slots is None else list(slots)
    lms = [ref_map.landmark(i) for i in landmark_ids]
    world = np.array([lm.position for lm in lms])
    local = camera_to_map(pose).inverse().apply(world)
    normalized, _ = normalize_local_positions(local)
    objects = tuple(LocalObject(s, lm.label, tuple(p)) for s, lm, p in zip(slots, lms, normalized))
    return LocalMap(
        query_id=query_id,
        scene_id=ref_map.scene_id,
        objects=objects,
        source=MapSource.GT,
        gt_pose=pose,
        gt_matches=tuple(zip(slots, (int(i) for i in landmark_ids))),
        image_token=image_token,
    )


# -- depth-based back-projection -------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        cx, cy = self.principal_point
        w, h = self.image_size
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ValueError("principal point lies outside the image")

    def project(self, points_cam) -> np.ndarray:
        """Pinhole projection of camera-frame points (x right, y down, z forward)."""
        p = np.asarray(points_cam, dtype=float)
        cx, cy = self.principal_point
        return np.stack([cx + self.focal * p[..., 0] / p[..., 2], cy + self.focal * p[..., 1] / p[..., 2]], axis=-1)


@dataclass(frozen=True)
class Detection:
    """Bounding box ``(x0, y0, x1, y1)`` in pixels plus the depth samples inside it."""

    bbox: tuple[float, float, float, float]
    label: SemanticClass
    depth_samples: tuple[float, ...]

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.bbox)
        if not (x0 <= x1 and y0 <= y1):
            raise ValueError(f"malformed bounding box {self.bbox}")
        object.__setattr__(self, "bbox", (x0, y0, x1, y1))
        samples = tuple(float(d) for d in self.depth_samples)
        if not samples:
            raise ValueError("a detection needs at least one depth sample")
        if not all(math.isfinite(d) for d in samples):
            raise ValueError("depth samples must be finite")
        object.__setattr__(self, "depth_samples", samples)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    @property
    def median_depth(self) -> float:
        # lower median keeps the result one of the samples
        s = sorted(self.depth_samples)
        return s[(len(s) - 1) // 2]


def backproject_detection(det: Detection, k: CameraIntrinsics, depth_kind: str = "planar") -> np.ndarray:
    """Camera-frame 2D location ``(x, y)`` of a detection, ``y`` forward.

    ``depth_kind="planar"`` intersects the ray through the box center with
    the fronto-parallel plane at the median depth. ``"range"`` instead walks
    the median depth along the ray.
    """
    x0, y0, x1, y1 = det.bbox
    w, h = k.image_size
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"bounding box {det.bbox} exceeds the {w}x{h} image")
    depth = det.median_depth
    if not depth > 0:
        raise InvalidDepthError(f"median depth {depth} is not positive")
    u, v = det.center
    cx, cy = k.principal_point
    ray = np.array([(u - cx) / k.focal, (v - cy) / k.focal, 1.0])
    if depth_kind == "planar":
        p = ray * depth
    elif depth_kind == "range":
        p = ray / np.linalg.norm(ray) * depth
    else:
        raise ValueError(f"unknown depth kind {depth_kind!r}")
    # drop the vertical image axis: upright camera, horizontal map plane
    return np.array([p[0], p[2]])


def build_local_map(
    dets: Sequence[Detection],
    k: CameraIntrinsics,
    query_id: str = "",
    scene_id: str = "",
    slots: Sequence[int] | None = None,
    depth_kind: str = "planar",
    gt_pose: Pose3DoF | None = None,
    gt_matches=None,
    image_token: str | None = None,
) -> LocalMap:
    """Depth-based local map from detections of one image."""
    if len(dets) < MIN_QUERY_OBJECTS:
        raise TooFewObjectsError(f"{len(dets)} detections, need {MIN_QUERY_OBJECTS}")
    slots = list(range(len(dets))) if slots is None else list(slots)
    local = np.array([backproject_detection(d, k, depth_kind) for d in dets])
    normalized, _ = normalize_local_positions(local)
    objects = tuple(LocalObject(s, d.label, tuple(p)) for s, d, p in zip(slots, dets, normalized))
    return LocalMap(
        query_id=query_id,
        scene_id=scene_id,
        objects=objects,
        source=MapSource.DEPTH,
        gt_pose=gt_pose,
        gt_matches=gt_matches,
        image_token=image_token,
    )
