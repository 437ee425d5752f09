"""Domain types: semantic classes, reference maps, local maps and poses.

Conventions used across the package:

* Map frame: local metric plane, meters. ``x`` east, ``y`` north.
* Heading: angle of the camera viewing direction, counter-clockwise from the
  map ``+x`` axis, normalized into ``(-pi, pi]``.
* Local maps: camera at the origin, ``+y`` along the viewing direction, ``+x``
  to the right along the image plane. Positions are divided by the largest
  object range so the farthest object sits on the unit circle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import PreconditionError

MAX_CLASSES = 42

TAU = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into ``(-pi, pi]``."""
    wrapped = math.remainder(float(theta), TAU)
    if wrapped <= -math.pi:
        wrapped += TAU
    return wrapped


@dataclass(frozen=True, order=True)
class SemanticClass:
    id: int
    name: str


class ClassRegistry:
    """Bidirectional id/name lookup for semantic classes."""

    def __init__(self, classes: Iterable[SemanticClass]):
        self._by_id: dict[int, SemanticClass] = {}
        self._by_name: dict[str, SemanticClass] = {}
        for c in classes:
            if c.id in self._by_id:
                raise ValueError(f"duplicate class id {c.id}")
            if c.name in self._by_name:
                raise ValueError(f"duplicate class name {c.name!r}")
            self._by_id[c.id] = c
            self._by_name[c.name] = c
        if len(self._by_id) > MAX_CLASSES:
            raise ValueError(f"registry holds {len(self._by_id)} classes, limit is {MAX_CLASSES}")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "ClassRegistry":
        return cls(SemanticClass(i, n) for i, n in enumerate(names))

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self):
        return iter(sorted(self._by_id.values()))

    def __contains__(self, item) -> bool:
        if isinstance(item, SemanticClass):
            return self._by_id.get(item.id) == item
        return item in self._by_name

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassRegistry) and list(self) == list(other)

    def by_name(self, name: str) -> SemanticClass:
        return self._by_name[name]

    def by_id(self, class_id: int) -> SemanticClass:
        return self._by_id[class_id]

    @property
    def size(self) -> int:
        """One-hot width: one past the largest class id."""
        return max(self._by_id) + 1 if self._by_id else 0


def _point(p) -> tuple[float, float]:
    x, y = (float(v) for v in p)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite position {p!r}")
    return (x, y)


@dataclass(frozen=True)
class ObjectLandmark:
    id: int
    position: tuple[float, float]
    label: SemanticClass

    def __post_init__(self):
        object.__setattr__(self, "position", _point(self.position))


@dataclass(frozen=True)
class GeoAnchor:
    """Geodetic origin of a map frame with a local equirectangular scale."""

    lat: float
    lon: float
    m_per_deg_lat: float = 111_320.0
    m_per_deg_lon: float | None = None

    def __post_init__(self):
        if self.m_per_deg_lon is None:
            object.__setattr__(self, "m_per_deg_lon", 111_320.0 * math.cos(math.radians(self.lat)))
        if self.m_per_deg_lat <= 0 or self.m_per_deg_lon <= 0:
            raise ValueError("anchor scale factors must be positive")

    def to_metric(self, lat: float, lon: float) -> tuple[float, float]:
        return ((lon - self.lon) * self.m_per_deg_lon, (lat - self.lat) * self.m_per_deg_lat)

    def to_geodetic(self, x: float, y: float) -> tuple[float, float]:
        return (self.lat + y / self.m_per_deg_lat, self.lon + x / self.m_per_deg_lon)


@dataclass(frozen=True)
class ReferenceMap:
    scene_id: str
    landmarks: tuple[ObjectLandmark, ...]
    city: str = ""
    anchor: GeoAnchor | None = None

    def __post_init__(self):
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        if not self.landmarks:
            raise ValueError(f"reference map {self.scene_id!r} has no landmarks")
        ids = [lm.id for lm in self.landmarks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"reference map {self.scene_id!r} has duplicate landmark ids")

    def __len__(self) -> int:
        return len(self.landmarks)

    @cached_property
    def positions(self) -> np.ndarray:
        out = np.array([lm.position for lm in self.landmarks], dtype=float).reshape(-1, 2)
        out.flags.writeable = False
        return out

    @cached_property
    def class_ids(self) -> np.ndarray:
        out = np.array([lm.label.id for lm in self.landmarks], dtype=int)
        out.flags.writeable = False
        return out

    @cached_property
    def ids(self) -> np.ndarray:
        out = np.array([lm.id for lm in self.landmarks], dtype=int)
        out.flags.writeable = False
        return out

    @cached_property
    def index_of(self) -> dict[int, int]:
        return {lm.id: i for i, lm in enumerate(self.landmarks)}

    def landmark(self, landmark_id: int) -> ObjectLandmark:
        return self.landmarks[self.index_of[landmark_id]]

    def subset(self, landmark_ids: Iterable[int]) -> "ReferenceMap":
        keep = set(landmark_ids)
        return ReferenceMap(
            self.scene_id,
            tuple(lm for lm in self.landmarks if lm.id in keep),
            city=self.city,
            anchor=self.anchor,
        )


@dataclass(frozen=True)
class Pose3DoF:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        for v in (self.x, self.y, self.heading):
            if not math.isfinite(v):
                raise ValueError("pose components must be finite")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])


class MapSource(str, enum.Enum):
    GT = "GroundTruthBased"
    DEPTH = "DepthBased"


class SplitKind(str, enum.Enum):
    EASY = "Easy"
    ALL = "All"


class Partition(str, enum.Enum):
    TRAIN = "Train"
    VAL = "Val"
    TEST = "Test"


class Difficulty(str, enum.Enum):
    EASY = "Easy"
    HARD_ONLY = "HardOnly"


@dataclass(frozen=True)
class LocalObject:
    slot: int
    label: SemanticClass
    position: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "position", _point(self.position))


MIN_QUERY_OBJECTS = 3


@dataclass(frozen=True)
class LocalMap:
    """Objects seen from one query image, in the normalized camera frame."""

    query_id: str
    scene_id: str
    objects: tuple[LocalObject, ...]
    source: MapSource = MapSource.GT
    gt_pose: Pose3DoF | None = None
    gt_matches: tuple[tuple[int, int], ...] | None = None
    image_token: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "source", MapSource(self.source))
        if len(self.objects) < MIN_QUERY_OBJECTS:
            raise ValueError(
                f"local map {self.query_id!r} has {len(self.objects)} objects, "
                f"at least {MIN_QUERY_OBJECTS} are required"
            )
        slots = [o.slot for o in self.objects]
        if len(set(slots)) != len(slots):
            raise ValueError(f"local map {self.query_id!r} repeats a slot index")
        if self.gt_matches is not None:
            matches = tuple(sorted((int(s), int(l)) for s, l in self.gt_matches))
            known = set(slots)
            for s, _ in matches:
                if s not in known:
                    raise ValueError(f"gt match for unknown slot {s} in {self.query_id!r}")
            object.__setattr__(self, "gt_matches", matches)

    def __len__(self) -> int:
        return len(self.objects)

    @cached_property
    def positions(self) -> np.ndarray:
        out = np.array([o.position for o in self.objects], dtype=float).reshape(-1, 2)
        out.flags.writeable = False
        return out

    @cached_property
    def class_ids(self) -> np.ndarray:
        out = np.array([o.label.id for o in self.objects], dtype=int)
        out.flags.writeable = False
        return out

    @property
    def slots(self) -> list[int]:
        return [o.slot for o in self.objects]

    @property
    def match_dict(self) -> dict[int, int]:
        if self.gt_matches is None:
            raise PreconditionError(f"local map {self.query_id!r} carries no ground-truth matches")
        return dict(self.gt_matches)

    def gt_landmark_ids(self) -> set[int]:
        return set(self.match_dict.values())


@dataclass(frozen=True)
class DatasetSplit:
    split: SplitKind
    partition: Partition
    query_ids: tuple[str, ...] = field(default_factory=tuple)


def normalize_local_positions(points: Sequence[Sequence[float]] | np.ndarray) -> tuple[np.ndarray, float]:
    """Divide camera-frame positions by the largest range.

    Returns the normalized positions and the scale (meters per unit).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    scale = float(np.max(np.hypot(pts[:, 0], pts[:, 1]))) if len(pts) else 0.0
    if scale <= 0.0:
        raise ValueError("all objects coincide with the camera; cannot normalize")
    return pts / scale, scale


def class_counts(class_ids: Iterable[int]) -> Mapping[int, int]:
    counts: dict[int, int] = {}
    for c in class_ids:
        counts[int(c)] = counts.get(int(c), 0) + 1
    return counts
