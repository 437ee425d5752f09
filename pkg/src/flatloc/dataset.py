"""Dataset JSON I/O, Easy/All classification, partitions and per-city statistics."""

from __future__ import annotations

import itertools
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DatasetSchemaError, IntegrityError, PreconditionError
from .model import (
    ClassRegistry,
    DatasetSplit,
    Difficulty,
    GeoAnchor,
    LocalMap,
    LocalObject,
    MapSource,
    ObjectLandmark,
    Partition,
    Pose3DoF,
    ReferenceMap,
    SemanticClass,
    SplitKind,
)

NORMALIZATION = "max_range"

EASY_MIN_OBJECTS = 5
EASY_MAX_EXTENT_M = 100.0

PARTITION_FRACTIONS = ((Partition.TRAIN, 0.8), (Partition.VAL, 0.1), (Partition.TEST, 0.1))


@dataclass
class Dataset:
    reference_maps: list[ReferenceMap]
    local_maps: list[LocalMap]
    registry: ClassRegistry
    normalization: str = NORMALIZATION

    def map_by_scene(self) -> dict[str, ReferenceMap]:
        return {m.scene_id: m for m in self.reference_maps}


# -- parsing ----------------------------------------------------------------


def _get(obj: dict, key: str, path: str, kind=None, required: bool = True):
    if not isinstance(obj, dict):
        raise DatasetSchemaError(path, "expected an object")
    if key not in obj:
        if required:
            raise DatasetSchemaError(f"{path}.{key}" if path else key, "missing required key")
        return None
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise DatasetSchemaError(f"{path}.{key}" if path else key, f"expected {getattr(kind, '__name__', kind)}")
    return value


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise DatasetSchemaError(path, "expected a finite number")
    return float(value)


def _pair(value, path: str) -> tuple[float, float]:
    if not isinstance(value, list) or len(value) != 2:
        raise DatasetSchemaError(path, "expected a [x, y] pair")
    return (_number(value[0], f"{path}[0]"), _number(value[1], f"{path}[1]"))


def _registry(doc: dict) -> ClassRegistry:
    if "classes" in doc:
        classes = _get(doc, "classes", "", list)
        out = []
        for i, c in enumerate(classes):
            p = f"classes[{i}]"
            out.append(SemanticClass(int(_get(c, "id", p, int)), _get(c, "name", p, str)))
        try:
            return ClassRegistry(out)
        except ValueError as exc:
            raise DatasetSchemaError("classes", str(exc)) from exc
    names = set()
    for m in doc.get("reference_maps", []) or []:
        for lm in (m.get("landmarks", []) if isinstance(m, dict) else []):
            if isinstance(lm, dict) and isinstance(lm.get("class"), str):
                names.add(lm["class"])
    for q in doc.get("queries", []) or []:
        for o in (q.get("objects", []) if isinstance(q, dict) else []):
            if isinstance(o, dict) and isinstance(o.get("class"), str):
                names.add(o["class"])
    try:
        return ClassRegistry.from_names(sorted(names))
    except ValueError as exc:
        raise DatasetSchemaError("classes", str(exc)) from exc


def _label(registry: ClassRegistry, value, path: str) -> SemanticClass:
    if not isinstance(value, str):
        raise DatasetSchemaError(path, "expected a class name")
    if value not in registry:
        raise DatasetSchemaError(path, f"unknown class {value!r}")
    return registry.by_name(value)


def parse_dataset(doc: Any) -> Dataset:
    if not isinstance(doc, dict):
        raise DatasetSchemaError("<root>", "expected a JSON object")
    registry = _registry(doc)
    normalization = doc.get("normalization", NORMALIZATION)
    if normalization != NORMALIZATION:
        raise DatasetSchemaError("normalization", f"unsupported convention {normalization!r}")

    maps: list[ReferenceMap] = []
    for i, raw in enumerate(_get(doc, "reference_maps", "", list)):
        path = f"reference_maps[{i}]"
        scene_id = _get(raw, "scene_id", path, str)
        city = _get(raw, "city", path, str, required=False) or ""
        anchor = None
        raw_anchor = _get(raw, "anchor", path, dict, required=False)
        if raw_anchor is not None:
            ap = f"{path}.anchor"
            try:
                anchor = GeoAnchor(
                    _number(_get(raw_anchor, "lat", ap), f"{ap}.lat"),
                    _number(_get(raw_anchor, "lon", ap), f"{ap}.lon"),
                    _number(raw_anchor.get("m_per_deg_lat", 111_320.0), f"{ap}.m_per_deg_lat"),
                    None
                    if raw_anchor.get("m_per_deg_lon") is None
                    else _number(raw_anchor["m_per_deg_lon"], f"{ap}.m_per_deg_lon"),
                )
            except ValueError as exc:
                if isinstance(exc, DatasetSchemaError):
                    raise
                raise DatasetSchemaError(ap, str(exc)) from exc
        landmarks = []
        for j, lm in enumerate(_get(raw, "landmarks", path, list)):
            lp = f"{path}.landmarks[{j}]"
            lid = _get(lm, "id", lp, int)
            label = _label(registry, _get(lm, "class", lp), f"{lp}.class")
            xy = (_number(_get(lm, "x_m", lp), f"{lp}.x_m"), _number(_get(lm, "y_m", lp), f"{lp}.y_m"))
            landmarks.append(ObjectLandmark(lid, xy, label))
        try:
            maps.append(ReferenceMap(scene_id, tuple(landmarks), city=city, anchor=anchor))
        except ValueError as exc:
            raise DatasetSchemaError(path, str(exc)) from exc

    by_scene = {m.scene_id: m for m in maps}
    if len(by_scene) != len(maps):
        raise IntegrityError("duplicate scene_id among reference maps")

    local_maps: list[LocalMap] = []
    seen_queries: set[str] = set()
    for i, raw in enumerate(_get(doc, "queries", "", list)):
        path = f"queries[{i}]"
        query_id = _get(raw, "query_id", path, str)
        if query_id in seen_queries:
            raise IntegrityError(f"query {query_id!r} appears twice")
        seen_queries.add(query_id)
        scene_id = _get(raw, "scene_id", path, str)
        if scene_id not in by_scene:
            raise IntegrityError(f"query {query_id!r} references unknown reference map {scene_id!r}")
        ref = by_scene[scene_id]
        token = _get(raw, "image_token", path, str, required=False)
        pose = None
        raw_pose = _get(raw, "gt_pose", path, dict, required=False)
        if raw_pose is not None:
            pp = f"{path}.gt_pose"
            pose = Pose3DoF(
                _number(_get(raw_pose, "x_m", pp), f"{pp}.x_m"),
                _number(_get(raw_pose, "y_m", pp), f"{pp}.y_m"),
                _number(_get(raw_pose, "theta_rad", pp), f"{pp}.theta_rad"),
            )
        gt_objs, est_objs, matches = [], [], []
        for j, o in enumerate(_get(raw, "objects", path, list)):
            op = f"{path}.objects[{j}]"
            slot = _get(o, "slot", op, int)
            label = _label(registry, _get(o, "class", op), f"{op}.class")
            if o.get("gt_local") is not None:
                gt_objs.append(LocalObject(slot, label, _pair(o["gt_local"], f"{op}.gt_local")))
            if o.get("est_local") is not None:
                est_objs.append(LocalObject(slot, label, _pair(o["est_local"], f"{op}.est_local")))
            lid = _get(o, "landmark_id", op, int, required=False)
            if lid is not None:
                if lid not in ref.index_of:
                    raise IntegrityError(f"{op}.landmark_id {lid} is not a landmark of {scene_id!r}")
                matches.append((slot, lid))
        if not gt_objs and not est_objs:
            raise DatasetSchemaError(f"{path}.objects", "no object carries gt_local or est_local")
        for source, objs in ((MapSource.GT, gt_objs), (MapSource.DEPTH, est_objs)):
            if not objs:
                continue
            slots = {o.slot for o in objs}
            own = tuple(m for m in matches if m[0] in slots) if matches else None
            try:
                local_maps.append(LocalMap(query_id, scene_id, tuple(objs), source, pose, own, token))
            except ValueError as exc:
                raise DatasetSchemaError(f"{path}.objects", str(exc)) from exc
    return Dataset(maps, local_maps, registry, normalization)


def read_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetSchemaError("<root>", f"invalid JSON: {exc}") from exc
    return parse_dataset(doc)


def load_dataset(path: str | os.PathLike) -> tuple[list[ReferenceMap], list[LocalMap]]:
    ds = read_dataset(path)
    return ds.reference_maps, ds.local_maps


# -- serialization ----------------------------------------------------------


def dataset_to_dict(maps: Sequence[ReferenceMap], local_maps: Sequence[LocalMap]) -> dict:
    labels: dict[int, SemanticClass] = {}
    for m in maps:
        for lm in m.landmarks:
            labels[lm.label.id] = lm.label
    for q in local_maps:
        for o in q.objects:
            labels[o.label.id] = o.label

    ref_out = []
    for m in maps:
        entry: dict[str, Any] = {"scene_id": m.scene_id, "city": m.city}
        if m.anchor is not None:
            entry["anchor"] = {
                "lat": m.anchor.lat,
                "lon": m.anchor.lon,
                "m_per_deg_lat": m.anchor.m_per_deg_lat,
                "m_per_deg_lon": m.anchor.m_per_deg_lon,
            }
        entry["landmarks"] = [
            {"id": lm.id, "class": lm.label.name, "x_m": lm.position[0], "y_m": lm.position[1]}
            for lm in m.landmarks
        ]
        ref_out.append(entry)

    grouped: dict[str, list[LocalMap]] = {}
    for q in local_maps:
        grouped.setdefault(q.query_id, []).append(q)
    queries_out = []
    for query_id, versions in grouped.items():
        first = versions[0]
        entry = {"query_id": query_id, "scene_id": first.scene_id}
        token = next((v.image_token for v in versions if v.image_token is not None), None)
        if token is not None:
            entry["image_token"] = token
        pose = next((v.gt_pose for v in versions if v.gt_pose is not None), None)
        if pose is not None:
            entry["gt_pose"] = {"x_m": pose.x, "y_m": pose.y, "theta_rad": pose.heading}
        objects: dict[int, dict] = {}
        for v in versions:
            key = "gt_local" if v.source is MapSource.GT else "est_local"
            matches = dict(v.gt_matches) if v.gt_matches is not None else {}
            for o in v.objects:
                obj = objects.setdefault(o.slot, {"slot": o.slot, "class": o.label.name})
                obj[key] = [o.position[0], o.position[1]]
                if o.slot in matches:
                    obj["landmark_id"] = matches[o.slot]
        entry["objects"] = [objects[s] for s in sorted(objects)]
        queries_out.append(entry)

    return {
        "normalization": NORMALIZATION,
        "classes": [{"id": c.id, "name": c.name} for c in sorted(labels.values())],
        "reference_maps": ref_out,
        "queries": queries_out,
    }


def save_dataset(path: str | os.PathLike, maps: Sequence[ReferenceMap], local_maps: Sequence[LocalMap]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_to_dict(maps, local_maps), fh, indent=1)
        fh.write("\n")


# -- Easy / All -------------------------------------------------------------


def max_pairwise_distance(points) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        return 0.0
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))


def classify_query(
    q: LocalMap,
    m: ReferenceMap,
    min_objects: int = EASY_MIN_OBJECTS,
    max_extent_m: float = EASY_MAX_EXTENT_M,
) -> Difficulty:
    """Easy iff enough objects and all matched landmarks closer than ``max_extent_m``."""
    if q.gt_matches is None:
        raise PreconditionError(f"query {q.query_id!r} has no ground-truth matches")
    pts = [m.landmark(lid).position for _, lid in q.gt_matches]
    if len(q.objects) >= min_objects and max_pairwise_distance(pts) < max_extent_m:
        return Difficulty.EASY
    return Difficulty.HARD_ONLY


def _partition_sizes(n: int) -> list[int]:
    sizes = [int(math.floor(n * frac + 0.5)) for _, frac in PARTITION_FRACTIONS[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:  # rounding overshoot on tiny inputs
        sizes[0] += sizes[-1]
        sizes[-1] = 0
    return sizes


def _assign_partitions(groups: dict[str, list[str]], rng: np.random.Generator) -> dict[Partition, list[str]]:
    # Each query gets its fractional rank inside its group; a global sort on
    # that rank spreads every group proportionally over the partitions.
    keyed = []
    for gid in sorted(groups):
        ids = sorted(groups[gid])
        order = rng.permutation(len(ids))
        jitter = rng.random(len(ids))
        for rank, idx in enumerate(order):
            keyed.append(((rank + 0.5) / len(ids), float(jitter[rank]), ids[idx]))
    keyed.sort()
    ordered = [k[2] for k in keyed]
    out: dict[Partition, list[str]] = {}
    start = 0
    for (part, _), size in zip(PARTITION_FRACTIONS, _partition_sizes(len(ordered))):
        out[part] = sorted(ordered[start : start + size])
        start += size
    return out


def make_splits(
    queries: Sequence[LocalMap],
    maps: Sequence[ReferenceMap],
    seed: int = 0,
    stratify: str = "scene",
) -> dict[tuple[SplitKind, Partition], DatasetSplit]:
    """80/10/10 partitions of the Easy and All query sets.

    ``stratify="scene"`` keeps each scene's share of every partition close to
    the global proportions; ``"global"`` shuffles all queries together.
    """
    if not queries:
        raise ValueError("cannot split an empty query list")
    if stratify not in ("scene", "global"):
        raise ValueError(f"unknown stratification {stratify!r}")
    by_scene = {m.scene_id: m for m in maps}
    representative: dict[str, LocalMap] = {}
    for q in queries:
        cur = representative.get(q.query_id)
        if cur is None or (cur.gt_matches is None and q.gt_matches is not None):
            representative[q.query_id] = q

    easy_ids = set()
    for qid, q in representative.items():
        if q.gt_matches is not None and q.scene_id in by_scene:
            if classify_query(q, by_scene[q.scene_id]) is Difficulty.EASY:
                easy_ids.add(qid)

    result = {}
    for kind, ids in ((SplitKind.ALL, set(representative)), (SplitKind.EASY, easy_ids)):
        groups: dict[str, list[str]] = defaultdict(list)
        for qid in ids:
            groups[representative[qid].scene_id if stratify == "scene" else ""].append(qid)
        rng = np.random.default_rng([seed, 0 if kind is SplitKind.ALL else 1])
        parts = _assign_partitions(groups, rng)
        for part, _ in PARTITION_FRACTIONS:
            result[(kind, part)] = DatasetSplit(kind, part, tuple(parts.get(part, [])))
    return result


# -- statistics -------------------------------------------------------------


@dataclass(frozen=True)
class SceneStats:
    scene_id: str
    city: str
    objects: int
    queries: int
    area_km2: float
    density: float | None  # objects per km², None when the area is zero


@dataclass(frozen=True)
class CityStats:
    city: str
    scenes: int
    avg_objects: float
    avg_queries: float
    avg_area_km2: float
    avg_density: float | None
    undefined_density_scenes: int = 0


def scene_statistics(m: ReferenceMap, n_queries: int) -> SceneStats:
    pts = m.positions
    if len(pts) < 2:
        area = 0.0
    else:
        span = pts.max(axis=0) - pts.min(axis=0)
        area = float(span[0] * span[1]) / 1e6
    density = len(pts) / area if area > 0 else None
    return SceneStats(m.scene_id, m.city, len(pts), n_queries, area, density)


def map_statistics(maps: Sequence[ReferenceMap], queries: Iterable[LocalMap]) -> list[CityStats]:
    """Per-city averages plus a final ``"all"`` row over every scene."""
    per_scene_queries: dict[str, set[str]] = defaultdict(set)
    for q in queries:
        per_scene_queries[q.scene_id].add(q.query_id)
    scenes = [scene_statistics(m, len(per_scene_queries.get(m.scene_id, ()))) for m in maps]

    def summarize(city: str, rows: list[SceneStats]) -> CityStats:
        dens = [r.density for r in rows if r.density is not None]
        return CityStats(
            city=city,
            scenes=len(rows),
            avg_objects=float(np.mean([r.objects for r in rows])) if rows else 0.0,
            avg_queries=float(np.mean([r.queries for r in rows])) if rows else 0.0,
            avg_area_km2=float(np.mean([r.area_km2 for r in rows])) if rows else 0.0,
            avg_density=float(np.mean(dens)) if dens else None,
            undefined_density_scenes=len(rows) - len(dens),
        )

    table = []
    key = lambda r: r.city  # noqa: E731
    for city, rows in itertools.groupby(sorted(scenes, key=key), key=key):
        table.append(summarize(city, list(rows)))
    table.append(summarize("all", scenes))
    return table
