"""Command-line harness: dataset generation, statistics, oracle and task runs, report comparison.

Every run produces a JSON report (stable key order) and a plain-text table.
Reports echo their configuration, so re-running ``report["config"]``
reproduces the aggregates exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import __version__
from .coarse import CLI_POLICIES, Policy, coarse_bb, coarse_metrics, noisy_gt, select_nodes
from .dataset import EASY_MAX_EXTENT_M, EASY_MIN_OBJECTS, classify_query, map_statistics, read_dataset, save_dataset
from .errors import BudgetExceededError, FlatlocError, IncomparableReportsError
from .fine import FineParams, Provenance, RegionProposal, fine_localize
from .geometry import angular_error
from .matching import SimilarityParams, brute_force_localize, similarity_field
from .model import Difficulty, LocalMap, MapSource, ReferenceMap

TOOL = "flatloc"
DATA_DIR_ENV = "FLATLOC_DATA_DIR"
DEFAULT_DATASET_NAME = "dataset.json"
SUBCOMMANDS = ("generate", "stats", "oracle", "coarse", "fine")
QUERY_SOURCES = {"gt": MapSource.GT, "estimated": MapSource.DEPTH}
REGION_SOURCES = ("gt", "coarsebb", "noisygt")


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    dataset: str | None = None
    split: str = "all"
    query_source: str = "gt"
    policy: str = "r30"
    regions: str = "gt"
    seed: int = 0
    out: str | None = None
    threads: int = 1
    n_scenes: int = 1
    scene: dict[str, Any] = field(default_factory=dict)
    radius_m: float = 50.0
    sample_budget: int = 20_000
    brute_force_budget: int = 10_000_000

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ValueError(f"unknown subcommand {self.subcommand!r}")
        if self.split not in ("all", "easy"):
            raise ValueError(f"split must be 'all' or 'easy', got {self.split!r}")
        if self.query_source not in QUERY_SOURCES:
            raise ValueError(f"query source must be one of {sorted(QUERY_SOURCES)}")
        if self.policy not in CLI_POLICIES:
            raise ValueError(f"policy must be one of {sorted(CLI_POLICIES)}")
        if self.threads < 1 or self.n_scenes < 1:
            raise ValueError("threads and n_scenes must be positive")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict[str, Any]:
        # parallelism and output location never influence results
        out = asdict(self)
        out.pop("threads")
        out.pop("out")
        return out


def resolve_dataset(path: str | None) -> Path:
    """Explicit path, else a relative name under the data directory from the environment."""
    base = os.environ.get(DATA_DIR_ENV)
    if path is None:
        if not base:
            raise ValueError(f"no dataset given and {DATA_DIR_ENV} is not set")
        return Path(base) / DEFAULT_DATASET_NAME
    p = Path(path)
    if not p.is_absolute() and not p.exists() and base:
        return Path(base) / p
    return p


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- per-query workers (top level so a process pool can pickle them) ------------


def _oracle_row(args) -> dict:
    q, m, budget = args
    row: dict[str, Any] = {"query_id": q.query_id, "n_objects": len(q)}
    try:
        ranking = brute_force_localize(q, m, budget=budget)
    except BudgetExceededError as exc:
        row.update(status="budget_exceeded", evaluated=exc.evaluated, top1_correct=False)
        return row
    best = ranking.best
    row.update(
        status="ok",
        evaluated=ranking.evaluated,
        ambiguous=ranking.ambiguous,
        residual=best.residual,
        top1_correct=q.gt_matches is not None and tuple(sorted(best.assignment)) == q.gt_matches,
    )
    if q.gt_pose is not None:
        row["position_error_m"] = math.hypot(best.pose.x - q.gt_pose.x, best.pose.y - q.gt_pose.y)
        row["heading_error_rad"] = angular_error(best.pose.heading, q.gt_pose.heading)
    return row


def _coarse_row(args) -> dict:
    q, m, policy, params = args
    gt = q.gt_landmark_ids()
    if policy is Policy.COARSE_BB:
        sel = coarse_bb(q, m)
    elif policy is Policy.NOISY_GT:
        sel = noisy_gt(q, m)
    else:
        sel = select_nodes(similarity_field(q, m, params), q, m, policy)
    met = coarse_metrics(sel, gt)
    return {
        "query_id": q.query_id,
        "n_objects": len(q),
        "n_selected": len(sel),
        "precision": met.precision,
        "recall": met.recall,
        "success": met.success,
        "selected": sorted(sel.selected),
    }


def _fine_row(args) -> dict:
    q, region, params = args
    res = fine_localize(q, region, params)
    row: dict[str, Any] = {
        "query_id": q.query_id,
        "provenance": region.provenance.value,
        "region_size": len(region.region),
        "status": res.status.value,
        "failure_reason": res.failure_reason,
        "method": res.method,
    }
    if res.localized and q.gt_pose is not None:
        row["position_error_m"] = math.hypot(res.pose.x - q.gt_pose.x, res.pose.y - q.gt_pose.y)
        row["orientation_error_deg"] = math.degrees(angular_error(res.pose.heading, q.gt_pose.heading))
        row["pose"] = [res.pose.x, res.pose.y, res.pose.heading]
    return row


def _ordered_map(fn: Callable, jobs: Sequence, threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def _median(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def _mean(values) -> float | None:
    vals = list(values)
    return float(np.mean(vals)) if vals else None


# -- subcommands ---------------------------------------------------------------


def _selected_queries(cfg: RunConfig, ds) -> tuple[list[LocalMap], dict[str, ReferenceMap]]:
    maps = ds.map_by_scene()
    source = QUERY_SOURCES[cfg.query_source]
    queries = [q for q in ds.local_maps if q.source is source]
    if cfg.split == "easy":
        queries = [
            q for q in queries
            if classify_query(q, maps[q.scene_id], EASY_MIN_OBJECTS, EASY_MAX_EXTENT_M) is Difficulty.EASY
        ]
    queries.sort(key=lambda q: q.query_id)
    return queries, maps


def _run_generate(cfg: RunConfig, dataset_path: Path) -> tuple[list, dict]:
    from .pipeline import build_reference_map, derive_local_maps
    from .synthetic import SceneSpec, generate_scene

    maps, local_maps, rows = [], [], []
    for k in range(cfg.n_scenes):
        spec = SceneSpec.from_dict({**cfg.scene, "seed": cfg.seed + k})
        scene = generate_scene(spec)
        result = build_reference_map(scene)
        gt = derive_local_maps(scene, result, MapSource.GT)
        est = derive_local_maps(scene, result, MapSource.DEPTH)
        maps.append(result.reference_map)
        local_maps.extend(gt)
        local_maps.extend(est)
        rows.append(
            {
                "scene_id": scene.scene_id,
                "planted_objects": len(scene.planted),
                "landmarks": len(result.reference_map),
                "cameras": len(scene.cameras),
                "queries": len(gt),
            }
        )
    dataset_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset_path, maps, local_maps)
    aggregates = {
        "scenes": len(rows),
        "landmarks": sum(r["landmarks"] for r in rows),
        "queries": sum(r["queries"] for r in rows),
        "count_mismatch_scenes": sum(r["landmarks"] != r["planted_objects"] for r in rows),
    }
    return rows, aggregates


def _run_stats(cfg: RunConfig, ds) -> tuple[list, dict]:
    # a query counts once even though it may carry both map kinds
    unique = {}
    for q in ds.local_maps:
        unique.setdefault(q.query_id, q)
    queries = list(unique.values())
    maps = ds.map_by_scene()
    rows = [asdict(c) for c in map_statistics(ds.reference_maps, queries)]
    easy = sum(
        classify_query(q, maps[q.scene_id], EASY_MIN_OBJECTS, EASY_MAX_EXTENT_M) is Difficulty.EASY for q in queries
    )
    aggregates = {
        "scenes": len(ds.reference_maps),
        "queries": len(queries),
        "easy_queries": easy,
        "avg_objects": rows[-1]["avg_objects"],
        "avg_queries": rows[-1]["avg_queries"],
        "avg_density": rows[-1]["avg_density"],
    }
    return rows, aggregates


def _run_oracle(cfg: RunConfig, ds) -> tuple[list, dict]:
    queries, maps = _selected_queries(cfg, ds)
    jobs = [(q, maps[q.scene_id], cfg.brute_force_budget) for q in queries]
    rows = _ordered_map(_oracle_row, jobs, cfg.threads)
    ok = [r for r in rows if r["status"] == "ok"]
    aggregates = {
        "queries": len(rows),
        "top1_rate": _mean(float(r["top1_correct"]) for r in rows),
        "ambiguous": sum(bool(r.get("ambiguous")) for r in ok),
        "budget_exceeded": len(rows) - len(ok),
        "median_position_error_m": _median(r.get("position_error_m") for r in ok),
        "median_heading_error_rad": _median(r.get("heading_error_rad") for r in ok),
    }
    return rows, aggregates


def _run_coarse(cfg: RunConfig, ds) -> tuple[list, dict]:
    queries, maps = _selected_queries(cfg, ds)
    params = SimilarityParams(cfg.radius_m, cfg.sample_budget, cfg.seed)
    policy = CLI_POLICIES[cfg.policy]
    jobs = [(q, maps[q.scene_id], policy, params) for q in queries]
    rows = _ordered_map(_coarse_row, jobs, cfg.threads)
    aggregates = {
        "queries": len(rows),
        "policy": policy.value,
        "precision": _mean(r["precision"] for r in rows),
        "recall": _mean(r["recall"] for r in rows),
        "success": _mean(r["success"] for r in rows),
    }
    return rows, aggregates


def _regions(cfg: RunConfig, queries: list[LocalMap], maps) -> list[RegionProposal]:
    if cfg.regions in REGION_SOURCES:
        out = []
        for q in queries:
            m = maps[q.scene_id]
            if cfg.regions == "gt":
                out.append(RegionProposal.from_ids(m, q.gt_landmark_ids(), Provenance.GT))
            elif cfg.regions == "coarsebb":
                out.append(RegionProposal.from_ids(m, coarse_bb(q, m).selected, Provenance.COARSE_BB))
            else:
                out.append(RegionProposal.from_ids(m, noisy_gt(q, m).selected, Provenance.NOISY_GT))
        return out
    report = json.loads(Path(cfg.regions).read_text(encoding="utf-8"))
    if report.get("subcommand") != "coarse":
        raise ValueError(f"{cfg.regions} is not a coarse report")
    selected = {r["query_id"]: r["selected"] for r in report["rows"]}
    missing = [q.query_id for q in queries if q.query_id not in selected]
    if missing:
        raise ValueError(f"coarse report lacks {len(missing)} queries, e.g. {missing[0]!r}")
    return [RegionProposal.from_ids(maps[q.scene_id], selected[q.query_id], Provenance.COARSE) for q in queries]


def _run_fine(cfg: RunConfig, ds) -> tuple[list, dict]:
    queries, maps = _selected_queries(cfg, ds)
    regions = _regions(cfg, queries, maps)
    params = FineParams(seed=cfg.seed)
    jobs = [(q, r, params) for q, r in zip(queries, regions)]
    rows = _ordered_map(_fine_row, jobs, cfg.threads)
    localized = [r for r in rows if r["status"] == "Localized"]
    aggregates = {
        "queries": len(rows),
        "localized": len(localized),
        "failures": len(rows) - len(localized),
        "median_orientation_error_deg": _median(r.get("orientation_error_deg") for r in localized),
        "median_position_error_m": _median(r.get("position_error_m") for r in localized),
    }
    return rows, aggregates


def run(cfg: RunConfig) -> dict:
    """Execute one configuration and return its report (also written to ``cfg.out``)."""
    start = time.perf_counter()
    if cfg.subcommand == "generate":
        path = Path(cfg.dataset) if cfg.dataset else resolve_dataset(None)
        rows, aggregates = _run_generate(cfg, path)
    else:
        path = resolve_dataset(cfg.dataset)
        ds = read_dataset(path)
        handler = {"stats": _run_stats, "oracle": _run_oracle, "coarse": _run_coarse, "fine": _run_fine}
        rows, aggregates = handler[cfg.subcommand](cfg, ds)
    report = {
        "tool": TOOL,
        "version": __version__,
        "subcommand": cfg.subcommand,
        "config": cfg.to_dict(),
        "dataset_sha256": file_sha256(path),
        "rows": rows,
        "aggregates": aggregates,
        "wall_clock_s": time.perf_counter() - start,
    }
    if cfg.out:
        write_report(report, Path(cfg.out))
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def write_report(report: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(report), encoding="utf-8")
    path.with_suffix(".txt").write_text(render_table(report), encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (list, tuple)):
        return f"[{len(v)}]"
    return str(v)


def render_table(report: dict) -> str:
    """Aligned text table: the rows, then the aggregates."""
    rows = report["rows"]
    lines = [f"{report['tool']} {report['version']} {report['subcommand']}"]
    if rows:
        cols = list(rows[0].keys())
        for r in rows[1:]:
            cols.extend(k for k in r if k not in cols)
        cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        lines.append("  ".join("-" * w for w in widths))
        lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
        lines.append("")
    width = max((len(k) for k in report["aggregates"]), default=0)
    lines.extend(f"{k.ljust(width)}  {_fmt(v)}" for k, v in report["aggregates"].items())
    return "\n".join(lines) + "\n"


# -- report comparison ---------------------------------------------------------


def _lower_is_better(key: str) -> bool:
    k = key.lower()
    return any(t in k for t in ("error", "fail", "ambiguous", "budget", "mismatch"))


@dataclass(frozen=True)
class MetricDelta:
    key: str
    a: float | None
    b: float | None
    delta: float | None
    regression: bool


@dataclass(frozen=True)
class ReportDiff:
    deltas: tuple[MetricDelta, ...]
    tolerance: float

    @property
    def regressions(self) -> list[MetricDelta]:
        return [d for d in self.deltas if d.regression]

    @property
    def empty(self) -> bool:
        return not self.deltas


def compare_reports(a: dict, b: dict, tolerance: float = 1e-9) -> ReportDiff:
    """Aggregate deltas from ``a`` (baseline) to ``b``.

    Only metrics that differ by more than ``tolerance`` are listed. A change
    counts as a regression when it moves against the metric's direction:
    error, failure and ambiguity counts should shrink, everything else grow.
    """
    for key in ("subcommand", "dataset_sha256"):
        if a.get(key) != b.get(key):
            raise IncomparableReportsError(f"reports differ in {key}: {a.get(key)!r} vs {b.get(key)!r}")
    out = []
    aa, bb = a["aggregates"], b["aggregates"]
    for key in sorted(set(aa) | set(bb)):
        va, vb = aa.get(key), bb.get(key)
        numeric = all(v is None or (isinstance(v, (int, float)) and not isinstance(v, bool)) for v in (va, vb))
        if not numeric:
            if va != vb:
                raise IncomparableReportsError(f"reports differ in {key}: {va!r} vs {vb!r}")
            continue
        if va is None and vb is None:
            continue
        if va is None or vb is None:
            out.append(MetricDelta(key, va, vb, None, vb is None))
            continue
        delta = float(vb) - float(va)
        if abs(delta) <= tolerance:
            continue
        worse = delta > 0 if _lower_is_better(key) else delta < 0
        out.append(MetricDelta(key, float(va), float(vb), delta, worse))
    return ReportDiff(tuple(out), tolerance)


# -- argument parsing ------------------------------------------------------------


def _load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text) if path.endswith((".yaml", ".yml")) else json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return doc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker processes (default 1)")
    common.add_argument("--config", default=None, help="JSON or YAML file with run settings")
    common.add_argument("--dataset", default=None, help=f"dataset JSON (default ${DATA_DIR_ENV}/{DEFAULT_DATASET_NAME})")
    common.add_argument("--out", default=None, help="report path; a .txt table is written next to it")

    parser = argparse.ArgumentParser(prog=TOOL, description="Object-map localization benchmarks.", parents=[common])
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    gen = sub.add_parser("generate", parents=[common], help="synthesize scenes and write a dataset")
    gen.add_argument("--n-scenes", type=int, default=None)

    sub.add_parser("stats", parents=[common], help="per-city dataset statistics")

    def task_flags(p):
        p.add_argument("--split", choices=("all", "easy"), default=None)
        p.add_argument("--query-source", choices=sorted(QUERY_SOURCES), default=None)

    oracle = sub.add_parser("oracle", parents=[common], help="brute-force solvability check")
    task_flags(oracle)
    oracle.add_argument("--budget", dest="brute_force_budget", type=int, default=None)

    coarse = sub.add_parser("coarse", parents=[common], help="coarse map localization")
    task_flags(coarse)
    coarse.add_argument("--policy", choices=sorted(CLI_POLICIES), default=None)

    fine = sub.add_parser("fine", parents=[common], help="fine-grained 3DoF localization")
    task_flags(fine)
    fine.add_argument("--regions", default=None, help="gt, coarsebb, noisygt or a coarse report path")

    cmp_ = sub.add_parser("compare", help="diff two reports; exit 1 on regression")
    cmp_.add_argument("baseline")
    cmp_.add_argument("candidate")
    cmp_.add_argument("--tolerance", type=float, default=1e-9)
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    doc = _load_config_file(ns.config)
    doc = {k: v for k, v in doc.items() if k != "subcommand"}
    for f in fields(RunConfig):
        v = getattr(ns, f.name, None)
        if v is not None and f.name != "subcommand":
            doc[f.name] = v
    return RunConfig.from_dict({"subcommand": ns.subcommand, **doc})


def _compare_main(ns) -> int:
    a = json.loads(Path(ns.baseline).read_text(encoding="utf-8"))
    b = json.loads(Path(ns.candidate).read_text(encoding="utf-8"))
    try:
        diff = compare_reports(a, b, ns.tolerance)
    except IncomparableReportsError as exc:
        print(f"incomparable: {exc}", file=sys.stderr)
        return 2
    if diff.empty:
        print("no differences")
    for d in diff.deltas:
        flag = "REGRESSION" if d.regression else "ok"
        print(f"{d.key}: {_fmt(d.a)} -> {_fmt(d.b)} ({_fmt(d.delta)}) {flag}")
    return 1 if diff.regressions else 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.subcommand == "compare":
        return _compare_main(ns)
    try:
        cfg = config_from_args(ns)
    except (ValueError, TypeError, OSError) as exc:
        parser.error(str(exc))
    try:
        report = run(cfg)
    except (FlatlocError, ValueError, OSError) as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(render_table(report))
    return 0


if __name__ == "__main__":
    sys.exit(main())
