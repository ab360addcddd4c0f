"""Batch command-line front-end wiring the full pipeline.

Subcommands: ``synth`` generates a dataset, ``match`` selects the best
reference view per query, ``refine`` lifts matches to 3D and optimizes the
pose, ``eval`` aggregates rotation errors, and ``pipeline`` chains
match/refine/eval for every query. All artifacts are JSON files under the
output directory; reruns with identical inputs overwrite identical bytes.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. On failure a single machine-parsable JSON line goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .evaluation import DEFAULT_THRESHOLDS, EvalRecord, format_results_table
from .geometry import RigidPose, spherical_to_pose
from .io import (
    FileFormatError,
    read_depth_map,
    read_feature_map,
    read_manifest,
    write_results,
)
from .matching import DEFAULT_TOP_K, best_view
from .refinement import (
    DivergenceError,
    OptimizerConfig,
    RefinementProblem,
    lift_pixel_pairs,
    refine_pose,
)
from .synth import make_dataset, random_scene

__all__ = ["main", "entry", "ConfigError", "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_NUMERIC"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("poselift")


class ConfigError(ValueError):
    """Invalid command-line configuration."""


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        payload = {"level": record.levelname.lower(), "event": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, sort_keys=True)


class _PlainFormatter(logging.Formatter):
    def format(self, record):
        msg = f"{record.levelname.lower()}: {record.getMessage()}"
        fields = getattr(record, "fields", {})
        if fields:
            msg += " " + " ".join(f"{k}={v}" for k, v in sorted(fields.items()))
        return msg


def _setup_logging(log_json: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if log_json else _PlainFormatter())
    logger.handlers[:] = [handler]
    logger.setLevel(logging.INFO)
    logger.propagate = False


def _log(event: str, **fields) -> None:
    logger.info(event, extra={"fields": fields})


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="poselift",
        description="Reference-view matching, 2D-3D lifting and pose refinement.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, with_query: bool):
        sp.add_argument("--manifest", required=True, help="dataset manifest path")
        if with_query:
            sp.add_argument("--query", default=None, help="single query view id (default: all)")
        sp.add_argument(
            "--out", default=None, help="output directory (default: <manifest dir>/results)"
        )
        sp.add_argument(
            "--jobs", type=int, default=None, help="parallelism degree (default: cpu count)"
        )
        sp.add_argument("--log-json", action="store_true", help="JSON log lines on stderr")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True, help="dataset directory to create")
    sp.add_argument("--seed", type=int, default=0, help="generation seed")
    sp.add_argument("--n-refs", type=int, default=50, help="reference view count")
    sp.add_argument("--n-queries", type=int, default=10, help="query view count")
    sp.add_argument("--noise-sd", type=float, default=0.0, help="descriptor noise sd")
    sp.add_argument("--category", default="synthetic", help="category label")
    sp.add_argument("--log-json", action="store_true", help="JSON log lines on stderr")

    sp = sub.add_parser("match", help="select the best reference view per query")
    add_common(sp, with_query=True)
    sp.add_argument("--k", type=int, default=DEFAULT_TOP_K, help="top-K matches kept")

    sp = sub.add_parser("refine", help="lift matches to 3D and refine the pose")
    add_common(sp, with_query=True)
    sp.add_argument("--k", type=int, default=DEFAULT_TOP_K, help="top-K matches kept")
    sp.add_argument("--iters", type=int, default=None, help="optimizer iteration cap")
    sp.add_argument("--lr", type=float, default=None, help="optimizer learning rate")

    sp = sub.add_parser("eval", help="aggregate refined poses into error summaries")
    add_common(sp, with_query=False)
    sp.add_argument(
        "--thresholds",
        type=float,
        nargs="+",
        default=list(DEFAULT_THRESHOLDS),
        help="accuracy thresholds in degrees, ascending",
    )

    sp = sub.add_parser("pipeline", help="match, refine and evaluate every query")
    add_common(sp, with_query=False)
    sp.add_argument("--k", type=int, default=DEFAULT_TOP_K, help="top-K matches kept")
    sp.add_argument("--iters", type=int, default=None, help="optimizer iteration cap")
    sp.add_argument("--lr", type=float, default=None, help="optimizer learning rate")
    sp.add_argument(
        "--thresholds",
        type=float,
        nargs="+",
        default=list(DEFAULT_THRESHOLDS),
        help="accuracy thresholds in degrees, ascending",
    )
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _setup_logging(args.log_json)
    handlers = {
        "synth": _cmd_synth,
        "match": _cmd_match,
        "refine": _cmd_refine,
        "eval": _cmd_eval,
        "pipeline": _cmd_pipeline,
    }
    try:
        handlers[args.command](args)
        return EXIT_OK
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e)
    except DivergenceError as e:
        return _fail(EXIT_NUMERIC, e)
    except (FileFormatError, OSError, KeyError, ValueError) as e:
        return _fail(EXIT_DATA, e)


def entry() -> None:
    sys.exit(main())


def _fail(code: int, exc: Exception) -> int:
    line = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


# --- shared helpers -------------------------------------------------------


def _jobs(args) -> int:
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    return jobs


def _k(args) -> int:
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    return args.k


def _optimizer_config(args) -> OptimizerConfig:
    overrides = {}
    if args.iters is not None:
        if args.iters < 1:
            raise ConfigError(f"--iters must be >= 1, got {args.iters}")
        overrides["max_iters"] = args.iters
    if args.lr is not None:
        if not args.lr > 0:
            raise ConfigError(f"--lr must be positive, got {args.lr}")
        overrides["learning_rate"] = args.lr
    return OptimizerConfig(**overrides)


def _thresholds(args) -> list:
    taus = [float(t) for t in args.thresholds]
    if not taus or any(b <= a for a, b in zip(taus, taus[1:])) or taus[0] <= 0:
        raise ConfigError(f"--thresholds must be positive and ascending, got {taus}")
    return taus


def _out_dir(args, manifest_path: Path) -> Path:
    out = Path(args.out) if args.out else manifest_path.parent / "results"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _query_ids(manifest, args) -> list:
    requested = getattr(args, "query", None)
    if requested is None:
        return [q.view_id for q in manifest.queries]
    if all(q.view_id != requested for q in manifest.queries):
        raise ConfigError(f"query id {requested!r} not in manifest")
    return [requested]


def _load_ref_maps(manifest):
    return [read_feature_map(manifest.resolve(r.feature_file)) for r in manifest.references]


def _pose_json(p: RigidPose) -> dict:
    return {
        "rotation": [[float(v) for v in row] for row in p.rotation],
        "translation": [float(v) for v in p.translation],
    }


def _pose_from_json(obj) -> RigidPose:
    return RigidPose(np.array(obj["rotation"], dtype=float), np.array(obj["translation"], dtype=float))


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# --- subcommands ----------------------------------------------------------


def _cmd_synth(args) -> None:
    if args.seed < 0:
        raise ConfigError(f"--seed must be non-negative, got {args.seed}")
    if args.n_refs < 1 or args.n_queries < 1:
        raise ConfigError("--n-refs and --n-queries must be >= 1")
    if args.noise_sd < 0:
        raise ConfigError(f"--noise-sd must be >= 0, got {args.noise_sd}")
    scene = random_scene(args.seed)
    manifest = make_dataset(
        scene,
        args.out,
        n_refs=args.n_refs,
        n_queries=args.n_queries,
        noise_sd=args.noise_sd,
        seed=args.seed,
        category=args.category,
    )
    _log(
        "dataset written",
        out=str(args.out),
        references=len(manifest.references),
        queries=len(manifest.queries),
        noise_sd=manifest.noise_sd,
    )
    print(str(Path(args.out) / "manifest.json"))


def _match_one(manifest, ref_maps, query_id: str, k: int, jobs: int, out_dir: Path) -> dict:
    q = manifest.query_by_id(query_id)
    qfm = read_feature_map(manifest.resolve(q.feature_file))
    # Scoring over every foreground cell keeps the view ranking informative
    # even when the top-k distances saturate at zero; the kept matches are
    # the top-k prefix of the winning view's full MatchSet.
    idx, ms = best_view(qfm, ref_maps, qfm.n_cells, jobs=jobs)
    ref = manifest.references[idx]
    kept = ms.matches[:k]
    doc = {
        "query_id": query_id,
        "best_view_index": idx,
        "best_view_id": ref.view_id,
        "k": k,
        "metric": "cosine",
        "cumulative_cyc_dist": ms.total_distance(),
        "coarse_pose": _pose_json(spherical_to_pose(ref.camera)),
        "matches": [
            {
                "query_px": list(m.query_px),
                "ref_px": list(m.ref_px),
                "query_cell": list(m.query_cell),
                "ref_cell": list(m.ref_cell),
                "cyc_dist": m.cyc_dist,
            }
            for m in kept
        ],
    }
    _write_json(out_dir / f"match_{query_id}.json", doc)
    _log(
        "matched",
        query=query_id,
        best_view=ref.view_id,
        cumulative_cyc_dist=round(ms.total_distance(), 3),
        matches=len(kept),
    )
    return doc


def _refine_one(manifest, query_id: str, cfg: OptimizerConfig, out_dir: Path, match_doc: dict) -> dict:
    idx = match_doc["best_view_index"]
    if not 0 <= idx < len(manifest.references):
        raise ValueError(f"match artifact for {query_id!r} names reference {idx}, out of range")
    ref = manifest.references[idx]
    ref_pose = spherical_to_pose(ref.camera)
    depth = read_depth_map(manifest.resolve(ref.depth_file))
    pairs = [(m["query_px"], m["ref_px"]) for m in match_doc["matches"]]
    corrs = lift_pixel_pairs(pairs, depth, manifest.intrinsics, ref_pose)
    prob = RefinementProblem(
        intrinsics_q=manifest.intrinsics,
        correspondences=corrs,
        initial_pose=_pose_from_json(match_doc["coarse_pose"]),
    )
    result = refine_pose(prob, cfg)
    doc = {
        "query_id": query_id,
        "best_view_index": idx,
        "best_view_id": ref.view_id,
        "pose": _pose_json(result.pose),
        "best_loss": result.best_loss,
        "best_iteration": result.best_iteration,
        "iterations_run": result.iterations_run,
        "converged": result.converged,
        "n_correspondences": len(corrs),
    }
    _write_json(out_dir / f"refine_{query_id}.json", doc)
    _log(
        "refined",
        query=query_id,
        best_view=ref.view_id,
        loss=f"{result.best_loss:.4g}",
        iterations=result.iterations_run,
        correspondences=len(corrs),
    )
    return doc


def _cmd_match(args) -> None:
    k, jobs = _k(args), _jobs(args)
    manifest = read_manifest(args.manifest)
    out_dir = _out_dir(args, Path(args.manifest))
    ref_maps = _load_ref_maps(manifest)
    for qid in _query_ids(manifest, args):
        _match_one(manifest, ref_maps, qid, k, jobs, out_dir)


def _cmd_refine(args) -> None:
    k, jobs = _k(args), _jobs(args)
    cfg = _optimizer_config(args)
    manifest = read_manifest(args.manifest)
    out_dir = _out_dir(args, Path(args.manifest))

    ref_maps = None
    for qid in _query_ids(manifest, args):
        match_path = out_dir / f"match_{qid}.json"
        if match_path.is_file():
            match_doc = json.loads(match_path.read_text(encoding="utf-8"))
        else:
            if ref_maps is None:
                ref_maps = _load_ref_maps(manifest)
            match_doc = _match_one(manifest, ref_maps, qid, k, jobs, out_dir)
        _refine_one(manifest, qid, cfg, out_dir, match_doc)


def _records_from_results(manifest, query_ids, out_dir: Path, docs=None) -> list:
    records = []
    for qid in query_ids:
        if docs is not None:
            doc = docs[qid]
        else:
            path = out_dir / f"refine_{qid}.json"
            if not path.is_file():
                raise FileNotFoundError(f"no refinement result for {qid!r}: {path}")
            doc = json.loads(path.read_text(encoding="utf-8"))
        gt = manifest.query_by_id(qid).pose.rotation
        records.append(
            EvalRecord.from_rotations(
                query_id=qid,
                rotation_est=np.array(doc["pose"]["rotation"], dtype=float),
                rotation_gt=gt,
                best_view_index=doc["best_view_index"],
                iterations_run=doc["iterations_run"],
                category=manifest.category,
            )
        )
    return records


def _write_summary(records, thresholds, out_dir: Path) -> None:
    by_cat, pooled = write_results(
        out_dir / "results.json", out_dir / "results.txt", records, thresholds
    )
    rows = list(by_cat.items()) + [("all", pooled)]
    sys.stdout.write(format_results_table(rows, thresholds))
    _log(
        "evaluated",
        queries=pooled.n,
        median_err_deg=round(pooled.median_err_deg, 3),
        out=str(out_dir / "results.json"),
    )


def _cmd_eval(args) -> None:
    thresholds = _thresholds(args)
    manifest = read_manifest(args.manifest)
    out_dir = _out_dir(args, Path(args.manifest))
    records = _records_from_results(manifest, _query_ids(manifest, args), out_dir)
    _write_summary(records, thresholds, out_dir)


def _cmd_pipeline(args) -> None:
    k, jobs = _k(args), _jobs(args)
    cfg = _optimizer_config(args)
    thresholds = _thresholds(args)
    manifest = read_manifest(args.manifest)
    out_dir = _out_dir(args, Path(args.manifest))
    ref_maps = _load_ref_maps(manifest)
    qids = _query_ids(manifest, args)

    def run_query(qid: str) -> dict:
        match_doc = _match_one(manifest, ref_maps, qid, k, jobs=1, out_dir=out_dir)
        return _refine_one(manifest, qid, cfg, out_dir, match_doc)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            docs = dict(zip(qids, pool.map(run_query, qids)))
    else:
        docs = {qid: run_query(qid) for qid in qids}

    records = _records_from_results(manifest, qids, out_dir, docs=docs)
    _write_summary(records, thresholds, out_dir)
