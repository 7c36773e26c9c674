"""Command line entry point: ``sepstream run | diffuse | validate``.

Exit codes: 0 success, 2 configuration error, 3 data-integrity error,
4 I/O error. Set ``SEPSTREAM_LOG`` (e.g. ``INFO``) for log output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import config as config_mod
from . import diffusion, export, trajstore
from .errors import ConfigError, SepstreamError
from .geometry import SeparatrixModel
from .pipeline import RetentionMeter, run_pipeline
from .source import PROPERTIES, stream_to

log = logging.getLogger("sepstream")

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_IO = 0, 2, 3, 4


def _run_species(cfg: config_mod.RunConfig, species: str, stop: threading.Event) -> dict:
    """Run one producer/consumer pair and write its trajectory file."""
    endpoint = cfg.endpoint(species)
    endpoint.reset()
    source_cfg = cfg.sources[species]
    meter = RetentionMeter()
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"src-{species}") as pool:
        producer = pool.submit(stream_to, endpoint.writer(), source_cfg, stop)
        try:
            result = run_pipeline(endpoint.reader(), cfg.pipeline, meter)
        except BaseException:
            stop.set()
            endpoint.abort()
            raise
        growth = producer.result()
    if len(growth) != source_cfg.n_steps + 1:
        raise SepstreamError(f"{species} run interrupted after {len(growth)} steps")
    path = cfg.out_dir / f"{species}.strj"
    trajstore.write(result.blocks, path, species, source_cfg.dt, cfg.digest)
    return {
        "species": species,
        "trajectory": str(path),
        "seeds": len(result.seeds),
        "workers": result.partition.worker_count,
        "shard_sizes": result.partition.sizes(),
        "steps_filled": result.steps_filled,
        "peak_retained_records": result.peak_retained,
        "retention_bound": result.retention_bound,
        "total_records_emitted": result.total_emitted,
        "trajectory_cells": result.trajectory_cells,
        "max_buffered_frames": endpoint.max_buffered,
        "tagged_per_step": growth,
        "per_step": [vars(s) for s in result.steps],
        "wall_seconds": time.perf_counter() - t0,
    }


def diffuse_file(trajectory, dcfg: diffusion.DiffusionConfig, model: SeparatrixModel,
                 out_dir) -> tuple[Path, Path, diffusion.DiffusionSeries]:
    """Compute the diffusion series of a trajectory file and export it."""
    trajectory = Path(trajectory)
    ds = trajstore.read(trajectory)
    series = diffusion.compute_series(ds, dcfg, model)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = trajectory.stem
    csv_path = export.write_csv(series, out_dir / f"{stem}_diffusion.csv")
    json_path = export.write_json(series, out_dir / f"{stem}_diffusion.json")
    return csv_path, json_path, series


def run_workflow(cfg: config_mod.RunConfig) -> dict:
    """Simulate, analyse and export every configured species; return the report."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    stop = threading.Event()
    started = datetime.now(timezone.utc).isoformat()
    with ThreadPoolExecutor(max_workers=len(cfg.species)) as pool:
        futures = {s: pool.submit(_run_species, cfg, s, stop) for s in cfg.species}
        try:
            reports = {s: f.result() for s, f in futures.items()}
        except BaseException:
            # stop producers first; consumers drain to the end of their streams
            stop.set()
            raise
    for species, rep in reports.items():
        csv_path, json_path, _ = diffuse_file(rep["trajectory"], cfg.diffusion, cfg.geometry,
                                              cfg.out_dir)
        rep["diffusion_csv"] = str(csv_path)
        rep["diffusion_json"] = str(json_path)
    report = {"started_at": started, "config_digest": cfg.digest,
              "species": [reports[s] for s in cfg.species]}
    (cfg.out_dir / "run_report.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


def _overrides(args) -> dict:
    return {"seed": getattr(args, "seed", None), "workers": getattr(args, "workers", None),
            "out_dir": getattr(args, "out_dir", None), "origin": getattr(args, "origin", None),
            "regions": getattr(args, "regions", None)}


def cmd_run(args) -> int:
    cfg = config_mod.load(args.config, **_overrides(args))
    report = run_workflow(cfg)
    for rep in report["species"]:
        print(f"{rep['species']}: {rep['seeds']} seeds x {rep['steps_filled']} steps -> "
              f"{rep['trajectory']}; peak retained {rep['peak_retained_records']} records "
              f"(bound {rep['retention_bound']}, emitted {rep['total_records_emitted']})")
    print(f"report: {cfg.out_dir / 'run_report.json'}")
    return EXIT_OK


def cmd_diffuse(args) -> int:
    if args.config:
        doc = config_mod.load_document(args.config)
    else:
        doc = {}
    overrides = _overrides(args)
    overrides.update(seed=None, workers=None, out_dir=None)
    doc = config_mod.apply_overrides(doc, **overrides)
    doc.pop("source", None)
    cfg = config_mod.build(doc)
    trajectory = Path(args.trajectory)
    out_dir = Path(args.out_dir) if args.out_dir else trajectory.parent
    csv_path, json_path, series = diffuse_file(trajectory, cfg.diffusion, cfg.geometry, out_dir)
    n_rows = len(series.regions) * len(series.properties) * len(series.steps)
    print(f"{n_rows} rows -> {csv_path}")
    print(f"json -> {json_path}")
    return EXIT_OK


def _estimates(cfg: config_mod.RunConfig) -> list[str]:
    lines = []
    th = cfg.pipeline.threshold
    for species in cfg.species:
        src = cfg.sources[species]
        lo, hi = src.psi_band
        if hi > lo:
            frac = max(0.0, min(hi, 1.0 + th) - max(lo, 1.0 - th)) / (hi - lo)
        else:
            frac = 1.0 if abs(lo - 1.0) <= th else 0.0
        seeds = int(round(frac * src.n_particles))
        max_frame = src.n_particles + int(round(src.growth_rate * src.n_particles)) * src.n_steps
        n_props = len(cfg.pipeline.properties or PROPERTIES[1:])
        traj_bytes = trajstore.body_size(seeds, src.n_steps + 1, n_props)
        lines.append(f"{species}: {src.n_particles} particles, {src.n_steps} steps, "
                     f"~{seeds} seeds, max frame ~{max_frame} records, "
                     f"retention bound ~{seeds + max_frame} records, "
                     f"trajectory ~{traj_bytes / 1e6:.1f} MB")
    return lines


def cmd_validate(args) -> int:
    cfg = config_mod.load(args.config, **_overrides(args))
    print(f"configuration OK ({cfg.digest[:12]})")
    print(f"species: {', '.join(cfg.species)}; staging {cfg.staging.mode}; "
          f"{cfg.pipeline.worker_count} workers; {len(cfg.diffusion.regions)} regions")
    for line in _estimates(cfg):
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepstream", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def region_flags(p):
        p.add_argument("--regions", help="quadrant=Q (0..3), angles=LO,HI (e.g. 0.2pi,0.9pi) "
                                         "or all")
        p.add_argument("--origin", choices=["xpoint", "horizontal"])

    run = sub.add_parser("run", help="simulate and analyse, write trajectories and exports")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir")
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    region_flags(run)
    run.set_defaults(func=cmd_run)

    dif = sub.add_parser("diffuse", help="recompute diffusion series from a trajectory file")
    dif.add_argument("--trajectory", required=True)
    dif.add_argument("--config", help="run config supplying [geometry] and [diffusion]")
    dif.add_argument("--out-dir")
    region_flags(dif)
    dif.set_defaults(func=cmd_diffuse)

    val = sub.add_parser("validate", help="check a config and print derived estimates")
    val.add_argument("--config", required=True)
    val.add_argument("--seed", type=int)
    val.add_argument("--workers", type=int)
    region_flags(val)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SEPSTREAM_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except SepstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
