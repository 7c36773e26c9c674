"""Run configuration: one TOML document for the whole workflow.

Sections are ``[run]``, ``[geometry]``, ``[source]`` (shared defaults, with
optional ``[source.electron]`` / ``[source.ion]`` overrides), ``[staging]``,
``[pipeline]`` and ``[diffusion]``. Unknown keys are rejected and every
problem is reported at once.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import geometry
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .geometry import RegionSpec, SeparatrixModel
from .pipeline import PipelineConfig
from .source import SPECIES, SourceConfig
from .staging import StageEndpoint

RUN_KEYS = {"out_dir", "seed", "species"}
GEOMETRY_KEYS = {"center", "radius", "xpoint_angle"}
STAGING_KEYS = {"mode", "capacity", "path"}
PIPELINE_KEYS = {"threshold", "worker_count", "fill_value", "properties", "frame_timeout",
                 "coordinator_ranks"}
DIFFUSION_KEYS = {"regions", "origin", "properties", "dt", "dpdrs", "workers"}
SOURCE_KEYS = SourceConfig.field_names() - {"species"}
SECTIONS = {"run", "geometry", "source", "staging", "pipeline", "diffusion"}

_ANGLE_RE = re.compile(r"^\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)?\s*(pi|π)?\s*$")


def parse_angle(text) -> float:
    """Radians from a number or a string such as ``"0.2pi"`` or ``"1.5"``."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _ANGLE_RE.match(str(text))
    if not m or (m.group(1) is None and m.group(2) is None):
        raise ValueError(f"cannot parse angle {text!r}")
    value = float(m.group(1)) if m.group(1) is not None else 1.0
    return value * math.pi if m.group(2) else value


def parse_regions(text: str, origin: str = "horizontal") -> list[RegionSpec]:
    """Region list from ``quadrant=Q``, ``all`` or ``angles=LO,HI``.

    Quadrants are numbered 0..3 from the angle origin; the fourth quadrant
    of the cross-section is ``quadrant=3``.
    """
    text = text.strip()
    if text == "all":
        return geometry.all_segments(origin)
    key, _, value = text.partition("=")
    key = key.strip()
    if key == "quadrant":
        try:
            q = int(value)
        except ValueError:
            raise ValueError(f"quadrant must be an integer 0..3, got {value!r}") from None
        if q not in range(geometry.N_QUADRANTS):
            raise ValueError(f"quadrant must be in 0..3, got {q}")
        return geometry.quadrant_regions(q, origin)
    if key == "angles":
        parts = value.split(",")
        if len(parts) != 2:
            raise ValueError(f"angles=LO,HI expects two values, got {value!r}")
        lo, hi = (geometry.wrap_angle(parse_angle(p)) for p in parts)
        return [RegionSpec.angles(lo, hi, origin)]
    raise ValueError(f"unknown region selector {text!r}; use quadrant=Q, angles=LO,HI or all")


@dataclass
class StagingConfig:
    mode: str = "in-process"
    capacity: int = 4
    path: str = "stage"

    def problems(self, prefix: str = "staging.") -> list[str]:
        out = []
        if self.mode not in StageEndpoint.MODES:
            out.append(f"{prefix}mode: must be one of {StageEndpoint.MODES}")
        if not isinstance(self.capacity, int) or self.capacity < 1:
            out.append(f"{prefix}capacity: must be an integer >= 1")
        return out


@dataclass
class RunConfig:
    out_dir: Path
    seed: int
    species: list[str]
    geometry: SeparatrixModel
    sources: dict[str, SourceConfig]
    staging: StagingConfig
    pipeline: PipelineConfig
    diffusion: DiffusionConfig
    document: dict = field(repr=False, default_factory=dict)

    @property
    def digest(self) -> str:
        canonical = json.dumps(self.document, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def endpoint(self, species: str) -> StageEndpoint:
        path = self.out_dir / self.staging.path / species
        return StageEndpoint(self.staging.mode, self.staging.capacity, path)


def _unknown(section: str, table, allowed) -> list[str]:
    if not isinstance(table, dict):
        return [f"{section}: must be a table"]
    return [f"{section}.{k}: unknown key" for k in sorted(set(table) - set(allowed))]


def _checked(cfg, prefix: str) -> list[str]:
    try:
        return cfg.problems(prefix=prefix)
    except TypeError as exc:
        return [f"{prefix[:-1]}: value of the wrong type ({exc})"]


def apply_overrides(doc: dict, *, seed=None, workers=None, out_dir=None, origin=None,
                    regions=None) -> dict:
    """Copy of ``doc`` with command-line overrides applied."""
    doc = copy.deepcopy(doc)
    if seed is not None:
        doc.setdefault("run", {})["seed"] = seed
        for species in SPECIES:
            doc.get("source", {}).get(species, {}).pop("seed", None)
        doc.get("source", {}).pop("seed", None)
    if workers is not None:
        doc.setdefault("pipeline", {})["worker_count"] = workers
    if out_dir is not None:
        doc.setdefault("run", {})["out_dir"] = str(out_dir)
    if origin is not None:
        doc.setdefault("diffusion", {})["origin"] = origin
    if regions is not None:
        doc.setdefault("diffusion", {})["regions"] = regions
    return doc


def build(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed document and build the run configuration.

    Raises
    ------
    ConfigError
        Listing every problem found, each prefixed by its field path.
    """
    problems = [f"{k}: unknown section" for k in sorted(set(doc) - SECTIONS)]
    run = doc.get("run", {})
    geo = doc.get("geometry", {})
    src = doc.get("source", {})
    stg = doc.get("staging", {})
    pipe = doc.get("pipeline", {})
    dif = doc.get("diffusion", {})
    problems += _unknown("run", run, RUN_KEYS)
    problems += _unknown("geometry", geo, GEOMETRY_KEYS)
    problems += _unknown("staging", stg, STAGING_KEYS)
    problems += _unknown("pipeline", pipe, PIPELINE_KEYS)
    problems += _unknown("diffusion", dif, DIFFUSION_KEYS)
    if isinstance(src, dict):
        problems += _unknown("source", src, SOURCE_KEYS | set(SPECIES))
        for species in SPECIES:
            problems += _unknown(f"source.{species}", src.get(species, {}), SOURCE_KEYS)
    else:
        problems.append("source: must be a table")
    if problems:
        raise ConfigError("invalid configuration", problems)

    seed = run.get("seed", 0)
    species_list = list(run.get("species", ["electron"]))
    if not species_list or any(s not in SPECIES for s in species_list):
        problems.append(f"run.species: must be a non-empty list drawn from {SPECIES}")
    if len(set(species_list)) != len(species_list):
        problems.append("run.species: species listed twice")
    if not isinstance(seed, int) or seed < 0:
        problems.append("run.seed: must be a non-negative integer")

    model = None
    try:
        xpoint = geometry.wrap_angle(parse_angle(geo.get("xpoint_angle", 1.5 * math.pi)))
        model = SeparatrixModel(tuple(float(c) for c in geo.get("center", (1.7, 0.0))),
                                float(geo.get("radius", 0.6)), xpoint)
        if len(model.center) != 2:
            problems.append("geometry.center: must be an [R, Z] pair")
    except (TypeError, ValueError) as exc:
        problems.append(f"geometry: {exc}")

    shared = {k: v for k, v in src.items() if k not in SPECIES}
    sources = {}
    for species in species_list:
        if species not in SPECIES:
            continue
        values = {"seed": seed, **shared, **src.get(species, {}), "species": species}
        if model is not None:
            values.setdefault("minor_radius", model.radius)
        for band in ("psi_band", "theta_band", "energy_band"):
            if band in values:
                try:
                    values[band] = tuple(parse_angle(v) if band == "theta_band" else float(v)
                                         for v in values[band])
                except (TypeError, ValueError) as exc:
                    problems.append(f"source.{species}.{band}: {exc}")
                    values.pop(band)
        cfg = SourceConfig(**values)
        problems += _checked(cfg, f"source.{species}.")
        sources[species] = cfg

    staging = StagingConfig(**stg)
    problems += _checked(staging, "staging.")

    pipe_values = dict(pipe)
    if "properties" in pipe_values:
        pipe_values["properties"] = tuple(pipe_values["properties"])
    if "fill_value" in pipe_values:
        pipe_values["fill_value"] = float(pipe_values["fill_value"])
    pipeline = PipelineConfig(**pipe_values)
    problems += _checked(pipeline, "pipeline.")
    for species, cfg in sources.items():
        if isinstance(pipeline.worker_count, int) and isinstance(cfg.n_particles, int) \
                and pipeline.worker_count > cfg.n_particles:
            problems.append(f"pipeline.worker_count: {pipeline.worker_count} exceeds "
                            f"source.{species}.n_particles ({cfg.n_particles}); the partition "
                            "needs worker_count <= seed count")

    origin = dif.get("origin", "horizontal")
    regions = []
    if origin not in geometry.ORIGINS:
        problems.append(f"diffusion.origin: must be one of {geometry.ORIGINS}")
        origin = "horizontal"
    try:
        regions = parse_regions(str(dif.get("regions", "quadrant=3")), origin)
    except ValueError as exc:
        problems.append(f"diffusion.regions: {exc}")
    dpdrs = dif.get("dpdrs", 1.0)
    if isinstance(dpdrs, list):
        dpdrs = tuple(float(v) for v in dpdrs)
    diffusion = DiffusionConfig(regions=regions,
                                properties=tuple(dif.get("properties", ("psi", "E", "vPar"))),
                                dt=dif.get("dt"), dpdrs=dpdrs, workers=dif.get("workers", 1))
    problems += [p for p in _checked(diffusion, "diffusion.")
                 if regions or not p.startswith("diffusion.regions")]
    if pipeline.properties is not None:
        needed = {"theta", "w0", *diffusion.properties}
        lacking = sorted(needed - set(pipeline.properties))
        if lacking:
            problems.append(f"pipeline.properties: diffusion needs {lacking} retained")

    if problems:
        raise ConfigError("invalid configuration", problems)

    out_dir = Path(run.get("out_dir", "out"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    return RunConfig(out_dir, seed, species_list, model, sources, staging, pipeline, diffusion,
                     document=doc)


def load_document(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: not valid TOML", [str(exc)]) from exc


def load(path, **overrides) -> RunConfig:
    """Parse, override and validate a TOML run configuration."""
    doc = apply_overrides(load_document(path), **overrides)
    return build(doc)
