"""Per-region weighted displacement statistics and diffusion coefficients.

For a region's particles and a property ``p`` at step ``N``::

    delta = p(N) - p(0)
    M     = sum(w0 * delta)    / sum(w0)
    MSQ   = sum(w0 * delta**2) / sum(w0)
    msd   = MSQ - M**2
    d     = msd / (dt * N)              (psi: also divided by dpdrs**2)

Only particles present at both steps and with ``w0(N) != -1`` contribute,
weighted by ``w0(N)``. Particles are assigned to regions once, from their
step-0 poloidal angle. Sums are exactly rounded (``math.fsum``), so results
do not depend on summation order.
"""
from __future__ import annotations

import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import RegionSpec, SeparatrixModel, region_mask
from .trajstore import TrajectoryDataset

UNWANTED = -1.0
DIFFUSION_PROPERTIES = ("psi", "E", "vPar", "r")
SERIES_FIELDS = ("M", "MSQ", "msd", "d", "n_eff", "w_sum")

_EPS = sys.float_info.epsilon


@dataclass
class DiffusionConfig:
    regions: list[RegionSpec]
    properties: tuple[str, ...] = ("psi", "E", "vPar")
    dt: float | None = None
    dpdrs: float | tuple[float, ...] = 1.0
    assignment: str = "initial-position"
    workers: int = 1

    def problems(self, prefix: str = "") -> list[str]:
        out = []
        if not self.regions:
            out.append(f"{prefix}regions: at least one region is required")
        bad = [p for p in self.properties if p not in DIFFUSION_PROPERTIES]
        if bad or not self.properties:
            out.append(f"{prefix}properties: must be a non-empty subset of {DIFFUSION_PROPERTIES}")
        if self.dt is not None and not self.dt > 0:
            out.append(f"{prefix}dt: must be > 0")
        if self.assignment != "initial-position":
            out.append(f"{prefix}assignment: only 'initial-position' is supported")
        if not isinstance(self.workers, int) or self.workers < 1:
            out.append(f"{prefix}workers: must be an integer >= 1")
        if isinstance(self.dpdrs, (int, float)):
            values = [self.dpdrs]
        else:
            values = list(self.dpdrs)
            if len(values) != len(self.regions):
                out.append(f"{prefix}dpdrs: needs one value per region ({len(self.regions)})")
        if any(not v > 0 for v in values):
            out.append(f"{prefix}dpdrs: every value must be > 0")
        return out

    def dpdrs_for(self, region_index: int) -> float:
        if isinstance(self.dpdrs, (int, float)):
            return float(self.dpdrs)
        return float(self.dpdrs[region_index])


@dataclass
class Moments:
    """Weighted displacement moments of one (region, property, step).

    The raw sums are kept so disjoint regions can be combined exactly.
    ``M`` and ``MSQ`` are NaN when no weight contributes (a gap).
    """

    sum_w: float
    sum_wd: float
    sum_wd2: float
    n_eff: int

    @property
    def w_sum(self) -> float:
        return self.sum_w

    @property
    def M(self) -> float:
        return self.sum_wd / self.sum_w if self.sum_w != 0 else math.nan

    @property
    def MSQ(self) -> float:
        return self.sum_wd2 / self.sum_w if self.sum_w != 0 else math.nan

    @property
    def msd(self) -> float:
        return mean_square_displacement(self.M, self.MSQ)


def mean_square_displacement(M: float, MSQ: float) -> float:
    """``MSQ - M**2``, with cancellation residue below rounding snapped to 0."""
    msd = MSQ - M * M
    if msd < 0 and -msd <= 4 * _EPS * max(abs(MSQ), M * M):
        return 0.0
    return msd


def assign_regions(dataset: TrajectoryDataset, model: SeparatrixModel,
                   regions: list[RegionSpec]) -> list[np.ndarray]:
    """Row indices (ascending id order) of the particles in each region.

    Membership is decided by each particle's step-0 poloidal angle.
    """
    if "theta" not in dataset.properties:
        raise ValueError("trajectory dataset has no 'theta' property for region assignment")
    theta0 = dataset.properties["theta"][:, 0]
    present0 = dataset.presence[:, 0]
    return [np.flatnonzero(present0 & region_mask(np.nan_to_num(theta0), spec, model))
            for spec in regions]


def displacement(dataset: TrajectoryDataset, particle_id: int, prop: str, step: int
                 ) -> float | None:
    """``p(step) - p(0)`` for one particle, or None if either sample is absent."""
    i = dataset.row(particle_id)
    if not (dataset.presence[i, 0] and dataset.presence[i, step]):
        return None
    values = dataset.properties[prop]
    return float(values[i, step] - values[i, 0])


def _moments(delta: np.ndarray, w: np.ndarray) -> Moments:
    wd = w * delta
    return Moments(math.fsum(w.tolist()), math.fsum(wd.tolist()),
                   math.fsum((wd * delta).tolist()), len(w))


def moments_from(delta, weights) -> Moments:
    """Moments of explicit displacements and weights; ``w == -1`` entries are skipped."""
    delta = np.asarray(delta, dtype=float)
    weights = np.asarray(weights, dtype=float)
    keep = weights != UNWANTED
    return _moments(delta[keep], weights[keep])


def _contributing(presence: np.ndarray, w0: np.ndarray, step: int) -> np.ndarray:
    return presence[:, 0] & presence[:, step] & (w0[:, step] != UNWANTED)


def weighted_moments(rows: np.ndarray, prop: str, step: int, dataset: TrajectoryDataset
                     ) -> Moments:
    """Weighted moments of ``prop`` displacement over ``rows`` at ``step``."""
    if "w0" not in dataset.properties:
        raise ValueError("trajectory dataset has no 'w0' property")
    presence = dataset.presence[rows]
    w0 = dataset.properties["w0"][rows]
    values = dataset.properties[prop][rows]
    ok = _contributing(presence, w0, step)
    return _moments(values[ok, step] - values[ok, 0], w0[ok, step])


def diffusion_coefficient(M: float, MSQ: float, prop: str, step: int, dt: float,
                          dpdrs: float = 1.0) -> float:
    if step < 1:
        raise ValueError("diffusion coefficient needs step >= 1")
    d = mean_square_displacement(M, MSQ) / (dt * step)
    if prop == "psi":
        d /= dpdrs * dpdrs
    return d


@dataclass
class DiffusionSeries:
    """Arrays indexed ``[region, property, step - 1]`` for steps 1..S-1."""

    species: str
    regions: list[RegionSpec]
    properties: tuple[str, ...]
    steps: np.ndarray
    times: np.ndarray
    region_sizes: list[int]
    M: np.ndarray = field(repr=False)
    MSQ: np.ndarray = field(repr=False)
    msd: np.ndarray = field(repr=False)
    d: np.ndarray = field(repr=False)
    n_eff: np.ndarray = field(repr=False)
    w_sum: np.ndarray = field(repr=False)

    def at(self, region: int, prop: str, step: int) -> dict[str, float]:
        j = self.properties.index(prop)
        k = step - int(self.steps[0])
        return {name: getattr(self, name)[region, j, k].item() for name in SERIES_FIELDS}

    def rows(self):
        """One dict per (region, property, step), in that nesting order."""
        for i, region in enumerate(self.regions):
            for j, prop in enumerate(self.properties):
                for k, step in enumerate(self.steps):
                    row = {"region": region, "property": prop, "step": int(step),
                           "time_s": float(self.times[k])}
                    for name in SERIES_FIELDS:
                        row[name] = getattr(self, name)[i, j, k].item()
                    yield row


def _region_series(dataset, rows, props, dt, dpdrs):
    S = dataset.n_steps
    out = np.full((len(SERIES_FIELDS), len(props), max(S - 1, 0)), np.nan)
    presence = dataset.presence[rows]
    w0 = dataset.properties["w0"][rows]
    for j, prop in enumerate(props):
        values = dataset.properties[prop][rows]
        for step in range(1, S):
            ok = _contributing(presence, w0, step)
            m = _moments(values[ok, step] - values[ok, 0], w0[ok, step])
            M, MSQ = m.M, m.MSQ
            out[0, j, step - 1] = M
            out[1, j, step - 1] = MSQ
            out[2, j, step - 1] = m.msd
            out[3, j, step - 1] = diffusion_coefficient(M, MSQ, prop, step, dt, dpdrs)
            out[4, j, step - 1] = m.n_eff
            out[5, j, step - 1] = m.sum_w
    return out


def compute_series(dataset: TrajectoryDataset, config: DiffusionConfig,
                   model: SeparatrixModel) -> DiffusionSeries:
    """Full (region x property x step) diffusion series of a dataset.

    Regions are evaluated concurrently on ``config.workers`` threads; the
    result does not depend on scheduling.
    """
    missing = [p for p in (*config.properties, "w0", "theta") if p not in dataset.properties]
    if missing:
        raise ValueError(f"trajectory dataset lacks properties {missing}")
    dt = config.dt if config.dt is not None else dataset.dt
    region_rows = assign_regions(dataset, model, config.regions)
    props = tuple(config.properties)

    def work(i):
        return _region_series(dataset, region_rows[i], props, dt, config.dpdrs_for(i))

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        per_region = list(pool.map(work, range(len(config.regions))))
    stacked = np.stack(per_region, axis=1) if per_region else np.empty((6, 0, len(props), 0))
    S = dataset.n_steps
    return DiffusionSeries(
        species=dataset.species,
        regions=list(config.regions),
        properties=props,
        steps=np.arange(1, S),
        times=np.asarray(dataset.times[1:], dtype=float),
        region_sizes=[len(r) for r in region_rows],
        **{name: stacked[f] for f, name in enumerate(SERIES_FIELDS)},
    )
