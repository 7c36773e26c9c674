"""Synthetic particle source standing in for the gyrokinetic code.

Each particle performs independent Gaussian random walks in ``psi``, ``E``
and ``vPar`` (plus a deterministic ``psi`` drift), rotates rigidly in the
poloidal and toroidal angles, and is marked unwanted (``w0 = -1``) once it
crosses ``loss_psi``. A marked particle is removed from the next step's
batch. Every batch is emitted in shuffled order.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

SPECIES = ("electron", "ion")

# Column order of a step batch; ``id`` is uint64, everything else float64.
PROPERTIES = ("id", "psi", "theta", "zeta", "r", "vPar", "E", "w0", "w1", "w2", "sep_flag")
FLOAT_PROPERTIES = PROPERTIES[1:]

UNWANTED = -1.0


@dataclass
class ParticleRecord:
    id: int
    psi: float
    theta: float
    zeta: float
    r: float
    vPar: float
    E: float
    w0: float = 1.0
    w1: float = 1.0
    w2: float = 1.0
    sep_flag: float = 0.0


@dataclass
class StepBatch:
    """All records for one step, stored column-wise in arrival order."""

    step: int
    time: float
    species: str
    columns: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.columns["id"])

    @property
    def ids(self) -> np.ndarray:
        return self.columns["id"]

    def record(self, i: int) -> ParticleRecord:
        values = {name: self.columns[name][i] for name in PROPERTIES}
        values["id"] = int(values["id"])
        return ParticleRecord(**{k: (v if k == "id" else float(v)) for k, v in values.items()})

    def records(self) -> Iterator[ParticleRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @classmethod
    def from_records(cls, step: int, time: float, species: str,
                     records: list[ParticleRecord]) -> StepBatch:
        columns = {"id": np.array([r.id for r in records], dtype=np.uint64)}
        for name in FLOAT_PROPERTIES:
            columns[name] = np.array([getattr(r, name) for r in records], dtype=np.float64)
        return cls(step, time, species, columns)


@dataclass
class SourceConfig:
    n_particles: int = 1000
    n_steps: int = 100
    dt: float = 1.0
    species: str = "electron"
    sigma_psi: float = 0.002
    sigma_E: float = 0.1
    sigma_vpar: float = 0.01
    drift_psi: float = 0.0
    loss_psi: float = 1.08
    seed: int = 0
    growth_rate: float = 0.0
    psi_band: tuple[float, float] = (0.95, 1.05)
    theta_band: tuple[float, float] = (0.0, 2.0 * math.pi)
    energy_band: tuple[float, float] = (100.0, 1000.0)
    vpar_thermal: float = 1.0
    omega_theta: float = 0.0
    omega_zeta: float = 0.0
    minor_radius: float = 0.6

    def problems(self, prefix: str = "") -> list[str]:
        """Every violated invariant, as ``field: reason`` strings."""
        out = []

        def bad(name, why):
            out.append(f"{prefix}{name}: {why}")

        if not isinstance(self.n_particles, int) or self.n_particles < 1:
            bad("n_particles", "must be an integer >= 1")
        if not isinstance(self.n_steps, int) or self.n_steps < 0:
            bad("n_steps", "must be an integer >= 0")
        if not self.dt > 0:
            bad("dt", "must be > 0")
        if self.species not in SPECIES:
            bad("species", f"must be one of {SPECIES}")
        for name in ("sigma_psi", "sigma_E", "sigma_vpar", "vpar_thermal"):
            if not getattr(self, name) >= 0:
                bad(name, "must be >= 0")
        if not self.growth_rate >= 0:
            bad("growth_rate", "must be >= 0")
        if not isinstance(self.seed, int) or self.seed < 0:
            bad("seed", "must be a non-negative integer")
        if not self.minor_radius > 0:
            bad("minor_radius", "must be > 0")
        for name in ("psi_band", "theta_band", "energy_band"):
            band = getattr(self, name)
            if len(band) != 2 or not band[0] <= band[1]:
                bad(name, "must be a [lo, hi] pair with lo <= hi")
        if len(self.theta_band) == 2 and not (0.0 <= self.theta_band[0]
                                              and self.theta_band[1] <= 2.0 * math.pi):
            bad("theta_band", "must lie within [0, 2pi]")
        if len(self.energy_band) == 2 and self.energy_band[0] < 0:
            bad("energy_band", "energies must be >= 0")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("invalid source configuration", problems)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


class SyntheticSource:
    """Sequential producer of step batches for one species."""

    def __init__(self, config: SourceConfig):
        config.validate()
        self.config = config
        species_key = SPECIES.index(config.species)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, species_key]))
        self.next_id = 0
        self.issued = 0

    def _fresh(self, count: int) -> dict[str, np.ndarray]:
        cfg, rng = self.config, self.rng
        ids = np.arange(self.next_id, self.next_id + count, dtype=np.uint64)
        self.next_id += count
        self.issued += count
        psi = rng.uniform(*cfg.psi_band, size=count)
        cols = {
            "id": ids,
            "psi": psi,
            "theta": np.mod(rng.uniform(*cfg.theta_band, size=count), 2.0 * math.pi),
            "zeta": rng.uniform(0.0, 2.0 * math.pi, size=count),
            "r": cfg.minor_radius * psi,
            "vPar": rng.normal(0.0, cfg.vpar_thermal, size=count),
            "E": rng.uniform(*cfg.energy_band, size=count),
            "w0": np.ones(count),
            "w1": np.ones(count),
            "w2": np.ones(count),
            "sep_flag": np.abs(psi - 1.0),
        }
        return cols

    def _shuffled(self, step: int, cols: dict[str, np.ndarray]) -> StepBatch:
        order = self.rng.permutation(len(cols["id"]))
        cols = {name: np.ascontiguousarray(cols[name][order]) for name in PROPERTIES}
        return StepBatch(step, step * self.config.dt, self.config.species, cols)

    def init_population(self) -> StepBatch:
        """Step-0 batch with ids ``0..n_particles-1``."""
        return self._shuffled(0, self._fresh(self.config.n_particles))

    def advance(self, batch: StepBatch) -> StepBatch:
        """Apply one step of dynamics and return the next (shuffled) batch."""
        cfg, rng = self.config, self.rng
        keep = batch.columns["w0"] != UNWANTED
        cols = {name: batch.columns[name][keep] for name in PROPERTIES}
        n = len(cols["id"])

        noise = rng.standard_normal((3, n))
        psi = cols["psi"] + cfg.drift_psi + cfg.sigma_psi * noise[0]
        cols["psi"] = psi
        cols["E"] = np.abs(cols["E"] + cfg.sigma_E * noise[1])
        cols["vPar"] = cols["vPar"] + cfg.sigma_vpar * noise[2]
        if cfg.omega_theta:
            cols["theta"] = np.mod(cols["theta"] + cfg.omega_theta, 2.0 * math.pi)
        if cfg.omega_zeta:
            cols["zeta"] = np.mod(cols["zeta"] + cfg.omega_zeta, 2.0 * math.pi)
        cols["r"] = cfg.minor_radius * psi
        cols["sep_flag"] = np.abs(psi - 1.0)
        cols["w0"] = np.where(psi > cfg.loss_psi, UNWANTED, cols["w0"])

        n_new = int(round(cfg.growth_rate * cfg.n_particles))
        if n_new:
            fresh = self._fresh(n_new)
            cols = {name: np.concatenate([cols[name], fresh[name]]) for name in PROPERTIES}
        return self._shuffled(batch.step + 1, cols)

    def batches(self) -> Iterator[StepBatch]:
        """Yield the step-0 batch and ``n_steps`` successors."""
        batch = self.init_population()
        yield batch
        for _ in range(self.config.n_steps):
            batch = self.advance(batch)
            yield batch


def init_population(config: SourceConfig) -> StepBatch:
    return SyntheticSource(config).init_population()


def stream_to(writer, config: SourceConfig, stop: threading.Event | None = None) -> list[int]:
    """Drive a source through a staging writer, closing it at the end.

    Returns the tagged-particle count of every emitted step. If ``stop`` is
    set the stream is closed early after the current step.
    """
    counts = []
    try:
        for batch in SyntheticSource(config).batches():
            if stop is not None and stop.is_set():
                log.info("%s source stopped before step %d", config.species, batch.step)
                break
            handle = writer.begin_step(batch.step, batch.time, batch.species)
            for name in PROPERTIES:
                handle.put(name, batch.columns[name])
            writer.end_step(handle)
            counts.append(len(batch))
    finally:
        writer.close()
    return counts
