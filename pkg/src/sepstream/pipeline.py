"""Streaming trajectory assembly.

The analysis side keeps only the particles selected at step 0 (the seed
set). Every later frame is trimmed to those ids, sorted by id, split into
contiguous id shards and appended column-by-column into per-worker
particle-major trajectory blocks. Nothing but movement of values happens
here, so the result is bit-identical to filtering and transposing all
frames at once.
"""
from __future__ import annotations

import heapq
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FrameError, IntegrityError, ProtocolError, RoutingError
from .staging import END_OF_STREAM, StepFrame

log = logging.getLogger(__name__)

UNWANTED = -1.0


@dataclass
class PipelineConfig:
    threshold: float = 0.05
    worker_count: int = 2
    fill_value: float = math.nan
    # properties kept in the trajectories; None keeps every non-id column
    properties: tuple[str, ...] | None = None
    frame_timeout: float | None = 60.0
    coordinator_ranks: int = 4

    def problems(self, prefix: str = "") -> list[str]:
        out = []
        if not self.threshold >= 0:
            out.append(f"{prefix}threshold: must be >= 0")
        if not isinstance(self.worker_count, int) or self.worker_count < 1:
            out.append(f"{prefix}worker_count: must be an integer >= 1")
        if not isinstance(self.coordinator_ranks, int) or self.coordinator_ranks < 1:
            out.append(f"{prefix}coordinator_ranks: must be an integer >= 1")
        if self.frame_timeout is not None and not self.frame_timeout > 0:
            out.append(f"{prefix}frame_timeout: must be > 0")
        if self.properties is not None and "id" in self.properties:
            out.append(f"{prefix}properties: 'id' is always kept and must not be listed")
        return out


@dataclass
class SeedSet:
    ids: np.ndarray
    initial: dict[str, np.ndarray]
    threshold: float

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Partition:
    """Contiguous split of the sorted seed ids over ``worker_count`` shards.

    ``offsets`` are positions into the sorted id list; ``boundaries`` are the
    matching id values, the last one being one past the largest id.
    """

    worker_count: int
    offsets: np.ndarray
    boundaries: np.ndarray

    def sizes(self) -> list[int]:
        return np.diff(self.offsets).tolist()

    def shard_ids(self, ids: np.ndarray, k: int) -> np.ndarray:
        return ids[self.offsets[k]:self.offsets[k + 1]]

    def split_points(self, sorted_ids: np.ndarray) -> np.ndarray:
        """Cut positions that split an id-sorted array by shard."""
        inner = np.searchsorted(sorted_ids, self.boundaries[1:-1], side="left")
        return np.concatenate([[0], inner, [len(sorted_ids)]]).astype(np.int64)


class RetentionMeter:
    """Counts particle records currently held by the analysis side."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def acquire(self, n: int) -> None:
        with self._lock:
            self.current += n
            self.peak = max(self.peak, self.current)

    def release(self, n: int) -> None:
        with self._lock:
            self.current -= n
            if self.current < 0:
                raise RuntimeError("retention meter released more records than it holds")


def _check_unique_sorted(sorted_ids: np.ndarray, step: int) -> None:
    if len(sorted_ids) > 1:
        dup = np.flatnonzero(sorted_ids[1:] == sorted_ids[:-1])
        if len(dup):
            raise IntegrityError(f"duplicate particle id {int(sorted_ids[dup[0]])} in frame",
                                 step=step)


def merge_sorted_runs(runs: list[np.ndarray]) -> np.ndarray:
    """K-way merge of ascending id runs, dropping duplicates."""
    merged = np.fromiter(heapq.merge(*(r.tolist() for r in runs)), dtype=np.uint64,
                         count=sum(len(r) for r in runs))
    if len(merged) > 1:
        merged = merged[np.concatenate([[True], merged[1:] != merged[:-1]])]
    return merged


def build_seed_set(frame0: StepFrame, threshold: float, ranks: int = 1) -> SeedSet:
    """Select step-0 records near the separatrix and sort their ids.

    A record is kept when ``sep_flag <= threshold`` and ``w0 != -1``. The
    selection is cut into ``ranks`` chunks that are sorted independently and
    then merged at the coordinator, the way per-rank id lists would be.
    """
    if frame0.step != 0:
        raise ProtocolError("seed set must be built from step 0", step=frame0.step)
    cols = frame0.columns
    for name in ("id", "sep_flag", "w0"):
        if name not in cols:
            raise FrameError(f"step-0 frame lacks property {name!r}", step=0)
    ids = cols["id"]
    _check_unique_sorted(np.sort(ids), 0)

    selected = np.flatnonzero((cols["sep_flag"] <= threshold) & (cols["w0"] != UNWANTED))
    if len(selected) == 0:
        raise ConfigError(f"no step-0 particle within threshold {threshold}; nothing to track")

    runs = [np.sort(ids[chunk]) for chunk in np.array_split(selected, min(ranks, len(selected)))]
    seed_ids = merge_sorted_runs(runs)

    order = selected[np.argsort(ids[selected], kind="stable")]
    initial = {name: np.ascontiguousarray(arr[order]) for name, arr in cols.items()}
    return SeedSet(seed_ids, initial, threshold)


def trim(frame: StepFrame, seeds: SeedSet) -> StepFrame:
    """Keep the frame's seed records, sorted by id ascending."""
    ids = frame.columns["id"]
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    _check_unique_sorted(sorted_ids, frame.step)
    pos = np.searchsorted(seeds.ids, sorted_ids)
    member = np.zeros(len(sorted_ids), dtype=bool)
    inside = pos < len(seeds.ids)
    member[inside] = seeds.ids[pos[inside]] == sorted_ids[inside]
    kept = order[member]
    cols = {name: np.ascontiguousarray(arr[kept]) for name, arr in frame.columns.items()}
    return StepFrame(frame.step, frame.time, frame.species, cols)


def assign_shards(seeds: SeedSet | np.ndarray, worker_count: int) -> Partition:
    """Split sorted seed ids into contiguous shards whose sizes differ by <= 1."""
    ids = seeds.ids if isinstance(seeds, SeedSet) else np.asarray(seeds)
    n = len(ids)
    if worker_count < 1:
        raise ConfigError(f"worker_count must be >= 1, got {worker_count}")
    if worker_count > n:
        raise ConfigError(f"worker_count {worker_count} exceeds the {n} seed particles")
    base, extra = divmod(n, worker_count)
    sizes = [base + 1 if k < extra else base for k in range(worker_count)]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    boundaries = np.empty(worker_count + 1, dtype=np.uint64)
    boundaries[:-1] = ids[offsets[:-1]]
    boundaries[-1] = ids[-1] + np.uint64(1)
    return Partition(worker_count, offsets, boundaries)


class TrajectoryBlock:
    """Particle-major trajectories for one shard.

    ``data[name]`` has shape (particles, steps); ``presence`` marks the
    samples actually received. Absence is absorbing: once a particle misses
    a step it stays absent and its later samples hold ``fill_value``.
    """

    def __init__(self, worker: int, ids: np.ndarray, properties, fill_value: float = math.nan,
                 capacity: int = 16):
        self.worker = worker
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64)
        self.properties = tuple(properties)
        self.fill_value = fill_value
        self.steps_filled = 0
        self._times: list[float] = []
        self._alive = np.ones(len(self.ids), dtype=bool)
        self._cap = max(1, capacity)
        self._data = {name: np.full((len(self.ids), self._cap), fill_value)
                      for name in self.properties}
        self._presence = np.zeros((len(self.ids), self._cap), dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def times(self) -> np.ndarray:
        return np.array(self._times, dtype=np.float64)

    @property
    def presence(self) -> np.ndarray:
        return self._presence[:, :self.steps_filled]

    def array(self, name: str) -> np.ndarray:
        return self._data[name][:, :self.steps_filled]

    @property
    def data(self) -> dict[str, np.ndarray]:
        return {name: self.array(name) for name in self.properties}

    def _grow(self) -> None:
        cap = self._cap * 2
        for name, old in self._data.items():
            new = np.full((len(self.ids), cap), self.fill_value)
            new[:, :self._cap] = old
            self._data[name] = new
        presence = np.zeros((len(self.ids), cap), dtype=bool)
        presence[:, :self._cap] = self._presence
        self._presence = presence
        self._cap = cap

    def append_step(self, records: dict[str, np.ndarray], step: int, time: float = 0.0):
        """Write one step's records (this shard's ids only) as a new column."""
        if step != self.steps_filled:
            raise ProtocolError(f"block {self.worker} expected step {self.steps_filled}",
                                step=step)
        ids = np.asarray(records["id"], dtype=np.uint64)
        rows = np.searchsorted(self.ids, ids)
        if len(ids):
            if rows.max() >= len(self.ids) or np.any(self.ids[rows] != ids):
                raise RoutingError(f"record id not owned by shard {self.worker}", step=step)
            if np.any(np.diff(rows) <= 0):
                raise RoutingError(f"records for shard {self.worker} are not strictly "
                                   "increasing by id", step=step)
        missing = [name for name in self.properties if name not in records]
        if missing:
            raise FrameError(f"step lacks properties {missing}", step=step)

        if self.steps_filled == self._cap:
            self._grow()
        s = self.steps_filled
        present = np.zeros(len(self.ids), dtype=bool)
        present[rows] = True
        present &= self._alive
        self._alive = present
        for name in self.properties:
            column = np.full(len(self.ids), self.fill_value)
            column[rows] = records[name]
            column[~present] = self.fill_value
            self._data[name][:, s] = column
        self._presence[:, s] = present
        self._times.append(float(time))
        self.steps_filled += 1
        return self


def append_step(block: TrajectoryBlock, records: dict[str, np.ndarray], step: int,
                time: float = 0.0) -> TrajectoryBlock:
    return block.append_step(records, step, time)


@dataclass
class StepStats:
    step: int
    frame_records: int
    kept: int
    dropped: int
    seconds: float


@dataclass
class PipelineResult:
    seeds: SeedSet
    partition: Partition
    blocks: list[TrajectoryBlock]
    species: str
    steps: list[StepStats] = field(default_factory=list)
    peak_retained: int = 0

    @property
    def steps_filled(self) -> int:
        return self.blocks[0].steps_filled if self.blocks else 0

    @property
    def max_frame(self) -> int:
        return max((s.frame_records for s in self.steps), default=0)

    @property
    def total_emitted(self) -> int:
        return sum(s.frame_records for s in self.steps)

    @property
    def retention_bound(self) -> int:
        return len(self.seeds) + self.max_frame

    @property
    def trajectory_cells(self) -> int:
        return sum(len(b) * b.steps_filled for b in self.blocks)


def _slice(cols: dict[str, np.ndarray], lo: int, hi: int) -> dict[str, np.ndarray]:
    return {name: arr[lo:hi] for name, arr in cols.items()}


def run_pipeline(reader, config: PipelineConfig, meter: RetentionMeter | None = None
                 ) -> PipelineResult:
    """Consume a staging reader to end-of-stream and assemble trajectories.

    Held records are counted on ``meter``: the frame being processed, plus
    the trimmed records still being appended by the workers. Workers append
    step k while the reader fetches frame k+1; step k is drained before
    frame k+1 is trimmed, so the count never exceeds
    ``len(seeds) + largest frame``.
    """
    meter = meter or RetentionMeter()
    t0 = time.perf_counter()
    frame0 = reader.next_step(config.frame_timeout)
    if frame0 is END_OF_STREAM:
        raise IntegrityError("stream ended before step 0")
    if frame0.step != 0:
        raise IntegrityError("stream does not start at step 0", step=frame0.step)
    meter.acquire(len(frame0))
    seeds = build_seed_set(frame0, config.threshold, config.coordinator_ranks)
    meter.acquire(len(seeds))
    meter.release(len(frame0))
    partition = assign_shards(seeds, config.worker_count)
    properties = config.properties
    if properties is None:
        properties = tuple(name for name in frame0.columns if name != "id")
    missing = [p for p in properties if p not in frame0.columns]
    if missing:
        raise ConfigError(f"frames do not carry properties {missing}")
    blocks = [TrajectoryBlock(k, partition.shard_ids(seeds.ids, k), properties,
                              config.fill_value)
              for k in range(partition.worker_count)]
    log.info("%s: %d of %d step-0 particles seeded over %d workers", frame0.species,
             len(seeds), len(frame0), partition.worker_count)

    species, time0 = frame0.species, frame0.time
    stats = [StepStats(0, len(frame0), len(seeds), len(frame0) - len(seeds),
                       time.perf_counter() - t0)]
    del frame0

    def dispatch(cols, step, t):
        cuts = partition.split_points(cols["id"])
        return [pool.submit(blocks[k].append_step, _slice(cols, cuts[k], cuts[k + 1]), step, t)
                for k in range(partition.worker_count)]

    with ThreadPoolExecutor(max_workers=partition.worker_count,
                            thread_name_prefix=f"traj-{species}") as pool:
        pending = dispatch(seeds.initial, 0, time0)
        in_flight = len(seeds)
        last_step = 0
        while True:
            frame = reader.next_step(config.frame_timeout)
            # workers finish step k before frame k+1 is trimmed
            for fut in pending:
                fut.result()
            meter.release(in_flight)
            in_flight = 0
            if frame is END_OF_STREAM:
                break
            t_step = time.perf_counter()
            meter.acquire(len(frame))
            if frame.step != last_step + 1:
                raise IntegrityError(f"step gap: expected {last_step + 1}, got {frame.step}",
                                     step=frame.step)
            if frame.species != species:
                raise IntegrityError(f"frame species {frame.species!r} in a {species} stream",
                                     step=frame.step)
            trimmed = trim(frame, seeds)
            kept = len(trimmed)
            meter.acquire(kept)
            meter.release(len(frame))
            stats.append(StepStats(frame.step, len(frame), kept, len(frame) - kept, 0.0))
            pending = dispatch(trimmed.columns, frame.step, frame.time)
            in_flight = kept
            last_step = frame.step
            del frame, trimmed
            stats[-1].seconds = time.perf_counter() - t_step

    return PipelineResult(seeds, partition, blocks, species, stats, meter.peak)
