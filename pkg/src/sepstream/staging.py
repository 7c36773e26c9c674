"""Step-framed transport between a producer and one consumer.

A writer publishes one frame per simulation step::

    handle = writer.begin_step(step, time, species)
    handle.put("id", ids)
    handle.put("E", energies)
    writer.end_step(handle)

and the frame becomes visible to the reader atomically on ``end_step``.
Two interchangeable endpoint modes exist: a bounded in-process channel and
a directory of frame files (``step_%08d.ssf``, written to a temporary name
and renamed into place).

Frame binary layout (all little-endian)::

    magic "SSF1" | step u64 | time f64 | species u8 | record_count u64
    | property_count u16
    | per property: name_len u16, name (utf-8), type_code u8, byte_length u64
    | payload: per property, record_count contiguous 8-byte elements

Type codes: 1 = uint64, 2 = float64. Species codes: 0 = electron, 1 = ion.
"""
from __future__ import annotations

import logging
import os
import re
import struct
import threading
import time as _time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FrameError, IntegrityError, ProtocolError, StageTimeout

log = logging.getLogger(__name__)

MAGIC = b"SSF1"
HEADER = struct.Struct("<4sQdBQH")
DIR_NAME_LEN = struct.Struct("<H")
DIR_ENTRY = struct.Struct("<BQ")

TYPE_CODES = {1: np.dtype("<u8"), 2: np.dtype("<f8")}
SPECIES_CODES = {"electron": 0, "ion": 1}
SPECIES_NAMES = {v: k for k, v in SPECIES_CODES.items()}

FRAME_NAME = "step_{:08d}.ssf"
FRAME_RE = re.compile(r"^step_(\d{8})\.ssf$")
END_MARKER = "_END"

END_OF_STREAM = None


@dataclass
class StepFrame:
    step: int
    time: float
    species: str
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def record_count(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def __len__(self) -> int:
        return self.record_count

    def __eq__(self, other) -> bool:
        if not isinstance(other, StepFrame):
            return NotImplemented
        if (self.step, self.species, list(self.columns)) != (other.step, other.species,
                                                            list(other.columns)):
            return False
        if struct.pack("<d", self.time) != struct.pack("<d", other.time):
            return False
        for name, arr in self.columns.items():
            o = other.columns[name]
            if arr.dtype != o.dtype or arr.tobytes() != o.tobytes():
                return False
        return True


def _type_code(arr: np.ndarray) -> int:
    for code, dtype in TYPE_CODES.items():
        if arr.dtype == dtype:
            return code
    raise FrameError(f"unsupported element type {arr.dtype}")


def _normalize(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise FrameError(f"property {name!r} must be one-dimensional")
    if arr.dtype.kind in "ui":
        if arr.dtype.kind == "i" and arr.size and arr.min() < 0:
            raise FrameError(f"property {name!r} has negative integer values")
        return np.ascontiguousarray(arr, dtype="<u8")
    if arr.dtype.kind in "fb":
        return np.ascontiguousarray(arr, dtype="<f8")
    raise FrameError(f"property {name!r} has unsupported dtype {arr.dtype}")


def frame_size(record_count: int, names) -> int:
    """Encoded length in bytes of a frame with the given properties."""
    directory = sum(DIR_NAME_LEN.size + len(n.encode()) + DIR_ENTRY.size for n in names)
    return HEADER.size + directory + 8 * record_count * len(names)


def encode_frame(frame: StepFrame) -> bytes:
    n = frame.record_count
    parts = [HEADER.pack(MAGIC, frame.step, frame.time, SPECIES_CODES[frame.species], n,
                         len(frame.columns))]
    for name, arr in frame.columns.items():
        if len(arr) != n:
            raise FrameError(f"property {name!r} has {len(arr)} records, expected {n}",
                             step=frame.step)
        raw = name.encode()
        parts.append(DIR_NAME_LEN.pack(len(raw)))
        parts.append(raw)
        parts.append(DIR_ENTRY.pack(_type_code(arr), arr.nbytes))
    for arr in frame.columns.values():
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def decode_frame(buf: bytes, step_hint: int | None = None) -> StepFrame:
    """Parse an encoded frame.

    Raises
    ------
    IntegrityError
        On a bad magic, truncated header/directory/payload, or trailing bytes.
        The error names the step (from the header when readable, else
        ``step_hint``).
    """
    if len(buf) < HEADER.size:
        raise IntegrityError("frame shorter than its header", step=step_hint)
    magic, step, t, species_code, n, n_props = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise IntegrityError(f"bad frame magic {magic!r}", step=step_hint)
    if species_code not in SPECIES_NAMES:
        raise IntegrityError(f"unknown species code {species_code}", step=step)
    offset = HEADER.size
    directory = []
    try:
        for _ in range(n_props):
            (name_len,) = DIR_NAME_LEN.unpack_from(buf, offset)
            offset += DIR_NAME_LEN.size
            name = bytes(buf[offset:offset + name_len]).decode()
            if len(name.encode()) != name_len:
                raise IntegrityError("truncated property directory", step=step)
            offset += name_len
            code, nbytes = DIR_ENTRY.unpack_from(buf, offset)
            offset += DIR_ENTRY.size
            directory.append((name, code, nbytes))
    except (struct.error, UnicodeDecodeError) as exc:
        raise IntegrityError(f"truncated property directory: {exc}", step=step) from exc
    columns = {}
    for name, code, nbytes in directory:
        dtype = TYPE_CODES.get(code)
        if dtype is None:
            raise IntegrityError(f"unknown type code {code} for {name!r}", step=step)
        if nbytes != n * dtype.itemsize:
            raise IntegrityError(f"property {name!r} length {nbytes} != {n} records", step=step)
        if offset + nbytes > len(buf):
            raise IntegrityError(f"short payload for property {name!r}", step=step)
        columns[name] = np.frombuffer(buf, dtype=dtype, count=n, offset=offset)
        offset += nbytes
    if offset != len(buf):
        raise IntegrityError(f"{len(buf) - offset} trailing bytes after payload", step=step)
    return StepFrame(step, t, SPECIES_NAMES[species_code], columns)


class StepHandle:
    """An open, not-yet-visible step."""

    def __init__(self, step: int, time: float, species: str):
        if species not in SPECIES_CODES:
            raise FrameError(f"unknown species {species!r}", step=step)
        self.frame = StepFrame(step, float(time), species)
        self.closed = False

    @property
    def step(self) -> int:
        return self.frame.step

    def put(self, name: str, values) -> None:
        if self.closed:
            raise ProtocolError("put() on an ended step", step=self.step)
        if name in self.frame.columns:
            raise FrameError(f"property {name!r} already written", step=self.step)
        arr = _normalize(name, values)
        if self.frame.columns and len(arr) != self.frame.record_count:
            raise FrameError(f"property {name!r} has {len(arr)} records, expected "
                             f"{self.frame.record_count}", step=self.step)
        # copy so later mutation by the producer cannot leak into the frame
        self.frame.columns[name] = arr.copy()


class _Writer:
    def __init__(self):
        self._open: StepHandle | None = None
        self._last_step: int | None = None
        self.closed = False

    def begin_step(self, step: int, time: float = 0.0, species: str = "electron") -> StepHandle:
        if self.closed:
            raise ProtocolError("writer is closed", step=step)
        if self._open is not None:
            raise ProtocolError(f"begin_step while step {self._open.step} is still open",
                                step=step)
        if step < 0 or (self._last_step is not None and step <= self._last_step):
            raise ProtocolError(f"step {step} does not follow step {self._last_step}", step=step)
        self._open = StepHandle(step, time, species)
        return self._open

    def end_step(self, handle: StepHandle) -> None:
        if handle is not self._open:
            raise ProtocolError("end_step on a handle that is not the open step",
                                step=handle.step)
        handle.closed = True
        self._publish(handle.frame)
        self._open = None
        self._last_step = handle.step

    def close(self) -> None:
        if self.closed:
            return
        if self._open is not None:
            log.warning("discarding unfinished step %d on close", self._open.step)
            self._open = None
        self.closed = True
        self._finish()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _publish(self, frame: StepFrame) -> None:
        raise NotImplementedError

    def _finish(self) -> None:
        raise NotImplementedError


class _Reader:
    def next_step(self, timeout: float | None = None) -> StepFrame | None:
        raise NotImplementedError

    def __iter__(self):
        while True:
            frame = self.next_step()
            if frame is END_OF_STREAM:
                return
            yield frame


class _Channel:
    """Bounded FIFO shared by one in-process writer and one reader."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.frames: deque[StepFrame] = deque()
        self.cond = threading.Condition()
        self.closed = False
        self.aborted = False
        self.max_buffered = 0
        self.writer_waits = 0


class ChannelWriter(_Writer):
    def __init__(self, channel: _Channel):
        super().__init__()
        self.channel = channel

    def _publish(self, frame: StepFrame) -> None:
        ch = self.channel
        with ch.cond:
            if len(ch.frames) >= ch.capacity:
                ch.writer_waits += 1
            while len(ch.frames) >= ch.capacity and not ch.aborted:
                ch.cond.wait()
            if ch.aborted:
                raise ProtocolError("stream aborted by the consumer", step=frame.step)
            ch.frames.append(frame)
            ch.max_buffered = max(ch.max_buffered, len(ch.frames))
            ch.cond.notify_all()

    def _finish(self) -> None:
        with self.channel.cond:
            self.channel.closed = True
            self.channel.cond.notify_all()


class ChannelReader(_Reader):
    def __init__(self, channel: _Channel):
        self.channel = channel

    def next_step(self, timeout: float | None = None) -> StepFrame | None:
        ch = self.channel
        with ch.cond:
            ok = ch.cond.wait_for(lambda: ch.frames or ch.closed, timeout)
            if not ok:
                raise StageTimeout(f"no step frame within {timeout} s")
            if ch.frames:
                frame = ch.frames.popleft()
                ch.cond.notify_all()
                return frame
            return END_OF_STREAM


class FileWriter(_Writer):
    def __init__(self, path: Path):
        super().__init__()
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        if _stale_entries(self.path):
            raise ProtocolError(f"frame directory {self.path} holds frames of an earlier "
                                "stream; reset the endpoint first")

    def _publish(self, frame: StepFrame) -> None:
        final = self.path / FRAME_NAME.format(frame.step)
        tmp = final.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(encode_frame(frame))
        os.replace(tmp, final)

    def _finish(self) -> None:
        tmp = self.path / (END_MARKER + ".tmp")
        tmp.write_text(f"{self._last_step if self._last_step is not None else -1}\n")
        os.replace(tmp, self.path / END_MARKER)


def _stale_entries(path: Path) -> list[Path]:
    return [entry for entry in path.iterdir()
            if FRAME_RE.match(entry.name) or entry.name.startswith(END_MARKER)
            or entry.suffix == ".tmp"]


class FileReader(_Reader):
    def __init__(self, path: Path, poll_interval: float = 0.002):
        self.path = Path(path)
        self.poll_interval = poll_interval
        self._last_step = -1

    def _next_visible(self) -> Path | None:
        expected = self.path / FRAME_NAME.format(self._last_step + 1)
        if expected.exists():
            return expected
        best = None
        try:
            entries = os.listdir(self.path)
        except FileNotFoundError:
            return None
        for name in entries:
            m = FRAME_RE.match(name)
            if m:
                step = int(m.group(1))
                if step > self._last_step and (best is None or step < best):
                    best = step
        return None if best is None else self.path / FRAME_NAME.format(best)

    def next_step(self, timeout: float | None = None) -> StepFrame | None:
        deadline = None if timeout is None else _time.monotonic() + timeout
        while True:
            # the end marker is renamed in after the last frame, so check it first
            ended = (self.path / END_MARKER).exists()
            candidate = self._next_visible()
            if candidate is not None:
                step = int(FRAME_RE.match(candidate.name).group(1))
                frame = decode_frame(candidate.read_bytes(), step_hint=step)
                if frame.step != step:
                    raise IntegrityError(f"frame file {candidate.name} holds step {frame.step}",
                                         step=step)
                self._last_step = step
                return frame
            if ended:
                return END_OF_STREAM
            if deadline is not None and _time.monotonic() >= deadline:
                raise StageTimeout(f"no step frame within {timeout} s")
            _time.sleep(self.poll_interval)


class StageEndpoint:
    """Connection point for one writer and one reader.

    Parameters
    ----------
    mode : {"in-process", "file"}
    capacity : int
        Frames buffered before ``end_step`` blocks (in-process mode).
    path : path-like
        Frame directory (file mode).
    """

    MODES = ("in-process", "file")

    def __init__(self, mode: str = "in-process", capacity: int = 4, path=None):
        if mode not in self.MODES:
            raise ValueError(f"unknown staging mode {mode!r}")
        if capacity < 1:
            raise ValueError("staging capacity must be >= 1")
        if mode == "file" and path is None:
            raise ValueError("file staging needs a path")
        self.mode = mode
        self.capacity = capacity
        self.path = None if path is None else Path(path)
        self._channel = _Channel(capacity) if mode == "in-process" else None

    def reset(self) -> None:
        """Remove frames left in the directory by an earlier stream (file mode)."""
        if self.path is not None and self.path.is_dir():
            for entry in _stale_entries(self.path):
                entry.unlink()

    def abort(self) -> None:
        """Wake and fail a writer blocked on a full channel (consumer gave up)."""
        if self._channel is not None:
            with self._channel.cond:
                self._channel.aborted = True
                self._channel.cond.notify_all()

    @property
    def max_buffered(self) -> int | None:
        return None if self._channel is None else self._channel.max_buffered

    def writer(self) -> _Writer:
        if self.mode == "in-process":
            return ChannelWriter(self._channel)
        return FileWriter(self.path)

    def reader(self) -> _Reader:
        if self.mode == "in-process":
            return ChannelReader(self._channel)
        return FileReader(self.path)
