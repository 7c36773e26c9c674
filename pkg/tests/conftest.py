from __future__ import annotations

import math

import numpy as np
import pytest

from sepstream.source import FLOAT_PROPERTIES, PROPERTIES, SourceConfig, SyntheticSource
from sepstream.staging import StageEndpoint, StepFrame

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_frame(step, ids, species="electron", time=None, **props) -> StepFrame:
    """Frame with the given ids; unspecified float properties are filled in."""
    ids = np.asarray(ids, dtype=np.uint64)
    n = len(ids)
    cols = {"id": ids}
    for name in FLOAT_PROPERTIES:
        if name in props:
            cols[name] = np.asarray(props[name], dtype=np.float64)
        elif name in ("w0", "w1", "w2"):
            cols[name] = np.ones(n)
        else:
            cols[name] = np.arange(n, dtype=np.float64) + 0.5
    return StepFrame(step, float(step if time is None else time), species, cols)


def batch_frames(config: SourceConfig) -> list[StepFrame]:
    return [StepFrame(b.step, b.time, b.species, dict(b.columns))
            for b in SyntheticSource(config).batches()]


def feed(frames, endpoint: StageEndpoint | None = None):
    """Publish frames through an endpoint sized to hold all of them; return a reader."""
    endpoint = endpoint or StageEndpoint("in-process", capacity=max(1, len(frames)))
    writer = endpoint.writer()
    for f in frames:
        h = writer.begin_step(f.step, f.time, f.species)
        for name, arr in f.columns.items():
            h.put(name, arr)
        writer.end_step(h)
    writer.close()
    return endpoint.reader()


def batch_oracle(frames, threshold, properties=None):
    """Hold every frame, then select, sort and transpose in one pass.

    Deliberately written with Python dicts and loops rather than the
    pipeline's searchsorted/argsort machinery.
    """
    f0 = frames[0]
    c0 = f0.columns
    seeds = sorted(int(i) for i, flag, w in zip(c0["id"], c0["sep_flag"], c0["w0"])
                   if flag <= threshold and w != -1.0)
    props = properties or [n for n in f0.columns if n != "id"]
    P, S = len(seeds), len(frames)
    out = {name: np.full((P, S), math.nan) for name in props}
    presence = np.zeros((P, S), dtype=bool)
    alive = [True] * P
    for s, frame in enumerate(frames):
        where = {int(i): k for k, i in enumerate(frame.columns["id"])}
        for r, pid in enumerate(seeds):
            k = where.get(pid)
            if k is None or not alive[r]:
                alive[r] = False
                continue
            presence[r, s] = True
            for name in props:
                out[name][r, s] = frame.columns[name][k]
    return np.array(seeds, dtype=np.uint64), presence, out, [f.time for f in frames]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
