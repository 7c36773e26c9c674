import hashlib
import json
import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepstream import trajstore
from sepstream.errors import FormatError, IntegrityError, MergeError
from sepstream.pipeline import PipelineConfig, TrajectoryBlock, append_step, run_pipeline
from sepstream.source import SourceConfig
from sepstream.trajstore import TrajectoryDataset

from conftest import batch_frames, feed


def filled_block(worker, ids, steps=3, props=("E", "psi")):
    block = TrajectoryBlock(worker, np.array(ids, dtype=np.uint64), props)
    for s in range(steps):
        rec = {"id": np.array(ids, dtype=np.uint64)}
        for k, name in enumerate(props):
            rec[name] = np.array(ids, dtype=float) * (s + 1) + k
        append_step(block, rec, s, float(s) * 0.5)
    return block


def random_dataset(rng, P, S, names):
    presence = rng.random((P, S)) < 0.8
    props = {}
    for name in names:
        arr = rng.normal(size=(P, S))
        arr[~presence] = np.nan
        props[name] = arr
    ids = np.cumsum(rng.integers(1, 50, size=P)).astype(np.uint64)
    return TrajectoryDataset("ion", 0.25, ids, np.arange(S) * 0.25, presence, props)


def test_merge_preserves_worker_order():
    ds = trajstore.merge_blocks([filled_block(0, [2, 9]), filled_block(1, [11, 14])],
                                "electron", 0.5)
    assert ds.ids.tolist() == [2, 9, 11, 14]
    assert ds.properties["E"][:, 2].tolist() == [6.0, 27.0, 33.0, 42.0]


def test_merge_errors():
    with pytest.raises(MergeError):
        trajstore.merge_blocks([], "electron", 1.0)
    with pytest.raises(MergeError):
        trajstore.merge_blocks([filled_block(0, [2]), filled_block(1, [5], steps=2)],
                               "electron", 1.0)
    with pytest.raises(MergeError):
        trajstore.merge_blocks([filled_block(0, [9]), filled_block(1, [2])], "electron", 1.0)
    with pytest.raises(MergeError):
        trajstore.merge_blocks([filled_block(0, [2]), filled_block(1, [5], props=("E",))],
                               "electron", 1.0)


def test_size_arithmetic_example(tmp_path):
    # 4 particles, 3 steps, 5 properties
    expected = 8 * 4 + 8 * 3 + 2 + 8 * 12 * 5
    assert expected == 538
    assert trajstore.body_size(4, 3, 5) == expected
    names = ["psi", "E", "vPar", "theta", "w0"]
    ds = random_dataset(np.random.default_rng(0), 4, 3, names)
    path = trajstore.write_dataset(ds, tmp_path / "t.strj")
    size = path.stat().st_size
    assert size == trajstore.HEADER.size + sum(2 + len(n) + 9 for n in names) + expected
    assert size == trajstore.header_size(names) + expected


def test_round_trip_keeps_nan_payloads(tmp_path):
    ds = random_dataset(np.random.default_rng(1), 5, 4, ["E"])
    quiet = struct.unpack("<d", struct.pack("<Q", 0x7FF8000000000123))[0]
    ds.properties["E"][0, 0] = quiet
    ds.properties["E"][1, 1] = -0.0
    back = trajstore.read(trajstore.write_dataset(ds, tmp_path / "n.strj"))
    assert back == ds
    assert back.properties["E"][0, :1].tobytes() == np.array([quiet]).tobytes()
    assert back.properties["E"][1, :2].tobytes() == ds.properties["E"][1, :2].tobytes()


def test_manifest_contents(tmp_path):
    ds = random_dataset(np.random.default_rng(2), 3, 2, ["E", "psi"])
    path = trajstore.write_dataset(ds, tmp_path / "electron.strj", config_digest="abc")
    man = json.loads(trajstore.manifest_path(path).read_text())
    assert trajstore.manifest_path(path).name == "electron.manifest.json"
    assert man["sha256"] == hashlib.sha256(path.read_bytes()).hexdigest()
    assert man["config_digest"] == "abc"
    assert (man["particles"], man["steps"], man["properties"]) == (3, 2, ["E", "psi"])
    assert man["file_bytes"] == path.stat().st_size


def test_no_temporary_left_behind(tmp_path):
    ds = random_dataset(np.random.default_rng(3), 2, 2, ["E"])
    trajstore.write_dataset(ds, tmp_path / "x.strj")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.manifest.json", "x.strj"]


def test_flipped_magic_is_format_error(tmp_path):
    ds = random_dataset(np.random.default_rng(4), 2, 2, ["E"])
    blob = bytearray(trajstore.encode(ds))
    blob[1] ^= 0x20
    with pytest.raises(FormatError):
        trajstore.decode(bytes(blob))


def test_bad_version_is_format_error():
    ds = random_dataset(np.random.default_rng(4), 2, 2, ["E"])
    blob = bytearray(trajstore.encode(ds))
    blob[4] = 9
    with pytest.raises(FormatError):
        trajstore.decode(bytes(blob))


@pytest.mark.parametrize("cut", [1, 8, trajstore.HEADER.size + 1, -1, -9])
def test_truncation_is_integrity_error(cut, tmp_path):
    ds = random_dataset(np.random.default_rng(5), 3, 3, ["E", "psi"])
    path = trajstore.write_dataset(ds, tmp_path / "t.strj")
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(IntegrityError):
        trajstore.read(path)


def test_unsorted_ids_rejected():
    ds = random_dataset(np.random.default_rng(6), 3, 2, ["E"])
    ds.ids = ds.ids[::-1].copy()
    with pytest.raises(IntegrityError):
        trajstore.encode(ds)


def test_row_lookup():
    ds = random_dataset(np.random.default_rng(7), 6, 2, ["E"])
    for i, pid in enumerate(ds.ids.tolist()):
        assert ds.row(pid) == i
    with pytest.raises(KeyError):
        ds.row(int(ds.ids[-1]) + 1)


def test_pipeline_blocks_round_trip(tmp_path):
    frames = batch_frames(SourceConfig(n_particles=60, n_steps=8, sigma_psi=0.01, loss_psi=1.04,
                                       growth_rate=0.1, seed=2))
    result = run_pipeline(feed(frames), PipelineConfig(worker_count=3))
    path = trajstore.write(result.blocks, tmp_path / "e.strj", "electron", 1.0)
    back = trajstore.read(path)
    assert back == trajstore.merge_blocks(result.blocks, "electron", 1.0)
    assert back.n_steps == 9


def test_write_read_timing(tmp_path):
    ds = random_dataset(np.random.default_rng(8), 1000, 100, ["psi", "E", "vPar", "theta", "w0"])
    t0 = time.perf_counter()
    back = trajstore.read(trajstore.write_dataset(ds, tmp_path / "big.strj"))
    assert time.perf_counter() - t0 < 5.0
    assert back == ds


shapes = st.tuples(st.integers(0, 30), st.integers(0, 12), st.integers(0, 4),
                   st.integers(0, 2**32))


@settings(max_examples=60, deadline=None)
@given(shapes)
def test_round_trip_random_shapes(shape):
    P, S, nprops, seed = shape
    names = ["psi", "E", "vPar", "theta"][:nprops]
    ds = random_dataset(np.random.default_rng(seed), P, S, names)
    blob = trajstore.encode(ds)
    assert len(blob) == trajstore.header_size(names) + trajstore.body_size(P, S, nprops)
    assert trajstore.decode(blob) == ds
