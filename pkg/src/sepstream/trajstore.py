"""On-disk trajectory dataset (``.strj``) and its JSON manifest.

Layout, little-endian::

    magic "STRJ" | version u16 | species u8 | particles P u64 | steps S u64
    | dt f64 | property_count u16
    | per property: name_len u16, name (utf-8), type_code u8, byte_length u64
    | ids          P x u64, strictly increasing
    | times        S x f64
    | presence     ceil(P*S / 8) bytes, row-major bits, MSB first
    | per property P x S f64, particle-major

The manifest ``<stem>.manifest.json`` duplicates the header and records the
file digest and the digest of the run configuration.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError, MergeError
from .staging import DIR_ENTRY, DIR_NAME_LEN, SPECIES_CODES, SPECIES_NAMES

MAGIC = b"STRJ"
VERSION = 1
HEADER = struct.Struct("<4sHBQQdH")
FLOAT_CODE = 2


@dataclass
class TrajectoryDataset:
    species: str
    dt: float
    ids: np.ndarray
    times: np.ndarray
    presence: np.ndarray
    properties: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return len(self.ids)

    @property
    def n_steps(self) -> int:
        return len(self.times)

    def row(self, particle_id: int) -> int:
        i = int(np.searchsorted(self.ids, np.uint64(particle_id)))
        if i >= len(self.ids) or self.ids[i] != particle_id:
            raise KeyError(particle_id)
        return i

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return datasets_identical(self, other)


def _bits(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a).tobytes()


def datasets_identical(a: TrajectoryDataset, b: TrajectoryDataset) -> bool:
    """Field-for-field equality, bit-exact on floats (NaN payloads included)."""
    if (a.species, list(a.properties)) != (b.species, list(b.properties)):
        return False
    if struct.pack("<d", a.dt) != struct.pack("<d", b.dt):
        return False
    if a.ids.shape != b.ids.shape or a.times.shape != b.times.shape:
        return False
    if _bits(a.ids.astype("<u8")) != _bits(b.ids.astype("<u8")):
        return False
    if _bits(a.times.astype("<f8")) != _bits(b.times.astype("<f8")):
        return False
    if a.presence.shape != b.presence.shape or not np.array_equal(a.presence, b.presence):
        return False
    for name, arr in a.properties.items():
        other = b.properties[name]
        if arr.shape != other.shape or _bits(arr.astype("<f8")) != _bits(other.astype("<f8")):
            return False
    return True


def header_size(names) -> int:
    return HEADER.size + sum(DIR_NAME_LEN.size + len(n.encode()) + DIR_ENTRY.size for n in names)


def body_size(n_particles: int, n_steps: int, n_properties: int) -> int:
    cells = n_particles * n_steps
    return 8 * n_particles + 8 * n_steps + (cells + 7) // 8 + 8 * cells * n_properties


def merge_blocks(blocks, species: str, dt: float) -> TrajectoryDataset:
    """Concatenate worker blocks (in worker order) into one dataset."""
    blocks = list(blocks)
    if not blocks:
        raise MergeError("no trajectory blocks to merge")
    steps = {b.steps_filled for b in blocks}
    if len(steps) != 1:
        raise MergeError(f"blocks disagree on steps_filled: {sorted(steps)}")
    props = {tuple(b.properties) for b in blocks}
    if len(props) != 1:
        raise MergeError("blocks carry different property sets")
    times = blocks[0].times
    for b in blocks[1:]:
        if _bits(b.times) != _bits(times):
            raise MergeError(f"block {b.worker} has different step times")
    ids = np.concatenate([b.ids for b in blocks]).astype(np.uint64)
    if len(ids) > 1 and np.any(ids[1:] <= ids[:-1]):
        raise MergeError("block ids are not in strictly increasing order across workers")
    names = blocks[0].properties
    return TrajectoryDataset(
        species=species,
        dt=float(dt),
        ids=ids,
        times=times,
        presence=np.concatenate([b.presence for b in blocks], axis=0),
        properties={name: np.concatenate([b.array(name) for b in blocks], axis=0)
                    for name in names},
    )


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def encode(ds: TrajectoryDataset) -> bytes:
    P, S = ds.n_particles, ds.n_steps
    if len(ds.ids) > 1 and np.any(ds.ids[1:] <= ds.ids[:-1]):
        raise IntegrityError("trajectory ids must be strictly increasing")
    if ds.presence.shape != (P, S):
        raise IntegrityError(f"presence shape {ds.presence.shape} != {(P, S)}")
    parts = [HEADER.pack(MAGIC, VERSION, SPECIES_CODES[ds.species], P, S, ds.dt,
                         len(ds.properties))]
    for name, arr in ds.properties.items():
        if arr.shape != (P, S):
            raise IntegrityError(f"property {name!r} shape {arr.shape} != {(P, S)}")
        raw = name.encode()
        parts += [DIR_NAME_LEN.pack(len(raw)), raw, DIR_ENTRY.pack(FLOAT_CODE, 8 * P * S)]
    parts.append(np.ascontiguousarray(ds.ids, dtype="<u8").tobytes())
    parts.append(np.ascontiguousarray(ds.times, dtype="<f8").tobytes())
    parts.append(np.packbits(np.ascontiguousarray(ds.presence, dtype=bool).ravel()).tobytes())
    for arr in ds.properties.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def write_dataset(ds: TrajectoryDataset, path, config_digest: str | None = None) -> Path:
    """Write ``ds`` atomically to ``path`` plus its manifest; return the path."""
    path = Path(path)
    blob = encode(ds)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write trajectory file {path}: {exc}") from exc
    names = list(ds.properties)
    manifest = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "species": ds.species,
        "particles": ds.n_particles,
        "steps": ds.n_steps,
        "dt": ds.dt,
        "properties": names,
        "header_bytes": header_size(names),
        "body_bytes": body_size(ds.n_particles, ds.n_steps, len(names)),
        "file_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "config_digest": config_digest,
    }
    mpath = manifest_path(path)
    mtmp = mpath.with_name(mpath.name + ".tmp")
    mtmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(mtmp, mpath)
    return path


def write(blocks, path, species: str, dt: float, config_digest: str | None = None) -> Path:
    """Merge worker blocks and write them as one trajectory file."""
    return write_dataset(merge_blocks(blocks, species, dt), path, config_digest)


def decode(buf: bytes, source: str = "<buffer>") -> TrajectoryDataset:
    if len(buf) < HEADER.size:
        if buf[:4] != MAGIC[:len(buf[:4])]:
            raise FormatError(f"{source}: not a trajectory file")
        raise IntegrityError(f"{source}: truncated header")
    magic, version, species_code, P, S, dt, n_props = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if species_code not in SPECIES_NAMES:
        raise FormatError(f"{source}: unknown species code {species_code}")
    offset = HEADER.size
    names = []
    try:
        for _ in range(n_props):
            (name_len,) = DIR_NAME_LEN.unpack_from(buf, offset)
            offset += DIR_NAME_LEN.size
            raw = bytes(buf[offset:offset + name_len])
            if len(raw) != name_len:
                raise IntegrityError(f"{source}: truncated property directory")
            offset += name_len
            code, nbytes = DIR_ENTRY.unpack_from(buf, offset)
            offset += DIR_ENTRY.size
            if code != FLOAT_CODE or nbytes != 8 * P * S:
                raise FormatError(f"{source}: bad directory entry for {raw.decode()!r}")
            names.append(raw.decode())
    except struct.error as exc:
        raise IntegrityError(f"{source}: truncated property directory") from exc
    expected = offset + body_size(P, S, n_props)
    if len(buf) != expected:
        raise IntegrityError(f"{source}: size {len(buf)} bytes, header implies {expected}")

    ids = np.frombuffer(buf, "<u8", P, offset)
    offset += 8 * P
    times = np.frombuffer(buf, "<f8", S, offset)
    offset += 8 * S
    nbits = (P * S + 7) // 8
    packed = np.frombuffer(buf, np.uint8, nbits, offset)
    presence = np.unpackbits(packed, count=P * S).astype(bool).reshape(P, S)
    offset += nbits
    props = {}
    for name in names:
        props[name] = np.frombuffer(buf, "<f8", P * S, offset).reshape(P, S)
        offset += 8 * P * S
    if P > 1 and np.any(ids[1:] <= ids[:-1]):
        raise IntegrityError(f"{source}: id array is not strictly increasing")
    return TrajectoryDataset(SPECIES_NAMES[species_code], dt, ids, times, presence, props)


def read(path) -> TrajectoryDataset:
    """Load and validate a trajectory file."""
    path = Path(path)
    return decode(path.read_bytes(), str(path))
