"""On-disk activation cache: chunk files, label file, manifest, and re-batching reader.

Chunk layout: a 32-byte little-endian header

    magic "NFAC" | version u16 | dtype code u8 | rank u8 | six u32 dims

followed by the raw sample-major float32 payload. Labels live in one file of
int32 little-endian values; the manifest is JSON with a CRC-32 per chunk.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheCorruptionError, InputError, UsageError

CHUNK_MAGIC = b"NFAC"
FORMAT_VERSION = 1
DTYPE_F32_LE = 1
HEADER = struct.Struct("<4sHBB6I")
MAX_RANK = 6
MANIFEST_SCHEMA = "adaptll.cache/1"

assert HEADER.size == 32


def pack_header(magic: bytes, dtype_code: int, dims) -> bytes:
    dims = [int(d) for d in dims]
    if len(dims) > MAX_RANK:
        raise UsageError(f"rank {len(dims)} exceeds {MAX_RANK}")
    return HEADER.pack(magic, FORMAT_VERSION, dtype_code, len(dims), *(dims + [0] * (MAX_RANK - len(dims))))


def unpack_header(blob: bytes, magic: bytes, where: str) -> tuple[int, tuple[int, ...]]:
    if len(blob) < HEADER.size:
        raise CacheCorruptionError(f"{where}: file shorter than its {HEADER.size}-byte header")
    got_magic, version, dtype_code, rank, *dims = HEADER.unpack_from(blob)
    if got_magic != magic:
        raise CacheCorruptionError(f"{where}: bad magic {got_magic!r}")
    if version != FORMAT_VERSION:
        raise CacheCorruptionError(f"{where}: unsupported format version {version}")
    if rank > MAX_RANK:
        raise CacheCorruptionError(f"{where}: rank {rank} out of range")
    return dtype_code, tuple(dims[:rank])


def encode_chunk(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f4")
    return pack_header(CHUNK_MAGIC, DTYPE_F32_LE, x.shape) + x.tobytes()


def decode_chunk(blob: bytes, where: str = "chunk") -> np.ndarray:
    dtype_code, dims = unpack_header(blob, CHUNK_MAGIC, where)
    if dtype_code != DTYPE_F32_LE:
        raise CacheCorruptionError(f"{where}: unknown dtype code {dtype_code}")
    count = int(np.prod(dims))
    if len(blob) != HEADER.size + 4 * count:
        raise CacheCorruptionError(f"{where}: payload size does not match header dims {dims}")
    return np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(dims).astype(np.float32)


@dataclass
class ChunkEntry:
    path: str  # relative to the manifest directory
    start: int
    stop: int
    crc32: int


@dataclass
class ActivationCacheManifest:
    block_index: int
    sample_count: int
    activation_shape: tuple[int, int, int]
    chunks: list[ChunkEntry]
    label_file: str
    label_crc32: int
    order_file: str  # original dataset index of every stored sample
    directory: str = field(default=".", compare=False)

    def path_of(self, relative: str) -> str:
        return os.path.join(self.directory, relative)

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "block_index": self.block_index,
            "sample_count": self.sample_count,
            "activation_shape": list(self.activation_shape),
            "dtype": "float32-le",
            "chunks": [{"path": c.path, "start": c.start, "stop": c.stop, "crc32": c.crc32} for c in self.chunks],
            "label_file": self.label_file,
            "label_crc32": self.label_crc32,
            "order_file": self.order_file,
        }

    @classmethod
    def from_dict(cls, d: dict, directory: str = ".") -> "ActivationCacheManifest":
        if d.get("schema") != MANIFEST_SCHEMA:
            raise InputError(f"expected cache manifest schema {MANIFEST_SCHEMA!r}")
        chunks = [ChunkEntry(c["path"], int(c["start"]), int(c["stop"]), int(c["crc32"])) for c in d["chunks"]]
        return cls(
            int(d["block_index"]),
            int(d["sample_count"]),
            tuple(d["activation_shape"]),
            chunks,
            d["label_file"],
            int(d["label_crc32"]),
            d["order_file"],
            directory,
        )

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.directory, "manifest.json")

    def total_bytes(self) -> int:
        files = [c.path for c in self.chunks] + [self.label_file, self.order_file]
        return sum(os.path.getsize(self.path_of(f)) for f in files)

    def check_ranges(self) -> None:
        expected = 0
        for c in self.chunks:
            if c.start != expected or c.stop <= c.start:
                raise CacheCorruptionError(f"chunk {c.path} covers [{c.start}, {c.stop}), expected start {expected}")
            expected = c.stop
        if expected != self.sample_count:
            raise CacheCorruptionError(f"chunks cover {expected} samples, manifest says {self.sample_count}")

    def labels(self) -> np.ndarray:
        return _read_int_file(self.path_of(self.label_file), self.label_crc32, "<i4")

    def order(self) -> np.ndarray:
        return np.fromfile(self.path_of(self.order_file), dtype="<i8").astype(np.int64)


def _read_int_file(path: str, crc: int, dtype: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if zlib.crc32(blob) != crc:
        raise CacheCorruptionError(f"label file {path} failed its CRC-32 check")
    return np.frombuffer(blob, dtype=dtype).astype(np.int64)


class CacheWriter:
    """Appends activation chunks to a directory and finishes with a manifest."""

    def __init__(self, directory, block_index: int):
        self.directory = os.fspath(directory)
        os.makedirs(self.directory, exist_ok=True)
        self.block_index = block_index
        self.chunks: list[ChunkEntry] = []
        self.labels: list[np.ndarray] = []
        self.order: list[np.ndarray] = []
        self.shape: tuple[int, ...] | None = None
        self.count = 0

    def append(self, activations: np.ndarray, labels, original_indices) -> None:
        if self.shape is None:
            self.shape = tuple(activations.shape[1:])
        elif tuple(activations.shape[1:]) != self.shape:
            raise UsageError(f"chunk sample shape {activations.shape[1:]} differs from {self.shape}")
        name = f"chunk_{len(self.chunks):05d}.nfac"
        blob = encode_chunk(activations)
        with open(os.path.join(self.directory, name), "wb") as fh:
            fh.write(blob)
        n = len(activations)
        self.chunks.append(ChunkEntry(name, self.count, self.count + n, zlib.crc32(blob)))
        self.labels.append(np.asarray(labels))
        self.order.append(np.asarray(original_indices))
        self.count += n

    def finish(self) -> ActivationCacheManifest:
        if not self.chunks:
            raise UsageError("cannot finish an empty activation cache")
        label_blob = np.concatenate(self.labels).astype("<i4").tobytes()
        with open(os.path.join(self.directory, "labels.i32"), "wb") as fh:
            fh.write(label_blob)
        np.concatenate(self.order).astype("<i8").tofile(os.path.join(self.directory, "order.i64"))
        manifest = ActivationCacheManifest(
            self.block_index,
            self.count,
            self.shape,
            self.chunks,
            "labels.i32",
            zlib.crc32(label_blob),
            "order.i64",
            self.directory,
        )
        with open(manifest.manifest_path, "w") as fh:
            json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


def load_manifest(path) -> ActivationCacheManifest:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path) as fh:
            manifest = ActivationCacheManifest.from_dict(json.load(fh), os.path.dirname(path))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot read cache manifest {path}: {exc}") from exc
    manifest.check_ranges()
    return manifest


def read_chunk(manifest: ActivationCacheManifest, entry: ChunkEntry) -> np.ndarray:
    path = manifest.path_of(entry.path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if zlib.crc32(blob) != entry.crc32:
        raise CacheCorruptionError(f"chunk {entry.path} failed its CRC-32 check")
    x = decode_chunk(blob, entry.path)
    if x.shape != (entry.stop - entry.start, *manifest.activation_shape):
        raise CacheCorruptionError(f"chunk {entry.path} has shape {x.shape}, manifest disagrees")
    return x


def _prefetched(manifest, entries):
    """Yield decoded chunks in order while the next one is read in the background."""
    if not entries:
        return
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(read_chunk, manifest, entries[0])
        for nxt in entries[1:]:
            current = pending.result()
            pending = pool.submit(read_chunk, manifest, nxt)
            yield current
        yield pending.result()


def rebatch(manifest: ActivationCacheManifest, target_batch: int, chunk_order=None):
    """Yield ``(x, y)`` batches of ``target_batch`` samples read sequentially from the cache.

    ``chunk_order`` optionally permutes whole chunks; the default is stored order.
    """
    if target_batch < 1:
        raise UsageError(f"target_batch must be >= 1, got {target_batch}")
    labels = manifest.labels()
    if len(labels) != manifest.sample_count:
        raise CacheCorruptionError(f"label file holds {len(labels)} labels for {manifest.sample_count} samples")
    entries = manifest.chunks if chunk_order is None else [manifest.chunks[i] for i in chunk_order]
    pending_x: list[np.ndarray] = []
    pending_y: list[np.ndarray] = []
    held = 0
    for entry, x in zip(entries, _prefetched(manifest, entries)):
        y = labels[entry.start : entry.stop]
        if not pending_x and len(x) == target_batch:
            yield x, y
            continue
        pending_x.append(x)
        pending_y.append(y)
        held += len(x)
        while held >= target_batch:
            bx = np.concatenate(pending_x)
            by = np.concatenate(pending_y)
            yield bx[:target_batch], by[:target_batch]
            pending_x, pending_y = [bx[target_batch:]], [by[target_batch:]]
            held -= target_batch
            if held == 0:
                pending_x, pending_y = [], []
    if held:
        yield np.concatenate(pending_x), np.concatenate(pending_y)
