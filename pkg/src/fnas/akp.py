"""Architecture knowledge pool: block-level checkpoint store with fuzzy lookup.

Keys are the one-hot embeddings of individual blocks.  A query retrieves the
stored block at the same position with the highest cosine similarity; the
match is accepted when the similarity reaches ``tau_sim``.  Every stored
checkpoint must have been trained for exactly ``canonical_iterations``.
"""
from __future__ import annotations

import io
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, FairnessError, NumericError, TransferError
from .search_space import ArchitectureTokens, BlockTokens, SpaceSchema, split_blocks

POOL_MAGIC = b"FNASAKP1"


@dataclass
class BlockCheckpoint:
    key: np.ndarray
    weights: dict
    train_iterations: int
    source_task: str = ""
    block_position: int = 0
    insertion: int = -1

    @property
    def source_id(self) -> str:
        return f"{self.source_task}#{self.insertion}"


@dataclass
class BlockInit:
    matched: bool
    similarity: float
    source: str | None


@dataclass
class InitReport:
    blocks: list
    hit_ratio: float

    @property
    def matched(self) -> int:
        return sum(b.matched for b in self.blocks)


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class KnowledgePool:
    """In-memory pool grouped by block position.

    Reads (``query``/``initialize_architecture``) may run concurrently;
    ``insert`` takes a lock and swaps in complete entries only.
    """

    def __init__(self, canonical_iterations: int, tau_sim: float = 0.6, schema_hash: str = ""):
        if not 0 < tau_sim <= 1:
            raise ValueError("tau_sim must be in (0, 1]")
        self.canonical_iterations = int(canonical_iterations)
        self.tau_sim = float(tau_sim)
        self.schema_hash = schema_hash
        self.entries: dict[int, list[BlockCheckpoint]] = {}
        self._counter = 0
        self._lock = threading.Lock()

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def all_entries(self):
        for pos in sorted(self.entries):
            yield from self.entries[pos]

    def insert(self, block: BlockTokens, weights: dict, train_iterations: int, source_task: str = "") -> "KnowledgePool":
        return insert(self, block, weights, train_iterations, source_task)

    def query(self, block: BlockTokens):
        return query(self, block)


def insert(pool: KnowledgePool, block: BlockTokens, weights: dict, train_iterations: int,
           source_task: str = "") -> KnowledgePool:
    if int(train_iterations) != pool.canonical_iterations:
        raise FairnessError(f"checkpoint trained for {train_iterations} iterations; pool requires "
                            f"{pool.canonical_iterations}")
    for name, arr in weights.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite weights in {name!r}")
    key = block.embedding()
    with pool._lock:
        entry = BlockCheckpoint(key, {k: np.array(v, dtype=np.float64) for k, v in weights.items()},
                                int(train_iterations), source_task, block.block_index, pool._counter)
        pool._counter += 1
        bucket = [e for e in pool.entries.get(block.block_index, []) if not np.array_equal(e.key, key)]
        bucket.append(entry)
        pool.entries = {**pool.entries, block.block_index: bucket}
    return pool


def insert_checkpoint(pool: KnowledgePool, ckpt: BlockCheckpoint, schema: SpaceSchema):
    """Insert a checkpoint produced by a trainer (its key gives the block tokens)."""
    block = schema.blocks[ckpt.block_position]
    toks, off = [], 0
    for g in block.groups:
        toks.append(int(np.argmax(ckpt.key[off:off + g.vocab])))
        off += g.vocab
    bt = BlockTokens(ckpt.block_position, tuple(toks), schema)
    return insert(pool, bt, ckpt.weights, ckpt.train_iterations, ckpt.source_task)


def tie_break(candidates: list) -> BlockCheckpoint:
    """Among equally similar entries the most recently inserted wins."""
    return max(candidates, key=lambda e: e.insertion)


def query(pool: KnowledgePool, block: BlockTokens):
    """Best same-position entry and its cosine similarity.

    Returns ``(entry, similarity)``; ``entry`` is None when the pool has no
    candidate or the best similarity is below ``tau_sim``.
    """
    bucket = pool.entries.get(block.block_index, [])
    if not bucket:
        return None, 0.0
    key = block.embedding()
    keys = np.stack([e.key for e in bucket])
    norms = np.linalg.norm(keys, axis=1) * np.linalg.norm(key)
    sims = np.where(norms > 0, keys @ key / np.where(norms > 0, norms, 1.0), 0.0)
    best = sims.max()
    cands = [e for e, s in zip(bucket, sims) if s == best]
    winner = tie_break(cands)
    if best >= pool.tau_sim:
        return winner, float(best)
    return None, float(best)


def initialize_architecture(pool: KnowledgePool, arch: ArchitectureTokens):
    """Per-block transplant payloads for matched blocks plus an :class:`InitReport`.

    Unmatched blocks are absent from the returned mapping; the trainer
    initializes those freshly from its own seeded generator.
    """
    init, rows = {}, []
    blocks = split_blocks(arch)
    for blk in blocks:
        entry, sim = query(pool, blk)
        if entry is not None:
            init[blk.block_index] = entry.weights
            rows.append(BlockInit(True, sim, entry.source_id))
        else:
            rows.append(BlockInit(False, sim, None))
    hit = sum(r.matched for r in rows) / len(rows)
    return init, InitReport(rows, hit)


def fairness_violations(pool: KnowledgePool) -> int:
    return sum(e.train_iterations != pool.canonical_iterations for e in pool.all_entries())


# ---------------------------------------------------------------------------
# Persistence
#
# header : magic(8) canonical_iterations(u64) tau_sim(f64) schema_hash(16 ascii)
# record : u32 byte length, then
#          u16 position | u32 n_key + f64 key | u16 n_arrays
#          { u16 name_len name | u8 ndim | u32 dims... | f64 data }*
#          u16 source_len source | u64 insertion


def _encode_record(e: BlockCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<HI", e.block_position, len(e.key)))
    buf.write(np.asarray(e.key, dtype="<f8").tobytes())
    buf.write(struct.pack("<H", len(e.weights)))
    for name, arr in sorted(e.weights.items()):
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    src = e.source_task.encode()
    buf.write(struct.pack("<H", len(src)) + src + struct.pack("<Q", e.insertion))
    body = buf.getvalue()
    return struct.pack("<I", len(body)) + body


def _decode_record(body: bytes, iterations: int) -> BlockCheckpoint:
    pos, nkey = struct.unpack_from("<HI", body, 0)
    off = 6
    key = np.frombuffer(body, dtype="<f8", count=nkey, offset=off).astype(np.float64)
    off += 8 * nkey
    (narr,) = struct.unpack_from("<H", body, off)
    off += 2
    weights = {}
    for _ in range(narr):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        weights[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
    (ls,) = struct.unpack_from("<H", body, off)
    off += 2
    src = body[off:off + ls].decode()
    off += ls
    (ins,) = struct.unpack_from("<Q", body, off)
    return BlockCheckpoint(key, weights, iterations, src, pos, ins)


def pool_to_bytes(pool: KnowledgePool) -> bytes:
    head = POOL_MAGIC + struct.pack("<Qd", pool.canonical_iterations, pool.tau_sim)
    head += pool.schema_hash.encode().ljust(16, b"\0")[:16]
    entries = sorted(pool.all_entries(), key=lambda e: e.insertion)
    return head + b"".join(_encode_record(e) for e in entries)


def save_pool(pool: KnowledgePool, path):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(pool_to_bytes(pool))
    os.replace(tmp, path)


def append_records(path, entries):
    """Append already-fair entries to an existing pool file."""
    with open(path, "ab") as fh:
        for e in entries:
            fh.write(_encode_record(e))


def pool_from_bytes(data: bytes, schema_hash: str | None = None) -> KnowledgePool:
    if data[:8] != POOL_MAGIC:
        raise CheckpointError("bad magic: not an FNASAKP1 pool")
    try:
        iters, tau = struct.unpack_from("<Qd", data, 8)
        stored_hash = data[24:40].rstrip(b"\0").decode()
        if schema_hash is not None and stored_hash != schema_hash:
            raise TransferError(f"pool schema hash {stored_hash} does not match {schema_hash}")
        pool = KnowledgePool(iters, tau, stored_hash)
        pos = 40
        records = []
        while pos < len(data):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + ln > len(data):
                raise CheckpointError("truncated pool record")
            records.append(_decode_record(data[pos:pos + ln], iters))
            pos += ln
    except struct.error as exc:
        raise CheckpointError(f"truncated pool file: {exc}") from exc
    for rec in sorted(records, key=lambda e: e.insertion):
        bucket = [e for e in pool.entries.get(rec.block_position, []) if not np.array_equal(e.key, rec.key)]
        bucket.append(rec)
        pool.entries[rec.block_position] = bucket
        pool._counter = max(pool._counter, rec.insertion + 1)
    return pool


def load_pool(path, schema_hash: str | None = None) -> KnowledgePool:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    return pool_from_bytes(data, schema_hash)
