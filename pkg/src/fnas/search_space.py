"""Block-factorized token space and its one-hot ("expand") embedding."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError, ValidationError


@dataclass(frozen=True)
class TokenGroup:
    name: str
    vocab: int


@dataclass(frozen=True)
class Block:
    name: str
    groups: tuple

    @property
    def width(self):
        return sum(g.vocab for g in self.groups)


@dataclass(frozen=True)
class SpaceSchema:
    """Ordered blocks, each an ordered tuple of token groups.

    Token position ``t`` walks blocks in order and groups within a block,
    so ``T = sum(len(block.groups))``.
    """

    blocks: tuple

    def __post_init__(self):
        problems = self.diagnostics()
        if problems:
            raise SchemaError("; ".join(problems))
        vocabs, offsets, names, block_of = [], [], [], []
        off = 0
        for b, block in enumerate(self.blocks):
            for g in block.groups:
                vocabs.append(g.vocab)
                offsets.append(off)
                names.append(f"{block.name}.{g.name}")
                block_of.append(b)
                off += g.vocab
        object.__setattr__(self, "vocabs", tuple(vocabs))
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "group_names", tuple(names))
        object.__setattr__(self, "block_of", tuple(block_of))
        object.__setattr__(self, "width", off)

    def diagnostics(self):
        problems = []
        if len(self.blocks) < 1:
            problems.append("blocks: schema needs at least one block")
        gi = 0
        for b, block in enumerate(self.blocks):
            if not block.groups:
                problems.append(f"blocks[{b}].groups: block {block.name!r} has no token groups")
            for g in block.groups:
                gi += 1
                if int(g.vocab) < 1:
                    problems.append(f"group {gi} ({block.name}.{g.name}): vocab must be >= 1, got {g.vocab}")
        return problems

    # -- derived sizes ------------------------------------------------------

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def length(self):
        return len(self.vocabs)

    @property
    def cardinality(self) -> int:
        return int(np.prod([int(v) for v in self.vocabs], dtype=object))

    def block_token_range(self, b) -> range:
        start = sum(len(x.groups) for x in self.blocks[:b])
        return range(start, start + len(self.blocks[b].groups))

    def block_slice(self, b) -> slice:
        r = self.block_token_range(b)
        start = self.offsets[r.start]
        return slice(start, start + self.blocks[b].width)

    def group_index(self, block: int, name: str) -> int | None:
        for t in self.block_token_range(block):
            if self.group_names[t].split(".", 1)[1] == name:
                return t
        return None

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self):
        return {"blocks": [{"name": b.name, "groups": [{"name": g.name, "vocab": g.vocab} for g in b.groups]}
                           for b in self.blocks]}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or set(d) != {"blocks"}:
            raise SchemaError("schema must be an object with exactly one key 'blocks'")
        blocks = []
        for i, b in enumerate(d["blocks"]):
            extra = set(b) - {"name", "groups"}
            if extra:
                raise SchemaError(f"blocks[{i}]: unknown keys {sorted(extra)}")
            groups = []
            for g in b.get("groups", []):
                if set(g) != {"name", "vocab"}:
                    raise SchemaError(f"blocks[{i}].groups: each group needs exactly 'name' and 'vocab'")
                groups.append(TokenGroup(str(g["name"]), int(g["vocab"])))
            blocks.append(Block(str(b.get("name", f"b{i}")), tuple(groups)))
        return cls(tuple(blocks))

    def schema_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def make_schema(num_blocks: int, groups: Sequence[tuple]) -> SpaceSchema:
    """Schema with ``num_blocks`` identical blocks of ``(name, vocab)`` groups."""
    return SpaceSchema(tuple(Block(f"b{i}", tuple(TokenGroup(n, v) for n, v in groups)) for i in range(num_blocks)))


def default_schema() -> SpaceSchema:
    return make_schema(4, [("op", 4), ("kernel", 3), ("width", 4), ("skip", 2)])


def enumerable_schema() -> SpaceSchema:
    # 2 blocks x 64 = 4096 architectures
    return make_schema(2, [("op", 4), ("kernel", 2), ("width", 4), ("skip", 2)])


def mnas_like_schema() -> SpaceSchema:
    return make_schema(7, [("op", 3), ("kernel", 2), ("se", 2), ("skip", 4), ("filters", 3), ("layers", 4)])


def validate_schema(schema) -> dict:
    """Check schema invariants; returns a summary including cardinality."""
    if isinstance(schema, dict):
        schema = SpaceSchema.from_dict(schema)
    return {"ok": True, "num_blocks": schema.num_blocks, "length": schema.length,
            "width": schema.width, "cardinality": schema.cardinality}


@dataclass(frozen=True)
class ArchitectureTokens:
    tokens: tuple
    schema: SpaceSchema = field(compare=False, repr=False)

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(toks) != self.schema.length:
            raise ValidationError(f"expected {self.schema.length} tokens, got {len(toks)}")
        for i, (t, v) in enumerate(zip(toks, self.schema.vocabs)):
            if not 0 <= t < v:
                raise ValidationError(f"token {i} ({self.schema.group_names[i]}) = {t} outside [0, {v})")

    def key(self) -> str:
        return "-".join(str(t) for t in self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def tokens_from_key(key: str, schema: SpaceSchema) -> ArchitectureTokens:
    try:
        return ArchitectureTokens(tuple(int(x) for x in key.split("-")), schema)
    except ValueError as exc:
        raise ValidationError(f"cannot parse token string {key!r}") from exc


@dataclass(frozen=True)
class ExpandEmbedding:
    bits: np.ndarray
    block_slices: tuple

    def block(self, b) -> np.ndarray:
        return self.bits[self.block_slices[b]]


def expand_batch(token_matrix, schema: SpaceSchema) -> np.ndarray:
    """Vectorized one-hot expansion of an ``(N, T)`` token array."""
    toks = np.asarray(token_matrix, dtype=np.int64)
    if toks.ndim == 1:
        toks = toks[None, :]
    if toks.shape[1] != schema.length:
        raise ValidationError(f"expected {schema.length} tokens per row, got {toks.shape[1]}")
    vocabs = np.asarray(schema.vocabs)
    if np.any(toks < 0) or np.any(toks >= vocabs):
        raise ValidationError("token out of range for schema")
    out = np.zeros((toks.shape[0], schema.width))
    cols = toks + np.asarray(schema.offsets)
    np.put_along_axis(out, cols, 1.0, axis=1)
    return out


def expand(tokens: ArchitectureTokens) -> ExpandEmbedding:
    schema = tokens.schema
    bits = expand_batch(tokens.tokens, schema)[0]
    return ExpandEmbedding(bits, tuple(schema.block_slice(b) for b in range(schema.num_blocks)))


def collapse(emb, schema: SpaceSchema) -> ArchitectureTokens:
    bits = emb.bits if isinstance(emb, ExpandEmbedding) else np.asarray(emb)
    toks = []
    for off, v in zip(schema.offsets, schema.vocabs):
        seg = bits[off:off + v]
        if not (np.all((seg == 0) | (seg == 1)) and seg.sum() == 1):
            raise ValidationError("embedding group is not one-hot")
        toks.append(int(np.argmax(seg)))
    return ArchitectureTokens(tuple(toks), schema)


@dataclass(frozen=True)
class BlockTokens:
    block_index: int
    tokens: tuple
    schema: SpaceSchema = field(compare=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.block_index < self.schema.num_blocks:
            raise ValidationError(f"block index {self.block_index} out of range")
        if len(self.tokens) != len(self.schema.blocks[self.block_index].groups):
            raise ValidationError("block token count does not match its groups")

    def embedding(self) -> np.ndarray:
        block = self.schema.blocks[self.block_index]
        out = np.zeros(block.width)
        off = 0
        for t, g in zip(self.tokens, block.groups):
            out[off + t] = 1.0
            off += g.vocab
        return out

    def value(self, group: str, default=0) -> int:
        for t, g in zip(self.tokens, self.schema.blocks[self.block_index].groups):
            if g.name == group:
                return t
        return default


def split_blocks(tokens: ArchitectureTokens) -> list:
    schema = tokens.schema
    return [BlockTokens(b, tuple(tokens.tokens[t] for t in schema.block_token_range(b)), schema)
            for b in range(schema.num_blocks)]


def operator_expectation(archs: Sequence[ArchitectureTokens]) -> np.ndarray:
    """Mean expand embedding of a population (per-operator frequency)."""
    if not archs:
        raise SchemaError("operator_expectation needs a nonempty population")
    schema = archs[0].schema
    for a in archs:
        if a.schema != schema:
            raise SchemaError("populations mix different schemas")
    return expand_batch([a.tokens for a in archs], schema).mean(axis=0)


def enumerate_space(schema: SpaceSchema) -> np.ndarray:
    """All token sequences in lexicographic order, shape ``(cardinality, T)``."""
    return np.array(list(itertools.product(*[range(v) for v in schema.vocabs])), dtype=np.int64)


def random_tokens(schema: SpaceSchema, rng: np.random.Generator, n: int | None = None):
    m = rng.integers(0, np.asarray(schema.vocabs), size=(1 if n is None else n, schema.length))
    if n is None:
        return ArchitectureTokens(tuple(m[0]), schema)
    return [ArchitectureTokens(tuple(r), schema) for r in m]
