import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnas import nn_core as nn
from fnas import search_space as ss
from fnas.errors import SchemaError, ValidationError


def test_cardinality_product_rule():
    schema = ss.make_schema(2, [("a", 4), ("b", 4), ("c", 4)])
    assert ss.validate_schema(schema)["cardinality"] == 4 ** 6


def test_zero_vocab_is_named():
    with pytest.raises(SchemaError, match="group 2"):
        ss.make_schema(1, [("op", 3), ("kernel", 0)])


def test_zero_blocks_rejected():
    with pytest.raises(SchemaError, match="blocks"):
        ss.SpaceSchema(())


def test_mnas_like_schema_accepted():
    info = ss.validate_schema(ss.mnas_like_schema())
    assert info["num_blocks"] == 7
    assert info["length"] == 42
    assert info["cardinality"] == (3 * 2 * 2 * 4 * 3 * 4) ** 7


def test_schema_json_round_trip(schema):
    back = ss.SpaceSchema.from_dict(schema.to_dict())
    assert back == schema and back.schema_hash() == schema.schema_hash()


def test_schema_from_dict_rejects_unknown_keys():
    with pytest.raises(SchemaError):
        ss.SpaceSchema.from_dict({"blocks": [{"name": "b", "groups": [], "extra": 1}]})


def test_default_and_enumerable_sizes(schema, small_schema):
    assert schema.length == 16 and schema.cardinality == 96 ** 4
    assert small_schema.cardinality == 4096


def test_expand_single_group():
    schema = ss.make_schema(1, [("op", 4)])
    assert ss.expand(ss.ArchitectureTokens((2,), schema)).bits.tolist() == [0, 0, 1, 0]


def test_expand_all_zero_tokens(schema):
    bits = ss.expand(ss.ArchitectureTokens((0,) * schema.length, schema)).bits
    assert np.flatnonzero(bits).tolist() == list(schema.offsets)


def test_expand_rejects_out_of_range(schema):
    with pytest.raises(ValidationError):
        ss.ArchitectureTokens((4,) + (0,) * (schema.length - 1), schema)
    with pytest.raises(ValidationError):
        ss.expand_batch([[9] * schema.length], schema)


def test_expand_collapse_round_trip(schema, rng):
    for arch in ss.random_tokens(schema, rng, 1000):
        assert ss.collapse(ss.expand(arch), schema) == arch


def test_collapse_rejects_non_one_hot(schema):
    bits = np.zeros(schema.width)
    with pytest.raises(ValidationError):
        ss.collapse(bits, schema)


def test_expand_batch_matches_single(schema, rng):
    archs = ss.random_tokens(schema, rng, 20)
    batch = ss.expand_batch([a.tokens for a in archs], schema)
    assert np.array_equal(batch, np.stack([ss.expand(a).bits for a in archs]))


def test_split_blocks_lengths():
    schema = ss.make_schema(2, [("a", 2), ("b", 3), ("c", 4)])
    blocks = ss.split_blocks(ss.ArchitectureTokens((1, 2, 3, 0, 1, 2), schema))
    assert [b.tokens for b in blocks] == [(1, 2, 3), (0, 1, 2)]


def test_block_embedding_is_slice_of_full(schema, rng):
    arch = ss.random_tokens(schema, rng)
    emb = ss.expand(arch)
    for b, blk in enumerate(ss.split_blocks(arch)):
        assert np.array_equal(blk.embedding(), emb.block(b))
    assert sum((blk.tokens for blk in ss.split_blocks(arch)), ()) == arch.tokens


def test_shared_block_has_equal_embedding(schema):
    a = ss.ArchitectureTokens((0, 1, 2, 1) + (3, 2, 1, 0) + (1, 1, 1, 1) + (2, 0, 3, 1), schema)
    b = ss.ArchitectureTokens((3, 0, 0, 0) + (3, 2, 1, 0) + (0, 0, 0, 0) + (0, 0, 0, 0), schema)
    assert np.array_equal(ss.split_blocks(a)[1].embedding(), ss.split_blocks(b)[1].embedding())
    assert not np.array_equal(ss.split_blocks(a)[0].embedding(), ss.split_blocks(b)[0].embedding())


def test_block_tokens_validation(schema):
    with pytest.raises(ValidationError):
        ss.BlockTokens(4, (0, 0, 0, 0), schema)
    with pytest.raises(ValidationError):
        ss.BlockTokens(0, (0, 0), schema)


def test_operator_expectation_counts_indicators():
    schema = ss.make_schema(1, [("op", 2)])
    archs = [ss.ArchitectureTokens((1,), schema)] * 60 + [ss.ArchitectureTokens((0,), schema)] * 40
    assert np.allclose(ss.operator_expectation(archs), [0.4, 0.6])


def test_operator_expectation_single_arch(schema, rng):
    arch = ss.random_tokens(schema, rng)
    assert np.array_equal(ss.operator_expectation([arch]), ss.expand(arch).bits)


def test_operator_expectation_uniform_concentration(schema):
    # 52 entries at a per-entry 3 sigma bound: a fixed stream keeps the check deterministic
    n = 10_000
    e = ss.operator_expectation(ss.random_tokens(schema, nn.make_rng(0, "uniform"), n))
    for off, v in zip(schema.offsets, schema.vocabs):
        p = 1 / v
        sigma = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(e[off:off + v] - p) < 3 * sigma + 1e-12)


def test_operator_expectation_mixed_schema(schema, small_schema, rng):
    with pytest.raises(SchemaError):
        ss.operator_expectation([ss.random_tokens(schema, rng), ss.random_tokens(small_schema, rng)])


def test_enumerate_space_is_complete(small_schema):
    allt = ss.enumerate_space(small_schema)
    assert allt.shape == (4096, small_schema.length)
    assert len({tuple(r) for r in allt}) == 4096


def test_token_key_round_trip(schema, rng):
    arch = ss.random_tokens(schema, rng)
    assert ss.tokens_from_key(arch.key(), schema) == arch
    with pytest.raises(ValidationError):
        ss.tokens_from_key("1-x-2", schema)


token_lists = st.lists(st.integers(0, 63), min_size=2, max_size=2)


@settings(max_examples=60, deadline=None)
@given(token_lists, token_lists)
def test_expand_is_injective(a, b):
    schema = ss.make_schema(2, [("x", 4), ("y", 4), ("z", 4)])
    ta = ss.ArchitectureTokens((a[0] % 4, a[0] // 4 % 4, a[0] // 16, a[1] % 4, a[1] // 4 % 4, a[1] // 16), schema)
    tb = ss.ArchitectureTokens((b[0] % 4, b[0] // 4 % 4, b[0] // 16, b[1] % 4, b[1] // 4 % 4, b[1] // 16), schema)
    same = np.array_equal(ss.expand(ta).bits, ss.expand(tb).bits)
    assert same == (ta.tokens == tb.tokens)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_groups_are_one_hot(seed):
    schema = ss.default_schema()
    bits = ss.expand(ss.random_tokens(schema, nn.make_rng(seed))).bits
    assert set(np.unique(bits)) <= {0.0, 1.0}
    for off, v in zip(schema.offsets, schema.vocabs):
        assert bits[off:off + v].sum() == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 29))
def test_expectation_of_partition_is_weighted_mean(seed, cut):
    schema = ss.default_schema()
    archs = ss.random_tokens(schema, nn.make_rng(seed), 30)
    whole = ss.operator_expectation(archs)
    parts = (cut * ss.operator_expectation(archs[:cut]) + (30 - cut) * ss.operator_expectation(archs[cut:])) / 30
    assert np.allclose(whole, parts)
