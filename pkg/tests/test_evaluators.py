import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnas import evaluators as ev
from fnas import nn_core as nn
from fnas import search_space as ss
from fnas.errors import DomainError, LookupFailure, TrainingError, ValidationError


# -- reward -----------------------------------------------------------------

def test_reward_at_target_latency():
    assert ev.reward(0.75, 30.0, ev.RewardConfig()) == 0.75


def test_reward_doubling_latency():
    assert ev.reward(0.76, 160.0, ev.RewardConfig(80.0, -0.07)) == pytest.approx(0.72401, abs=1e-5)


def test_reward_zero_alpha_ignores_latency():
    cfg = ev.RewardConfig(30.0, 0.0)
    assert ev.reward(0.6, 5.0, cfg) == ev.reward(0.6, 500.0, cfg) == 0.6


def test_reward_rejects_non_positive_latency():
    with pytest.raises(DomainError):
        ev.reward(0.5, 0.0, ev.RewardConfig())
    with pytest.raises(DomainError):
        ev.RewardConfig(target_latency=0.0)
    with pytest.raises(DomainError):
        ev.RewardConfig(alpha=0.1)


@settings(max_examples=80, deadline=None)
@given(st.floats(0, 1), st.floats(0.1, 100), st.floats(1, 100), st.floats(-1, 0), st.floats(0.1, 10))
def test_reward_scale_invariance(acc, x, target, alpha, scale):
    cfg = ev.RewardConfig(target, alpha)
    assert math.isclose(ev.reward(acc, target * x, cfg), acc * x ** alpha, rel_tol=1e-12, abs_tol=1e-300)
    scaled = ev.RewardConfig(target * scale, alpha)
    assert math.isclose(ev.reward(acc, target * x * scale, scaled), ev.reward(acc, target * x, cfg),
                        rel_tol=1e-12, abs_tol=1e-300)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 90))
def test_reward_monotone(a1, a2, lat):
    cfg = ev.RewardConfig()
    lo, hi = sorted((a1, a2))
    assert ev.reward(lo, lat, cfg) <= ev.reward(hi, lat, cfg)
    assert ev.reward(hi, lat, cfg) >= ev.reward(hi, lat + 1.0, cfg)


def test_eval_result_domain():
    with pytest.raises(DomainError):
        ev.EvalResult(1.2, 10.0)
    with pytest.raises(DomainError):
        ev.EvalResult(0.5, 0.0)


# -- surrogate --------------------------------------------------------------

def _hand_logit(sur, tokens):
    on = [off + t for off, t in zip(sur.schema.offsets, tokens)]
    z = sur.bias + sum(sur.weights[i] for i in on)
    z += sum(c for i, j, c in sur.interactions if i in on and j in on)
    return z


def test_surrogate_deterministic(small_schema, rng):
    sur = ev.SurrogateEvaluator.from_seed(small_schema, 3)
    arch = ss.random_tokens(small_schema, rng)
    assert ev.surrogate_eval(sur, arch) == ev.surrogate_eval(sur, arch)
    assert ev.surrogate_eval(sur, arch).cost_units == 1


def test_surrogate_noise_depends_only_on_noise_seed(small_schema, rng):
    sur = ev.SurrogateEvaluator.from_seed(small_schema, 3, noise=0.05)
    arch = ss.random_tokens(small_schema, rng)
    assert ev.surrogate_eval(sur, arch, 7).accuracy == ev.surrogate_eval(sur, arch, 7).accuracy
    assert ev.surrogate_eval(sur, arch, 7).accuracy != ev.surrogate_eval(sur, arch, 8).accuracy


def test_surrogate_argmax_matches_exhaustive_scan(small_schema):
    sur = ev.SurrogateEvaluator.from_seed(small_schema, 11)
    allt = ss.enumerate_space(small_schema)
    scan = np.array([1 / (1 + math.exp(-_hand_logit(sur, t))) for t in allt])
    assert np.argmax(sur.accuracy_batch(allt)) == np.argmax(scan)
    assert np.allclose(sur.accuracy_batch(allt), scan, atol=1e-12)


def test_surrogate_has_three_interactions(small_schema):
    assert len(ev.SurrogateEvaluator.from_seed(small_schema, 0).interactions) == 3


def test_single_token_flip_delta(schema, rng):
    sur = ev.SurrogateEvaluator.from_seed(schema, 5)
    for _ in range(50):
        arch = ss.random_tokens(schema, rng)
        pos = int(rng.integers(schema.length))
        toks = list(arch.tokens)
        toks[pos] = (toks[pos] + 1) % schema.vocabs[pos]
        flipped = ss.ArchitectureTokens(tuple(toks), schema)
        delta = sur.logit(flipped) - sur.logit(arch)
        assert delta == pytest.approx(_hand_logit(sur, flipped.tokens) - _hand_logit(sur, arch.tokens), abs=1e-12)


def test_shared_family_correlates_tasks(small_schema):
    allt = ss.enumerate_space(small_schema)
    a = ev.SurrogateEvaluator.from_seed(small_schema, 1, family_seed=9, share=0.8).logit_batch(allt)
    b = ev.SurrogateEvaluator.from_seed(small_schema, 2, family_seed=9, share=0.8).logit_batch(allt)
    c = ev.SurrogateEvaluator.from_seed(small_schema, 2).logit_batch(allt)
    assert np.corrcoef(a, b)[0, 1] > np.corrcoef(a, c)[0, 1]


# -- latency ----------------------------------------------------------------

def test_latency_minimum_tokens(schema):
    table = ev.CostTable.for_schema(schema)
    arch = ss.ArchitectureTokens((0,) * schema.length, schema)
    assert ev.latency_model(arch, table) == table.base + schema.num_blocks * 1.0


def test_widening_block_increases_latency(schema, rng):
    for arch in ss.random_tokens(schema, rng, 30):
        toks = list(arch.tokens)
        t = schema.group_index(2, "width")
        if toks[t] == schema.vocabs[t] - 1:
            continue
        base = ev.latency_model(arch)
        toks[t] += 1
        assert ev.latency_model(ss.ArchitectureTokens(tuple(toks), schema)) > base


def test_latency_matches_hand_summation(schema, rng):
    table = ev.CostTable.for_schema(schema)
    archs = ss.random_tokens(schema, rng, 100)
    batch = ev.latency_batch([a.tokens for a in archs], schema, table)
    for arch, lat in zip(archs, batch):
        total = table.base
        for b in range(4):
            op, kernel, width, _skip = arch.tokens[4 * b:4 * b + 4]
            total += (1 + 0.5 * op) * (1 + 0.5 * kernel) * (1 + width)
        assert ev.latency_model(arch, table) == pytest.approx(total, rel=1e-12)
        assert lat == pytest.approx(total, rel=1e-12)


def test_cost_table_round_trip(schema):
    table = ev.CostTable.for_schema(schema, base=7.0)
    assert ev.CostTable.from_dict(table.to_dict()) == table


# -- tabular ----------------------------------------------------------------

def test_tabular_single_row(small_schema):
    key = "1-0-2-1-0-1-3-0"
    table = ev.TabularEvaluator.from_text(f"tokens,accuracy,latency\n{key},0.8,12.5\n", small_schema)
    res = ev.tabular_eval(table, ss.tokens_from_key(key, small_schema))
    assert (res.accuracy, res.latency, res.cost_units) == (0.8, 12.5, 1)


def test_tabular_missing_key_carries_token_string(small_schema):
    table = ev.TabularEvaluator.from_text("tokens,accuracy,latency\n0-0-0-0-0-0-0-0,0.5,10\n", small_schema)
    with pytest.raises(LookupFailure) as info:
        ev.tabular_eval(table, ss.tokens_from_key("1-1-1-1-1-1-1-1", small_schema))
    assert info.value.token_string == "1-1-1-1-1-1-1-1"


def test_tabular_bad_header(small_schema):
    with pytest.raises(ValidationError):
        ev.TabularEvaluator.from_text("arch,acc,lat\n", small_schema)


def test_tabular_thousand_row_round_trip(small_schema, rng, tmp_path):
    allt = ss.enumerate_space(small_schema)[rng.permutation(4096)[:1000]]
    keys = ["-".join(map(str, t)) for t in allt]
    acc = rng.uniform(0, 1, 1000)
    lat = rng.uniform(5, 50, 1000)
    path = tmp_path / "bench.csv"
    ev.write_table(path, keys, acc, lat)
    table = ev.TabularEvaluator.load(path, small_schema)
    assert len(table) == 1000
    for k, a, l in zip(keys, acc, lat):
        res = table.evaluate(ss.tokens_from_key(k, small_schema))
        assert (res.accuracy, res.latency) == (a, l)


# -- toy trainer ------------------------------------------------------------

def _separable(seed=0, n=400):
    r = nn.make_rng(seed, "separable")
    x = np.concatenate([r.normal(-1.5, 0.5, (n, 2)), r.normal(1.5, 0.5, (n, 2))])
    y = np.repeat([0, 1], n)
    perm = r.permutation(2 * n)
    x, y = x[perm], y[perm]
    cut = int(1.6 * n)
    return ev.ToyDataset(x[:cut], y[:cut], x[cut:], y[cut:], seed)


def test_toy_train_separable_reaches_high_accuracy(schema, rng):
    arch = ss.random_tokens(schema, rng)
    res = ev.toy_train(arch, None, 200, _separable())
    assert res.accuracy > 0.95
    assert res.cost_units == 200
    assert len(res.checkpoint) == schema.num_blocks


def test_toy_train_deterministic(schema, rng):
    data = ev.make_rings(1, n_train=300, n_val=100)
    arch = ss.random_tokens(schema, rng)
    a = ev.toy_train(arch, None, 3, data, seed=4)
    b = ev.toy_train(arch, None, 3, data, seed=4)
    assert a.accuracy == b.accuracy
    for ca, cb in zip(a.checkpoint, b.checkpoint):
        assert all(np.array_equal(ca.weights[k], cb.weights[k]) for k in ca.weights)


def test_toy_train_rejects_zero_epochs(schema, rng):
    with pytest.raises(ValidationError):
        ev.toy_train(ss.random_tokens(schema, rng), None, 0, ev.make_rings(0, 100, 50))


def test_toy_train_non_finite_loss_reports_epoch(schema, rng):
    data = ev.make_rings(0, 200, 50)
    data.x_train[5, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        ev.toy_train(ss.random_tokens(schema, rng), None, 2, data)
    assert info.value.epoch == 0


def test_trained_checkpoint_beats_scratch_after_one_epoch(schema):
    data = ev.make_rings(7, n_train=1000, n_val=300, rings=2, noise=0.05)
    archs = ss.random_tokens(schema, nn.make_rng(3, "archs"), 50)
    wins = 0
    for i, arch in enumerate(archs):
        full = ev.toy_train(arch, None, 30, data, seed=i)
        init = {b: ck.weights for b, ck in enumerate(full.checkpoint)}
        warm = ev.toy_train(arch, init, 1, data, seed=(i, 1)).accuracy
        cold = ev.toy_train(arch, None, 1, data, seed=(i, 1)).accuracy
        wins += warm >= cold
    assert wins >= 45


@pytest.mark.parametrize("topology", ["parallel", "stacked"])
def test_toy_gradient_matches_autodiff(schema, rng, topology):
    cfg = ev.ToyTrainerConfig(topology=topology, ops=("relu", "tanh", "sigmoid", "leaky"))
    data = ev.make_rings(2, 64, 10)
    for arch in ss.random_tokens(schema, rng, 4):
        params, net = ev.init_toy_params(arch, rng, None, cfg)
        params.values += rng.normal(0, 0.05, params.size)
        loss, g = ev.toy_loss_grad(params, net, data.x_train, data.y_train)

        def ref(t):
            logits = ev.toy_forward(t, data.x_train, net)
            return -nn.mean(nn.pick(nn.log_softmax(logits), data.y_train))

        assert loss == pytest.approx(nn.value_of(ref, params), rel=1e-10)
        assert np.allclose(g.values, nn.grad(ref, params).values, atol=1e-10)


def test_partial_init_copies_overlap(schema, rng):
    arch = ss.ArchitectureTokens((0, 1, 3, 0) * 4, schema)
    src = ss.ArchitectureTokens((0, 0, 1, 0) * 4, schema)
    donor, _ = ev.init_toy_params(src, rng)
    payload = {0: {"0.W": donor["block0.0.W"], "0.b": donor["block0.0.b"]}}
    params, _ = ev.init_toy_params(arch, nn.make_rng(0), payload)
    w = donor["block0.0.W"]
    assert np.array_equal(params["block0.0.W"][:, :w.shape[1]], w)


def test_toy_trainer_evaluator_interface(schema, rng):
    trainer = ev.ToyTrainer(schema, ev.make_rings(0, 200, 50), epochs=2)
    res = trainer.evaluate(ss.random_tokens(schema, rng), sample_id=3)
    assert res.cost_units == 2 and 0 <= res.accuracy <= 1
