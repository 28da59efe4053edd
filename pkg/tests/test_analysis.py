import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnas import analysis as an
from fnas import evaluators as ev
from fnas import nn_core as nn
from fnas import orchestrator as orc
from fnas import search_space as ss
from fnas.errors import ComparabilityError, SchemaError, StatisticError, ValidationError


def test_spearman_identical_and_reversed():
    assert an.spearman([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert an.spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0


def test_spearman_hand_formula():
    assert an.spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(1 - 6 * 2 / (3 * 8), abs=1e-15)


def test_spearman_ties_use_average_ranks():
    # ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): Pearson on ranks
    ra, rb = np.array([1, 2.5, 2.5, 4]), np.array([1, 2, 3, 4])
    expected = np.corrcoef(ra, rb)[0, 1]
    assert an.spearman([0.1, 0.5, 0.5, 0.9], [1, 2, 3, 4]) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("a, b", [([1, 2], [1, 2, 3]), ([1], [1]), ([1, 1, 1], [1, 2, 3]), ([1, np.nan], [1, 2])])
def test_spearman_errors(a, b):
    with pytest.raises(StatisticError):
        an.spearman(a, b)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(-100, 100), st.integers(-100, 100)), min_size=3, max_size=30))
def test_spearman_symmetric_and_monotone_invariant(pairs):
    a = np.array([p[0] for p in pairs], dtype=float)
    b = np.array([p[1] for p in pairs], dtype=float)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return
    rho = an.spearman(a, b)
    assert -1 <= rho <= 1
    assert an.spearman(b, a) == pytest.approx(rho, abs=1e-12)
    assert an.spearman(np.exp(a / 50), b) == pytest.approx(rho, abs=1e-12)
    assert an.spearman(a, -np.cbrt(-b)) == pytest.approx(rho, abs=1e-12)


def test_rank_series_validation():
    with pytest.raises(ValidationError):
        an.RankSeries([1, 2], np.zeros((3, 4)), np.zeros(4))
    with pytest.raises(ValidationError):
        an.RankSeries([2, 1], np.zeros((2, 4)), np.zeros(4))
    with pytest.raises(ValidationError):
        an.RankSeries([1, 2], np.zeros((2, 4)), np.zeros(5))


def test_first_epoch_reaching():
    assert an.first_epoch_reaching([1, 2, 3], [0.2, 0.85, 0.9]) == 2
    assert an.first_epoch_reaching([1, 2, 3], [0.2, 0.5, 0.7]) is None


def test_rank_tracking_self_reference_and_trend(schema):
    data = ev.make_rings(0, n_train=300, n_val=200, rings=2, noise=0.05)
    archs = ss.random_tokens(schema, nn.make_rng(0, "archs"), 10)
    series, rho = an.rank_tracking(archs, data, "scratch", 15, workers=2)
    assert rho[-1] == 1.0
    assert rho[0] < rho[-1]
    assert series.accuracies.shape == (15, 10)


def test_rank_tracking_is_worker_independent(schema):
    data = ev.make_rings(0, n_train=200, n_val=100)
    archs = ss.random_tokens(schema, nn.make_rng(1, "archs"), 4)
    a, _ = an.rank_tracking(archs, data, "scratch", 2, workers=1)
    b, _ = an.rank_tracking(archs, data, "scratch", 2, workers=3)
    assert np.array_equal(a.accuracies, b.accuracies)


def test_rank_tracking_argument_errors(schema):
    data = ev.make_rings(0, n_train=100, n_val=50)
    archs = ss.random_tokens(schema, nn.make_rng(1), 3)
    with pytest.raises(ValidationError):
        an.rank_tracking(archs, data, "akp", 2)
    with pytest.raises(ValidationError):
        an.rank_tracking(archs, data, "warm", 2)


def test_rank_acceleration_ratio():
    r = an.RankAcceleration(np.array([]), np.array([]), 40, 18, 1.0)
    assert r.ratio == 0.45
    assert an.RankAcceleration(np.array([]), np.array([]), 40, None, 1.0).ratio == math.inf


def test_divergence_identical_populations(schema, rng):
    pop = ss.random_tokens(schema, rng, 20)
    rep = an.divergence(pop, pop)
    assert np.all(rep.difference == 0)


def test_divergence_leading_group():
    schema = ss.make_schema(1, [("op", 2), ("k", 3)])
    a = [ss.ArchitectureTokens((0, i % 3), schema) for i in range(30)]
    b = [ss.ArchitectureTokens((1, i % 3), schema) for i in range(30)]
    rep = an.divergence(a, b)
    assert sorted(rep.order[:2].tolist()) == [0, 1]
    assert np.allclose(rep.difference[[0, 1]], 1.0) and np.allclose(rep.difference[2:], 0.0)
    assert sorted(rep.order.tolist()) == list(range(schema.width))


def test_divergence_symmetric(schema, rng):
    a, b = ss.random_tokens(schema, rng, 30), ss.random_tokens(schema, rng, 40)
    assert np.array_equal(an.divergence(a, b).difference, an.divergence(b, a).difference)


def test_divergence_within_sampling_noise(schema):
    rng = nn.make_rng(0, "divergence")
    rep = an.divergence(ss.random_tokens(schema, rng, 100), ss.random_tokens(schema, rng, 100))
    assert np.all(rep.difference <= 3 * rep.sigma + 1e-12)


def test_divergence_errors(schema, small_schema, rng):
    with pytest.raises(SchemaError):
        an.divergence([ss.random_tokens(schema, rng)], [ss.random_tokens(small_schema, rng)])
    with pytest.raises(ValidationError):
        an.divergence([], [ss.random_tokens(schema, rng)])


def _report(activated, best=0.9, modules=None, key="k"):
    return orc.RunReport(best, None, activated, 0, 1, [], [], {}, modules or {"uac": False, "akp": False,
                                                                              "aeb": False}, key)


def test_ablation_self_baseline():
    rows = an.ablation_table([_report(8000)])
    assert len(rows) == 1 and rows[0].speedup == 1.0 and rows[0].label == "baseline"


def test_ablation_speedup_is_exact_ratio():
    rows = an.ablation_table([_report(8000), _report(2000, modules={"uac": True, "akp": True, "aeb": True})])
    assert rows[-1].speedup == 4.0 and rows[-1].label == "UAC+AKP+AEB"


def test_ablation_identical_reports_identical_rows():
    a = an.ablation_table([_report(100), _report(50, modules={"uac": True})])
    b = an.ablation_table([_report(100), _report(50, modules={"uac": True})])
    assert a == b
    assert "UAC" in an.format_table(a)


def test_ablation_comparability():
    with pytest.raises(ComparabilityError):
        an.ablation_table([_report(100), _report(50, modules={"uac": True}, key="other")])
    with pytest.raises(ComparabilityError):
        an.ablation_table([_report(50, modules={"uac": True})])


def test_plotdata_round_trip(tmp_path, rng):
    vals = rng.normal(size=7) / 3
    path = an.emit_plotdata({"activated": list(range(7)), "reward": vals}, tmp_path / "c.csv", "reward curve")
    text = open(path).read()
    assert text.startswith("# columns: activated, reward")
    back = an.read_plotdata(path)
    assert back["reward"] == vals.tolist() and back["activated"] == list(range(7))


def test_rank_curves_three_columns(tmp_path):
    an.emit_plotdata({"epoch": [1, 2], "scratch": [0.1, 0.5], "akp": [0.4, 0.9]}, tmp_path / "rho.csv")
    assert list(an.read_plotdata(tmp_path / "rho.csv")) == ["epoch", "scratch", "akp"]


def test_plotdata_errors(tmp_path):
    with pytest.raises(ValidationError):
        an.emit_plotdata({}, tmp_path / "x.csv")
    with pytest.raises(ValidationError):
        an.emit_plotdata({"a": [1, 2], "b": [1]}, tmp_path / "x.csv")
    with pytest.raises(OSError):
        an.emit_plotdata({"a": [1]}, tmp_path / "missing" / "x.csv")


def test_reward_curve_is_running_best():
    rep = orc.RunReport(0.9, None, 5, 0, 1, [], [[1, 0.3], [2, 0.2], [3, 0.5], [5, 0.9]], {})
    assert an.reward_curve(rep) == {"activated": [1, 3, 5], "reward": [0.3, 0.5, 0.9]}
