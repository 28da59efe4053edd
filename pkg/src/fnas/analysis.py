"""Statistics and reporting: rank correlation, rank tracking, divergence, ablations, plot data."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import akp
from . import evaluators as ev
from .errors import ComparabilityError, SchemaError, StatisticError, ValidationError
from .search_space import operator_expectation


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if len(a) != len(b):
        raise StatisticError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise StatisticError("need at least two observations")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise StatisticError("non-finite observation")
    ra, rb = rankdata(a), rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0:
        raise StatisticError("constant input has no rank correlation")
    return float(np.clip(da @ db / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Rank tracking


@dataclass
class RankSeries:
    """Per-epoch accuracies (rows = epochs) for a fixed set of architectures."""

    epochs: np.ndarray
    accuracies: np.ndarray
    final: np.ndarray

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.int64)
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        self.final = np.asarray(self.final, dtype=np.float64)
        if self.accuracies.ndim != 2 or self.accuracies.shape[0] != len(self.epochs):
            raise ValidationError("accuracies must have one row per epoch")
        if self.accuracies.shape[1] != len(self.final):
            raise ValidationError("every epoch row must cover the same architectures as the reference")
        if np.any(np.diff(self.epochs) <= 0):
            raise ValidationError("epochs must be strictly increasing")

    def rho(self) -> np.ndarray:
        """Spearman correlation of each epoch's accuracies with the reference ranks."""
        return np.array([spearman(row, self.final) for row in self.accuracies])


def first_epoch_reaching(epochs, rho, level: float = 0.8):
    """First epoch whose correlation is >= ``level``, or None."""
    for e, r in zip(epochs, rho):
        if r >= level:
            return int(e)
    return None


def _train_history(job):
    tokens, init, epochs, data, seed, config = job
    return ev.toy_train(tokens, init, epochs, data, seed=seed, config=config, record_history=True)


def rank_tracking(archs, data: ev.ToyDataset, init_mode: str, epochs: int, *, reference=None, pool=None,
                  config: ev.ToyTrainerConfig | None = None, seed: int = 0, workers: int = 1):
    """Train every architecture for ``epochs`` and correlate each epoch with the reference ranks.

    ``init_mode`` is ``"scratch"`` or ``"akp"`` (initialize from ``pool``).
    Without ``reference`` the run's own last epoch is the reference, so the
    final correlation is 1.  Architecture ``i`` trains with seed ``(seed, i)``
    in both modes.  Returns ``(RankSeries, rho)``.
    """
    if init_mode not in ("scratch", "akp"):
        raise ValidationError(f"init_mode must be 'scratch' or 'akp', got {init_mode!r}")
    if init_mode == "akp" and pool is None:
        raise ValidationError("akp init needs a knowledge pool")
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    archs = list(archs)
    jobs = []
    for i, t in enumerate(archs):
        init = akp.initialize_architecture(pool, t)[0] if init_mode == "akp" else None
        jobs.append((t, init, epochs, data, (seed, i), config))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool_ex:
        results = list(pool_ex.map(_train_history, jobs))
    acc = np.array([r.history for r in results]).T
    final = acc[-1] if reference is None else np.asarray(reference, dtype=np.float64)
    series = RankSeries(np.arange(1, epochs + 1), acc, final)
    return series, series.rho()


@dataclass
class RankAcceleration:
    scratch_rho: np.ndarray
    akp_rho: np.ndarray
    scratch_epoch: int | None
    akp_epoch: int | None
    hit_ratio: float
    scratch: RankSeries | None = None

    @property
    def ratio(self):
        """AKP epochs over scratch epochs to reach the level (inf if AKP never does)."""
        if self.scratch_epoch is None:
            return math.nan if self.akp_epoch is None else 0.0
        if self.akp_epoch is None:
            return math.inf
        return self.akp_epoch / self.scratch_epoch


def rank_acceleration(archs, source: ev.ToyDataset, target: ev.ToyDataset, *, source_epochs: int = 50,
                      full_epochs: int = 200, akp_epochs: int = 60, level: float = 0.8,
                      config: ev.ToyTrainerConfig | None = None, seed: int = 0, tau_sim: float = 0.6,
                      pool: akp.KnowledgePool | None = None, workers: int = 1,
                      scratch: RankSeries | None = None) -> RankAcceleration:
    """Scratch vs pool-initialized rank curves on ``target``.

    The pool holds the blocks of ``archs`` trained for ``source_epochs`` on
    ``source`` unless a ready pool is passed.  The reference ranks are the
    scratch accuracies after ``full_epochs``; pass ``scratch`` (the series of
    an earlier call on the same ``archs`` and ``target``) to skip retraining.
    """
    archs = list(archs)
    if pool is None:
        pool = akp.KnowledgePool(source_epochs, tau_sim)
        for i, t in enumerate(archs):
            r = ev.toy_train(t, None, source_epochs, source, seed=(seed, "source", i), config=config,
                             task="source")
            for ck in r.checkpoint:
                akp.insert_checkpoint(pool, ck, t.schema)
    if scratch is None:
        scratch, s_rho = rank_tracking(archs, target, "scratch", full_epochs, config=config, seed=seed,
                                       workers=workers)
    else:
        if scratch.accuracies.shape[1] != len(archs):
            raise ValidationError("scratch series covers a different number of architectures")
        s_rho = scratch.rho()
    hits = [akp.initialize_architecture(pool, t)[1].hit_ratio for t in archs]
    _, a_rho = rank_tracking(archs, target, "akp", akp_epochs, reference=scratch.final, pool=pool, config=config,
                             seed=seed, workers=workers)
    return RankAcceleration(s_rho, a_rho, first_epoch_reaching(scratch.epochs, s_rho, level),
                            first_epoch_reaching(np.arange(1, akp_epochs + 1), a_rho, level), float(np.mean(hits)),
                            scratch)


# ---------------------------------------------------------------------------
# Population divergence


@dataclass
class DivergenceReport:
    expect_a: np.ndarray
    expect_b: np.ndarray
    difference: np.ndarray
    order: np.ndarray
    sigma: np.ndarray

    def top(self, k: int = 10):
        """``(bit index, |difference|, sigma)`` for the ``k`` largest differences."""
        return [(int(i), float(self.difference[i]), float(self.sigma[i])) for i in self.order[:k]]


def divergence(pop_a, pop_b) -> DivergenceReport:
    """Per-bit |E_a - E_b| of the expand embedding, sorted descending.

    ``sigma`` is the binomial standard error of the difference under the
    pooled rate, for judging which gaps exceed sampling noise.
    """
    pop_a, pop_b = list(pop_a), list(pop_b)
    if not pop_a or not pop_b:
        raise ValidationError("both populations must be nonempty")
    schema = pop_a[0].schema
    if any(t.schema != schema for t in pop_a + pop_b):
        raise SchemaError("populations come from different schemas")
    ea, eb = operator_expectation(pop_a), operator_expectation(pop_b)
    diff = np.abs(ea - eb)
    order = np.argsort(-diff, kind="stable")
    na, nb = len(pop_a), len(pop_b)
    pooled = (ea * na + eb * nb) / (na + nb)
    sigma = np.sqrt(pooled * (1 - pooled) * (1 / na + 1 / nb))
    return DivergenceReport(ea, eb, diff, order, sigma)


# ---------------------------------------------------------------------------
# Ablation tables

MODULE_ORDER = ("uac", "akp", "aeb")


@dataclass(frozen=True)
class AblationRow:
    toggles: tuple
    best_reward: float
    activated_samples: int
    speedup: float

    @property
    def label(self) -> str:
        on = [m.upper() for m, flag in zip(MODULE_ORDER, self.toggles) if flag]
        return "+".join(on) if on else "baseline"


def ablation_table(reports) -> list:
    """One row per toggle combination; speedup = baseline activated / row activated.

    The all-off report is the baseline.  Reports must share an evaluator
    fingerprint.  Duplicate combinations keep the first report.
    """
    reports = list(reports)
    if not reports:
        raise ValidationError("no reports to tabulate")
    keys = {r.evaluator_key for r in reports}
    if len(keys) > 1:
        raise ComparabilityError(f"reports come from {len(keys)} different evaluators")
    by_toggle = {}
    for r in reports:
        toggles = tuple(bool(r.modules.get(m, False)) for m in MODULE_ORDER)
        by_toggle.setdefault(toggles, r)
    base = by_toggle.get((False, False, False))
    if base is None:
        raise ComparabilityError("ablation needs an all-off baseline report")
    rows = []
    for toggles, r in sorted(by_toggle.items()):
        speed = base.activated_samples / r.activated_samples if r.activated_samples else math.inf
        rows.append(AblationRow(toggles, r.best_reward, r.activated_samples, speed))
    return rows


def format_table(rows) -> str:
    """Aligned plain-text rendering of :func:`ablation_table` rows."""
    head = ("modules", "best_reward", "activated", "speedup")
    body = [(r.label, f"{r.best_reward:.5f}", str(r.activated_samples), f"{r.speedup:.2f}") for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head, *body]]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Plot data


def emit_plotdata(series: dict, path, comment: str = "") -> str:
    """Write ``{column: values}`` as CSV, first column is the x axis.

    A leading ``#`` line documents the columns.  Floats are written with
    ``repr`` so a parse recovers them exactly.  Returns ``path``.
    """
    if not series:
        raise ValidationError("series is empty")
    cols = list(series)
    values = [list(series[c]) for c in cols]
    n = len(values[0])
    if n == 0 or any(len(v) != n for v in values):
        raise ValidationError("all columns must be nonempty and the same length")
    with open(path, "w", newline="") as fh:
        fh.write(f"# columns: {', '.join(cols)}{'; ' + comment if comment else ''}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*values):
            w.writerow([_fmt(v) for v in row])
    return str(path)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_plotdata(path) -> dict:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    head, body = rows[0], rows[1:]
    return {c: [float(r[i]) for r in body] for i, c in enumerate(head)}


def reward_curve(report) -> dict:
    """Best true reward against activated samples, one point per improvement."""
    act, best, cur = [], [], -math.inf
    for a, r in report.trace:
        if r > cur:
            cur = r
            act.append(int(a))
            best.append(float(r))
    return {"activated": act, "reward": best}


__all__ = ["spearman", "RankSeries", "first_epoch_reaching", "rank_tracking", "RankAcceleration",
           "rank_acceleration", "DivergenceReport", "divergence", "AblationRow", "ablation_table", "format_table",
           "emit_plotdata", "read_plotdata", "reward_curve"]
