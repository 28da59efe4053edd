"""Recurrent controller that emits token sequences, trained with clipped PPO.

Each architecture is a one-step episode: the LSTM walks the token groups in
schema order, the per-group head gives a categorical distribution, and the
chosen token's embedding is the next step's input.  Step 0 reads a learned
start embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, NumericError, ValidationError
from .search_space import ArchitectureTokens, SpaceSchema


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    entropy_coef: float = 0.01
    lr: float = 3.5e-4
    epochs: int = 1
    batch_size: int = 64
    normalize_advantages: bool = False
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ConfigError(f"clip epsilon must be in (0, 1), got {self.clip}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs-per-batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")


@dataclass
class SampledTrajectory:
    tokens: ArchitectureTokens
    step_log_probs: np.ndarray

    @property
    def log_prob(self) -> float:
        return float(np.sum(self.step_log_probs))


@dataclass
class PpoSample:
    """One batch row: a trajectory with its reward, baseline and replay weight."""

    trajectory: SampledTrajectory
    reward: float
    baseline: float = 0.0
    weight: float = 1.0


def policy_layout(schema: SpaceSchema, hidden: int = 100, embed_dim: int = 32) -> dict:
    layout = nn.lstm_layout(embed_dim, hidden, "lstm")
    for name, v in zip(schema.group_names, schema.vocabs):
        layout[f"head.{name}.W"] = (hidden, v)
        layout[f"head.{name}.b"] = (v,)
    layout["embed.start"] = (embed_dim,)
    for name, v in zip(schema.group_names, schema.vocabs):
        layout[f"embed.{name}"] = (v, embed_dim)
    return layout


@dataclass
class PolicyNet:
    schema: SpaceSchema
    params: nn.ParamVector
    hidden: int = 100
    embed_dim: int = 32
    opt: nn.AdamState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.opt is None:
            self.opt = nn.AdamState.zeros(self.params.size)

    @classmethod
    def create(cls, schema: SpaceSchema, rng: np.random.Generator, hidden: int = 100, embed_dim: int = 32,
               head_scale: float = 1e-3):
        """Fresh controller; heads start near zero so the policy is near uniform."""
        params = nn.ParamVector(policy_layout(schema, hidden, embed_dim))
        bound = 1.0 / np.sqrt(hidden)
        params["lstm.W"] = rng.uniform(-bound, bound, size=params.layout["lstm.W"])
        for name, shape in params.layout.items():
            if name.startswith("head.") and name.endswith(".W"):
                params[name] = rng.normal(0.0, head_scale, size=shape)
            elif name.startswith("embed."):
                params[name] = rng.normal(0.0, 0.1, size=shape)
        return cls(schema, params, hidden, embed_dim)

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.schema, self.params.copy(), self.hidden, self.embed_dim, self.opt.copy())


def _run(policy: PolicyNet, tokens=None, rng=None, n: int = 1):
    """Numpy forward pass.  Teacher-forced when ``tokens`` is given, else sampling.

    Returns ``(tokens (n, T), step_log_probs (n, T))``.
    """
    p, schema, H = policy.params, policy.schema, policy.hidden
    if tokens is not None:
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, schema.length)
        n = tokens.shape[0]
    out_tok = np.zeros((n, schema.length), dtype=np.int64)
    out_lp = np.zeros((n, schema.length))
    h, c = np.zeros((n, H)), np.zeros((n, H))
    x = np.broadcast_to(p["embed.start"], (n, policy.embed_dim))
    W, b = p["lstm.W"], p["lstm.b"]
    for t, name in enumerate(schema.group_names):
        z = np.concatenate([x, h], axis=1) @ W + b
        i, f, g, o = (z[:, k * H:(k + 1) * H] for k in range(4))
        c = nn._sigmoid(f) * c + nn._sigmoid(i) * np.tanh(g)
        h = nn._sigmoid(o) * np.tanh(c)
        logits = h @ p[f"head.{name}.W"] + p[f"head.{name}.b"]
        m = logits.max(axis=1, keepdims=True)
        logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        if tokens is None:
            cdf = np.cumsum(np.exp(logp), axis=1)
            u = rng.random(n)[:, None] * cdf[:, -1:]
            tok = np.minimum((u >= cdf).sum(axis=1), logp.shape[1] - 1)
        else:
            tok = tokens[:, t]
        out_tok[:, t] = tok
        out_lp[:, t] = logp[np.arange(n), tok]
        x = p[f"embed.{name}"][tok]
    return out_tok, out_lp


def sample(policy: PolicyNet, rng: np.random.Generator) -> SampledTrajectory:
    return sample_batch(policy, rng, 1)[0]


def sample_batch(policy: PolicyNet, rng: np.random.Generator, n: int) -> list:
    toks, lps = _run(policy, rng=rng, n=n)
    return [SampledTrajectory(ArchitectureTokens(tuple(t), policy.schema), lp) for t, lp in zip(toks, lps)]


def log_prob(policy: PolicyNet, tokens: ArchitectureTokens) -> float:
    """Teacher-forced log-probability of a full token sequence."""
    if not isinstance(tokens, ArchitectureTokens):
        tokens = ArchitectureTokens(tuple(tokens), policy.schema)
    elif tokens.schema != policy.schema:
        raise ValidationError("tokens belong to a different schema")
    return float(_run(policy, tokens=[tokens.tokens])[1].sum())


def log_prob_batch(policy: PolicyNet, token_matrix) -> np.ndarray:
    return _run(policy, tokens=token_matrix)[1].sum(axis=1)


def head_distributions(policy: PolicyNet, tokens: ArchitectureTokens) -> list:
    """Per-step probability vectors along a teacher-forced path."""
    dists = []
    for t in range(policy.schema.length):
        prefix = np.zeros((policy.schema.vocabs[t], policy.schema.length), dtype=np.int64)
        prefix[:, :t] = tokens.tokens[:t]
        prefix[:, t] = np.arange(policy.schema.vocabs[t])
        lp = _run(policy, tokens=prefix)[1][:, t]
        dists.append(np.exp(lp))
    return dists


def sequence_terms(p, token_matrix, schema: SpaceSchema, hidden: int, embed_dim: int):
    """Differentiable per-sample total log-prob and path entropy, each shape (n,)."""
    toks = np.asarray(token_matrix, dtype=np.int64)
    n = toks.shape[0]
    H = hidden
    h = nn.Tensor(np.zeros((n, H)))
    c = nn.Tensor(np.zeros((n, H)))
    x = nn.Tensor(np.ones((n, 1))) @ nn.reshape(p["embed.start"], (1, embed_dim))
    total_lp, total_ent = None, None
    for t, name in enumerate(schema.group_names):
        h, c = nn.lstm_apply(p, x, h, c, "lstm")
        logp = nn.log_softmax(h @ p[f"head.{name}.W"] + p[f"head.{name}.b"])
        lp_t = nn.pick(logp, toks[:, t])
        ent_t = nn.neg(nn.sum_(nn.exp(logp) * logp, axis=1))
        total_lp = lp_t if total_lp is None else total_lp + lp_t
        total_ent = ent_t if total_ent is None else total_ent + ent_t
        x = nn.index(p[f"embed.{name}"], toks[:, t])
    return total_lp, total_ent


def _rows(batch):
    rows = []
    for item in batch:
        if isinstance(item, PpoSample):
            rows.append(item)
        else:
            rows.append(PpoSample(*item))
    return rows


def ppo_loss_fn(policy: PolicyNet, batch, cfg: PpoConfig, old_log_probs=None):
    """Build the PPO objective (to minimize) as a function of parameter tensors.

    ``old_log_probs`` defaults to the log-probs under ``policy`` itself, i.e.
    the snapshot taken when an update starts.
    """
    rows = _rows(batch)
    toks = np.array([r.trajectory.tokens.tokens for r in rows], dtype=np.int64)
    if old_log_probs is None:
        old_log_probs = log_prob_batch(policy, toks)
    adv = np.array([r.reward - r.baseline for r in rows], dtype=np.float64)
    if not np.all(np.isfinite(adv)):
        raise NumericError("non-finite reward or baseline in PPO batch")
    if cfg.normalize_advantages and len(adv) > 1 and adv.std() > 0:
        adv = (adv - adv.mean()) / adv.std()
    w = np.array([r.weight for r in rows], dtype=np.float64)
    n = len(rows)

    def loss(p):
        lp, ent = sequence_terms(p, toks, policy.schema, policy.hidden, policy.embed_dim)
        ratio = nn.exp(lp + nn.Tensor(-old_log_probs))
        surr = nn.minimum(ratio * adv, nn.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv)
        objective = nn.sum_(surr * w) * (1.0 / n) + nn.mean(ent) * cfg.entropy_coef
        return nn.neg(objective)

    return loss, toks, old_log_probs, adv


@dataclass
class PpoStats:
    loss: float
    first_ratio_max_dev: float
    clip_fraction: float
    entropy: float
    passes: int


def ppo_update(policy: PolicyNet, batch, cfg: PpoConfig) -> PpoStats:
    """Run ``cfg.epochs`` full-batch Adam passes on the clipped objective.

    On a non-finite loss or gradient the policy is left exactly as it was.
    """
    rows = _rows(batch)
    if not rows:
        raise ValidationError("PPO batch is empty")
    loss, toks, old_lp, adv = ppo_loss_fn(policy, rows, cfg)
    params, opt = policy.params, policy.opt
    hyper = nn.AdamConfig(lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    first_dev, value = 0.0, 0.0
    for k in range(cfg.epochs):
        if k == 0:
            first_dev = float(np.max(np.abs(np.exp(log_prob_batch(policy, toks) - old_lp) - 1.0)))
        value, g = nn.value_and_grad(loss, params)
        params, opt = nn.apply_update(params, g, opt, hyper)
        if not np.all(np.isfinite(params.values)):
            raise NumericError("PPO update produced non-finite parameters")
    staged = PolicyNet(policy.schema, params, policy.hidden, policy.embed_dim, opt)
    ratio = np.exp(log_prob_batch(staged, toks) - old_lp)
    clipped = float(np.mean(np.abs(ratio - 1.0) > cfg.clip))
    _, ent = sequence_terms(nn.tensor_params(params, requires_grad=False), toks, policy.schema, policy.hidden,
                            policy.embed_dim)
    policy.params, policy.opt = params, opt
    return PpoStats(value, first_dev, clipped, float(ent.value.mean()), cfg.epochs)


def save_policy(policy: PolicyNet, path):
    nn.save_params(path, policy.params)


def load_policy(path, schema: SpaceSchema, hidden: int = 100, embed_dim: int = 32) -> PolicyNet:
    template = nn.ParamVector(policy_layout(schema, hidden, embed_dim))
    return PolicyNet(schema, nn.load_params(path, template), hidden, embed_dim)
