"""Uncertainty-aware critic: a reward regressor V and an error regressor U.

V predicts an architecture's reward from its expand embedding; U predicts
how wrong V is.  Samples with low predicted error are "trusted" and take
V's prediction instead of being trained, subject to a per-batch cap.
"""
from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .errors import ConstraintStarvation, NumericError, ShapeError, TransferError, ValidationError


@dataclass
class CriticPair:
    schema_width: int
    params: nn.ParamVector
    hidden: int = 200
    layers: int = 4
    lr: float = 1e-3
    update_counter: int = 0
    opt_v: nn.AdamState | None = field(default=None, repr=False)
    opt_u: nn.AdamState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.opt_v is None:
            self.opt_v = nn.AdamState.zeros(self.params.size)
        if self.opt_u is None:
            self.opt_u = nn.AdamState.zeros(self.params.size)

    @property
    def spec(self) -> nn.MlpSpec:
        return nn.MlpSpec(self.schema_width, self.hidden, self.layers, 1, "prelu")

    @classmethod
    def create(cls, schema_width: int, rng: np.random.Generator, hidden: int = 200, layers: int = 4,
               lr: float = 1e-3):
        spec = nn.MlpSpec(schema_width, hidden, layers, 1, "prelu")
        params = nn.ParamVector(critic_layout(spec))
        nn.init_mlp(params, spec, rng, "V")
        nn.init_mlp(params, spec, rng, "U")
        return cls(schema_width, params, hidden, layers, lr)

    def copy(self) -> "CriticPair":
        return CriticPair(self.schema_width, self.params.copy(), self.hidden, self.layers, self.lr,
                          self.update_counter, self.opt_v.copy(), self.opt_u.copy())


def critic_layout(spec: nn.MlpSpec) -> dict:
    layout = nn.mlp_layout(spec, "V")
    layout.update(nn.mlp_layout(spec, "U"))
    return layout


@dataclass(frozen=True)
class TrustDecision:
    predicted_value: float
    predicted_uncertainty: float
    threshold: float
    trusted: bool


def _as_matrix(critic: CriticPair, embs) -> np.ndarray:
    x = np.asarray(getattr(embs, "bits", embs), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != critic.schema_width:
        raise ShapeError(f"critic expects embeddings of width {critic.schema_width}, got {x.shape[-1]}")
    return x


def _heads(p, x, spec):
    v = nn.mlp_apply(p, x, spec, "V")
    u = nn.softplus(nn.mlp_apply(p, x, spec, "U"))
    return v, u


def predict_batch(critic: CriticPair, embs):
    """``(V, U)`` arrays for a stack of embeddings; ``U >= 0`` via softplus."""
    x = _as_matrix(critic, embs)
    v, u = _heads(nn.tensor_params(critic.params, requires_grad=False), nn.Tensor(x), critic.spec)
    return v.value[:, 0].copy(), u.value[:, 0].copy()


def predict(critic: CriticPair, emb):
    v, u = predict_batch(critic, emb)
    return float(v[0]), float(u[0])


def value_loss_fn(critic: CriticPair, x, rewards):
    """Mean |V(m) - R(m)| as a function of the parameter tensors."""
    r = nn.Tensor(np.asarray(rewards, dtype=np.float64)[:, None])

    def loss(p):
        return nn.mean(nn.abs_(nn.mlp_apply(p, x, critic.spec, "V") - r))

    return loss


def uncertainty_loss_fn(critic: CriticPair, x, targets):
    """Mean |U(m) - L_V(m)| with ``targets`` held constant."""
    t = nn.Tensor(np.asarray(targets, dtype=np.float64)[:, None])

    def loss(p):
        return nn.mean(nn.abs_(nn.softplus(nn.mlp_apply(p, x, critic.spec, "U")) - t))

    return loss


@dataclass
class CriticStats:
    value_loss: float
    uncertainty_loss: float
    n: int


def update(critic: CriticPair, embs, rewards, steps: int = 1) -> CriticStats:
    """``steps`` Adam steps on mean L_V and mean L_U over the given samples.

    The U target is V's per-sample error before the step, detached, so the
    L_U term never moves V.  Returns the losses measured before updating.
    On a non-finite loss the critic is left untouched.
    """
    x = _as_matrix(critic, embs)
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if len(rewards) == 0:
        raise ValidationError("critic update needs at least one sample")
    if len(rewards) != len(x):
        raise ValidationError("embeddings and rewards differ in length")
    if not np.all(np.isfinite(rewards)):
        raise NumericError("non-finite reward passed to critic update")
    params, opt_v, opt_u = critic.params, critic.opt_v, critic.opt_u
    hyper = nn.AdamConfig(lr=critic.lr)
    xt = nn.Tensor(x)
    first = None
    for _ in range(steps):
        v_now = nn.mlp_forward(params, x, critic.spec, "V")[:, 0]
        targets = np.abs(v_now - rewards)
        lv, gv = nn.value_and_grad(value_loss_fn(critic, xt, rewards), params)
        lu, gu = nn.value_and_grad(uncertainty_loss_fn(critic, xt, targets), params)
        if first is None:
            first = (lv, lu)
        params, opt_v = nn.apply_update(params, gv, opt_v, hyper)
        params, opt_u = nn.apply_update(params, gu, opt_u, hyper)
        if not np.all(np.isfinite(params.values)):
            raise NumericError("critic update produced non-finite parameters")
    critic.params, critic.opt_v, critic.opt_u = params, opt_v, opt_u
    critic.update_counter += steps
    return CriticStats(first[0], first[1], len(rewards))


def decide(critic: CriticPair, emb, tau: float) -> TrustDecision:
    if tau < 0:
        raise ValidationError("threshold must be >= 0")
    v, u = predict(critic, emb)
    return TrustDecision(v, u, float(tau), bool(u <= tau))


def decide_batch(critic: CriticPair, embs, tau: float) -> list:
    if tau < 0:
        raise ValidationError("threshold must be >= 0")
    v, u = predict_batch(critic, embs)
    return [TrustDecision(float(a), float(b), float(tau), bool(b <= tau)) for a, b in zip(v, u)]


def adapt_threshold(recent_u, target_fraction: float) -> float:
    """Quantile of recent uncertainties (linear interpolation between order stats).

    A target of 0 returns a value just below the minimum so nothing is
    trusted; a target of 1 returns the maximum so everything is.
    """
    u = np.asarray(list(recent_u), dtype=np.float64)
    if u.size == 0:
        raise ValidationError("adapt_threshold needs at least one uncertainty value")
    if not 0 <= target_fraction <= 1:
        raise ValidationError("target fraction must be in [0, 1]")
    if target_fraction == 0:
        return float(max(0.0, np.nextafter(u.min(), -np.inf)))
    return float(np.quantile(u, target_fraction, method="linear"))


class ThresholdSchedule:
    """Adaptive threshold: zero during warm-up, then a quantile of a sliding window.

    The window keeps the embeddings of the last ``window`` decided samples
    and re-scores them with the current critic at each refresh, so the
    quantile tracks the uncertainty scale the next decisions will see.
    Warm-up counts trained (untrusted) samples.
    """

    def __init__(self, target_fraction: float = 0.5, window: int = 256, warmup: int = 500):
        self.target_fraction = float(target_fraction)
        self.recent = deque(maxlen=int(window))
        self.warmup = int(warmup)
        self.trained = 0
        self.tau = 0.0

    def observe(self, embeddings):
        for e in np.asarray(embeddings, dtype=np.float64):
            self.recent.append(e)

    def count_trained(self, n: int):
        self.trained += int(n)

    def refresh(self, critic: CriticPair) -> float:
        if self.trained < self.warmup or not self.recent:
            self.tau = 0.0
        else:
            _, u = predict_batch(critic, np.stack(self.recent))
            self.tau = adapt_threshold(u, self.target_fraction)
        return self.tau

    def to_dict(self):
        return {"target_fraction": self.target_fraction, "window": self.recent.maxlen, "warmup": self.warmup,
                "trained": self.trained, "tau": self.tau,
                "recent": [np.flatnonzero(e).tolist() if np.all((e == 0) | (e == 1)) else e.tolist()
                           for e in self.recent],
                "width": len(self.recent[0]) if self.recent else 0}

    @classmethod
    def from_dict(cls, d):
        out = cls(d["target_fraction"], d["window"], d["warmup"])
        out.trained, out.tau = int(d["trained"]), float(d["tau"])
        for idx in d["recent"]:
            e = np.zeros(int(d["width"]))
            e[np.asarray(idx, dtype=np.int64)] = 1.0
            out.recent.append(e)
        return out


@dataclass
class FinalizedBatch:
    items: list
    trusted: list
    discarded: int
    draws: int

    @property
    def trusted_count(self) -> int:
        return sum(self.trusted)


def enforce_trust_constraint(stream, batch_size: int) -> FinalizedBatch:
    """Pull ``(item, trusted)`` pairs until ``batch_size`` are accepted.

    At most ``batch_size // 2`` trusted items are kept; later trusted items
    are discarded and the stream is drawn again.  More than ``10 * batch_size``
    draws raises :class:`ConstraintStarvation`.
    """
    if batch_size < 1:
        raise ValidationError("batch size must be >= 1")
    quota = batch_size // 2
    limit = 10 * batch_size
    items, flags = [], []
    n_trusted = discarded = draws = 0
    it = iter(stream)
    while len(items) < batch_size:
        if draws >= limit:
            raise ConstraintStarvation(f"batch of {batch_size} not filled after {draws} draws "
                                       f"({n_trusted} trusted, {len(items) - n_trusted} untrusted)")
        try:
            item, trusted = next(it)
        except StopIteration:
            raise ConstraintStarvation(f"sample stream ended after {draws} draws") from None
        draws += 1
        if trusted:
            if n_trusted >= quota:
                discarded += 1
                continue
            n_trusted += 1
        items.append(item)
        flags.append(bool(trusted))
    return FinalizedBatch(items, flags, discarded, draws)


def save_critic(critic: CriticPair, path):
    nn.save_params(path, critic.params)
    with open(f"{path}.json", "w") as fh:
        json.dump({"schema_width": critic.schema_width, "update_counter": critic.update_counter,
                   "hidden": critic.hidden, "layers": critic.layers}, fh, sort_keys=True)


def load_critic(path) -> CriticPair:
    meta = _read_sidecar(path)
    spec = nn.MlpSpec(int(meta["schema_width"]), int(meta.get("hidden", 200)), int(meta.get("layers", 4)), 1)
    params = nn.load_params(path, nn.ParamVector(critic_layout(spec)))
    return CriticPair(spec.in_dim, params, spec.hidden, spec.layers, update_counter=int(meta["update_counter"]))


def _read_sidecar(path) -> dict:
    side = f"{path}.json"
    if not os.path.exists(side):
        raise TransferError(f"critic checkpoint {path} has no metadata sidecar")
    with open(side) as fh:
        return json.load(fh)


def warm_start(critic: CriticPair, checkpoint_path) -> CriticPair:
    """Load V and U weights from a previous experiment into ``critic``'s shape.

    The embedding width must match; the update counter and optimizer state
    start fresh.
    """
    meta = _read_sidecar(checkpoint_path)
    if int(meta["schema_width"]) != critic.schema_width:
        raise TransferError(f"checkpoint embedding width {meta['schema_width']} != {critic.schema_width}")
    if int(meta.get("hidden", critic.hidden)) != critic.hidden or int(meta.get("layers", critic.layers)) != critic.layers:
        raise TransferError("checkpoint layer spec differs from the target critic")
    params = nn.load_params(checkpoint_path, nn.ParamVector(critic_layout(critic.spec)))
    return CriticPair(critic.schema_width, params, critic.hidden, critic.layers, critic.lr, 0)
