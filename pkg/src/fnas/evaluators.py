"""Accuracy/latency backends and the latency-penalized reward.

Three backends share the ``evaluate(tokens, sample_id, init=None)``
signature used by the orchestrator:

* :class:`SurrogateEvaluator` - closed-form logistic surrogate with a known,
  enumerable optimum;
* :class:`TabularEvaluator` - CSV lookup table (``tokens,accuracy,latency``);
* :class:`ToyTrainer` - trains a small block-structured dense network on a
  2-D rings problem and returns per-block checkpoints.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .errors import DomainError, LookupFailure, TrainingError, ValidationError
from .search_space import (ArchitectureTokens, BlockTokens, SpaceSchema, expand_batch, split_blocks,
                           tokens_from_key)


@dataclass(frozen=True)
class RewardConfig:
    target_latency: float = 30.0
    alpha: float = -0.07

    def __post_init__(self):
        if not self.target_latency > 0:
            raise DomainError("target latency must be > 0")
        if self.alpha > 0:
            raise DomainError("alpha must be <= 0")


def reward(acc, lat, cfg: RewardConfig):
    """ACC * (LAT / T) ** alpha.  Works elementwise on arrays."""
    lat_arr = np.asarray(lat, dtype=np.float64)
    if np.any(lat_arr <= 0):
        raise DomainError(f"latency must be > 0, got {lat}")
    out = np.asarray(acc, dtype=np.float64) * (lat_arr / cfg.target_latency) ** cfg.alpha
    return float(out) if out.ndim == 0 else out


@dataclass
class EvalResult:
    accuracy: float
    latency: float
    cost_units: int = 1
    checkpoint: list | None = None
    history: list | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise DomainError(f"accuracy {self.accuracy} outside [0, 1]")
        if not self.latency > 0:
            raise DomainError("latency must be > 0")
        if self.cost_units < 0:
            raise DomainError("cost_units must be >= 0")


# ---------------------------------------------------------------------------
# Latency model


@dataclass(frozen=True)
class CostTable:
    """Per-block latency = op[o] * kernel[k] * width[w]; absent groups count as 1."""

    base: float = 10.0
    op: tuple = (1.0, 1.5, 2.0, 2.5)
    kernel: tuple = (1.0, 1.5, 2.0)
    width: tuple = (1.0, 2.0, 3.0, 4.0)

    def to_dict(self):
        return {"base": self.base, "op": list(self.op), "kernel": list(self.kernel), "width": list(self.width)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["base"]), tuple(map(float, d["op"])), tuple(map(float, d["kernel"])),
                   tuple(map(float, d["width"])))

    @classmethod
    def for_schema(cls, schema: SpaceSchema, base: float = 10.0):
        def sizes(name):
            v = [g.vocab for b in schema.blocks for g in b.groups if g.name == name]
            return max(v) if v else 1

        return cls(base,
                   tuple(1.0 + 0.5 * i for i in range(sizes("op"))),
                   tuple(1.0 + 0.5 * i for i in range(sizes("kernel"))),
                   tuple(1.0 + 1.0 * i for i in range(sizes("width"))))

    def block_cost(self, block: BlockTokens) -> float:
        names = {g.name for g in block.schema.blocks[block.block_index].groups}
        c = 1.0
        for group, table in (("op", self.op), ("kernel", self.kernel), ("width", self.width)):
            if group in names:
                c *= table[block.value(group)]
        return c


def latency_model(tokens: ArchitectureTokens, table: CostTable | None = None) -> float:
    table = table or CostTable.for_schema(tokens.schema)
    return table.base + sum(table.block_cost(b) for b in split_blocks(tokens))


def latency_batch(token_matrix, schema: SpaceSchema, table: CostTable) -> np.ndarray:
    toks = np.asarray(token_matrix, dtype=np.int64)
    total = np.full(toks.shape[0], table.base)
    for b in range(schema.num_blocks):
        c = np.ones(toks.shape[0])
        for group, tab in (("op", table.op), ("kernel", table.kernel), ("width", table.width)):
            t = schema.group_index(b, group)
            if t is not None:
                c *= np.asarray(tab)[toks[:, t]]
        total += c
    return total


# ---------------------------------------------------------------------------
# Synthetic surrogate


def _surrogate_weights(schema: SpaceSchema, rng: np.random.Generator, scale: float) -> np.ndarray:
    w = rng.normal(0.0, scale, size=schema.width)
    for off, v in zip(schema.offsets, schema.vocabs):
        w[off:off + v] -= w[off:off + v].mean()
    return w


def _interaction_pairs(schema: SpaceSchema, rng: np.random.Generator, n: int, strength: float):
    pairs = []
    used = set()
    while len(pairs) < n and schema.length >= 2:
        ga, gb = sorted(rng.choice(schema.length, size=2, replace=False).tolist())
        ia = schema.offsets[ga] + int(rng.integers(schema.vocabs[ga]))
        ib = schema.offsets[gb] + int(rng.integers(schema.vocabs[gb]))
        if (ia, ib) in used:
            continue
        used.add((ia, ib))
        pairs.append((ia, ib, float(rng.uniform(0.6, 1.0) * strength)))
    return pairs


class SurrogateEvaluator:
    """Logistic surrogate: acc = sigmoid(bias + w . e + sum_k c_k e[i_k] e[j_k]).

    ``w`` mixes a shared "family" component with a task-specific one, which
    lets two tasks share architecture knowledge to a controlled degree.
    """

    def __init__(self, schema: SpaceSchema, weights, interactions, bias: float = 0.6, noise: float = 0.0,
                 seed: int = 0, cost_table: CostTable | None = None):
        self.schema = schema
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (schema.width,):
            raise ValidationError(f"surrogate weights need length {schema.width}")
        self.interactions = [(int(i), int(j), float(c)) for i, j, c in interactions]
        self.bias = float(bias)
        self.noise = float(noise)
        self.seed = int(seed)
        self.cost_table = cost_table or CostTable.for_schema(schema)

    @classmethod
    def from_seed(cls, schema: SpaceSchema, seed: int, *, family_seed: int | None = None, share: float = 0.0,
                  scale: float = 0.4, n_interactions: int = 3, interaction_strength: float = 1.0,
                  width_trend: float = 0.3, noise: float = 0.0, bias: float = 0.6,
                  cost_table: CostTable | None = None):
        w = _surrogate_weights(schema, nn.make_rng(seed, "surrogate", "w"), scale)
        pair_rng = nn.make_rng(seed, "surrogate", "pairs")
        if family_seed is not None and share > 0:
            wf = _surrogate_weights(schema, nn.make_rng(family_seed, "surrogate", "w"), scale)
            w = math.sqrt(share) * wf + math.sqrt(1.0 - share) * w
            pair_rng = nn.make_rng(family_seed, "surrogate", "pairs")
        for b in range(schema.num_blocks):
            t = schema.group_index(b, "width")
            if t is not None and schema.vocabs[t] > 1:
                v = schema.vocabs[t]
                ramp = width_trend * (np.arange(v) / (v - 1) - 0.5)
                w[schema.offsets[t]:schema.offsets[t] + v] += ramp
        pairs = _interaction_pairs(schema, pair_rng, n_interactions, interaction_strength)
        return cls(schema, w, pairs, bias=bias, noise=noise, seed=seed, cost_table=cost_table)

    def to_dict(self):
        return {"weights": self.weights.tolist(), "interactions": [list(p) for p in self.interactions],
                "bias": self.bias, "noise": self.noise, "seed": self.seed, "cost_table": self.cost_table.to_dict()}

    def logit_batch(self, token_matrix) -> np.ndarray:
        e = expand_batch(token_matrix, self.schema)
        z = self.bias + e @ self.weights
        for i, j, c in self.interactions:
            z = z + c * e[:, i] * e[:, j]
        return z

    def logit(self, tokens: ArchitectureTokens) -> float:
        return float(self.logit_batch([tokens.tokens])[0])

    def accuracy_batch(self, token_matrix) -> np.ndarray:
        return nn._sigmoid(self.logit_batch(token_matrix))

    def latency_batch(self, token_matrix) -> np.ndarray:
        return latency_batch(token_matrix, self.schema, self.cost_table)

    def evaluate(self, tokens: ArchitectureTokens, sample_id: int = 0, init=None) -> EvalResult:
        return surrogate_eval(self, tokens, noise_seed=sample_id)


def surrogate_eval(surrogate: SurrogateEvaluator, tokens: ArchitectureTokens, noise_seed: int = 0) -> EvalResult:
    acc = float(surrogate.accuracy_batch([tokens.tokens])[0])
    if surrogate.noise > 0:
        acc += surrogate.noise * float(nn.make_rng(surrogate.seed, "noise", noise_seed).normal())
        acc = min(1.0, max(0.0, acc))
    return EvalResult(acc, latency_model(tokens, surrogate.cost_table), cost_units=1)


# ---------------------------------------------------------------------------
# Tabular backend

TABLE_HEADER = ["tokens", "accuracy", "latency"]


class TabularEvaluator:
    def __init__(self, schema: SpaceSchema, rows: dict):
        self.schema = schema
        self.rows = rows

    @classmethod
    def load(cls, path, schema: SpaceSchema):
        with open(path, newline="") as fh:
            return cls.from_text(fh.read(), schema)

    @classmethod
    def from_text(cls, text: str, schema: SpaceSchema):
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != TABLE_HEADER:
            raise ValidationError(f"benchmark header must be {','.join(TABLE_HEADER)}")
        rows = {}
        for rec in reader:
            if not rec:
                continue
            key = tokens_from_key(rec[0], schema).key()
            rows[key] = (float(rec[1]), float(rec[2]))
        return cls(schema, rows)

    def __len__(self):
        return len(self.rows)

    def evaluate(self, tokens: ArchitectureTokens, sample_id: int = 0, init=None) -> EvalResult:
        return tabular_eval(self, tokens)


def tabular_eval(table: TabularEvaluator, tokens: ArchitectureTokens) -> EvalResult:
    key = tokens.key()
    try:
        acc, lat = table.rows[key]
    except KeyError:
        raise LookupFailure(key) from None
    return EvalResult(acc, lat, cost_units=1)


def write_table(path_or_file, keys: Sequence[str], accuracy, latency):
    """Write the ``tokens,accuracy,latency`` CSV with round-trippable floats."""
    lines = [",".join(TABLE_HEADER)]
    for k, a, l in zip(keys, accuracy, latency):
        lines.append(f"{k},{float(a)!r},{float(l)!r}")
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Toy trainer


@dataclass
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    seed: int = 0


def make_rings(seed: int = 0, n_train: int = 2000, n_val: int = 500, rings: int = 4, noise: float = 0.12,
               rotation: float = 0.0) -> ToyDataset:
    """Concentric 2-D rings with alternating class labels.

    Ring ``r`` has radius ``r + 1`` (then scaled to unit outer radius) and
    gaussian radial jitter ``noise``; ``rotation`` only changes the angular
    sampling, giving a related task with a different sample.
    """
    rng = nn.make_rng(seed, "rings")
    n = n_train + n_val
    ring = rng.integers(0, rings, size=n)
    radius = (ring + 1 + rng.normal(0.0, noise * rings, size=n)) / rings
    theta = rng.uniform(0, 2 * np.pi, size=n) + rotation
    x = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1) * 2.0
    y = (ring % 2).astype(np.int64)
    return ToyDataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], seed)


TOY_OPS = ("relu", "tanh", "sigmoid", "linear")
LEAK = 0.1
TOY_WIDTHS = (4, 8, 16, 32)
TOPOLOGIES = ("parallel", "stacked")


@dataclass(frozen=True)
class BlockShape:
    activation: str
    depth: int
    width: int
    skip: bool


@dataclass(frozen=True)
class ToyNet:
    """Decoded network: per-block shapes plus how blocks are wired.

    ``stacked`` chains blocks (block b reads block b-1's output);
    ``parallel`` runs every block as a branch on the raw input and
    concatenates branch outputs before the classifier head.
    """

    shapes: tuple
    topology: str = "parallel"
    in_dim: int = 2

    def block_input(self, b):
        if self.topology == "parallel" or b == 0:
            return self.in_dim
        return self.shapes[b - 1].width

    @property
    def feature_dim(self):
        if self.topology == "parallel":
            return sum(s.width for s in self.shapes)
        return self.shapes[-1].width


def decode_block(block: BlockTokens, widths=TOY_WIDTHS, ops=TOY_OPS) -> BlockShape:
    return BlockShape(ops[block.value("op") % len(ops)],
                      1 + block.value("kernel"),
                      widths[block.value("width") % len(widths)],
                      bool(block.value("skip")))


def toy_layout(tokens: ArchitectureTokens, widths=TOY_WIDTHS, topology: str = "parallel", in_dim: int = 2,
               classes: int = 2, ops=TOY_OPS):
    if topology not in TOPOLOGIES:
        raise ValidationError(f"unknown topology {topology!r}")
    net = ToyNet(tuple(decode_block(blk, widths, ops) for blk in split_blocks(tokens)), topology, in_dim)
    layout = {}
    for b, s in enumerate(net.shapes):
        d = net.block_input(b)
        for l in range(s.depth):
            layout[f"block{b}.{l}.W"] = (d, s.width)
            layout[f"block{b}.{l}.b"] = (s.width,)
            d = s.width
    layout["head.W"] = (net.feature_dim, classes)
    layout["head.b"] = (classes,)
    return layout, net


def _fresh_init(params: nn.ParamVector, rng: np.random.Generator):
    for name, shape in params.layout.items():
        if name.endswith(".W"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = 0.0


def _crop_identity(d_in, d_out):
    P = np.zeros((d_in, d_out))
    k = min(d_in, d_out)
    P[np.arange(k), np.arange(k)] = 1.0
    return P


def toy_forward(p, x, net: ToyNet):
    """Autodiff forward pass; the reference for :func:`toy_loss_grad`."""
    x = nn.as_tensor(x)
    acts = {"relu": nn.relu, "tanh": nn.tanh, "sigmoid": nn.sigmoid, "linear": lambda z: z,
            "leaky": lambda z: nn.prelu(z, nn.Tensor(np.array(LEAK)))}
    h, outs = x, []
    for b, s in enumerate(net.shapes):
        inp = x if net.topology == "parallel" else h
        h = inp
        for l in range(s.depth):
            h = acts[s.activation](h @ p[f"block{b}.{l}.W"] + p[f"block{b}.{l}.b"])
        if s.skip:
            h = h + inp @ nn.Tensor(_crop_identity(inp.value.shape[-1], s.width))
        outs.append(h)
    feats = nn.concat(outs, axis=-1) if net.topology == "parallel" else h
    return feats @ p["head.W"] + p["head.b"]


@dataclass
class ToyTrainerConfig:
    lr: float = 0.01
    batch_size: int = 100
    seed: int = 0
    widths: tuple = TOY_WIDTHS
    topology: str = "parallel"
    ops: tuple = TOY_OPS


class ToyTrainer:
    """Evaluator that trains each architecture on a :class:`ToyDataset`."""

    def __init__(self, schema: SpaceSchema, data: ToyDataset, epochs: int = 5, config: ToyTrainerConfig | None = None,
                 cost_table: CostTable | None = None, task: str = "toy"):
        self.schema = schema
        self.data = data
        self.epochs = int(epochs)
        self.config = config or ToyTrainerConfig()
        self.cost_table = cost_table or CostTable.for_schema(schema)
        self.task = task

    def evaluate(self, tokens: ArchitectureTokens, sample_id: int = 0, init=None) -> EvalResult:
        return toy_train(tokens, init, self.epochs, self.data, seed=(self.config.seed, sample_id),
                         config=self.config, cost_table=self.cost_table, task=self.task)


def init_toy_params(tokens: ArchitectureTokens, rng: np.random.Generator, init: dict | None = None,
                    config: ToyTrainerConfig | None = None):
    """Fresh parameters, with per-block ``init`` payloads copied in where given.

    ``init`` maps block index -> {segment suffix: array}.  Overlapping
    sub-tensors are copied (larger dims truncated); the rest stays fresh.
    """
    config = config or ToyTrainerConfig()
    layout, net = toy_layout(tokens, config.widths, config.topology, ops=config.ops)
    params = nn.ParamVector(layout)
    _fresh_init(params, rng)
    for b, payload in (init or {}).items():
        for suffix, arr in payload.items():
            name = f"block{b}.{suffix}"
            if name not in params:
                continue
            target = params[name]
            arr = np.asarray(arr)
            region = tuple(slice(0, min(a, t)) for a, t in zip(arr.shape, target.shape))
            target[region] = arr[region]
    return params, net


def block_payloads(params: nn.ParamVector, n_blocks: int) -> list:
    out = []
    for b in range(n_blocks):
        pre = f"block{b}."
        out.append({n[len(pre):]: params[n].copy() for n in params.layout if n.startswith(pre)})
    return out


def toy_train(tokens: ArchitectureTokens, init: dict | None, epochs: int, data: ToyDataset, *, seed=0,
              config: ToyTrainerConfig | None = None, cost_table: CostTable | None = None,
              task: str = "toy", record_history: bool = False) -> EvalResult:
    """Mini-batch Adam training of the decoded network; returns val accuracy.

    ``checkpoint`` holds one :class:`~fnas.akp.BlockCheckpoint` per block,
    tagged with ``train_iterations = epochs``.
    """
    from .akp import BlockCheckpoint

    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    config = config or ToyTrainerConfig()
    seed_parts = seed if isinstance(seed, tuple) else (seed,)
    rng = nn.make_rng(seed_parts[0], "toy", tokens.key(), *seed_parts[1:])
    params, net = init_toy_params(tokens, rng, init, config)
    views = _views(params)
    grad = params.like(np.zeros(params.size))
    gviews = _views(grad)
    adam = _InPlaceAdam(params.size, nn.AdamConfig(lr=config.lr))
    n = len(data.y_train)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = _loss_grad_into(views, gviews, net, data.x_train[idx], data.y_train[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad.values)):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            adam.step(params.values, grad.values)
        if record_history:
            history.append(toy_accuracy(params, net, data))
    acc = history[-1] if record_history else toy_accuracy(params, net, data)
    blocks = split_blocks(tokens)
    payloads = block_payloads(params, len(blocks))
    ckpts = [BlockCheckpoint(blk.embedding(), payloads[b], epochs, task, b) for b, blk in enumerate(blocks)]
    lat = latency_model(tokens, cost_table or CostTable.for_schema(tokens.schema))
    return EvalResult(acc, lat, cost_units=epochs, checkpoint=ckpts, history=history or None)


def toy_accuracy(params: nn.ParamVector, net: ToyNet, data: ToyDataset) -> float:
    logits = _toy_logits(params, net, data.x_val)[0]
    return float(np.mean(np.argmax(logits, axis=1) == data.y_val))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return nn._sigmoid(z)
    if name == "leaky":
        return np.where(z > 0, z, LEAK * z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "leaky":
        return np.where(z > 0, 1.0, LEAK)
    return np.ones_like(z)


def _toy_logits(params: nn.ParamVector, net: ToyNet, x):
    h, outs, tapes = x, [], []
    for b, s in enumerate(net.shapes):
        inp = x if net.topology == "parallel" else h
        h = inp
        tape = []
        for l in range(s.depth):
            z = h @ params[f"block{b}.{l}.W"] + params[f"block{b}.{l}.b"]
            a = _act(s.activation, z)
            tape.append((h, z, a))
            h = a
        if s.skip:
            k = min(inp.shape[1], s.width)
            h = h.copy()
            h[:, :k] += inp[:, :k]
        outs.append(h)
        tapes.append(tape)
    feats = np.concatenate(outs, axis=1) if net.topology == "parallel" else h
    return feats @ params["head.W"] + params["head.b"], feats, tapes


def _block_backward(params, g, b, s, tape, dh):
    """Backprop ``dh`` through block ``b``; returns d(block input)."""
    d_skip = dh if s.skip else None
    for l in range(s.depth - 1, -1, -1):
        h_in, z, a = tape[l]
        dz = dh * _act_grad(s.activation, z, a)
        g[f"block{b}.{l}.W"][...] = h_in.T @ dz
        g[f"block{b}.{l}.b"][...] = dz.sum(axis=0)
        dh = dz @ params[f"block{b}.{l}.W"].T
    if d_skip is not None:
        k = min(dh.shape[1], s.width)
        dh = dh.copy()
        dh[:, :k] += d_skip[:, :k]
    return dh


def toy_loss_grad(params: nn.ParamVector, net: ToyNet, x, y):
    """Mean cross-entropy and its gradient, hand-differentiated.

    Mirrors :func:`toy_forward`; the tests check the two against each other.
    """
    g = params.like(np.zeros(params.size))
    loss = _loss_grad_into(_views(params), _views(g), net, x, y)
    return loss, g


def _views(params: nn.ParamVector) -> dict:
    return {name: params[name] for name in params.layout}


def _loss_grad_into(params: dict, g: dict, net: ToyNet, x, y) -> float:
    """Write the gradient into the views ``g`` (every segment is overwritten)."""
    logits, feats, tapes = _toy_logits(params, net, x)
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    n = len(y)
    rows = np.arange(n)
    loss = -float(logp[rows, y].mean())
    d = np.exp(logp)
    d[rows, y] -= 1.0
    d /= n
    g["head.W"][...] = feats.T @ d
    g["head.b"][...] = d.sum(axis=0)
    dfeat = d @ params["head.W"].T
    if net.topology == "parallel":
        off = 0
        for b, s in enumerate(net.shapes):
            _block_backward(params, g, b, s, tapes[b], dfeat[:, off:off + s.width])
            off += s.width
    else:
        dh = dfeat
        for b in range(len(net.shapes) - 1, -1, -1):
            dh = _block_backward(params, g, b, net.shapes[b], tapes[b], dh)
    return loss


class _InPlaceAdam:
    """Adam on a flat array, updated in place (the trainer's hot loop)."""

    def __init__(self, size: int, hyper: nn.AdamConfig):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.hyper = hyper

    def step(self, values: np.ndarray, g: np.ndarray):
        h = self.hyper
        self.t += 1
        self.m *= h.beta1
        self.m += (1 - h.beta1) * g
        self.v *= h.beta2
        self.v += (1 - h.beta2) * g * g
        m_hat = self.m / (1 - h.beta1 ** self.t)
        v_hat = self.v / (1 - h.beta2 ** self.t)
        values -= h.lr * m_hat / (np.sqrt(v_hat) + h.eps)
