"""Dense numeric substrate: parameters, a tape autodiff, MLP/LSTM, Adam.

Everything runs in float64 numpy.  Networks are written against
:class:`Tensor` so the same forward code serves inference and
reverse-mode differentiation.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError, NumericError, ShapeError


# ---------------------------------------------------------------------------
# Seeding


def make_rng(seed: int, *stream) -> np.random.Generator:
    """PCG64 generator for an independent, named sub-stream of ``seed``.

    Stream components may be ints or strings; strings are hashed with crc32
    so the mapping is stable across interpreter runs.
    """
    key = tuple(int(s) if isinstance(s, (int, np.integer)) else zlib.crc32(str(s).encode()) for s in stream)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# Parameter container


class ParamVector:
    """Flat float64 vector with an ordered table of named, shaped segments."""

    def __init__(self, layout, values=None):
        self.layout = {name: tuple(int(d) for d in shape) for name, shape in dict(layout).items()}
        self._offsets = {}
        off = 0
        for name, shape in self.layout.items():
            size = math.prod(shape)
            self._offsets[name] = (off, size)
            off += size
        self.size = off
        if values is None:
            self.values = np.zeros(off)
        else:
            values = np.asarray(values, dtype=np.float64).reshape(-1)
            if values.size != off:
                raise DimensionError(f"layout needs {off} values, got {values.size}")
            self.values = values

    def __getitem__(self, name) -> np.ndarray:
        off, size = self._offsets[name]
        return self.values[off:off + size].reshape(self.layout[name])

    def __setitem__(self, name, value):
        self[name][...] = value

    def __contains__(self, name):
        return name in self.layout

    def __len__(self):
        return self.size

    def names(self):
        return list(self.layout)

    def segments(self):
        """Yield ``(name, offset, length, shape)`` in layout order."""
        for name, shape in self.layout.items():
            off, size = self._offsets[name]
            yield name, off, size, shape

    def segment_of(self, index: int) -> str:
        for name, off, size, _ in self.segments():
            if off <= index < off + size:
                return name
        raise IndexError(index)

    def copy(self) -> "ParamVector":
        return self.like(self.values.copy())

    def like(self, values) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != self.size:
            raise DimensionError(f"layout needs {self.size} values, got {values.size}")
        out = object.__new__(ParamVector)
        out.layout, out._offsets, out.size, out.values = self.layout, self._offsets, self.size, values
        return out

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def subset(self, prefix: str) -> "ParamVector":
        names = [n for n in self.layout if n.startswith(prefix)]
        out = ParamVector({n: self.layout[n] for n in names})
        for n in names:
            out[n] = self[n]
        return out

    def assert_finite(self):
        for name, off, size, _ in self.segments():
            if not np.all(np.isfinite(self.values[off:off + size])):
                raise NumericError(f"non-finite values in segment {name!r}")

    def __repr__(self):
        return f"ParamVector({len(self.layout)} segments, {self.size} values)"


def concat_params(*parts: ParamVector) -> ParamVector:
    layout = {}
    for p in parts:
        layout.update(p.layout)
    return ParamVector(layout, np.concatenate([p.values for p in parts]) if parts else None)


# ---------------------------------------------------------------------------
# Tape autodiff


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the tape."""
        if self.value.size != 1:
            raise DimensionError("backward() needs a scalar output")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.value)


def _node(value, parents, fn):
    rg = any(p.requires_grad for p in parents)
    return Tensor(value, parents if rg else (), fn if rg else None, rg)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def back(g):
        if av.ndim == 1:
            ga = g @ bv.T
            gb = np.outer(av, g)
        else:
            ga = g @ bv.T
            gb = av.T @ g
        return ga, gb

    return _node(av @ bv, (a, b), back)


def tanh(a):
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def sigmoid(a):
    y = _sigmoid(a.value)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,))


def log(a):
    x = a.value
    return _node(np.log(x), (a,), lambda g: (g / x,))


def abs_(a):
    """|x| with subgradient 0 at exactly x == 0."""
    x = a.value
    return _node(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def softplus(a):
    x = a.value
    return _node(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def relu(a):
    x = a.value
    return _node(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def prelu(a, slope):
    """max(0,x) + slope*min(0,x); ``slope`` is a scalar Tensor."""
    slope = as_tensor(slope)
    x, s = a.value, slope.value
    neg_mask = x < 0
    y = np.where(neg_mask, s * x, x)

    def back(g):
        gx = g * np.where(neg_mask, s, 1.0)
        gs = np.sum(g * np.where(neg_mask, x, 0.0)).reshape(s.shape)
        return gx, gs

    return _node(y, (a, slope), back)


def sum_(a, axis=None, keepdims=False):
    x = a.value
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _node(np.sum(x, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis) * (1.0 / n)


def log_softmax(a):
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    y = x - lse

    def back(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(y, (a,), back)


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.value.shape), _unbroadcast(g * ~pick_a, b.value.shape)))


def clip(a, lo, hi):
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def concat(parts: Sequence[Tensor], axis=-1):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def index(a, idx):
    x = a.value
    out = x[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in parts)

    def back(g):
        full = np.zeros_like(x)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(out, (a,), back)


def pick(a, cols):
    """Row-wise gather ``a[i, cols[i]]`` for a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.value.shape[0])
    return index(a, (rows, cols))


def reshape(a, shape):
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# Gradient API


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def tensor_params(params: ParamVector, requires_grad=True) -> dict:
    make = leaf if requires_grad else Tensor
    return {name: make(params[name]) for name in params.layout}


def value_of(loss: LossFn, params: ParamVector) -> float:
    return float(loss(tensor_params(params, requires_grad=False)).value)


def value_and_grad(loss: LossFn, params: ParamVector):
    tp = tensor_params(params)
    out = loss(tp)
    v = float(out.value)
    if not np.isfinite(v):
        raise NumericError(f"loss is not finite ({v})")
    out.backward()
    g = np.zeros(params.size)
    for name, off, size, _ in params.segments():
        gt = tp[name].grad
        if gt is None:
            continue
        gt = np.asarray(gt).reshape(-1)
        if not np.all(np.isfinite(gt)):
            raise NumericError(f"non-finite gradient in segment {name!r}")
        g[off:off + size] = gt
    return v, params.like(g)


def grad(loss: LossFn, params: ParamVector) -> ParamVector:
    """Reverse-mode dLoss/dparams with the same layout as ``params``."""
    return value_and_grad(loss, params)[1]


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    passed: bool
    checked: int = 0
    worst_segment: str = ""


def check_gradients(loss: LossFn, params: ParamVector, tolerance: float = 1e-4, *, n_coords: int = 100,
                    full_limit: int = 200, h: float = 1e-5, seed: int = 0, grad_fn=None,
                    floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Every coordinate is checked when the vector has at most ``full_limit``
    entries, otherwise a seeded subset of ``n_coords`` (at least 100).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if tolerance <= 0:
        raise ConfigError("tolerance must be > 0")
    analytic = (grad_fn or (lambda p: grad(loss, p)))(params).values
    if params.size <= full_limit:
        coords = np.arange(params.size)
    else:
        rng = make_rng(seed, "gradcheck")
        coords = np.sort(rng.choice(params.size, size=min(params.size, max(n_coords, 100)), replace=False))
    worst, worst_i = 0.0, int(coords[0]) if len(coords) else -1
    probe = params.copy()
    for i in coords:
        orig = probe.values[i]
        probe.values[i] = orig + h
        fp = value_of(loss, probe)
        probe.values[i] = orig - h
        fm = value_of(loss, probe)
        probe.values[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if rel > worst:
            worst, worst_i = rel, int(i)
    seg = params.segment_of(worst_i) if worst_i >= 0 else ""
    return GradCheckReport(worst, worst_i, worst < tolerance, len(coords), seg)


# ---------------------------------------------------------------------------
# Layers


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: int = 200
    layers: int = 4
    out_dim: int = 1
    activation: str = "prelu"

    def dims(self):
        return [self.in_dim] + [self.hidden] * self.layers + [self.out_dim]


def mlp_layout(spec: MlpSpec, prefix: str = "mlp") -> dict:
    layout = {}
    dims = spec.dims()
    for i in range(spec.layers):
        layout[f"{prefix}.{i}.W"] = (dims[i], dims[i + 1])
        layout[f"{prefix}.{i}.b"] = (dims[i + 1],)
        if spec.activation == "prelu":
            layout[f"{prefix}.{i}.a"] = (1,)
    layout[f"{prefix}.out.W"] = (dims[-2], dims[-1])
    layout[f"{prefix}.out.b"] = (dims[-1],)
    return layout


def init_mlp(params: ParamVector, spec: MlpSpec, rng: np.random.Generator, prefix: str = "mlp"):
    """He-uniform weights, zero biases, PReLU slopes at 0.25 (in place)."""
    dims = spec.dims()
    for i in range(spec.layers + 1):
        tag = "out" if i == spec.layers else str(i)
        fan_in = dims[i]
        bound = np.sqrt(6.0 / fan_in) if tag != "out" else np.sqrt(1.0 / fan_in)
        params[f"{prefix}.{tag}.W"] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
        params[f"{prefix}.{tag}.b"] = 0.0
        if tag != "out" and spec.activation == "prelu":
            params[f"{prefix}.{tag}.a"] = 0.25


_ACTIVATIONS = {"linear": lambda x: x, "tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def mlp_apply(p: Mapping[str, Tensor], x: Tensor, spec: MlpSpec, prefix: str = "mlp") -> Tensor:
    h = as_tensor(x)
    if h.value.shape[-1] != spec.in_dim:
        raise DimensionError(f"{prefix}.0.W expects input width {spec.in_dim}, got {h.value.shape[-1]}")
    for i in range(spec.layers + 1):
        tag = "out" if i == spec.layers else str(i)
        W = p[f"{prefix}.{tag}.W"]
        if W.value.shape[0] != h.value.shape[-1]:
            raise DimensionError(f"segment {prefix}.{tag}.W has {W.value.shape[0]} rows, input width {h.value.shape[-1]}")
        h = h @ W + p[f"{prefix}.{tag}.b"]
        if tag != "out":
            if spec.activation == "prelu":
                h = prelu(h, p[f"{prefix}.{tag}.a"])
            else:
                h = _ACTIVATIONS[spec.activation](h)
    return h


def mlp_forward(params: ParamVector, input, arch: MlpSpec, prefix: str = "mlp") -> np.ndarray:
    return mlp_apply(tensor_params(params, requires_grad=False), Tensor(input), arch, prefix).value


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        self.hidden = np.asarray(self.hidden, dtype=np.float64)
        self.cell = np.asarray(self.cell, dtype=np.float64)
        if self.hidden.shape != self.cell.shape:
            raise DimensionError("hidden and cell lengths differ")

    @classmethod
    def zeros(cls, hidden_size, batch=None):
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))


def lstm_layout(in_dim: int, hidden: int, prefix: str = "lstm") -> dict:
    # gate column order: input, forget, candidate, output
    return {f"{prefix}.W": (in_dim + hidden, 4 * hidden), f"{prefix}.b": (4 * hidden,)}


def lstm_apply(p: Mapping[str, Tensor], x: Tensor, h: Tensor, c: Tensor, prefix: str = "lstm"):
    W = p[f"{prefix}.W"]
    H = W.value.shape[1] // 4
    z = concat([as_tensor(x), as_tensor(h)], axis=-1) @ W + p[f"{prefix}.b"]
    if z.value.ndim == 1:
        zi, zf, zg, zo = (z[k * H:(k + 1) * H] for k in range(4))
    else:
        zi, zf, zg, zo = (z[:, k * H:(k + 1) * H] for k in range(4))
    c_next = sigmoid(zf) * c + sigmoid(zi) * tanh(zg)
    h_next = sigmoid(zo) * tanh(c_next)
    return h_next, c_next


def lstm_step(params: ParamVector, input, state: LstmState, prefix: str = "lstm"):
    """One LSTM cell step; returns ``(output, next_state)``."""
    H = params[f"{prefix}.W"].shape[1] // 4
    if state.hidden.shape[-1] != H:
        raise DimensionError(f"state width {state.hidden.shape[-1]} != hidden size {H}")
    if not (np.all(np.isfinite(state.hidden)) and np.all(np.isfinite(state.cell))):
        raise NumericError("non-finite LSTM state")
    tp = tensor_params(params, requires_grad=False)
    h, c = lstm_apply(tp, Tensor(input), Tensor(state.hidden), Tensor(state.cell), prefix)
    return h.value, LstmState(h.value, c.value)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def apply_update(params: ParamVector, grads: ParamVector, state: AdamState, hyper: AdamConfig):
    """One Adam step; returns fresh ``(params, state)`` and leaves inputs intact."""
    if hyper.lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {hyper.lr}")
    if not params.same_layout(grads):
        raise ShapeError("parameter and gradient layouts differ")
    g = grads.values
    if hyper.max_grad_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > hyper.max_grad_norm:
            g = g * (hyper.max_grad_norm / norm)
    t = state.t + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * g
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * g * g
    m_hat = m / (1 - hyper.beta1 ** t)
    v_hat = v / (1 - hyper.beta2 ** t)
    new = params.values - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return params.like(new), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Binary checkpoints

CKPT_MAGIC = b"FNASCKPT"
CKPT_VERSION = 1


def params_to_bytes(params: ParamVector) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params.layout))]
    for name, off, size, _ in params.segments():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", off, size))
    out.append(params.values.astype("<f8").tobytes())
    return b"".join(out)


def params_from_bytes(data: bytes, template: ParamVector | None = None) -> ParamVector:
    """Parse a checkpoint; with ``template`` the segment table must match it."""
    try:
        if data[:8] != CKPT_MAGIC:
            raise CheckpointError("bad magic: not an FNASCKPT file")
        version, n = struct.unpack_from("<II", data, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        table = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode()
            if len(name.encode()) != ln:
                raise CheckpointError("truncated segment table")
            pos += ln
            off, size = struct.unpack_from("<QQ", data, pos)
            pos += 16
            table.append((name, off, size))
        total = sum(s for _, _, s in table)
        body = data[pos:]
        if len(body) != 8 * total:
            raise CheckpointError(f"expected {8 * total} payload bytes, found {len(body)}")
        flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if template is None:
        return ParamVector({name: (size,) for name, _, size in table}, flat)
    expected = [(name, off, size) for name, off, size, _ in template.segments()]
    if [t[0] for t in table] != [e[0] for e in expected]:
        raise ShapeError("checkpoint segment names do not match the expected layout")
    for (name, off, size), (_, eoff, esize) in zip(table, expected):
        if size != esize or off != eoff:
            raise ShapeError(f"segment {name!r} has {size} values, expected {esize}")
    return template.like(flat)


def save_params(path, params: ParamVector):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path, template: ParamVector | None = None) -> ParamVector:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    return params_from_bytes(data, template)


def adam_to_params(state: AdamState, layout: ParamVector) -> ParamVector:
    """Pack Adam moments into a checkpointable vector (segments ``m.*``, ``v.*``)."""
    lay = {f"m.{k}": s for k, s in layout.layout.items()}
    lay.update({f"v.{k}": s for k, s in layout.layout.items()})
    return ParamVector(lay, np.concatenate([state.m, state.v]))


def adam_from_params(packed: ParamVector, t: int) -> AdamState:
    n = packed.size // 2
    return AdamState(packed.values[:n].copy(), packed.values[n:].copy(), t)
