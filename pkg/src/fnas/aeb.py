"""Architecture experience buffer: a tiny elite archive with softmax priorities."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CompositionError, EmptyBufferError, InsufficientEntries, ValidationError
from .search_space import ArchitectureTokens, SpaceSchema


@dataclass(frozen=True)
class BufferEntry:
    tokens: ArchitectureTokens
    reward: float
    behavior_log_prob: float
    step: int

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValidationError("buffer reward must be finite")
        if self.behavior_log_prob > 0:
            raise ValidationError("behavior log-prob must be <= 0")


@dataclass
class ExploitedDraw:
    entry: BufferEntry
    priority: float
    weight: float


@dataclass
class BufferState:
    capacity: int = 10
    beta: float = 0.0
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError("buffer capacity must be >= 1")

    def __len__(self):
        return len(self.entries)

    def to_dict(self):
        return {"capacity": self.capacity, "beta": self.beta,
                "entries": [{"tokens": list(e.tokens.tokens), "reward": e.reward,
                             "behavior_log_prob": e.behavior_log_prob, "step": e.step} for e in self.entries]}

    @classmethod
    def from_dict(cls, d, schema: SpaceSchema):
        entries = [BufferEntry(ArchitectureTokens(tuple(e["tokens"]), schema), float(e["reward"]),
                               float(e["behavior_log_prob"]), int(e["step"])) for e in d["entries"]]
        return cls(int(d["capacity"]), float(d["beta"]), entries)


def push(buffer: BufferState, entry: BufferEntry) -> BufferState:
    """Append, then evict the lowest reward (oldest on ties) while over capacity."""
    buffer.entries.append(entry)
    while len(buffer.entries) > buffer.capacity:
        worst = min(range(len(buffer.entries)), key=lambda i: (buffer.entries[i].reward, buffer.entries[i].step, i))
        buffer.entries.pop(worst)
    return buffer


def priorities(buffer: BufferState) -> np.ndarray:
    if not buffer.entries:
        raise EmptyBufferError("priorities of an empty buffer")
    r = np.array([e.reward for e in buffer.entries])
    z = np.exp(r - r.max())
    return z / z.sum()


def importance_weight(p, n: int, beta: float):
    """Raw importance weight ``(n * p) ** -beta`` (elementwise)."""
    p = np.asarray(p, dtype=np.float64)
    out = (n * p) ** (-beta)
    return float(out) if out.ndim == 0 else out


def anneal_beta(step: int, total_steps: int) -> float:
    if total_steps <= 0:
        raise ValidationError("total_steps must be > 0")
    return float(min(1.0, max(0.0, step / total_steps)))


def draw_exploited(buffer: BufferState, k: int, rng: np.random.Generator) -> list:
    """``k`` entries without replacement, probability proportional to priority.

    Weights are max-normalized within the draw so the largest is 1.
    """
    if k > len(buffer.entries):
        raise InsufficientEntries(f"asked for {k} exploited samples, buffer holds {len(buffer.entries)}")
    if k == 0:
        return []
    p = priorities(buffer)
    idx = rng.choice(len(p), size=k, replace=False, p=p)
    raw = importance_weight(p[idx], len(buffer.entries), buffer.beta)
    w = np.atleast_1d(raw) / np.max(raw)
    return [ExploitedDraw(buffer.entries[i], float(p[i]), float(wi)) for i, wi in zip(idx, w)]


def exploited_count(buffer: BufferState, batch_size: int) -> int:
    return min(batch_size // 2, len(buffer.entries))


def compose_batch(exploring: list, buffer: BufferState, batch_size: int, rng: np.random.Generator):
    """Mix up to half a batch of replayed entries with fresh samples.

    Returns ``(exploring_used, exploited_draws)`` with
    ``len(exploring_used) + len(exploited_draws) == batch_size``.
    """
    k = exploited_count(buffer, batch_size)
    need = batch_size - k
    if len(exploring) < max(need, -(-batch_size // 2)):
        raise CompositionError(f"need {need} exploring samples, got {len(exploring)}")
    draws = draw_exploited(buffer, k, rng)
    return list(exploring[:need]), draws
