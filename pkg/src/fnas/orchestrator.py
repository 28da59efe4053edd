"""The sample / evaluate / update loop with optional critic, pool and buffer.

One iteration:

1. sample fresh candidates from the controller;
2. with the critic on, split them into trusted (reward taken from V) and
   untrusted, capped at half trusted per batch;
3. evaluate untrusted candidates, initializing from the knowledge pool when
   it is on, and store the produced block checkpoints;
4. mix in replayed elite architectures when the buffer is on;
5. PPO update, critic update on the evaluated samples, log, checkpoint.

Everything random derives from ``(seed, stream name, iteration)`` so a run
resumed from a checkpoint replays the same tail as an uninterrupted one.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aeb, akp
from . import evaluators as ev
from . import nn_core as nn
from . import policy as pol
from . import uac
from .errors import ConfigError, FnasError, ResumeError, RunAborted, CheckpointError
from .search_space import ArchitectureTokens, SpaceSchema, default_schema, enumerable_schema, expand_batch, \
    mnas_like_schema, split_blocks

NAMED_SCHEMAS = {"default": default_schema, "enumerable": enumerable_schema, "mnas": mnas_like_schema}

DEFAULTS = {
    "seed": 0,
    "iterations": 200,
    "schema": "enumerable",
    "evaluator": {
        "kind": "surrogate",
        "seed": 0,
        "family_seed": None,
        "share": 0.0,
        "noise": 0.0,
        "scale": 0.4,
        "interactions": 3,
        "interaction_strength": 1.0,
        "table": None,
        "epochs": 5,
        "data_seed": 0,
        "toy_lr": 0.003,
        "toy_batch": 25,
        "toy_train": 500,
        "toy_val": 500,
        "toy_widths": [8, 16, 32, 64],
        "toy_rings": 6,
        "toy_noise": 0.03,
        "toy_topology": "parallel",
    },
    "reward": {"target_latency": 30.0, "alpha": -0.07},
    "ppo": {"clip": 0.2, "entropy_coef": 0.01, "lr": 3.5e-4, "epochs": 1, "batch_size": 64,
            "normalize_advantages": False},
    "policy": {"hidden": 100, "embed_dim": 32, "baseline": "ema", "ema_decay": 0.95},
    "modules": {"uac": False, "akp": False, "aeb": False},
    "uac": {"lr": 1e-3, "hidden": 200, "layers": 4, "warmup": 500, "window": 256, "target_fraction": 0.5,
            "steps": 1, "target": "reward"},
    "akp": {"tau_sim": 0.6, "canonical_iterations": None},
    "aeb": {"capacity": 10, "old_policy": "behavior"},
    "checkpoint_every": 25,
    "transfer": {"critic": None, "pool": None, "policy": None},
}

_CHOICES = {
    ("evaluator", "kind"): {"surrogate", "tabular", "toy"},
    ("policy", "baseline"): {"ema", "value"},
    ("uac", "target"): {"reward", "accuracy"},
    ("aeb", "old_policy"): {"behavior", "current"},
    ("evaluator", "toy_topology"): set(ev.TOPOLOGIES),
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "schema":
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _check_types(cfg, base, path=""):
    for key, ref in base.items():
        val = cfg[key]
        where = f"{path}{key}"
        if isinstance(ref, dict) and key != "schema":
            _check_types(val, ref, where + ".")
            continue
        if ref is None or key == "schema":
            continue
        if isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{where} must be true/false, got {val!r}")
        elif isinstance(ref, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{where} must be an integer, got {val!r}")
        elif isinstance(ref, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where} must be a number, got {val!r}")
        elif isinstance(ref, str):
            if not isinstance(val, str):
                raise ConfigError(f"{where} must be a string, got {val!r}")
        elif isinstance(ref, list):
            if not isinstance(val, list):
                raise ConfigError(f"{where} must be a list, got {val!r}")


@dataclass
class ExperimentConfig:
    """Validated experiment settings; ``data`` is the full effective config."""

    data: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        merged = _merge(DEFAULTS, d)
        _check_types(merged, DEFAULTS)
        out = cls(merged)
        out.validate()
        return out

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def validate(self):
        d = self.data
        if d["iterations"] < 1:
            raise ConfigError("iterations must be >= 1")
        if d["checkpoint_every"] < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        for (sec, key), allowed in _CHOICES.items():
            if d[sec][key] not in allowed:
                raise ConfigError(f"{sec}.{key} must be one of {sorted(allowed)}, got {d[sec][key]!r}")
        if d["evaluator"]["kind"] == "tabular" and not d["evaluator"]["table"]:
            raise ConfigError("evaluator.table is required for the tabular evaluator")
        if not 0 <= d["evaluator"]["share"] <= 1:
            raise ConfigError("evaluator.share must be in [0, 1]")
        if d["evaluator"]["epochs"] < 1:
            raise ConfigError("evaluator.epochs must be >= 1")
        if not 0 < d["akp"]["tau_sim"] <= 1:
            raise ConfigError("akp.tau_sim must be in (0, 1]")
        if d["aeb"]["capacity"] < 1:
            raise ConfigError("aeb.capacity must be >= 1")
        if not 0 <= d["uac"]["target_fraction"] <= 1:
            raise ConfigError("uac.target_fraction must be in [0, 1]")
        self.ppo_config()
        try:
            self.reward_config()
        except FnasError as exc:
            raise ConfigError(f"reward: {exc}") from exc
        self.schema()

    def schema(self) -> SpaceSchema:
        s = self.data["schema"]
        if isinstance(s, str):
            if s not in NAMED_SCHEMAS:
                raise ConfigError(f"unknown schema name {s!r}; choose from {sorted(NAMED_SCHEMAS)}")
            return NAMED_SCHEMAS[s]()
        try:
            return SpaceSchema.from_dict(s)
        except FnasError as exc:
            raise ConfigError(f"schema: {exc}") from exc

    def ppo_config(self) -> pol.PpoConfig:
        p = self.data["ppo"]
        return pol.PpoConfig(float(p["clip"]), float(p["entropy_coef"]), float(p["lr"]), int(p["epochs"]),
                             int(p["batch_size"]), bool(p["normalize_advantages"]))

    def reward_config(self) -> ev.RewardConfig:
        r = self.data["reward"]
        return ev.RewardConfig(float(r["target_latency"]), float(r["alpha"]))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


def set_override(data: dict, dotted: str, raw: str):
    """Apply ``a.b=v``; the value is parsed as JSON, falling back to a string."""
    keys = dotted.split(".")
    node = data
    ref = DEFAULTS
    for k in keys[:-1]:
        if not isinstance(ref, dict) or k not in ref:
            raise ConfigError(f"override {dotted!r}: unknown key {k!r}")
        ref = ref[k]
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not an object")
    if not isinstance(ref, dict) or keys[-1] not in ref:
        raise ConfigError(f"override {dotted!r}: unknown key {keys[-1]!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[keys[-1]] = value
    return data


# ---------------------------------------------------------------------------
# Evaluator construction


def build_evaluator(cfg: ExperimentConfig, schema: SpaceSchema):
    e = cfg.data["evaluator"]
    kind = e["kind"]
    if kind == "surrogate":
        return ev.SurrogateEvaluator.from_seed(schema, int(e["seed"]), family_seed=e["family_seed"],
                                               share=float(e["share"]), scale=float(e["scale"]),
                                               n_interactions=int(e["interactions"]),
                                               interaction_strength=float(e["interaction_strength"]),
                                               noise=float(e["noise"]))
    if kind == "tabular":
        return ev.TabularEvaluator.load(e["table"], schema)
    return ev.ToyTrainer(schema, toy_data(cfg, int(e["data_seed"])), epochs=int(e["epochs"]),
                         config=toy_trainer_config(cfg), task=f"rings{e['data_seed']}")


def toy_trainer_config(cfg: ExperimentConfig) -> ev.ToyTrainerConfig:
    e = cfg.data["evaluator"]
    return ev.ToyTrainerConfig(lr=float(e["toy_lr"]), batch_size=int(e["toy_batch"]), seed=int(e["seed"]),
                               widths=tuple(int(w) for w in e["toy_widths"]), topology=e["toy_topology"])


def toy_data(cfg: ExperimentConfig, seed: int, rings: int | None = None) -> ev.ToyDataset:
    """Ring dataset with the configured sizes; ``rings`` overrides the ring count."""
    e = cfg.data["evaluator"]
    return ev.make_rings(seed, n_train=int(e["toy_train"]), n_val=int(e["toy_val"]),
                         rings=int(e["toy_rings"] if rings is None else rings), noise=float(e["toy_noise"]))


def eval_threads() -> int:
    raw = os.environ.get("FNAS_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"FNAS_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# Accounting


@dataclass
class Counters:
    activated: int = 0
    free: int = 0
    provenance: dict = field(default_factory=lambda: {"trainer": 0, "value_net": 0, "buffer": 0})


def account(counters: Counters, provenance: str, cost_units: int = 1) -> Counters:
    """Cost-bearing evaluations add ``cost_units`` to ``activated``; the rest are free."""
    if provenance not in counters.provenance:
        raise ValueError(f"unknown provenance {provenance!r}")
    counters.provenance[provenance] += 1
    if provenance == "trainer":
        counters.activated += int(cost_units)
    else:
        counters.free += 1
    return counters


@dataclass
class RunReport:
    best_reward: float
    best_tokens: str | None
    activated_samples: int
    free_samples: int
    iterations: int
    metrics: list
    trace: list
    provenance: dict
    modules: dict = field(default_factory=dict)
    evaluator_key: str = ""
    warm_start: bool = False

    def to_dict(self):
        return {"best_reward": self.best_reward, "best_tokens": self.best_tokens,
                "activated_samples": self.activated_samples, "free_samples": self.free_samples,
                "iterations": self.iterations, "provenance": self.provenance, "metrics": self.metrics,
                "trace": self.trace, "modules": self.modules, "evaluator_key": self.evaluator_key,
                "warm_start": self.warm_start}

    @classmethod
    def from_dict(cls, d):
        return cls(d["best_reward"], d["best_tokens"], int(d["activated_samples"]), int(d["free_samples"]),
                   int(d["iterations"]), list(d["metrics"]), [list(t) for t in d["trace"]], dict(d["provenance"]),
                   dict(d.get("modules", {})), str(d.get("evaluator_key", "")),
                   bool(d.get("warm_start", False)))

    def activated_to_reach(self, target: float):
        """Activated-sample count at the first true evaluation scoring >= ``target``."""
        for activated, r in self.trace:
            if r >= target:
                return activated
        return None


# ---------------------------------------------------------------------------
# Run state


class SearchState:
    """Everything the loop mutates; serializable for checkpoint/resume."""

    def __init__(self, cfg: ExperimentConfig, schema: SpaceSchema):
        d = cfg.data
        self.cfg, self.schema = cfg, schema
        seed = int(d["seed"])
        self.policy = pol.PolicyNet.create(schema, nn.make_rng(seed, "policy-init"), d["policy"]["hidden"],
                                           d["policy"]["embed_dim"])
        self.critic = None
        self.threshold = None
        if d["modules"]["uac"]:
            u = d["uac"]
            self.critic = uac.CriticPair.create(schema.width, nn.make_rng(seed, "critic-init"), u["hidden"],
                                                u["layers"], float(u["lr"]))
            self.threshold = uac.ThresholdSchedule(float(u["target_fraction"]), int(u["window"]), int(u["warmup"]))
        self.pool = None
        if d["modules"]["akp"]:
            canon = d["akp"]["canonical_iterations"]
            if canon is None:
                canon = d["evaluator"]["epochs"] if d["evaluator"]["kind"] == "toy" else 1
            self.pool = akp.KnowledgePool(int(canon), float(d["akp"]["tau_sim"]), schema.schema_hash())
        self.buffer = aeb.BufferState(int(d["aeb"]["capacity"])) if d["modules"]["aeb"] else None
        self.counters = Counters()
        self.baseline = None
        self.best = -np.inf
        self.best_tokens = None
        self.iteration = 0
        self.metrics = []
        self.trace = []
        self.warm_started = False

    # -- persistence -------------------------------------------------------

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        nn.save_params(os.path.join(directory, "policy.ckpt"), self.policy.params)
        nn.save_params(os.path.join(directory, "policy-opt.ckpt"),
                       nn.adam_to_params(self.policy.opt, self.policy.params))
        meta = {
            "config_hash": self.cfg.config_hash(), "iteration": self.iteration,
            "policy_opt_t": self.policy.opt.t,
            "counters": {"activated": self.counters.activated, "free": self.counters.free,
                         "provenance": self.counters.provenance},
            "baseline": self.baseline, "best": None if self.best == -np.inf else self.best,
            "best_tokens": self.best_tokens, "metrics": self.metrics, "trace": self.trace,
            "warm_started": self.warm_started,
        }
        if self.critic is not None:
            uac.save_critic(self.critic, os.path.join(directory, "critic.ckpt"))
            n = self.critic.params.size
            moments = nn.ParamVector({"v.m": (n,), "v.v": (n,), "u.m": (n,), "u.v": (n,)},
                                     np.concatenate([self.critic.opt_v.m, self.critic.opt_v.v,
                                                     self.critic.opt_u.m, self.critic.opt_u.v]))
            nn.save_params(os.path.join(directory, "critic-opt.ckpt"), moments)
            meta["critic_opt_t"] = [self.critic.opt_v.t, self.critic.opt_u.t]
            meta["threshold"] = self.threshold.to_dict()
        if self.pool is not None:
            akp.save_pool(self.pool, os.path.join(directory, "pool.akp"))
        if self.buffer is not None:
            meta["buffer"] = self.buffer.to_dict()
        tmp = os.path.join(directory, "state.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(meta, fh, sort_keys=True)
        os.replace(tmp, os.path.join(directory, "state.json"))

    @classmethod
    def restore(cls, cfg: ExperimentConfig, directory) -> "SearchState":
        schema = cfg.schema()
        state = cls(cfg, schema)
        try:
            with open(os.path.join(directory, "state.json")) as fh:
                meta = json.load(fh)
            if meta["config_hash"] != cfg.config_hash():
                raise ResumeError("checkpoint was written by a different config (hash mismatch)")
            state.policy.params = nn.load_params(os.path.join(directory, "policy.ckpt"), state.policy.params)
            packed = nn.load_params(os.path.join(directory, "policy-opt.ckpt"),
                                    nn.adam_to_params(state.policy.opt, state.policy.params))
            state.policy.opt = nn.adam_from_params(packed, int(meta["policy_opt_t"]))
            if state.critic is not None:
                state.critic = uac.load_critic(os.path.join(directory, "critic.ckpt"))
                state.critic.lr = float(cfg.data["uac"]["lr"])
                raw = nn.load_params(os.path.join(directory, "critic-opt.ckpt")).values
                n = state.critic.params.size
                tv, tu = meta["critic_opt_t"]
                state.critic.opt_v = nn.AdamState(raw[:n].copy(), raw[n:2 * n].copy(), int(tv))
                state.critic.opt_u = nn.AdamState(raw[2 * n:3 * n].copy(), raw[3 * n:].copy(), int(tu))
                state.threshold = uac.ThresholdSchedule.from_dict(meta["threshold"])
            if state.pool is not None:
                state.pool = akp.load_pool(os.path.join(directory, "pool.akp"), schema.schema_hash())
            if state.buffer is not None:
                state.buffer = aeb.BufferState.from_dict(meta["buffer"], schema)
            c = meta["counters"]
            state.counters = Counters(int(c["activated"]), int(c["free"]), dict(c["provenance"]))
            state.baseline = meta["baseline"]
            state.best = -np.inf if meta["best"] is None else float(meta["best"])
            state.best_tokens = meta["best_tokens"]
            state.metrics = meta["metrics"]
            state.trace = [tuple(t) for t in meta["trace"]]
            state.iteration = int(meta["iteration"])
            state.warm_started = bool(meta.get("warm_started", False))
        except ResumeError:
            raise
        except (OSError, KeyError, ValueError, TypeError, CheckpointError) as exc:
            raise ResumeError(f"cannot resume from {directory}: {exc}") from exc
        return state


# ---------------------------------------------------------------------------
# The loop


@dataclass
class Candidate:
    trajectory: pol.SampledTrajectory
    provenance: str
    reward: float = float("nan")
    accuracy: float = float("nan")
    weight: float = 1.0
    old_log_prob: float | None = None
    predicted: float | None = None
    hit_ratio: float | None = None


class Runner:
    """Drives a :class:`SearchState` through iterations, writing the event log."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None, state: SearchState | None = None, evaluator=None):
        self.cfg = cfg
        self.schema = cfg.schema()
        self.state = state or SearchState(cfg, self.schema)
        self.evaluator = evaluator or build_evaluator(cfg, self.schema)
        self.reward_cfg = cfg.reward_config()
        self.ppo_cfg = cfg.ppo_config()
        self.out_dir = out_dir
        self.threads = eval_threads()
        self._log_fh = None
        if state is None:
            self._apply_transfer()

    # -- transfer inputs ---------------------------------------------------

    def _apply_transfer(self):
        t = self.cfg.data["transfer"]
        st = self.state
        if t["critic"]:
            if st.critic is None:
                raise ConfigError("transfer.critic given but modules.uac is off")
            lr = st.critic.lr
            st.critic = uac.warm_start(st.critic, t["critic"])
            st.critic.lr = lr
            st.warm_started = True
        if t["pool"]:
            if st.pool is None:
                raise ConfigError("transfer.pool given but modules.akp is off")
            loaded = akp.load_pool(t["pool"], self.schema.schema_hash())
            if loaded.canonical_iterations != st.pool.canonical_iterations:
                raise ConfigError(f"pool trained for {loaded.canonical_iterations} iterations; this run uses "
                                  f"{st.pool.canonical_iterations}")
            loaded.tau_sim = st.pool.tau_sim
            st.pool = loaded
            st.warm_started = True
        if t["policy"]:
            st.policy = pol.load_policy(t["policy"], self.schema, st.policy.hidden, st.policy.embed_dim)

    # -- pieces of one iteration ---------------------------------------------

    def _sample_exploring(self, it: int, n: int):
        st = self.state
        rng = nn.make_rng(self.cfg.data["seed"], "sample", it)
        if st.critic is None:
            return [Candidate(t, "trainer") for t in pol.sample_batch(st.policy, rng, n)], 0

        tau = st.threshold.tau
        observed = []

        def stream():
            while True:
                trajs = pol.sample_batch(st.policy, rng, n)
                emb = expand_batch([t.tokens.tokens for t in trajs], self.schema)
                v, u = uac.predict_batch(st.critic, emb)
                observed.append(emb)
                for t, vi, ui in zip(trajs, v, u):
                    trusted = bool(ui <= tau)
                    c = Candidate(t, "value_net" if trusted else "trainer", predicted=float(vi))
                    yield c, trusted

        batch = uac.enforce_trust_constraint(stream(), n)
        st.threshold.observe(np.concatenate(observed)[:batch.draws])
        for c in batch.items:
            if c.provenance == "value_net":
                c.reward = c.predicted
        return batch.items, batch.discarded

    def _evaluate(self, it: int, cands: list):
        st = self.state
        todo = [c for c in cands if c.provenance == "trainer"]
        inits = []
        for c in todo:
            if st.pool is not None:
                init, rep = akp.initialize_architecture(st.pool, c.trajectory.tokens)
                inits.append(init)
                c.hit_ratio = rep.hit_ratio
            else:
                inits.append(None)
        base_id = it * 100003

        def work(k):
            return self.evaluator.evaluate(todo[k].trajectory.tokens, base_id + k, inits[k])

        if self.threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(work, range(len(todo))))
        else:
            results = [work(k) for k in range(len(todo))]
        for c, res in zip(todo, results):
            c.accuracy = res.accuracy
            c.reward = ev.reward(res.accuracy, res.latency, self.reward_cfg)
            account(st.counters, "trainer", res.cost_units)
            st.trace.append((st.counters.activated, c.reward))
            if c.reward > st.best:
                st.best, st.best_tokens = c.reward, c.trajectory.tokens.key()
            if st.pool is not None:
                self._store_blocks(c, res)
        for c in cands:
            if c.provenance == "value_net":
                account(st.counters, "value_net")
        return todo

    def _store_blocks(self, c: Candidate, res: ev.EvalResult):
        pool = self.state.pool
        if res.checkpoint is not None:
            for ck in res.checkpoint:
                if ck.train_iterations == pool.canonical_iterations:
                    akp.insert_checkpoint(pool, ck, self.schema)
        elif res.cost_units == pool.canonical_iterations:
            for blk in split_blocks(c.trajectory.tokens):
                akp.insert(pool, blk, {}, res.cost_units, "surrogate")

    def _exploited(self, it: int, k: int):
        st = self.state
        if k == 0:
            return []
        draws = aeb.draw_exploited(st.buffer, k, nn.make_rng(self.cfg.data["seed"], "replay", it))
        out = []
        for d in draws:
            traj = pol.SampledTrajectory(d.entry.tokens, np.array([d.entry.behavior_log_prob]))
            c = Candidate(traj, "buffer", reward=d.entry.reward, weight=d.weight)
            if self.cfg.data["aeb"]["old_policy"] == "behavior":
                c.old_log_prob = d.entry.behavior_log_prob
            out.append(c)
            account(st.counters, "buffer")
        return out

    def step(self):
        """Run one iteration and return its log record."""
        st, d = self.state, self.cfg.data
        it = st.iteration
        B = self.ppo_cfg.batch_size
        total = d["iterations"]
        if st.buffer is not None:
            st.buffer.beta = aeb.anneal_beta(it, max(1, total - 1))
        k = aeb.exploited_count(st.buffer, B) if st.buffer is not None else 0
        exploring, _ = self._sample_exploring(it, B - k)
        evaluated = self._evaluate(it, exploring)
        exploited = self._exploited(it, k)
        batch = exploring + exploited
        if len(exploring) < -(-B // 2) or len(exploited) > B // 2:
            raise aeb.CompositionError("batch composition out of bounds")

        rewards = np.array([c.reward for c in batch])
        if st.baseline is None:
            st.baseline = float(rewards.mean())
        use_value = d["policy"]["baseline"] == "value" and st.critic is not None
        if use_value:
            emb = expand_batch([c.trajectory.tokens.tokens for c in batch], self.schema)
            baselines = uac.predict_batch(st.critic, emb)[0]
        else:
            baselines = np.full(len(batch), st.baseline)
        rows = [pol.PpoSample(c.trajectory, c.reward, float(b), c.weight) for c, b in zip(batch, baselines)]
        old = pol.log_prob_batch(st.policy, [c.trajectory.tokens.tokens for c in batch])
        for i, c in enumerate(batch):
            if c.old_log_prob is not None:
                old[i] = c.old_log_prob
        loss, _, _, _ = pol.ppo_loss_fn(st.policy, rows, self.ppo_cfg, old_log_probs=old)
        self._ppo(loss)
        decay = float(d["policy"]["ema_decay"])
        st.baseline = decay * st.baseline + (1 - decay) * float(rewards.mean())

        if st.buffer is not None:
            for c in evaluated:
                aeb.push(st.buffer, aeb.BufferEntry(c.trajectory.tokens, float(c.reward),
                                                    min(0.0, c.trajectory.log_prob), it))

        lv = lu = 0.0
        if st.critic is not None:
            if evaluated:
                key = "reward" if d["uac"]["target"] == "reward" else "accuracy"
                targets = [getattr(c, key) for c in evaluated]
                emb = expand_batch([c.trajectory.tokens.tokens for c in evaluated], self.schema)
                stats = uac.update(st.critic, emb, targets, steps=int(d["uac"]["steps"]))
                lv, lu = stats.value_loss, stats.uncertainty_loss
            st.threshold.count_trained(len(evaluated))
        tau_used = st.threshold.tau if st.threshold is not None else 0.0
        if st.threshold is not None:
            st.threshold.refresh(st.critic)

        n_trusted = sum(c.provenance == "value_net" for c in exploring)
        hits = [c.hit_ratio for c in evaluated if c.hit_ratio is not None]
        record = {
            "iter": it + 1,
            "mean_reward": float(rewards.mean()),
            "best_reward": None if st.best == -np.inf else float(st.best),
            "trusted_frac": n_trusted / len(exploring),
            "exploited_frac": len(exploited) / len(batch),
            "hit_ratio": (float(np.mean(hits)) if hits else None) if st.pool is not None else None,
            "L_V": float(lv),
            "L_U": float(lu),
            "tau": float(tau_used),
            "beta": float(st.buffer.beta) if st.buffer is not None else 0.0,
            "activated": st.counters.activated,
            "free": st.counters.free,
        }
        st.metrics.append(record)
        st.iteration += 1
        return record

    def _ppo(self, loss):
        st = self.state
        hyper = nn.AdamConfig(lr=self.ppo_cfg.lr)
        params, opt = st.policy.params, st.policy.opt
        for _ in range(self.ppo_cfg.epochs):
            _, g = nn.value_and_grad(loss, params)
            params, opt = nn.apply_update(params, g, opt, hyper)
        params.assert_finite()
        st.policy.params, st.policy.opt = params, opt

    # -- driving -------------------------------------------------------------

    def _open_log(self):
        if self.out_dir is None:
            return
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, "events.jsonl")
        keep = []
        if self.state.iteration > 0 and os.path.exists(path):
            with open(path) as fh:
                keep = fh.readlines()[:self.state.iteration]
        self._log_fh = open(path, "w")
        self._log_fh.writelines(keep)

    def _ckpt_dir(self):
        return None if self.out_dir is None else os.path.join(self.out_dir, "checkpoint")

    def run(self) -> RunReport:
        total = self.cfg.data["iterations"]
        every = self.cfg.data["checkpoint_every"]
        self._open_log()
        try:
            while self.state.iteration < total:
                snapshot_iter = self.state.iteration
                try:
                    rec = self.step()
                except FnasError as exc:
                    path = self._ckpt_dir()
                    if path is not None and self.state.iteration == snapshot_iter:
                        self.state.save(path)
                    raise RunAborted(f"iteration {snapshot_iter + 1}: {type(exc).__name__}: {exc}",
                                     iteration=snapshot_iter + 1, checkpoint=path) from exc
                if self._log_fh is not None:
                    self._log_fh.write(json.dumps(rec, sort_keys=False) + "\n")
                    self._log_fh.flush()
                if self._ckpt_dir() is not None and self.state.iteration % every == 0:
                    self.state.save(self._ckpt_dir())
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        report = self.report()
        if self.out_dir is not None:
            with open(os.path.join(self.out_dir, "report.json"), "w") as fh:
                json.dump(report.to_dict(), fh, sort_keys=True)
            self.save_artifacts()
        return report

    def save_artifacts(self):
        st = self.state
        pol.save_policy(st.policy, os.path.join(self.out_dir, "policy.ckpt"))
        if st.critic is not None:
            uac.save_critic(st.critic, os.path.join(self.out_dir, "critic.ckpt"))
        if st.pool is not None:
            akp.save_pool(st.pool, os.path.join(self.out_dir, "pool.akp"))

    def report(self) -> RunReport:
        st = self.state
        return RunReport(None if st.best == -np.inf else float(st.best), st.best_tokens, st.counters.activated,
                         st.counters.free, st.iteration, list(st.metrics), [list(t) for t in st.trace],
                         dict(st.counters.provenance), dict(self.cfg.data["modules"]), evaluator_key(self.cfg),
                         st.warm_started)


def evaluator_key(cfg: ExperimentConfig) -> str:
    """Fingerprint of everything that fixes the reward landscape; equal keys are comparable."""
    d = cfg.data
    blob = json.dumps({"schema": cfg.schema().schema_hash(), "evaluator": d["evaluator"], "reward": d["reward"]},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run(config: ExperimentConfig, out_dir=None, evaluator=None) -> RunReport:
    return Runner(config, out_dir, evaluator=evaluator).run()


def resume(checkpoint_dir, config: ExperimentConfig, out_dir=None, evaluator=None) -> RunReport:
    """Continue a run from ``checkpoint_dir``; the config must hash-match the original."""
    if not os.path.isdir(checkpoint_dir):
        raise ResumeError(f"no checkpoint directory at {checkpoint_dir}")
    state = SearchState.restore(config, checkpoint_dir)
    return Runner(config, out_dir, state=state, evaluator=evaluator).run()
