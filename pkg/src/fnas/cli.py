"""Command-line entry point: ``fnas <subcommand> [options]``.

Exit codes: 0 success, 1 a verification (grad-check) failed, 2 usage or
configuration error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import analysis as an
from . import evaluators as ev
from . import nn_core as nn
from . import orchestrator as orc
from . import policy as pol
from . import uac
from .errors import CheckpointError, ConfigError, FnasError, RunAborted, TransferError
from .search_space import enumerate_space, random_tokens

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
BENCH_CAP = 100_000
ABLATION_GRID = ("none", "uac", "akp", "aeb", "uac+akp", "uac+aeb", "akp+aeb", "uac+akp+aeb")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fnas", description="Reinforcement-learning architecture search with critic, "
                                         "knowledge pool and experience buffer accelerations.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override applied after the file, e.g. modules.uac=true")
        sp.add_argument("--out", help="output directory (default: <timestamp>-<seed>)")

    common(sub.add_parser("run", help="run one search experiment"))
    a = sub.add_parser("ablate", help="run module toggle combinations with shared seeds")
    common(a)
    a.add_argument("--combos", default=",".join(ABLATION_GRID),
                   help="comma-separated combinations, e.g. none,uac,uac+aeb")
    t = sub.add_parser("transfer", help="warm-start the critic and/or pool from a previous run, then run")
    common(t)
    t.add_argument("--critic", help="critic checkpoint from a previous run")
    t.add_argument("--pool", help="knowledge pool file from a previous run")
    z = sub.add_parser("analyze", help="tables and plot data from finished runs, or a rank-tracking study")
    common(z)
    z.add_argument("runs", nargs="*", help="run directories containing report.json")
    z.add_argument("--rank", action="store_true", help="run the scratch-vs-pool rank-tracking study")
    z.add_argument("--archs", type=int, default=50, help="architectures in the rank study")
    z.add_argument("--source-rings", type=int, help="ring count of the pool's source task (default: same task)")
    z.add_argument("--source-epochs", type=int, default=50, help="training epochs of pool blocks")
    z.add_argument("--full-epochs", type=int, default=200, help="epochs of the fully trained reference")
    z.add_argument("--akp-epochs", type=int, default=60, help="epochs tracked after pool initialization")
    b = sub.add_parser("bench-gen", help="exhaustively evaluate the surrogate into a tabular benchmark file")
    common(b)
    b.add_argument("--cap", type=int, default=BENCH_CAP, help="largest space to enumerate")
    g = sub.add_parser("grad-check", help="finite-difference checks of every differentiated loss")
    common(g)
    g.add_argument("--coords", type=int, default=100, help="coordinates sampled per check (>= 100)")
    g.add_argument("--tolerance", type=float, default=1e-4)
    return p


# ---------------------------------------------------------------------------
# Config plumbing


def load_config(args) -> orc.ExperimentConfig:
    data = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} does not exist")
        data = orc.ExperimentConfig.load(args.config).data
    else:
        data = orc.ExperimentConfig.from_dict({}).data
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        orc.set_override(data, key.strip(), raw.strip())
    return orc.ExperimentConfig.from_dict(data)


def out_dir(args, cfg: orc.ExperimentConfig) -> str:
    path = args.out or f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.data['seed']}"
    os.makedirs(path, exist_ok=True)
    return path


def write_effective(path, cfg: orc.ExperimentConfig):
    with open(os.path.join(path, "effective-config.json"), "w") as fh:
        fh.write(cfg.to_json())


def _print_json(obj, stream=None):
    (stream or sys.stdout).write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def _run_into(cfg, path) -> orc.RunReport:
    report = orc.run(cfg, path)
    an.emit_plotdata(an.reward_curve(report), os.path.join(path, "reward_curve.csv"),
                     "best true reward after each improvement")
    return report


def cmd_run(args) -> int:
    cfg = load_config(args)
    path = out_dir(args, cfg)
    write_effective(path, cfg)
    report = _run_into(cfg, path)
    _print_json({"best_reward": report.best_reward, "activated_samples": report.activated_samples,
                 "free_samples": report.free_samples, "out": path})
    return EXIT_OK


def _combo_modules(combo: str) -> dict:
    parts = set() if combo in ("none", "baseline", "") else set(combo.split("+"))
    unknown = parts - set(an.MODULE_ORDER)
    if unknown:
        raise ConfigError(f"unknown module(s) in combination {combo!r}: {sorted(unknown)}")
    return {m: m in parts for m in an.MODULE_ORDER}


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    path = out_dir(args, cfg)
    write_effective(path, cfg)
    combos = [c.strip() for c in args.combos.split(",") if c.strip()]
    plans = [(c, _combo_modules(c)) for c in combos]
    reports, failures = [], {}
    for combo, modules in plans:
        data = json.loads(json.dumps(cfg.data))
        data["modules"] = modules
        sub_cfg = orc.ExperimentConfig.from_dict(data)
        sub = os.path.join(path, combo.replace("+", "-"))
        os.makedirs(sub, exist_ok=True)
        write_effective(sub, sub_cfg)
        try:
            reports.append(_run_into(sub_cfg, sub))
        except RunAborted as exc:
            failures[combo] = str(exc)
    if not any(not any(r.modules.values()) for r in reports):
        print("no all-off run finished; speedups are unavailable", file=sys.stderr)
        rows = []
    else:
        rows = an.ablation_table(reports)
        print(an.format_table(rows))
        an.emit_plotdata({"uac": [int(r.toggles[0]) for r in rows], "akp": [int(r.toggles[1]) for r in rows],
                          "aeb": [int(r.toggles[2]) for r in rows], "best_reward": [r.best_reward for r in rows],
                          "activated": [r.activated_samples for r in rows], "speedup": [r.speedup for r in rows]},
                         os.path.join(path, "ablation.csv"), "one row per module combination")
    for combo, msg in failures.items():
        print(f"{combo}: FAILED {msg}")
    with open(os.path.join(path, "ablation.json"), "w") as fh:
        json.dump({"rows": [{"modules": r.label, "best_reward": r.best_reward,
                             "activated_samples": r.activated_samples, "speedup": r.speedup} for r in rows],
                   "failures": failures}, fh, indent=2, sort_keys=True)
    return EXIT_OK if not failures else EXIT_ABORT


def cmd_transfer(args) -> int:
    if not args.critic and not args.pool:
        raise UsageError("transfer needs --critic and/or --pool")
    cfg = load_config(args)
    data = json.loads(json.dumps(cfg.data))
    if args.critic:
        data["modules"]["uac"] = True
        data["transfer"]["critic"] = args.critic
    if args.pool:
        data["modules"]["akp"] = True
        data["transfer"]["pool"] = args.pool
    cfg = orc.ExperimentConfig.from_dict(data)
    path = out_dir(args, cfg)
    write_effective(path, cfg)
    report = _run_into(cfg, path)
    _print_json({"warm_start": report.warm_start, "best_reward": report.best_reward,
                 "activated_samples": report.activated_samples, "out": path})
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_config(args)
    if not args.runs and not args.rank:
        raise UsageError("analyze needs run directories or --rank")
    path = out_dir(args, cfg)
    write_effective(path, cfg)
    reports = []
    for run_dir in args.runs:
        try:
            with open(os.path.join(run_dir, "report.json")) as fh:
                reports.append(orc.RunReport.from_dict(json.load(fh)))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read report in {run_dir}: {exc}") from exc
        name = os.path.basename(os.path.normpath(run_dir))
        an.emit_plotdata(an.reward_curve(reports[-1]), os.path.join(path, f"reward_curve-{name}.csv"))
    if reports and any(not any(r.modules.values()) for r in reports):
        print(an.format_table(an.ablation_table(reports)))
    if args.rank:
        seed = int(cfg.data["seed"])
        archs = random_tokens(cfg.schema(), nn.make_rng(seed, "archs"), args.archs)
        source = orc.toy_data(cfg, 1000 + seed, rings=args.source_rings)
        target = orc.toy_data(cfg, seed)
        res = an.rank_acceleration(archs, source, target, source_epochs=args.source_epochs,
                                   full_epochs=args.full_epochs, akp_epochs=args.akp_epochs,
                                   config=orc.toy_trainer_config(cfg), seed=seed,
                                   tau_sim=float(cfg.data["akp"]["tau_sim"]))
        n = len(res.akp_rho)
        an.emit_plotdata({"epoch": list(range(1, n + 1)), "scratch": list(res.scratch_rho[:n]),
                          "akp": list(res.akp_rho)}, os.path.join(path, "rank.csv"),
                         "Spearman rho against the fully trained scratch ranks")
        _print_json({"scratch_epoch": res.scratch_epoch, "akp_epoch": res.akp_epoch, "ratio": res.ratio,
                     "hit_ratio": res.hit_ratio})
    return EXIT_OK


def cmd_bench_gen(args) -> int:
    cfg = load_config(args)
    schema = cfg.schema()
    if schema.cardinality > args.cap:
        raise ConfigError(f"space has {schema.cardinality} architectures, over the cap of {args.cap}")
    if cfg.data["evaluator"]["kind"] != "surrogate":
        raise ConfigError("bench-gen enumerates the surrogate evaluator")
    path = out_dir(args, cfg)
    write_effective(path, cfg)
    surrogate = orc.build_evaluator(cfg, schema)
    tokens = enumerate_space(schema)
    acc = surrogate.accuracy_batch(tokens)
    lat = surrogate.latency_batch(tokens)
    keys = ["-".join(str(int(v)) for v in row) for row in tokens]
    target = os.path.join(path, "benchmark.csv")
    ev.write_table(target, keys, acc, lat)
    rewards = ev.reward(acc, lat, cfg.reward_config())
    best = int(np.argmax(rewards))
    _print_json({"rows": len(keys), "file": target, "best_tokens": keys[best], "best_reward": float(rewards[best]),
                 "best_accuracy": float(acc.max())})
    return EXIT_OK


def gradient_suite(seed: int = 0, n_coords: int = 100, tolerance: float = 1e-4) -> list:
    """Finite-difference checks for the MLP, policy log-likelihood, PPO surrogate, L_V and L_U.

    Returns ``(name, GradCheckReport)`` pairs.
    """
    from .search_space import default_schema, expand_batch

    rng = nn.make_rng(seed, "grad-check")
    out = []

    spec = nn.MlpSpec(12, 16, 4, 3, "prelu")
    params = nn.ParamVector(nn.mlp_layout(spec))
    nn.init_mlp(params, spec, rng)
    params.values += rng.normal(0, 0.05, params.size)
    x = nn.Tensor(rng.normal(size=(6, 12)))
    target = nn.Tensor(rng.normal(size=(6, 3)))

    def mlp_loss(p):
        d = nn.mlp_apply(p, x, spec) - target
        return nn.mean(d * d)

    out.append(("mlp", nn.check_gradients(mlp_loss, params, tolerance, n_coords=n_coords, seed=seed)))

    schema = default_schema()
    policy = pol.PolicyNet.create(schema, rng, head_scale=0.3)
    trajs = pol.sample_batch(policy, rng, 8)
    toks = np.array([t.tokens.tokens for t in trajs])

    def policy_loss(p):
        lp, ent = pol.sequence_terms(p, toks, schema, policy.hidden, policy.embed_dim)
        return nn.neg(nn.mean(lp) + nn.mean(ent) * 0.01)

    # The unrolled losses sum ~20 log-probs while many LSTM coordinates have
    # gradients near 1e-6, so h=1e-5 is dominated by roundoff; h=1e-4 keeps
    # the central-difference truncation error far below the tolerance.
    out.append(("policy_log_likelihood",
                nn.check_gradients(policy_loss, policy.params, tolerance, n_coords=n_coords, seed=seed, h=1e-4)))

    rewards = rng.uniform(0.5, 1.0, len(trajs))
    rows = [pol.PpoSample(t, float(r), 0.75, float(w)) for t, r, w in zip(trajs, rewards, rng.uniform(0.5, 1, 8))]
    # Old log-probs spread so some ratios sit outside the clip band.
    old = pol.log_prob_batch(policy, toks) + rng.uniform(-0.4, 0.4, len(trajs))
    ppo_loss = pol.ppo_loss_fn(policy, rows, pol.PpoConfig(), old_log_probs=old)[0]
    out.append(("ppo_clipped_surrogate",
                nn.check_gradients(ppo_loss, policy.params, tolerance, n_coords=n_coords, seed=seed, h=1e-4)))

    critic = uac.CriticPair.create(schema.width, rng)
    embs = expand_batch([t.tokens for t in random_tokens(schema, rng, 8)], schema)
    r = rng.uniform(0.5, 1.0, 8)
    xt = nn.Tensor(embs)
    out.append(("value_loss", nn.check_gradients(uac.value_loss_fn(critic, xt, r), critic.params, tolerance,
                                                 n_coords=n_coords, seed=seed)))
    v_now = nn.mlp_forward(critic.params, embs, critic.spec, "V")[:, 0]
    out.append(("uncertainty_loss",
                nn.check_gradients(uac.uncertainty_loss_fn(critic, xt, np.abs(v_now - r)), critic.params,
                                   tolerance, n_coords=n_coords, seed=seed)))
    return out


def cmd_grad_check(args) -> int:
    cfg = load_config(args)
    if args.coords < 100:
        raise ConfigError("grad-check samples at least 100 coordinates")
    results = gradient_suite(int(cfg.data["seed"]), args.coords, args.tolerance)
    lines = [f"{'loss':<24}{'checked':>8}  {'max_rel_error':>14}  {'worst_segment':<22}status"]
    for name, rep in results:
        lines.append(f"{name:<24}{rep.checked:>8}  {rep.max_rel_error:>14.3e}  {rep.worst_segment:<22}"
                     f"{'PASS' if rep.passed else 'FAIL'}")
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_effective(args.out, cfg)
        an.emit_plotdata({"check": list(range(len(results))), "max_rel_error": [r.max_rel_error for _, r in results],
                          "passed": [r.passed for _, r in results]}, os.path.join(args.out, "gradcheck.csv"),
                         "checks in order: " + ", ".join(n for n, _ in results))
    return EXIT_OK if all(r.passed for _, r in results) else EXIT_CHECK_FAILED


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "transfer": cmd_transfer, "analyze": cmd_analyze,
            "bench-gen": cmd_bench_gen, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _print_json({"error": "usage", "message": str(exc)}, sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, TransferError) as exc:
        _print_json({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        _print_json({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return EXIT_CONFIG
    except RunAborted as exc:
        _print_json({"error": "RunAborted", "message": str(exc), "iteration": exc.iteration,
                     "checkpoint": exc.checkpoint}, sys.stderr)
        return EXIT_ABORT
    except FnasError as exc:
        _print_json({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
