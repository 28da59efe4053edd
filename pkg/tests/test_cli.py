import csv
import filecmp
import json
import os

import numpy as np
import pytest

from fnas import cli
from fnas import orchestrator as orc
from fnas.errors import DomainError


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            full = os.path.join(dirpath, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


def _json_line(text):
    return json.loads(text.strip().splitlines()[-1])


def test_run_twice_gives_identical_trees(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({"iterations": 3, "modules": {"aeb": True}}))
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--set", "seed=7", "--out", str(tmp_path / name)]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert set(a) == set(b)
    assert {"report.json", "events.jsonl", "effective-config.json", "reward_curve.csv"} <= set(a)
    assert a == b
    out = _json_line(capsys.readouterr().out)
    assert out["activated_samples"] > 0


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    err = _json_line(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_bad_override_exits_2(tmp_path, capsys):
    assert cli.main(["run", "--set", "modules.nonexistent=true", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["run", "--set", "iterations", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_override_flips_only_that_key(tmp_path):
    args = ["run", "--set", "iterations=1", "--out"]
    assert cli.main(args + [str(tmp_path / "off")]) == 0
    assert cli.main(args + [str(tmp_path / "on"), "--set", "modules.uac=true"]) == 0
    off = json.loads((tmp_path / "off" / "effective-config.json").read_text())
    on = json.loads((tmp_path / "on" / "effective-config.json").read_text())
    assert on["modules"]["uac"] is True and off["modules"]["uac"] is False
    on["modules"]["uac"] = False
    assert on == off


def test_effective_config_reproduces_run(tmp_path):
    assert cli.main(["run", "--set", "iterations=2", "--set", "seed=3", "--out", str(tmp_path / "a")]) == 0
    eff = str(tmp_path / "a" / "effective-config.json")
    assert cli.main(["run", "--config", eff, "--out", str(tmp_path / "b")]) == 0
    assert filecmp.cmp(tmp_path / "a" / "report.json", tmp_path / "b" / "report.json", shallow=False)
    assert filecmp.cmp(tmp_path / "a" / "events.jsonl", tmp_path / "b" / "events.jsonl", shallow=False)


def test_ablate_subset(tmp_path, capsys):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--set", "iterations=2", "--combos", "none,uac+aeb", "--out", str(out)]) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert len(table["rows"]) == 2
    base = next(r for r in table["rows"] if r["modules"] == "baseline")
    assert base["speedup"] == 1.0
    assert table["failures"] == {}
    assert (out / "none" / "report.json").exists() and (out / "uac-aeb" / "report.json").exists()
    printed = capsys.readouterr().out
    assert "baseline" in printed and "UAC+AEB" in printed


def test_ablate_unknown_module_exits_2(tmp_path):
    assert cli.main(["ablate", "--combos", "none,foo", "--out", str(tmp_path / "x")]) == 2


def test_transfer_warm_start_and_schema_mismatch(tmp_path, capsys):
    src = tmp_path / "src"
    assert cli.main(["run", "--set", "iterations=2", "--set", "modules.uac=true", "--out", str(src)]) == 0
    capsys.readouterr()
    critic = str(src / "critic.ckpt")
    assert cli.main(["transfer", "--critic", critic, "--set", "iterations=1", "--set", "evaluator.seed=5",
                     "--out", str(tmp_path / "dst")]) == 0
    assert _json_line(capsys.readouterr().out)["warm_start"] is True
    report = json.loads((tmp_path / "dst" / "report.json").read_text())
    assert report["warm_start"] is True

    assert cli.main(["transfer", "--critic", critic, "--set", "schema=default", "--set", "iterations=1",
                     "--out", str(tmp_path / "bad")]) == 2
    assert "error" in _json_line(capsys.readouterr().err)


def test_transfer_without_artifacts_is_usage_error(tmp_path):
    assert cli.main(["transfer", "--out", str(tmp_path / "x")]) == 2


def test_bench_gen(tmp_path, capsys):
    assert cli.main(["bench-gen", "--out", str(tmp_path / "a")]) == 0
    info = _json_line(capsys.readouterr().out)
    assert info["rows"] == 4096
    with open(tmp_path / "a" / "benchmark.csv", newline="") as fh:
        rows = [r for r in csv.reader(ln for ln in fh if not ln.startswith("#"))]
    body = rows[1:]
    assert len(body) == 4096
    cfg = orc.ExperimentConfig.from_dict({})
    surrogate = orc.build_evaluator(cfg, cfg.schema())
    from fnas.search_space import enumerate_space
    acc = surrogate.accuracy_batch(enumerate_space(cfg.schema()))
    acc_col = rows[0].index("accuracy")
    file_acc = np.array([float(r[acc_col]) for r in body])
    assert int(np.argmax(file_acc)) == int(np.argmax(acc))
    assert info["best_accuracy"] == pytest.approx(float(acc.max()), abs=0)

    assert cli.main(["bench-gen", "--out", str(tmp_path / "b")]) == 0
    assert filecmp.cmp(tmp_path / "a" / "benchmark.csv", tmp_path / "b" / "benchmark.csv", shallow=False)


def test_bench_gen_over_cap_exits_2(tmp_path):
    assert cli.main(["bench-gen", "--cap", "100", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["bench-gen", "--set", "schema=default", "--out", str(tmp_path / "y")]) == 2


def test_grad_check_passes(tmp_path, capsys):
    assert cli.main(["grad-check", "--out", str(tmp_path / "g")]) == 0
    text = capsys.readouterr().out
    for name in ("mlp", "policy_log_likelihood", "ppo_clipped_surrogate", "value_loss", "uncertainty_loss"):
        assert name in text
    assert "FAIL" not in text
    assert cli.main(["grad-check", "--coords", "10"]) == 2


class _Failing:
    def __init__(self, inner):
        self.inner = inner

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def evaluate(self, tokens, sample_id=0, init=None):
        raise DomainError("evaluator exploded")


def test_runtime_abort_exits_3(tmp_path, capsys, monkeypatch):
    real = orc.build_evaluator
    monkeypatch.setattr(orc, "build_evaluator", lambda cfg, schema: _Failing(real(cfg, schema)))
    assert cli.main(["run", "--set", "iterations=2", "--out", str(tmp_path / "r")]) == 3
    err = _json_line(capsys.readouterr().err)
    assert err["error"] == "RunAborted" and err["iteration"] == 1
