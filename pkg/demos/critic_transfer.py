"""Warm-starting the critic from a related task.

Searches task A with the critic on, then searches a related task B twice,
once with a fresh critic and once starting from A's critic, and prints the
critic's absolute error on each new batch before it trains on it.

    python demos/critic_transfer.py
"""
import os
import tempfile

from fnas import orchestrator as orc

family = {"family_seed": 500, "share": 0.8}
common = {"seed": 0, "modules": {"uac": True}}

with tempfile.TemporaryDirectory() as tmp:
    task_a = orc.ExperimentConfig.from_dict({**common, "iterations": 150, "evaluator": {**family, "seed": 100}})
    orc.run(task_a, tmp)
    task_b = {**common, "iterations": 40, "evaluator": {**family, "seed": 200}}
    cold = orc.run(orc.ExperimentConfig.from_dict(task_b))
    warm = orc.run(orc.ExperimentConfig.from_dict({**task_b,
                                                   "transfer": {"critic": os.path.join(tmp, "critic.ckpt")}}))

print("iter  activated(cold)  L_V cold  L_V warm")
for c, w in list(zip(cold.metrics, warm.metrics))[::4]:
    print(f"{c['iter']:>4}  {c['activated']:>15}  {c['L_V']:>8.3f}  {w['L_V']:>8.3f}")
print(f"warm start recorded in report: {warm.warm_start}")
