"""Baseline search vs each acceleration module on the 4096-architecture space.

Runs every module combination for a short budget with shared seeds, then
prints the ablation table and how many activated samples each arm needed to
first reach the best reward the baseline found.

    python demos/search_ablation.py [iterations]
"""
import sys

from fnas import analysis as an
from fnas import orchestrator as orc

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 80
combos = {"baseline": {}, "uac": {"uac": True}, "aeb": {"aeb": True}, "uac+akp+aeb": {"uac": True, "akp": True,
                                                                                     "aeb": True}}
reports = {}
for name, modules in combos.items():
    cfg = orc.ExperimentConfig.from_dict({"seed": 0, "iterations": iterations, "modules": modules,
                                          "aeb": {"capacity": 32}})
    reports[name] = orc.run(cfg)
    print(f"{name:<12} best {reports[name].best_reward:.5f}  activated {reports[name].activated_samples}")

print()
print(an.format_table(an.ablation_table(reports.values())))

target = reports["baseline"].best_reward
base = reports["baseline"].activated_to_reach(target)
print(f"\nactivated samples to reach the baseline's best ({target:.5f}):")
for name, rep in reports.items():
    reach = rep.activated_to_reach(target)
    print(f"  {name:<12} {reach if reach is not None else 'not reached':>12}"
          + (f"   ratio {reach / base:.2f}" if reach is not None else ""))
