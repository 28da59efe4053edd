"""How fast do rank correlations settle when networks start from pooled blocks?

Trains a handful of toy ring-classification networks from scratch and from a
knowledge pool built on a different draw of the data, and prints the
Spearman correlation of each epoch's accuracies with the fully trained ranks.
A reduced version of the acceptance rank study (fewer networks and epochs).

    python demos/rank_study.py [n_archs]
"""
import sys

import numpy as np

from fnas import analysis as an
from fnas import nn_core as nn
from fnas import orchestrator as orc
from fnas.search_space import random_tokens

n_archs = int(sys.argv[1]) if len(sys.argv) > 1 else 16
cfg = orc.ExperimentConfig.from_dict({"schema": "default"})
archs = random_tokens(cfg.schema(), nn.make_rng(0, "archs"), n_archs)
res = an.rank_acceleration(archs, orc.toy_data(cfg, 1000), orc.toy_data(cfg, 0), source_epochs=30,
                           full_epochs=120, akp_epochs=40, config=orc.toy_trainer_config(cfg))

print(f"pool hit ratio {res.hit_ratio:.3f}")
print("epoch  scratch  pool-init")
for e in (1, 2, 5, 10, 20, 30, 40):
    print(f"{e:>5}  {res.scratch_rho[e - 1]:>7.2f}  {res.akp_rho[e - 1]:>9.2f}")
print(f"first epoch with rho >= 0.8: scratch {res.scratch_epoch}, pool-init {res.akp_epoch}")
print(f"scratch epochs 100-120 vs the epoch-120 reference (run-to-run noise level): {np.mean(res.scratch_rho[99:]):.2f}")
