"""Flat early attention: fixed tau=30 against plain softmax on handwritten digits."""

# %%
import math

import numpy as np

from dyconv import ops
from dyconv.data import load_dataset
from dyconv.tensor import Tensor
from dyconv.train import AnnealTau, TrainConfig, tau_at, train

z = Tensor(np.array([[2.0, 0.5, -1.0, 0.0]]))
for tau in (1, 5, 30):
    p = ops.softmax_with_temperature(z, tau).data[0]
    print(f"tau={tau:>2}  pi={p.round(3)}  entropy={-(p * np.log(p)).sum():.3f} (max {math.log(4):.3f})")

print([round(tau_at(AnnealTau(), e), 1) for e in range(12)])

# %% a few seeds, short runs (about 15 s each)
datasets = load_dataset("digits")
for seed in range(3):
    row = []
    for tau in (30.0, 1.0):
        cfg = TrainConfig(epochs=15, seed=seed, tau_schedule={"kind": "constant", "tau": tau})
        row.append(train(cfg, datasets=datasets).history[-1]["top1"])
    print(f"seed {seed}: tau=30 {row[0]:.4f}   tau=1 {row[1]:.4f}")
