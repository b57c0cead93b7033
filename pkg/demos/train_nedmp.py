"""Training NEDMP and the node-level GNN on small grids.

A dataset of 40 grid instances is labelled by simulation, split into
train/validation/test, and both learned models are fitted with the default
training loop. The test-split L1 error is compared with plain DMP, whose
error on a grid comes from the short loops it ignores.

Run with ``python3 demos/train_nedmp.py`` (about two minutes on one core).
"""

import numpy as np

from nedmp import NEDMP, NodeGNN
from nedmp.training import DatasetConfig, TrainConfig, evaluate, make_dataset, train

cfg = DatasetConfig(kind="grid", size=12, count=40, n_runs=20_000)
data = make_dataset(cfg, seed=0)
test = data.split("test")
print(f"{len(data.split('train'))} train / {len(data.split('val'))} val / {len(test)} test instances")

results = {"dmp": float(np.mean(evaluate("dmp", test)))}
for model in (NEDMP(seed=0), NodeGNN(seed=0)):
    log = train(model, data, TrainConfig(max_epochs=8), seed=0)
    best = min(row["val_loss"] for row in log)
    print(f"{model.kind}: {len(log)} epochs, best validation loss {best:.4f}")
    results[model.kind] = float(np.mean(evaluate(model, test)))

print("\nmean test L1 per node and step")
for name, l1 in results.items():
    print(f"  {name:8s} {l1:.4f}")
