"""
Fixed vs joint vs split vs hybrid
=================================

Train a small surrogate victim, then attack it with each optimization
strategy on the same two targets.  Small sizes so it runs in a few minutes;
the acceptance suite runs the full version.
"""
import numpy as np
import torch

from flypatch.attack import AttackSettings, METHODS, evaluate, optimize
from flypatch.data import sample_dataset, split_dataset
from flypatch.victim import train_surrogate

torch.set_num_threads(1)

# victim: a few hundred scenes are enough for a rough surrogate
victim = train_surrogate(sample_dataset(400, seed=1), seed=1, epochs=10, mse_gate=1.0)

train, test = split_dataset(sample_dataset(40, seed=2), 0.9, seed=0)
targets = [[1.0, -1.0, 0.0], [1.0, 1.0, 0.0]]  # push the prediction left or right
# 36 training scenes give two Adam steps per iteration, so use a larger step
# than the default 1e-3 to see movement within 10 iterations
settings = AttackSettings(patch_size=(32, 32), lr=1e-2)

for method in METHODS:
    ps, metrics = optimize(method, victim, train.images, test.images, targets,
                           M=2, N=10, seed=0, R=3, settings=settings)
    first, last = metrics["history"][0], metrics["history"][-1]
    final = evaluate(victim, test.images, ps, targets, settings=settings)
    print("%-6s test loss %.3f -> %.3f   artifact %.3f   patch per target %s"
          % (method, first["loss_test"], last["loss_test"], final["loss"], final["assignment"]))

# placements of the last run, one row per (patch, target)
print(np.round(ps.params.reshape(-1, 3), 3))
