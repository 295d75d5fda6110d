"""Pretrain the grouped encoders for 200 steps and probe them against a random init.

The loss should fall to about half its starting value, and the frozen
pretrained features should give a lower test MAE than untrained ones.
"""
import sys

import numpy as np

from mbsl import datagen, trainer
from mbsl.trainer import TrainConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
ds = datagen.generate(seed, 512, 50.0, 256, datagen.default_specs())
cfg = TrainConfig(seed=seed, epochs=23, max_steps=200)

bank, grouping, report = trainer.run(ds, cfg)
curve = np.array(report.loss_curve)
print(f"groups {grouping.groups}, {report.n_params} parameters, {report.wall_clock:.0f}s")
for step in range(0, len(curve), 25):
    print(f"step {step:3d}  loss {curve[step]:.3f}")
print(f"last/first 20-step mean: {curve[-20:].mean() / curve[:20].mean():.3f}")

random_init = trainer._build_bank(ds, grouping, cfg)
baseline = trainer.linear_probe(random_init, grouping, ds, cfg)
print(f"test MAE  pretrained {report.metrics['test']['mae']:.4f}  random init {baseline['test']['mae']:.4f}")
