"""Run every ablation variant on a small dataset and print the test-split table."""
from mbsl import datagen, trainer
from mbsl.trainer import TrainConfig

ds = datagen.generate(0, 256, 50.0, 256, datagen.default_specs())
cfg = TrainConfig(seed=0, epochs=10, max_steps=60)
table = trainer.ablation_table(trainer.ablate(ds, cfg))

print(f"{'variant':<22}{'K':>3}{'loss':>16}{'params':>9}{'rmse':>9}{'mae':>9}")
for r in table["rows"]:
    print(f"{r['variant']:<22}{r['groups']:>3}{r['loss']:>16}{r['n_params']:>9}{r['rmse']:>9.4f}{r['mae']:>9.4f}")
