"""
Sweeping the prior weight
=========================

Runs the lambda grid at a reduced scale and prints the study table.  Each
cell trains from the same seed, so rows differ only in lambda.
"""

# %%
from clic import run_study
from clic.config import TrainConfig
from clic.evaluation import ProbeConfig, StudyConfig, format_study

scfg = StudyConfig(
    n_images=200,
    seed=0,
    train=TrainConfig(channels=(16, 32, 64), embed_dim=64, resolution=32, queue_capacity=512, epochs=3),
    probe=ProbeConfig(n_labels=100, n_eval=200, epochs=100),
)

# %%
# The lambda=0 row is pure InfoNCE.  The same call runs the other grids,
# e.g. ``run_study("prior_ablation", scfg)``.
print(format_study(run_study("lambda_sweep", scfg)))
