"""Build the four-row ablation table: Baseline -> +CBAM -> +SPM -> full model.

Every row trains from the same seed on the same data, so differences come
from architecture alone. Desk-scale settings keep this to a few minutes.
Run:  python demos/06_ablation_table.py
"""

import numpy as np

from densecount.data import synth_scene
from densecount.density import GaussianSpec
from densecount.evaluation import ablation_run, ablation_to_csv
from densecount.layers import AttentionSpec
from densecount.network import ModelConfig
from densecount.training import desk_scale

base = ModelConfig(
    frontend_channels=[8, "P", 8], spm_rates=[2, 4], spm_branch_channels=8,
    midend_channels=[], backend_channels=[8],
    attention=AttentionSpec(reduction_ratio=2, spatial_kernel=3))

counts = np.random.Generator(np.random.PCG64(9)).integers(2, 9, 12)
scenes = [synth_scene(seed=1200 + i, width=64, height=64, n_objects=int(c))
          for i, c in enumerate(counts)]
dataset = (scenes[:9], scenes[9:])

# these 64 px scenes train on 32 px crops, so the splat window must shrink too
cfg = desk_scale(epochs=30, seed=3, sigma=GaussianSpec(sigma=4.0))
rows = ablation_run(dataset, base, cfg, init="scaled")

print(ablation_to_csv(rows))
for row in rows:
    print(f"{row['configuration']:<22} mae={row['mae']:7.3f}  rmse={row['rmse']:7.3f}  "
          f"final loss={row['final_loss']:.5f}")
