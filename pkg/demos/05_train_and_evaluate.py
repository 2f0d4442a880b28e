"""Train a small counting network on synthetic scenes and score it.

Takes a couple of minutes on a laptop CPU.
Run:  python demos/05_train_and_evaluate.py
"""

import numpy as np

from densecount.data import synth_scene
from densecount.evaluation import evaluate, format_table, mae
from densecount.layers import AttentionSpec
from densecount.network import ModelConfig, build_aspdnet
from densecount.training import desk_scale, train

config = ModelConfig(
    frontend_channels=[8, "P", 16, "P", 16], spm_rates=[2, 4], spm_branch_channels=16,
    midend_channels=[], backend_channels=[16],
    attention=AttentionSpec(reduction_ratio=4, spatial_kernel=7))

counts = np.random.Generator(np.random.PCG64(5)).integers(3, 13, 24)
scenes = [synth_scene(seed=900 + i, width=96, height=96, n_objects=int(c))
          for i, c in enumerate(counts)]
train_images, test_images = scenes[:18], scenes[18:]

# from-scratch desk runs need the fan-in-scaled init; the 0.01 constant is
# meant for the full-width model (see build_aspdnet docs)
model = build_aspdnet(config, seed=1, init="scaled")
cfg = desk_scale(epochs=12, seed=1, checkpoint_every=6)

print(f"training on {len(train_images)} scenes "
      f"({len(train_images) * 18} augmented patches per epoch)...")
model, log = train(model, train_images, cfg, probe=False)
losses = log.losses()
print(f"epoch mean loss: {losses[0]:.5f} -> {losses[-1]:.5f}")

metrics = evaluate(model, test_images)
print()
print(format_table(metrics, title=f"held-out scenes ({len(test_images)})"))

mean_count = float(np.mean([img.count for img in train_images]))
baseline = mae([mean_count] * len(test_images), [img.count for img in test_images])
print(f"constant-mean baseline MAE: {baseline:.3f}  |  model MAE: {metrics.mae:.3f}")
