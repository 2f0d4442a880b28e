"""The layer zoo: dilated convolution, pooling, deformable sampling, attention.

Run:  python demos/02_operators.py
"""

import numpy as np

import densecount as dc
from densecount.layers import (AttentionSpec, ConvSpec, bilinear_sample, channel_attention,
                               concat_channels, conv2d, deformable_conv2d, max_pool2x2,
                               spatial_attention)

rng = np.random.default_rng(1)

print("== dilated convolution enlarges the receptive field ==")
for rate in (1, 2, 4, 8, 12):
    spec = ConvSpec(kernel_size=3, in_channels=1, out_channels=1, dilation=rate, padding=rate)
    print(f"rate {rate:>2}: effective kernel extent {spec.effective_kernel_extent:>2}, "
          f"64x64 input -> {spec.out_extent(64)}x{spec.out_extent(64)} output")

print("\n== three 2x2 pools give the 1/8-per-side (1/64 area) feature grid ==")
x = dc.Tensor(rng.uniform(0, 1, (1, 1, 512, 512)))
out = max_pool2x2(max_pool2x2(max_pool2x2(x)))
print("512x512 ->", out.shape[2:], "cells")

print("\n== bilinear sampling between pixels ==")
feature = dc.Tensor(np.array([[[0.0, 0.0], [0.0, 4.0]]]))
print("value at the centre of [[0,0],[0,4]]:", bilinear_sample(feature, 0.5, 0.5).values)
print("value far outside the map:", bilinear_sample(feature, -10, -10).values)

print("\n== deformable convolution = convolution + learned sampling shifts ==")
row = dc.Tensor(np.array([[[[0.0, 2.0, 4.0]]]]))
ident = dc.constant([1, 1, 1, 1], 1.0)
offsets = np.zeros((1, 2, 1, 3))
offsets[:, 1] = 0.5  # shift every tap half a pixel to the right
shifted = deformable_conv2d(row, ident, None, dc.Tensor(offsets), ConvSpec(1, 1, 1))
print("row [0, 2, 4] sampled at +0.5 px:", shifted.values.ravel())

x = dc.Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)))
w = dc.Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))
zero_off = dc.zeros([1, 18, 6, 6])
spec = ConvSpec(3, 2, 2, padding=1)
diff = np.abs(deformable_conv2d(x, w, None, zero_off, spec).values
              - conv2d(x, w, None, spec).values).max()
print("zero offsets vs plain convolution, max |diff|:", diff)

print("\n== channel then spatial attention gates, both in (0, 1) ==")
spec = AttentionSpec(reduction_ratio=2, spatial_kernel=3)
feats = dc.Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)))
w1 = dc.Tensor(rng.normal(0, 0.5, (4, 2)))
w2 = dc.Tensor(rng.normal(0, 0.5, (2, 4)))
sw = dc.Tensor(rng.normal(0, 0.5, (1, 2, 3, 3)))
cg = channel_attention(feats, w1, w2, spec)
gated = dc.tensor.mul(feats, cg)
sg = spatial_attention(gated, sw, spec)
gated = dc.tensor.mul(gated, sg)
print("channel gate:", np.round(cg.values.ravel(), 3))
print("spatial gate range: (%.3f, %.3f)" % (sg.values.min(), sg.values.max()))
print("gating never amplifies:", bool(np.all(np.abs(gated.values) <= np.abs(feats.values))))

print("\n== concatenation stacks scale-pyramid branches ==")
branches = [dc.Tensor(rng.uniform(0, 1, (1, 8, 4, 4))) for _ in range(4)]
print("4 branches of 8 channels ->", concat_channels(branches).shape)
