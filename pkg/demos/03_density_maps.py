"""Gaussian density-map ground truth: splatting, conservation, export.

Run:  python demos/03_density_maps.py   (writes PNGs under demos/out/)
"""

from pathlib import Path

import numpy as np

from densecount.density import (GaussianSpec, downsample_density, generate_density,
                                save_density_png)

out_dir = Path(__file__).parent / "out"

print("== one object = one unit of density mass ==")
spec = GaussianSpec(sigma=15.0, truncation_radius=4.0, renormalize=True)
dmap = generate_density([(100.0, 100.0)], height=201, width=201, spec=spec)
print(f"single centred point: sum = {dmap.total:.9f}")

corner = generate_density([(0.0, 0.0)], 201, 201, spec)
print(f"corner point, renormalised: sum = {corner.total:.9f}")
raw = generate_density([(0.0, 0.0)], 201, 201,
                       GaussianSpec(sigma=15.0, renormalize=False))
print(f"corner point, no renormalisation: sum = {raw.total:.4f} (border mass lost)")

print("\n== counts survive additive splatting and block-sum downsampling ==")
rng = np.random.default_rng(0)
points = [(float(x), float(y)) for x, y in zip(rng.uniform(5, 250, 55), rng.uniform(5, 250, 55))]
dmap = generate_density(points, 256, 256, spec)
print(f"55 points on 256x256: sum = {dmap.total:.6f}")
small = downsample_density(dmap, 8)
print(f"after 8x8 block sums ({small.values.shape[0]}x{small.values.shape[1]} cells): "
      f"sum = {small.total:.6f}")

save_density_png(dmap.values, out_dir / "density_full.png")
save_density_png(small.values, out_dir / "density_eighth.png")
print(f"\nwrote {out_dir / 'density_full.png'} (+ .json sidecars with the max value)")
