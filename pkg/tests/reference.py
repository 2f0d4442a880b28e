"""Independent brute-force oracles the tests check library results against.

Everything here is deliberately written the slow, obvious way (plain loops,
no shared code with the library) so the two routes can disagree.
"""

import math

import numpy as np


def naive_conv2d(x, w, b, stride=1, dilation=1, padding=0):
    """Direct-summation cross-correlation, six nested loops."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    eff = dilation * (k - 1) + 1
    Ho = (H + 2 * padding - eff) // stride + 1
    Wo = (W + 2 * padding - eff) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for bb in range(B):
        for oo in range(O):
            for yy in range(Ho):
                for xx in range(Wo):
                    acc = 0.0 if b is None else float(b[oo])
                    for cc in range(C):
                        for i in range(k):
                            for j in range(k):
                                yi = yy * stride + i * dilation - padding
                                xi = xx * stride + j * dilation - padding
                                if 0 <= yi < H and 0 <= xi < W:
                                    acc += x[bb, cc, yi, xi] * w[oo, cc, i, j]
                    out[bb, oo, yy, xx] = acc
    return out


def brute_mae(preds, gts):
    total = 0.0
    for p, g in zip(preds, gts):
        total += abs(p - g)
    return total / len(preds)


def brute_rmse(preds, gts):
    total = 0.0
    for p, g in zip(preds, gts):
        total += abs(p - g) ** 2
    return math.sqrt(total / len(preds))


def splat_mass(px, py, height, width, sigma, trunc):
    """Direct summation of one clipped, unnormalised Gaussian splat."""
    radius = math.ceil(trunc * sigma)
    total = 0.0
    for r in range(height):
        for c in range(width):
            if abs(c - px) <= radius and abs(r - py) <= radius:
                total += math.exp(-((c - px) ** 2 + (r - py) ** 2) / (2 * sigma * sigma))
    return total


def count_parameters_by_hand(frontend, spm_rates, spm_branch, midend, backend,
                             reduction_ratio, spatial_kernel,
                             use_cbam=True, use_spm=True, use_dcm=True):
    """Closed-form parameter count for the layer plan, weights + biases."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    total = 0
    cin = 3
    for entry in frontend:
        if entry == "P":
            continue
        total += conv(cin, entry, 3)
        cin = entry
    if use_cbam:
        hidden = cin // reduction_ratio
        total += cin * hidden + hidden * cin  # shared MLP, no biases
        total += 2 * spatial_kernel * spatial_kernel  # (1, 2, k, k), no bias
    if use_spm:
        total += len(spm_rates) * conv(cin, spm_branch, 3)
        total += conv(spm_branch * len(spm_rates), spm_branch, 1)
        cin = spm_branch
    for width in midend:
        total += conv(cin, width, 3)
        cin = width
    for width in backend:
        total += conv(cin, width, 3)
        if use_dcm:
            total += conv(cin, 18, 3)  # offset predictor
        cin = width
    total += conv(cin, 1, 1)
    return total
