"""Tour of the tensor engine: tapes, gradients, and the finite-difference oracle.

Run:  python demos/01_autograd_basics.py
"""

import numpy as np

import densecount as dc
from densecount import tensor as T

print("== creating tensors ==")
w = dc.gaussian([3], mean=0.0, std=0.01, seed=7, name="w")
print("gaussian(0, 0.01, seed=7):", w.values)
print("same seed again:         ", dc.gaussian([3], 0.0, 0.01, seed=7).values)

print("\n== recording a computation and differentiating it ==")
x = dc.Tensor([2.0, 3.0, 5.0], name="x")
graph = dc.Graph()
with graph:
    # loss = sum(x * x); d(loss)/dx = 2x
    loss = T.sum_all(T.mul(x, x))
print("loss:", loss.item())
visits = dc.backward(loss, graph)
print("tape records:", len(graph), "| reverse visits:", visits)
print("analytic gradient:", x.grad)

numeric = dc.finite_diff_grad(lambda t: float((t.values ** 2).sum()), x, eps=1e-5)
print("finite differences:", numeric.values)
print("max abs difference:", np.abs(x.grad - numeric.values).max())

print("\n== gradients accumulate until cleared ==")
graph = dc.Graph()
with graph:
    loss = T.sum_all(x)
dc.backward(loss, graph)
print("after a second backward, grad =", x.grad, "(2x + ones)")
x.clear_grad()
print("cleared:", x.grad)
