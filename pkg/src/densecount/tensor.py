"""Dense float64 tensors and a tape-based reverse-mode gradient engine.

Every differentiable operation computes its result eagerly with numpy and,
when a :class:`Graph` is active, appends one record (output tensor plus a
backward closure) to the tape. Because records are appended in execution
order the tape is already topologically sorted, so :func:`backward` is a
single reverse sweep that visits each record exactly once.

Conventions, fixed for the whole library:

* values are 64-bit floats, row-major;
* 4-D data is laid out batch x channels x height x width;
* gradients accumulate into ``Tensor.grad`` until the caller clears them;
* random fills use numpy's PCG64 generator so they reproduce bit-for-bit
  across platforms given the same seed;
* reductions use numpy's pairwise summation, which is deterministic for a
  fixed input layout.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError


class Tensor:
    """A dense float64 array plus an optional same-shaped gradient buffer."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values, name: str | None = None):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name or ''} contains non-finite values")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"


class Graph:
    """Ordered tape of executed differentiable operations.

    Used as a context manager: operations executed inside the ``with`` block
    are recorded; outside any block they run forward-only.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.records.append((output, backward_fn))

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "graph contexts closed out of order"


_ACTIVE: list[Graph] = []


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    """Record one operation on the active graph, if any."""
    g = active_graph()
    if g is not None:
        g.record(output, backward_fn)


def backward(loss: Tensor, graph: Graph) -> int:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Gradients accumulate across calls; the training loop owns clearing them.
    Returns the number of tape records visited (always ``len(graph)``).
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.values))
    visits = 0
    for output, backward_fn in reversed(graph.records):
        visits += 1
        if output.grad is not None:
            backward_fn(output.grad)
    return visits


# ---------------------------------------------------------------------------
# creation


def _check_extents(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(shape)
    for extent in shape:
        if not isinstance(extent, (int, np.integer)) or extent < 1:
            raise ShapeError(f"invalid shape {shape}: extents must be positive integers")
    return shape


def zeros(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(_check_extents(shape)), name=name)


def constant(shape: Sequence[int], value: float, name: str | None = None) -> Tensor:
    return Tensor(np.full(_check_extents(shape), float(value)), name=name)


def gaussian(shape: Sequence[int], mean: float, std: float, seed: int,
             name: str | None = None) -> Tensor:
    """Normal fill from a PCG64 stream; bit-identical for identical seeds."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.normal(mean, std, _check_extents(shape)), name=name)


def tensor_create(shape: Sequence[int], init: str = "zeros", *, value: float = 0.0,
                  mean: float = 0.0, std: float = 1.0, seed: int = 0,
                  name: str | None = None) -> Tensor:
    """Dispatching constructor: init is one of 'zeros', 'constant', 'gaussian'."""
    if init == "zeros":
        return zeros(shape, name=name)
    if init == "constant":
        return constant(shape, value, name=name)
    if init == "gaussian":
        return gaussian(shape, mean, std, seed, name=name)
    raise ContractError(f"unknown init {init!r}")


# ---------------------------------------------------------------------------
# elementwise / reduction operations


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast when producing it."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values + b.values)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    record(out, bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values - b.values)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(-g, b.shape))

    record(out, bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    out = Tensor(av * bv)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g * bv, a.shape))
        b.accumulate_grad(_unbroadcast(g * av, b.shape))

    record(out, bw)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.values * factor)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(g * factor)

    record(out, bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = Tensor(av @ bv)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(g @ bv.T)
        b.accumulate_grad(av.T @ g)

    record(out, bw)
    return out


def relu(t: Tensor) -> Tensor:
    mask = t.values > 0.0
    out = Tensor(np.where(mask, t.values, 0.0))

    def bw(g: np.ndarray) -> None:
        t.accumulate_grad(g * mask)

    record(out, bw)
    return out


def sigmoid(t: Tensor) -> Tensor:
    x = t.values
    # split by sign so exp() never overflows
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(s)

    def bw(g: np.ndarray) -> None:
        t.accumulate_grad(g * s * (1.0 - s))

    record(out, bw)
    return out


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(t.values.reshape(shape))

    def bw(g: np.ndarray) -> None:
        t.accumulate_grad(g.reshape(t.shape))

    record(out, bw)
    return out


def sum_all(t: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor.

    Accumulation order is numpy's pairwise summation over the row-major
    buffer: fixed and deterministic, so equal tensors always produce the
    bit-identical sum. d(sum)/dx_i = 1 for every element.
    """
    if t.values.size < 1:
        raise ShapeError("sum_all of an empty tensor")
    out = Tensor(np.sum(t.values))

    def bw(g: np.ndarray) -> None:
        t.accumulate_grad(np.full(t.shape, g.reshape(-1)[0]))

    record(out, bw)
    return out


# ---------------------------------------------------------------------------
# finite differences (the oracle used by every gradient test)


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], t: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar-valued ``f`` at ``t``.

    ``f`` must be deterministic and side-effect free; ``t`` is perturbed in
    place one element at a time and restored afterwards.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    flat = t.values.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _as_float(f(t))
        flat[i] = orig - eps
        fm = _as_float(f(t))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out.reshape(t.shape))


def _as_float(x) -> float:
    if isinstance(x, Tensor):
        return x.item()
    return float(x)


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference, relative to the numeric gradient's magnitude."""
    denom = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / denom
