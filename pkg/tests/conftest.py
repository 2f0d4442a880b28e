import numpy as np
import pytest

import densecount as dc
from densecount import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def weighted_sum(out: dc.Tensor, coef: np.ndarray) -> dc.Tensor:
    """Scalar probe: sum(coef * out), used to gradcheck vector-valued ops."""
    return T.sum_all(T.mul(out, dc.Tensor(coef)))


def gradcheck(build, args: dict, coef: np.ndarray, eps: float = 1e-5) -> dict[str, float]:
    """Relative error between tape gradients and central differences.

    ``build`` maps the tensors in ``args`` to an output tensor; the scalar
    probe is sum(coef * output). Returns {arg name: relative error}.
    """
    graph = dc.Graph()
    with graph:
        loss = weighted_sum(build(**args), coef)
    dc.backward(loss, graph)
    errors = {}
    for name, t in args.items():
        if not isinstance(t, dc.Tensor):
            continue

        def probe(perturbed, _name=name):
            call = {k: (perturbed if k == _name else v) for k, v in args.items()}
            return float((build(**call).values * coef).sum())

        numeric = dc.finite_diff_grad(probe, t, eps)
        errors[name] = T.relative_grad_error(t.grad, numeric.values)
        t.clear_grad()
    return errors
