import numpy as np
import pytest

import festa.tensor as T
from festa.params import ParamSet

# Central finite differences at a power-of-two step near 1e-3; comparisons
# use relative L2 over whole gradients to keep f32 forward noise in check.
FD_EPS = 2.0 ** -10
GRAD_RTOL = 1e-3


def numeric_grad(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central-difference gradient of scalar f at x (mutates x transiently)."""
    g = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return g.reshape(x.shape)


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(b.reshape(-1))), 1e-12)
    return float(np.linalg.norm((a - b).reshape(-1))) / denom


def gradcheck_scalar(build, x0: np.ndarray, rtol: float = GRAD_RTOL,
                     eps: float = FD_EPS) -> float:
    """Check autodiff of `build(graph, x_var) -> scalar Var` against central
    finite differences; returns the relative L2 error."""
    ps = ParamSet("gradcheck")
    ps.add("x", x0.copy())
    g = T.Graph()
    loss = build(g, g.param(ps, "x"))
    g.backward(loss)
    analytic = ps.grad("x").astype(np.float64)

    def f(xv):
        g2 = T.Graph()
        return float(build(g2, g2.leaf(xv)).value.reshape(-1).sum())

    numeric = numeric_grad(f, x0.copy(), eps)
    err = rel_l2(analytic, numeric)
    assert err < rtol, f"gradient mismatch: rel l2 {err}"
    return err


def make_reducer(rng: np.random.Generator):
    """Random-weighted scalar reduction with weights frozen per shape, so the
    same function is evaluated by the analytic pass and every FD probe."""
    cache: dict[tuple, np.ndarray] = {}

    def reduce(g: T.Graph, v: T.Var) -> T.Var:
        w = cache.get(v.value.shape)
        if w is None:
            w = rng.standard_normal(v.value.shape).astype(np.float32)
            cache[v.value.shape] = w
        return T.sum_all(T.mul(v, g.constant(w)))

    return reduce


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
