"""Hot-op backends: compiled extension core with a numpy fallback.

The four kernels that dominate training time (matmul, gelu, softmax,
layernorm) exist twice: in ``festa._kernels`` (Cython, built by setup.py)
and here in plain numpy. One of them is selected once at import time via
``FESTA_KERNELS``:

* ``auto`` (default) — use the extension if it was built, else numpy
* ``cython`` — require the extension, fail loudly if missing
* ``numpy`` — force the fallback

``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_GELU_C0 = np.float32(0.7978845608028654)  # sqrt(2/pi)
_GELU_C1 = np.float32(0.044715)


def _np_matmul(a, b):
    return np.matmul(a, b)


def _np_matmul_nt(a, b):
    return np.matmul(a, b.T)


def _np_matmul_tn(a, b):
    return np.matmul(a.T, b)


def _np_gelu(x):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(u))


def _np_gelu_grad(x, dy):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C0 * (np.float32(1.0) + np.float32(3.0) * _GELU_C1 * x * x)
    half = np.float32(0.5)
    return dy * (half * (np.float32(1.0) + t) + half * x * (np.float32(1.0) - t * t) * du)


def _np_softmax2d(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax2d_grad(y, dy):
    return y * (dy - (y * dy).sum(axis=1, keepdims=True))


def _np_layernorm2d(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = np.float32(1.0) / np.sqrt(var + np.float32(eps))
    xhat = (x - mu) * inv
    return xhat * gain + bias, xhat, inv.reshape(-1).astype(np.float32)


def _np_layernorm2d_grad(xhat, inv, gain, dy):
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv.reshape(-1, 1)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


_NUMPY_IMPL = {
    "matmul": _np_matmul,
    "matmul_nt": _np_matmul_nt,
    "matmul_tn": _np_matmul_tn,
    "gelu": _np_gelu,
    "gelu_grad": _np_gelu_grad,
    "softmax2d": _np_softmax2d,
    "softmax2d_grad": _np_softmax2d_grad,
    "layernorm2d": _np_layernorm2d,
    "layernorm2d_grad": _np_layernorm2d_grad,
}


def _cython_impl(ext):
    def gelu(x):
        return ext.gelu(x.ravel()).reshape(x.shape)

    def gelu_grad(x, dy):
        return ext.gelu_grad(x.ravel(), dy.ravel()).reshape(x.shape)

    def layernorm2d(x, gain, bias, eps):
        return ext.layernorm2d(x, gain, bias, float(eps))

    return {
        "matmul": ext.matmul,
        "matmul_nt": ext.matmul_nt,
        "matmul_tn": ext.matmul_tn,
        "gelu": gelu,
        "gelu_grad": gelu_grad,
        "softmax2d": ext.softmax2d,
        "softmax2d_grad": ext.softmax2d_grad,
        "layernorm2d": layernorm2d,
        "layernorm2d_grad": ext.layernorm2d_grad,
    }


def load_backend(name: str):
    """Return (backend_name, impl dict) for an explicit backend name."""
    if name == "numpy":
        return "numpy", _NUMPY_IMPL
    if name in ("auto", "cython"):
        try:
            from festa import _kernels as ext
        except ImportError:
            if name == "cython":
                raise ImportError(
                    "FESTA_KERNELS=cython but festa._kernels is not built; "
                    "run `pip install -e .` with Cython available"
                ) from None
            return "numpy", _NUMPY_IMPL
        return "cython", _cython_impl(ext)
    raise ValueError(f"unknown kernel backend {name!r}")


BACKEND, _impl = load_backend(os.environ.get("FESTA_KERNELS", "auto").lower())

matmul = _impl["matmul"]
matmul_nt = _impl["matmul_nt"]
matmul_tn = _impl["matmul_tn"]
gelu = _impl["gelu"]
gelu_grad = _impl["gelu_grad"]
softmax2d = _impl["softmax2d"]
softmax2d_grad = _impl["softmax2d_grad"]
layernorm2d = _impl["layernorm2d"]
layernorm2d_grad = _impl["layernorm2d_grad"]
