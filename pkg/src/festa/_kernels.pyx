# cython: boundscheck=False, wraparound=False, cdivision=True
# Compiled kernel core: the four hot ops (matmul, gelu, softmax, layernorm)
# and their backward passes, float32 storage with float64 accumulators.
import numpy as np

from libc.math cimport sqrt, exp, tanhf

cdef double GELU_C0 = 0.7978845608028654   # sqrt(2/pi)
cdef double GELU_C1 = 0.044715
cdef float GELU_C0F = 0.7978845608028654
cdef float GELU_C1F = 0.044715


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    # streaming ikj order: both b rows and c rows are walked contiguously
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    cdef float[:, ::1] c = out
    cdef Py_ssize_t i, j, p
    cdef float aip
    with nogil:
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    c[i, j] += aip * b[p, j]
    return out


def matmul_nt(const float[:, ::1] a, const float[:, ::1] b):
    # a @ b.T with b given row-major: contiguous dot products on both sides.
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    out = np.empty((m, n), dtype=np.float32)
    cdef float[:, ::1] c = out
    cdef Py_ssize_t i, j, p
    cdef float acc
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += a[i, p] * b[j, p]
                c[i, j] = acc
    return out


def matmul_tn(const float[:, ::1] a, const float[:, ::1] b):
    # a.T @ b where a is (k, m) row-major: rank-1 updates, contiguous rows.
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    cdef float[:, ::1] c = out
    cdef Py_ssize_t i, j, p
    cdef float api
    with nogil:
        for p in range(k):
            for i in range(m):
                api = a[p, i]
                for j in range(n):
                    c[i, j] += api * b[p, j]
    return out


def gelu(const float[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] y = out
    cdef Py_ssize_t i
    cdef float v, t
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanhf(GELU_C0F * (v + GELU_C1F * v * v * v))
            y[i] = 0.5 * v * (1.0 + t)
    return out


def gelu_grad(const float[::1] x, const float[::1] dy):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] dx = out
    cdef Py_ssize_t i
    cdef float v, u, t, du
    with nogil:
        for i in range(n):
            v = x[i]
            u = GELU_C0F * (v + GELU_C1F * v * v * v)
            t = tanhf(u)
            du = GELU_C0F * (1.0 + 3.0 * GELU_C1F * v * v)
            dx[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out


def softmax2d(const float[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef double m, s, e
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(cols):
                e = exp(x[i, j] - m)
                y[i, j] = <float>e
                s += e
            for j in range(cols):
                y[i, j] = <float>(y[i, j] / s)
    return out


def softmax2d_grad(const float[:, ::1] y, const float[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] dx = out
    cdef Py_ssize_t i, j
    cdef double s
    with nogil:
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                s += y[i, j] * dy[i, j]
            for j in range(cols):
                dx[i, j] = <float>(y[i, j] * (dy[i, j] - s))
    return out


def layernorm2d(const float[:, ::1] x, const float[::1] gain,
                const float[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    y_out = np.empty((rows, cols), dtype=np.float32)
    xhat_out = np.empty((rows, cols), dtype=np.float32)
    inv_out = np.empty(rows, dtype=np.float32)
    cdef float[:, ::1] y = y_out
    cdef float[:, ::1] xhat = xhat_out
    cdef float[::1] inv = inv_out
    cdef Py_ssize_t i, j
    cdef double mu, var, d, istd
    with nogil:
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = x[i, j] - mu
                var += d * d
            var /= cols
            istd = 1.0 / sqrt(var + eps)
            inv[i] = <float>istd
            for j in range(cols):
                d = (x[i, j] - mu) * istd
                xhat[i, j] = <float>d
                y[i, j] = <float>(d * gain[j] + bias[j])
    return y_out, xhat_out, inv_out


def layernorm2d_grad(const float[:, ::1] xhat, const float[::1] inv,
                     const float[::1] gain, const float[:, ::1] dy):
    cdef Py_ssize_t rows = xhat.shape[0], cols = xhat.shape[1]
    dx_out = np.empty((rows, cols), dtype=np.float32)
    dgain_out = np.zeros(cols, dtype=np.float64)
    dbias_out = np.zeros(cols, dtype=np.float64)
    cdef float[:, ::1] dx = dx_out
    cdef double[::1] dgain = dgain_out
    cdef double[::1] dbias = dbias_out
    cdef Py_ssize_t i, j
    cdef double m1, m2, dxh
    with nogil:
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                dxh = dy[i, j] * gain[j]
                m1 += dxh
                m2 += dxh * xhat[i, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                dxh = dy[i, j] * gain[j]
                dx[i, j] = <float>((dxh - m1 - xhat[i, j] * m2) * inv[i])
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
    return dx_out, dgain_out.astype(np.float32), dbias_out.astype(np.float32)
