# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense-network kernels.

Same contract as ``_pykernels``: batches are C-contiguous float64 arrays,
weights are (out, in) row-major.  Matrix products are delegated to numpy's
BLAS (faster than scipy's bundled one at these sizes); bias, ReLU,
derivative, column-sum and Adam passes are fused single-pass loops.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow

cnp.import_array()

DEF LINEAR = 0
DEF RELU = 1
DEF TANH = 2
DEF SIGMOID = 3

_dot = np.dot
_tanh = np.tanh
_empty = np.empty


cdef inline double* _ptr(cnp.ndarray a):
    return <double*>cnp.PyArray_DATA(a)


cdef void _add_bias(double* z, const double* b, Py_ssize_t rows, Py_ssize_t cols,
                    bint relu) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef double t
    for r in range(rows):
        for c in range(cols):
            t = z[r * cols + c] + b[c]
            if relu:
                t = t if t > 0.0 else 0.0
            z[r * cols + c] = t


cdef void _tanh_to_sigmoid(double* z, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(size):
        z[k] = 0.5 * (z[k] + 1.0)


cdef void _scale_by_derivative(double* g, const double* h, Py_ssize_t size, int code) noexcept nogil:
    cdef Py_ssize_t k
    cdef double v
    if code == RELU:
        for k in range(size):
            g[k] = g[k] if h[k] > 0.0 else 0.0
    elif code == TANH:
        for k in range(size):
            v = h[k]
            g[k] = g[k] * (1.0 - v * v)
    else:
        for k in range(size):
            v = h[k]
            g[k] = g[k] * (v * (1.0 - v))


cdef void _colsum(const double* g, double* out, Py_ssize_t rows, Py_ssize_t cols) noexcept nogil:
    cdef Py_ssize_t r, c
    for c in range(cols):
        out[c] = 0.0
    for r in range(rows):
        for c in range(cols):
            out[c] += g[r * cols + c]


def mlp_forward(x, list weights, list biases, int hidden_code, int out_code):
    cdef Py_ssize_t n = len(weights)
    cdef Py_ssize_t i
    cdef int code
    cdef cnp.ndarray z
    acts = []
    h = x
    for i in range(n):
        W = weights[i]
        code = hidden_code if i < n - 1 else out_code
        z = _dot(h, W.T)
        _add_bias(_ptr(z), _ptr(biases[i]), z.shape[0], z.shape[1], code == RELU)
        if code == TANH:
            _tanh(z, out=z)
        elif code == SIGMOID:
            # sigmoid(t) = (tanh(t/2) + 1) / 2
            z *= 0.5
            _tanh(z, out=z)
            _tanh_to_sigmoid(_ptr(z), z.size)
        acts.append(z)
        h = z
    return acts


def mlp_backward(x, list weights, list acts, gout, int hidden_code, int out_code,
                 bint need_dx, bint need_params):
    cdef Py_ssize_t n = len(weights)
    cdef Py_ssize_t i
    cdef int code
    cdef cnp.ndarray g, db
    g = np.array(gout, dtype=np.float64, order="C", copy=True)
    dws = [None] * n if need_params else None
    dbs = [None] * n if need_params else None
    for i in range(n - 1, -1, -1):
        code = hidden_code if i < n - 1 else out_code
        if code != LINEAR:
            _scale_by_derivative(_ptr(g), _ptr(acts[i]), g.size, code)
        if need_params:
            inp = acts[i - 1] if i > 0 else x
            dws[i] = _dot(g.T, inp)
            db = _empty(g.shape[1], dtype=np.float64)
            _colsum(_ptr(g), _ptr(db), g.shape[0], g.shape[1])
            dbs[i] = db
        if i > 0 or need_dx:
            g = _dot(g, weights[i])
    return (g if need_dx else None), dws, dbs


def adam_update(cnp.ndarray param, cnp.ndarray grad, cnp.ndarray m, cnp.ndarray v,
                double lr, double beta1, double beta2, double eps, long step):
    cdef Py_ssize_t k
    cdef Py_ssize_t size = param.size
    cdef double* p = _ptr(param)
    cdef double* gr = _ptr(grad)
    cdef double* m1 = _ptr(m)
    cdef double* m2 = _ptr(v)
    cdef double step_size = lr / (1.0 - pow(beta1, <double>step))
    cdef double inv_sqrt_bc2 = 1.0 / sqrt(1.0 - pow(beta2, <double>step))
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    cdef double gk
    with nogil:
        for k in range(size):
            gk = gr[k]
            m1[k] = m1[k] * beta1 + c1 * gk
            m2[k] = m2[k] * beta2 + c2 * (gk * gk)
            p[k] -= step_size * m1[k] / (sqrt(m2[k]) * inv_sqrt_bc2 + eps)
