# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Single-pass C loops for the row/elementwise operations that the numpy
backend spells out with several temporaries. Semantics must match
``_numpy.py``; the parity tests compare both backends directly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt, pow as c_pow

cnp.import_array()

NAME = "native"


def relu(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(k):
            out[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def step(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(k):
            out[i, j] = 1.0 if x[i, j] > 0.0 else 0.0
    return out_arr


def logistic(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(k):
            out[i, j] = 1.0 / (1.0 + c_exp(-x[i, j]))
    return out_arr


def row_logsumexp(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out_arr = np.empty((n, 1), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            s += c_exp(x[i, j] - m)
        out[i, 0] = c_log(s) + m
    return out_arr


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            out[i, j] = c_exp(x[i, j] - m)
            s += out[i, j]
        for j in range(k):
            out[i, j] /= s
    return out_arr


def sgd_momentum_update(double[:, ::1] param, double[:, ::1] grad,
                        double[:, ::1] buf, double lr, double momentum,
                        double weight_decay):
    cdef Py_ssize_t n = param.shape[0], k = param.shape[1], i, j
    cdef double g
    for i in range(n):
        for j in range(k):
            g = grad[i, j] + weight_decay * param[i, j]
            buf[i, j] = momentum * buf[i, j] + g
            param[i, j] -= lr * buf[i, j]


def adam_update(double[:, ::1] param, double[:, ::1] grad, double[:, ::1] m,
                double[:, ::1] v, double lr, double beta1, double beta2,
                double eps, long t):
    cdef Py_ssize_t n = param.shape[0], k = param.shape[1], i, j
    cdef double c1 = 1.0 - c_pow(beta1, t)
    cdef double c2 = 1.0 - c_pow(beta2, t)
    cdef double mhat, vhat
    for i in range(n):
        for j in range(k):
            m[i, j] = beta1 * m[i, j] + (1.0 - beta1) * grad[i, j]
            v[i, j] = beta2 * v[i, j] + (1.0 - beta2) * grad[i, j] * grad[i, j]
            mhat = m[i, j] / c1
            vhat = v[i, j] / c2
            param[i, j] -= lr * mhat / (c_sqrt(vhat) + eps)
