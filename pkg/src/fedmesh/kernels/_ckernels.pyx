# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels; same contract as ``_pykernels``."""
import numpy as np

from libc.math cimport exp, fabs, log, sqrt
from libc.stdlib cimport free, malloc

cdef double PROB_FLOOR = 1e-12


cdef inline void _probs(double z0, double z1, double* p0, double* p1) noexcept nogil:
    cdef double d = z1 - z0
    cdef double e = exp(-fabs(d))
    if d >= 0:
        p1[0] = 1.0 / (1.0 + e)
        p0[0] = e / (1.0 + e)
    else:
        p0[0] = 1.0 / (1.0 + e)
        p1[0] = e / (1.0 + e)


cdef double _batch_grad(const double[:, ::1] feats, const long long[::1] labels,
                        const long long[::1] idx, Py_ssize_t start, Py_ssize_t stop,
                        const double[::1] p, double[::1] g, double* pre,
                        Py_ssize_t F, Py_ssize_t H) noexcept nogil:
    """Mean loss over rows idx[start:stop]; writes the mean gradient into g."""
    cdef Py_ssize_t o1 = F * H, o2 = o1 + H, o3 = o2 + 2 * H
    cdef Py_ssize_t P = o3 + 2
    cdef Py_ssize_t r, row, i, j
    cdef double n = <double>(stop - start)
    cdef double z0, z1, p0, p1, pt, dz0, dz1, h, da, fi, total = 0.0
    cdef long long y

    for i in range(P):
        g[i] = 0.0

    for r in range(start, stop):
        row = idx[r]
        y = labels[row]
        for j in range(H):
            pre[j] = p[o1 + j]
        for i in range(F):
            fi = feats[row, i]
            for j in range(H):
                pre[j] += fi * p[i * H + j]
        z0 = p[o3]
        z1 = p[o3 + 1]
        for j in range(H):
            h = pre[j] if pre[j] > 0.0 else 0.0
            z0 += h * p[o2 + 2 * j]
            z1 += h * p[o2 + 2 * j + 1]
        _probs(z0, z1, &p0, &p1)
        pt = p1 if y == 1 else p0
        total += -log(pt if pt > PROB_FLOOR else PROB_FLOOR)
        if pt < PROB_FLOOR:
            continue
        dz0 = (p0 - (1.0 if y == 0 else 0.0)) / n
        dz1 = (p1 - (1.0 if y == 1 else 0.0)) / n
        g[o3] += dz0
        g[o3 + 1] += dz1
        for j in range(H):
            if pre[j] > 0.0:
                g[o2 + 2 * j] += pre[j] * dz0
                g[o2 + 2 * j + 1] += pre[j] * dz1
                da = p[o2 + 2 * j] * dz0 + p[o2 + 2 * j + 1] * dz1
                g[o1 + j] += da
                for i in range(F):
                    g[i * H + j] += feats[row, i] * da
    return total / n


cdef void _adam(double[::1] params, const double[::1] grad, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps,
                double bc1, double bc2) noexcept nogil:
    cdef Py_ssize_t i
    cdef double gi, step
    for i in range(params.shape[0]):
        gi = grad[i]
        m[i] = m[i] * beta1 + (1.0 - beta1) * gi
        v[i] = v[i] * beta2 + (1.0 - beta2) * (gi * gi)
        step = lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)
        params[i] = <double>(<float>(params[i] - step))


def forward(feats, params, Py_ssize_t F, Py_ssize_t H):
    cdef const double[:, ::1] f = np.ascontiguousarray(feats, dtype=np.float64)
    cdef const double[::1] p = np.ascontiguousarray(params, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], o1 = F * H, o2 = o1 + H, o3 = o2 + 2 * H
    out = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double* pre = <double*>malloc(H * sizeof(double))
    cdef Py_ssize_t r, i, j
    cdef double z0, z1, h, fi
    if pre == NULL:
        raise MemoryError()
    try:
        with nogil:
            for r in range(n):
                for j in range(H):
                    pre[j] = p[o1 + j]
                for i in range(F):
                    fi = f[r, i]
                    for j in range(H):
                        pre[j] += fi * p[i * H + j]
                z0 = p[o3]
                z1 = p[o3 + 1]
                for j in range(H):
                    h = pre[j] if pre[j] > 0.0 else 0.0
                    z0 += h * p[o2 + 2 * j]
                    z1 += h * p[o2 + 2 * j + 1]
                _probs(z0, z1, &o[r, 0], &o[r, 1])
    finally:
        free(pre)
    return out


def loss_and_grad(feats, labels, params, Py_ssize_t F, Py_ssize_t H):
    cdef const double[:, ::1] f = np.ascontiguousarray(feats, dtype=np.float64)
    cdef const long long[::1] y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef const double[::1] p = np.ascontiguousarray(params, dtype=np.float64)
    cdef const long long[::1] idx = np.arange(f.shape[0], dtype=np.int64)
    grad = np.empty(p.shape[0], dtype=np.float64)
    cdef double[::1] g = grad
    cdef double* pre = <double*>malloc(H * sizeof(double))
    cdef double loss
    if pre == NULL:
        raise MemoryError()
    try:
        with nogil:
            loss = _batch_grad(f, y, idx, 0, f.shape[0], p, g, pre, F, H)
    finally:
        free(pre)
    return loss, grad


def adam_update(double[::1] params, const double[::1] grad, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, double bc1, double bc2):
    with nogil:
        _adam(params, grad, m, v, lr, beta1, beta2, eps, bc1, bc2)


def train_epochs(feats, labels, orders, Py_ssize_t batch_size, double[::1] params,
                 double[::1] m, double[::1] v, long long step, double lr,
                 double beta1, double beta2, double eps, Py_ssize_t F, Py_ssize_t H):
    cdef const double[:, ::1] f = np.ascontiguousarray(feats, dtype=np.float64)
    cdef const long long[::1] y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef const long long[:, ::1] ords = np.ascontiguousarray(orders, dtype=np.int64)
    cdef Py_ssize_t n = f.shape[0], E = ords.shape[0], e, start, stop
    losses = np.zeros(E, dtype=np.float64)
    cdef double[::1] ls = losses
    grad = np.empty(params.shape[0], dtype=np.float64)
    cdef double[::1] g = grad
    cdef double* pre = <double*>malloc(H * sizeof(double))
    cdef double total, loss, bc1, bc2
    if pre == NULL:
        raise MemoryError()
    try:
        for e in range(E):
            total = 0.0
            start = 0
            while start < n:
                stop = start + batch_size if start + batch_size < n else n
                with nogil:
                    loss = _batch_grad(f, y, ords[e], start, stop, params, g, pre, F, H)
                step += 1
                # same pow() expressions as the numpy path
                bc1 = 1.0 - beta1 ** step
                bc2 = 1.0 - beta2 ** step
                with nogil:
                    _adam(params, g, m, v, lr, beta1, beta2, eps, bc1, bc2)
                total += loss * (stop - start)
                start = stop
            ls[e] = total / n
    finally:
        free(pre)
    return step, losses
