# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled skip-gram / hierarchical-softmax SGD loop."""

from libc.math cimport exp, log1p


cdef inline double _neg_log_sigmoid(double x) noexcept nogil:
    if x >= 0:
        return log1p(exp(-x))
    return -x + log1p(exp(x))


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double z
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    z = exp(x)
    return z / (1.0 + z)


def train_pairs(double[:, ::1] syn0, double[:, ::1] syn1,
                const int[::1] centers, const int[::1] targets,
                const int[:, ::1] points, const double[:, ::1] signs, const int[::1] codelens,
                double lr_start, double lr_end, long long start, long long total,
                double[::1] work):
    """SGD over (center, target) pairs in order; returns the summed pre-update loss."""
    cdef Py_ssize_t n = centers.shape[0]
    cdef Py_ssize_t dim = syn0.shape[1]
    cdef Py_ssize_t k, l, d
    cdef int c, t, p
    cdef double lr, f, s, sig, g, loss = 0.0
    with nogil:
        for k in range(n):
            c = centers[k]
            t = targets[k]
            lr = lr_start - (lr_start - lr_end) * (<double>(start + k)) / (<double>total)
            for d in range(dim):
                work[d] = 0.0
            for l in range(codelens[t]):
                p = points[t, l]
                s = signs[t, l]
                f = 0.0
                for d in range(dim):
                    f = f + syn0[c, d] * syn1[p, d]
                loss += _neg_log_sigmoid(s * f)
                sig = _sigmoid(s * f)
                g = (sig - 1.0) * s
                for d in range(dim):
                    work[d] = work[d] + g * syn1[p, d]
                for d in range(dim):
                    syn1[p, d] = syn1[p, d] - lr * g * syn0[c, d]
            for d in range(dim):
                syn0[c, d] = syn0[c, d] - lr * work[d]
    return loss


def pairs_loss(const double[:, ::1] syn0, const double[:, ::1] syn1,
               const int[::1] centers, const int[::1] targets,
               const int[:, ::1] points, const double[:, ::1] signs, const int[::1] codelens):
    """Summed loss over pairs without touching the parameters."""
    cdef Py_ssize_t n = centers.shape[0]
    cdef Py_ssize_t dim = syn0.shape[1]
    cdef Py_ssize_t k, l, d
    cdef int c, t, p
    cdef double f, loss = 0.0
    with nogil:
        for k in range(n):
            c = centers[k]
            t = targets[k]
            for l in range(codelens[t]):
                p = points[t, l]
                f = 0.0
                for d in range(dim):
                    f = f + syn0[c, d] * syn1[p, d]
                loss += _neg_log_sigmoid(signs[t, l] * f)
    return loss
