# cython: language_level=3
"""Compiled inner loops for late-interaction scoring and its gradient.

Arrays of token vectors are float32 or float64 (a fused type); all
arithmetic is carried out in double precision. Passages are packed into
one row-major matrix with an ``offsets`` array of length ``n_passages + 1``.
The GIL is released inside the loops so a sampler thread and a trainer
thread can run them concurrently.
"""
import numpy as np

from libc.math cimport exp, log1p, INFINITY

ctypedef fused real:
    float
    double


cdef inline double _sim_ptr(const real* x, const real* y, Py_ssize_t dim, int mode) noexcept nogil:
    # Four interleaved accumulators, combined as (a0 + a1) + (a2 + a3).
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    cdef double d0, d1, d2, d3
    cdef Py_ssize_t k = 0
    if mode == 0:
        while k + 4 <= dim:
            d0 = <double>x[k] - <double>y[k]
            d1 = <double>x[k + 1] - <double>y[k + 1]
            d2 = <double>x[k + 2] - <double>y[k + 2]
            d3 = <double>x[k + 3] - <double>y[k + 3]
            a0 += d0 * d0
            a1 += d1 * d1
            a2 += d2 * d2
            a3 += d3 * d3
            k += 4
        while k < dim:
            d0 = <double>x[k] - <double>y[k]
            a0 += d0 * d0
            k += 1
        return -((a0 + a1) + (a2 + a3))
    while k + 4 <= dim:
        a0 += <double>x[k] * <double>y[k]
        a1 += <double>x[k + 1] * <double>y[k + 1]
        a2 += <double>x[k + 2] * <double>y[k + 2]
        a3 += <double>x[k + 3] * <double>y[k + 3]
        k += 4
    while k < dim:
        a0 += <double>x[k] * <double>y[k]
        k += 1
    return (a0 + a1) + (a2 + a3)


cdef inline double _sim(const real[:, ::1] a, Py_ssize_t i,
                        const real[:, ::1] b, Py_ssize_t j,
                        Py_ssize_t dim, int mode) noexcept nogil:
    return _sim_ptr(&a[i, 0], &b[j, 0], dim, mode)


def maxsim_scores(const real[:, ::1] queries, const real[:, ::1] packed,
                  const long long[::1] offsets, const long long[::1] cand,
                  int mode):
    """SumMaxSim of one query matrix against the candidate passages.

    ``mode`` is 0 for negative squared L2 and 1 for dot product. Returns a
    float64 array aligned with ``cand``; an empty passage scores -inf.
    """
    cdef Py_ssize_t n_cand = cand.shape[0]
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t dim = queries.shape[1]
    out = np.empty(n_cand, dtype=np.float64)
    cdef double[::1] res = out
    cdef Py_ssize_t c, i, j, start, stop
    cdef double total, best, v
    with nogil:
        for c in range(n_cand):
            start = offsets[cand[c]]
            stop = offsets[cand[c] + 1]
            if stop <= start:
                res[c] = -INFINITY
                continue
            total = 0.0
            for i in range(nq):
                best = -INFINITY
                for j in range(start, stop):
                    v = _sim(queries, i, packed, j, dim, mode)
                    if v > best:
                        best = v
                total += best
            res[c] = total
    return out


cdef double _score_with_argmax(const real[:, ::1] table,
                               const long long[::1] q_ids, Py_ssize_t q0, Py_ssize_t q1,
                               const long long[::1] p_ids, Py_ssize_t p0, Py_ssize_t p1,
                               Py_ssize_t dim, int mode, long long[::1] amax) noexcept nogil:
    cdef double total = 0.0
    cdef double best, v
    cdef Py_ssize_t i, j, arg
    for i in range(q0, q1):
        best = -INFINITY
        arg = p0
        for j in range(p0, p1):
            v = _sim(table, q_ids[i], table, p_ids[j], dim, mode)
            if v > best:
                best = v
                arg = j
        amax[i - q0] = p_ids[arg]
        total += best
    return total


cdef void _scatter(const real[:, ::1] table, double[:, ::1] grad,
                   const long long[::1] q_ids, Py_ssize_t q0, Py_ssize_t q1,
                   long long[::1] amax, double coef, Py_ssize_t dim, int mode) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef long long qb, pb
    cdef double diff
    for i in range(q0, q1):
        qb = q_ids[i]
        pb = amax[i - q0]
        if mode == 0:
            for k in range(dim):
                diff = <double>table[qb, k] - <double>table[pb, k]
                grad[qb, k] -= 2.0 * coef * diff
                grad[pb, k] += 2.0 * coef * diff
        else:
            for k in range(dim):
                grad[qb, k] += coef * <double>table[pb, k]
                grad[pb, k] += coef * <double>table[qb, k]


def triple_grad(const real[:, ::1] table,
                const long long[::1] q_ids, const long long[::1] q_off,
                const long long[::1] p_ids, const long long[::1] p_off,
                const long long[::1] n_ids, const long long[::1] n_off,
                int mode, double scale, double[:, ::1] grad):
    """Accumulate ``scale`` times the pairwise-loss gradient into ``grad``.

    Triple ``t`` uses bucket ids ``q_ids[q_off[t]:q_off[t+1]]`` for the
    query and likewise for the positive and negative passage. Each query
    row routes its gradient to the first maximizing passage row. Returns
    the unscaled sum of losses.
    """
    cdef Py_ssize_t n_trip = q_off.shape[0] - 1
    cdef Py_ssize_t dim = table.shape[1]
    cdef Py_ssize_t max_q = 1
    cdef Py_ssize_t t
    for t in range(n_trip):
        if q_off[t + 1] - q_off[t] > max_q:
            max_q = q_off[t + 1] - q_off[t]
    amax_pos_arr = np.empty(max_q, dtype=np.int64)
    amax_neg_arr = np.empty(max_q, dtype=np.int64)
    cdef long long[::1] amax_pos = amax_pos_arr
    cdef long long[::1] amax_neg = amax_neg_arr
    cdef double loss_sum = 0.0
    cdef double s_pos, s_neg, x, g
    cdef Py_ssize_t q0, q1
    with nogil:
        for t in range(n_trip):
            q0 = q_off[t]
            q1 = q_off[t + 1]
            s_pos = _score_with_argmax(table, q_ids, q0, q1, p_ids, p_off[t], p_off[t + 1],
                                       dim, mode, amax_pos)
            s_neg = _score_with_argmax(table, q_ids, q0, q1, n_ids, n_off[t], n_off[t + 1],
                                       dim, mode, amax_neg)
            x = s_neg - s_pos
            if x > 0:
                loss_sum += x + log1p(exp(-x))
                g = 1.0 / (1.0 + exp(-x))
            else:
                loss_sum += log1p(exp(x))
                g = exp(x) / (1.0 + exp(x))
            _scatter(table, grad, q_ids, q0, q1, amax_pos, -scale * g, dim, mode)
            _scatter(table, grad, q_ids, q0, q1, amax_neg, scale * g, dim, mode)
    return loss_sum
