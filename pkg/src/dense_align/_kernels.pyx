# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled brute-force kernels for the exact verification tier."""
import numpy as np

from libc.math cimport exp, INFINITY


cdef inline double _sigmoid(double x) nogil:
    cdef double ex
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    ex = exp(x)
    return ex / (1.0 + ex)


def enumerate_paths(transition, starts, Py_ssize_t n_actions, Py_ssize_t horizon):
    cdef const long long[:, ::1] trans = np.ascontiguousarray(transition, dtype=np.int64)
    cdef const long long[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef Py_ssize_t n_seq = n_actions ** horizon
    cdef Py_ssize_t m = st.shape[0] * n_seq
    states_arr = np.empty((m, horizon), dtype=np.int64)
    actions_arr = np.empty((m, horizon), dtype=np.int64)
    cdef long long[:, ::1] states = states_arr
    cdef long long[:, ::1] actions = actions_arr
    cdef Py_ssize_t k, q, i, row, rem
    cdef long long s, a
    with nogil:
        for k in range(st.shape[0]):
            for q in range(n_seq):
                row = k * n_seq + q
                rem = q
                # first action is the most significant digit
                for i in range(horizon - 1, -1, -1):
                    actions[row, i] = rem % n_actions
                    rem = rem // n_actions
                s = st[k]
                for i in range(horizon):
                    states[row, i] = s
                    a = actions[row, i]
                    s = trans[s, a]
    return states_arr, actions_arr


def discounted_path_sums(table, states, actions, double gamma):
    cdef const double[:, ::1] tab = np.ascontiguousarray(table, dtype=np.float64)
    cdef const long long[:, ::1] st = np.ascontiguousarray(states, dtype=np.int64)
    cdef const long long[:, ::1] ac = np.ascontiguousarray(actions, dtype=np.int64)
    cdef Py_ssize_t m = st.shape[0], n = st.shape[1]
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t r, i
    cdef double w, acc
    with nogil:
        for r in range(m):
            acc = 0.0
            w = 1.0
            for i in range(n):
                acc = acc + w * tab[st[r, i], ac[r, i]]
                w = w * gamma
            out[r] = acc
    return out_arr


def min_pairwise_gap(score, log_z, ratio_sum, double C):
    cdef const double[::1] sc = np.ascontiguousarray(score, dtype=np.float64)
    cdef const double[::1] lz = np.ascontiguousarray(log_z, dtype=np.float64)
    cdef const double[::1] rs = np.ascontiguousarray(ratio_sum, dtype=np.float64)
    cdef Py_ssize_t m = sc.shape[0], i, j
    cdef double best = INFINITY, gap
    cdef long long count = 0
    with nogil:
        for i in range(m):
            for j in range(m):
                if sc[i] > sc[j] and lz[i] >= lz[j]:
                    gap = _sigmoid(sc[i] - sc[j]) - _sigmoid(C * (rs[i] - rs[j]))
                    count += 1
                    if gap < best:
                        best = gap
    return best, count
