# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernels.

Same API and tie-breaking rules as the pure-numpy fallback in _dp_py.py;
see that module for the layout conventions.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, fabs, log1p

cnp.import_array()


cdef inline double logadd(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def chain_forward(const double[:, ::1] log_obs, const double[::1] log_self,
                  const double[::1] log_next):
    cdef Py_ssize_t T = log_obs.shape[0]
    cdef Py_ssize_t S = log_obs.shape[1]
    cdef cnp.ndarray[double, ndim=1] alpha_arr = np.full(S, -INFINITY)
    cdef cnp.ndarray[double, ndim=1] prev_arr = np.empty(S)
    cdef double[::1] alpha = alpha_arr
    cdef double[::1] prev = prev_arr
    cdef Py_ssize_t t, s
    cdef double stay, adv

    alpha[0] = log_obs[0, 0]
    for t in range(1, T):
        prev[:] = alpha
        for s in range(S - 1, -1, -1):
            stay = prev[s] + log_self[s]
            adv = -INFINITY
            if s > 0:
                adv = prev[s - 1] + log_next[s - 1]
            alpha[s] = logadd(stay, adv) + log_obs[t, s]
    return float(alpha[S - 1] + log_next[S - 1])


def chain_viterbi(const double[:, ::1] log_obs, const double[::1] log_self,
                  const double[::1] log_next):
    cdef Py_ssize_t T = log_obs.shape[0]
    cdef Py_ssize_t S = log_obs.shape[1]
    cdef cnp.ndarray[double, ndim=1] delta_arr = np.full(S, -INFINITY)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] came_arr = np.zeros((T, S), np.uint8)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] states_arr = np.empty(T, np.int32)
    cdef double[::1] delta = delta_arr
    cdef cnp.uint8_t[:, ::1] came = came_arr
    cdef cnp.int32_t[::1] states = states_arr
    cdef Py_ssize_t t, s
    cdef double stay, adv, score

    delta[0] = log_obs[0, 0]
    for t in range(1, T):
        for s in range(S - 1, -1, -1):
            stay = delta[s] + log_self[s]
            adv = -INFINITY
            if s > 0:
                adv = delta[s - 1] + log_next[s - 1]
            if adv >= stay:  # tie: advancing predecessor wins
                came[t, s] = 1
                delta[s] = adv + log_obs[t, s]
            else:
                delta[s] = stay + log_obs[t, s]
    score = delta[S - 1] + log_next[S - 1]
    s = S - 1
    for t in range(T - 1, -1, -1):
        states[t] = <cnp.int32_t> s
        if t > 0 and came[t, s]:
            s -= 1
    return states_arr, float(score)


def chain_forward_backward(const double[:, ::1] log_obs, const double[::1] log_self,
                           const double[::1] log_next):
    cdef Py_ssize_t T = log_obs.shape[0]
    cdef Py_ssize_t S = log_obs.shape[1]
    cdef cnp.ndarray[double, ndim=2] la_arr = np.full((T, S), -INFINITY)
    cdef cnp.ndarray[double, ndim=2] lb_arr = np.full((T, S), -INFINITY)
    cdef double[:, ::1] la = la_arr
    cdef double[:, ::1] lb = lb_arr
    cdef Py_ssize_t t, s
    cdef double stay, adv, loglik

    la[0, 0] = log_obs[0, 0]
    for t in range(1, T):
        for s in range(S):
            stay = la[t - 1, s] + log_self[s]
            adv = -INFINITY
            if s > 0:
                adv = la[t - 1, s - 1] + log_next[s - 1]
            la[t, s] = logadd(stay, adv) + log_obs[t, s]
    loglik = la[T - 1, S - 1] + log_next[S - 1]

    lb[T - 1, S - 1] = log_next[S - 1]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            stay = log_self[s] + log_obs[t + 1, s] + lb[t + 1, s]
            adv = -INFINITY
            if s < S - 1:
                adv = log_next[s] + log_obs[t + 1, s + 1] + lb[t + 1, s + 1]
            lb[t, s] = logadd(stay, adv)
    return la_arr, lb_arr, float(loglik)


def loop_viterbi(const double[:, ::1] log_obs, const cnp.int32_t[::1] starts,
                 const cnp.int32_t[::1] lens, const double[::1] log_self,
                 const double[::1] log_next, const double[::1] entry):
    cdef Py_ssize_t T = log_obs.shape[0]
    cdef Py_ssize_t S = log_obs.shape[1]
    cdef Py_ssize_t n = starts.shape[0]
    cdef cnp.ndarray[double, ndim=1] delta_arr = np.full(S, -INFINITY)
    cdef cnp.ndarray[double, ndim=1] prev_arr = np.empty(S)
    cdef cnp.ndarray[cnp.int8_t, ndim=2] bp_arr = np.zeros((T, S), np.int8)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] exit_model_arr = np.zeros(T, np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] model_out = np.empty(T, np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] state_out = np.empty(T, np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] owner_arr = np.empty(S, np.int32)
    cdef double[::1] delta = delta_arr
    cdef double[::1] prev = prev_arr
    cdef cnp.int8_t[:, ::1] bp = bp_arr
    cdef cnp.int32_t[::1] exit_model = exit_model_arr
    cdef cnp.int32_t[::1] model_idx = model_out
    cdef cnp.int32_t[::1] state_idx = state_out
    cdef cnp.int32_t[::1] owner = owner_arr
    cdef Py_ssize_t t, s, j, last, pos, cur, best_k
    cdef double stay, adv, best_exit, e, enter, best, score

    for j in range(n):
        for s in range(starts[j], starts[j] + lens[j]):
            owner[s] = <cnp.int32_t> j
        delta[starts[j]] = entry[j] + log_obs[0, starts[j]]

    for t in range(1, T):
        best_exit = -INFINITY
        best_k = 0
        for j in range(n):
            last = starts[j] + lens[j] - 1
            e = delta[last] + log_next[last]
            if e > best_exit:
                best_exit = e
                best_k = j
        prev[:] = delta
        for s in range(S):
            stay = prev[s] + log_self[s]
            adv = -INFINITY
            if s != starts[owner[s]]:
                adv = prev[s - 1] + log_next[s - 1]
            if adv >= stay:
                best = adv
                bp[t, s] = 1
            else:
                best = stay
                bp[t, s] = 0
            if s == starts[owner[s]]:
                enter = best_exit + entry[owner[s]]
                if enter > best:  # fresh entry only if strictly better
                    best = enter
                    bp[t, s] = 2
            delta[s] = best + log_obs[t, s]
        exit_model[t] = <cnp.int32_t> best_k

    score = -INFINITY
    best_k = 0
    for j in range(n):
        last = starts[j] + lens[j] - 1
        e = delta[last] + log_next[last]
        if e > score:
            score = e
            best_k = j

    cur = best_k
    pos = starts[cur] + lens[cur] - 1
    for t in range(T - 1, -1, -1):
        model_idx[t] = <cnp.int32_t> cur
        state_idx[t] = <cnp.int32_t> (pos - starts[cur])
        if t > 0:
            if bp[t, pos] == 1:
                pos -= 1
            elif bp[t, pos] == 2:
                cur = exit_model[t]
                pos = starts[cur] + lens[cur] - 1
    return model_out, state_out, float(score)
