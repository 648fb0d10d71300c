# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dual coordinate solver for epsilon-insensitive SVR.

Same algorithm and return values as ``dpfl._smo_py.smo_solve``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY

cnp.import_array()


cdef inline double _violation(double a, double r, double eps, double omega) nogil:
    cdef double g
    if a > 0:
        g = r - eps
        if a < omega:
            return fabs(g)
        return -g if g < 0 else 0.0
    if a < 0:
        g = r + eps
        if a > -omega:
            return fabs(g)
        return g if g > 0 else 0.0
    g = fabs(r) - eps
    return g if g > 0 else 0.0


cdef void _objectives(double[::1] a, const double[::1] y, double[::1] r, double eps, double omega,
                      double* primal, double* dual) nogil:
    cdef Py_ssize_t k, n = a.shape[0]
    cdef double aKa = 0.0, loss = 0.0, lin = 0.0, l1 = 0.0, e
    for k in range(n):
        aKa += a[k] * (y[k] - r[k])
        e = fabs(r[k]) - eps
        if e > 0:
            loss += e
        lin += a[k] * y[k]
        l1 += fabs(a[k])
    primal[0] = 0.5 * aKa + omega * loss
    dual[0] = lin - eps * l1 - 0.5 * aKa


def smo_solve(K, y, double eps, double omega, double tol=1e-6, double gap_tol=1e-6, long max_updates=100000, a0=None):
    cdef const double[:, ::1] Kv = np.ascontiguousarray(K, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0]
    if a0 is None:
        a_arr = np.zeros(n)
        r_arr = np.array(yv, dtype=np.float64)
    else:
        a_arr = np.array(a0, dtype=np.float64)
        r_arr = np.asarray(yv) - np.asarray(Kv) @ a_arr
    cdef double[::1] a = a_arr
    cdef double[::1] r = r_arr
    cdef Py_ssize_t i, k
    cdef long updates = 0, idle = 0
    cdef double vmax, v, g, new, delta, kii, primal = 0.0, dual = 0.0
    cdef double gap = INFINITY
    with nogil:
        while True:
            vmax = -1.0
            i = 0
            for k in range(n):
                v = _violation(a[k], r[k], eps, omega)
                if v > vmax:
                    vmax = v
                    i = k
            if vmax < tol:
                _objectives(a, yv, r, eps, omega, &primal, &dual)
                gap = primal - dual
                if gap <= gap_tol * (1.0 + fabs(primal)) or vmax < 1e-15:
                    with gil:
                        return a_arr, updates, vmax, gap, True, False
            if updates >= max_updates:
                _objectives(a, yv, r, eps, omega, &primal, &dual)
                with gil:
                    return a_arr, updates, vmax, primal - dual, False, False
            kii = Kv[i, i]
            g = r[i] + kii * a[i]
            if g > eps:
                new = (g - eps) / kii
            elif g < -eps:
                new = (g + eps) / kii
            else:
                new = 0.0
            if new > omega:
                new = omega
            elif new < -omega:
                new = -omega
            delta = new - a[i]
            updates += 1
            if delta == 0.0:
                idle += 1
                if idle >= n:
                    _objectives(a, yv, r, eps, omega, &primal, &dual)
                    with gil:
                        return a_arr, updates, vmax, primal - dual, False, True
                continue
            idle = 0
            a[i] = new
            for k in range(n):
                r[k] -= delta * Kv[k, i]
