# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: constitutive-law evaluation and element assembly.

Signature-compatible twin of `numpy_backend`; see that module for the
material encoding. One loop over elements fuses flux gathering, law
evaluation, and the local residual/stiffness products.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, hypot, pow

cnp.import_array()

NAME = "cython"

DEF EXP = 12

cdef inline double _sat_ratio(double s_abs, double c) noexcept nogil:
    cdef double m = s_abs if s_abs > c else c
    cdef double root = m * pow(pow(c / m, EXP) + pow(s_abs / m, EXP), 1.0 / EXP)
    return c / root

cdef inline double _sat_slope_term(double s_abs, double c) noexcept nogil:
    cdef double m = s_abs if s_abs > c else c
    cdef double base = pow(c / m, EXP) + pow(s_abs / m, EXP)
    return pow(c / m, EXP + 1) * pow(base, -(EXP + 1.0) / EXP)

cdef inline void _law_h(int code, const double* p, double bx, double by,
                        double* hx, double* hy) noexcept nogil:
    cdef double s, t, nuhat, f, ht, cs, sn, nu_m, drop
    if code == 0:  # air
        hx[0] = p[0] * bx
        hy[0] = p[0] * by
    elif code == 1:  # iron
        s = hypot(bx, by)
        nuhat = p[0] + (p[1] - p[0]) * _sat_ratio(s, p[2])
        hx[0] = nuhat * bx
        hy[0] = nuhat * by
    else:  # magnets
        nu_m = p[0]
        cs = p[2]
        sn = p[3]
        s = cs * bx + sn * by
        t = -sn * bx + cs * by
        if code == 2:
            f = nu_m * (s - p[1])
        else:
            drop = nu_m * (1.0 - p[5])
            f = nu_m * s - drop * s * _sat_ratio(fabs(s), p[4]) - p[1]
        ht = nu_m * t
        hx[0] = cs * f - sn * ht
        hy[0] = sn * f + cs * ht

cdef inline void _law_jac(int code, const double* p, double bx, double by,
                          double* j11, double* j12, double* j22) noexcept nogil:
    cdef double s, nuhat, w, m, t, k, base, fp, cs, sn, nu_m, drop
    if code == 0:
        j11[0] = p[0]
        j12[0] = 0.0
        j22[0] = p[0]
    elif code == 1:
        s = hypot(bx, by)
        nuhat = p[0] + (p[1] - p[0]) * _sat_ratio(s, p[2])
        m = s if s > p[2] else p[2]
        t = s / m
        k = p[2] / m
        base = pow(k, EXP) + pow(t, EXP)
        w = (p[0] - p[1]) * p[2] * pow(t, EXP - 2) / (
            m * m * m * pow(base, (EXP + 1.0) / EXP))
        j11[0] = nuhat + w * bx * bx
        j12[0] = w * bx * by
        j22[0] = nuhat + w * by * by
    else:
        nu_m = p[0]
        cs = p[2]
        sn = p[3]
        if code == 2:
            fp = nu_m
        else:
            s = cs * bx + sn * by
            drop = nu_m * (1.0 - p[5])
            fp = nu_m - drop * _sat_slope_term(fabs(s), p[4])
        j11[0] = fp * cs * cs + nu_m * sn * sn
        j12[0] = (fp - nu_m) * cs * sn
        j22[0] = fp * sn * sn + nu_m * cs * cs


def eval_h(codes, params, b):
    """Field strength h(b) per element. b: (E,2) -> (E,2)."""
    cdef const cnp.int8_t[::1] cv = np.ascontiguousarray(codes, dtype=np.int8)
    cdef const double[:, ::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = bv.shape[0], e
    out = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] hv = out
    for e in range(n):
        _law_h(cv[e], &pv[e, 0], bv[e, 0], bv[e, 1], &hv[e, 0], &hv[e, 1])
    return out


def eval_h_jac(codes, params, b):
    """Jacobian dh/db per element. b: (E,2) -> (E,2,2)."""
    cdef const cnp.int8_t[::1] cv = np.ascontiguousarray(codes, dtype=np.int8)
    cdef const double[:, ::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = bv.shape[0], e
    out = np.empty((n, 2, 2), dtype=np.float64)
    cdef double[:, :, ::1] jv = out
    cdef double j11, j12, j22
    for e in range(n):
        _law_jac(cv[e], &pv[e, 0], bv[e, 0], bv[e, 1], &j11, &j12, &j22)
        jv[e, 0, 0] = j11
        jv[e, 0, 1] = j12
        jv[e, 1, 0] = j12
        jv[e, 1, 1] = j22
    return out


def assemble(tri, curl_ops, areas, codes, params, a, bg=None, want_matrix=True):
    """One fused assembly pass; see numpy_backend.assemble."""
    cdef const cnp.int32_t[:, ::1] tv = np.ascontiguousarray(tri, dtype=np.int32)
    cdef const double[:, :, ::1] gv = np.ascontiguousarray(curl_ops, dtype=np.float64)
    cdef const double[::1] av_areas = np.ascontiguousarray(areas, dtype=np.float64)
    cdef const cnp.int8_t[::1] cv = np.ascontiguousarray(codes, dtype=np.int8)
    cdef const double[:, ::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    cdef const double[::1] anod = np.ascontiguousarray(a, dtype=np.float64)

    cdef Py_ssize_t n_el = tv.shape[0]
    cdef Py_ssize_t n_nodes = anod.shape[0]
    cdef bint with_mat = bool(want_matrix)

    cdef const double[:, ::1] bgv = None
    cdef bint has_bg = bg is not None
    if has_bg:
        bgv = np.ascontiguousarray(np.broadcast_to(bg, (n_el, 2)), dtype=np.float64)

    res = np.zeros(n_nodes, dtype=np.float64)
    cdef double[::1] rv = res
    vals = np.empty((n_el, 3, 3), dtype=np.float64) if with_mat else None
    cdef double[:, :, ::1] vv = vals if with_mat else None

    cdef Py_ssize_t e, i, j
    cdef double bx, by, hx, hy, area
    cdef double j11, j12, j22
    cdef double gx_i, gy_i, wx, wy
    cdef double a0, a1, a2

    for e in range(n_el):
        a0 = anod[tv[e, 0]]
        a1 = anod[tv[e, 1]]
        a2 = anod[tv[e, 2]]
        bx = gv[e, 0, 0] * a0 + gv[e, 0, 1] * a1 + gv[e, 0, 2] * a2
        by = gv[e, 1, 0] * a0 + gv[e, 1, 1] * a1 + gv[e, 1, 2] * a2
        if has_bg:
            bx += bgv[e, 0]
            by += bgv[e, 1]
        area = av_areas[e]
        _law_h(cv[e], &pv[e, 0], bx, by, &hx, &hy)
        for i in range(3):
            rv[tv[e, i]] += area * (gv[e, 0, i] * hx + gv[e, 1, i] * hy)
        if with_mat:
            _law_jac(cv[e], &pv[e, 0], bx, by, &j11, &j12, &j22)
            for i in range(3):
                gx_i = gv[e, 0, i]
                gy_i = gv[e, 1, i]
                wx = j11 * gx_i + j12 * gy_i
                wy = j12 * gx_i + j22 * gy_i
                for j in range(3):
                    vv[e, i, j] = area * (wx * gv[e, 0, j] + wy * gv[e, 1, j])
    return res, vals
