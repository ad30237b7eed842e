"""Vectorized numpy implementation of the hot kernels.

This is the fallback backend; `demagopt._kernels._core` is the compiled
(Cython) twin with identical signatures. Both evaluate the constitutive
laws for batches of per-element flux densities and fill the element-local
residual/stiffness contributions in one pass.

Material encoding (shared with the compiled backend):
    code 0  air             params[0] = nu0
    code 1  iron            params[0] = nu0, params[1] = nu_low (value of
                            f(s)/s at s=0), params[2] = knee flux (T)
    code 2  magnet, linear  params[0] = nu_m, params[1] = remanence B_R,
                            params[2] = cos(phi), params[3] = sin(phi)
    code 3  magnet, nonlin  params[0] = nu_m, params[1] = coercivity H_c,
                            params[2] = cos(phi), params[3] = sin(phi),
                            params[4] = knee flux (T), params[5] = slope
                            factor at s=0 (nu(0) = factor * nu_m)

The saturation exponent is fixed at 12 in both nonlinear laws.
"""

import numpy as np

NAME = "numpy"

EXPONENT = 12
AIR, IRON, MAGNET_LINEAR, MAGNET_NONLINEAR = 0, 1, 2, 3
PARAM_WIDTH = 6


def _sat_ratio(s_abs, c):
    """c / (c^12 + s^12)^(1/12), factored so large |s| cannot overflow."""
    m = np.maximum(s_abs, c)
    root = m * ((c / m) ** EXPONENT + (s_abs / m) ** EXPONENT) ** (1.0 / EXPONENT)
    return c / root


def _sat_slope_term(s_abs, c):
    """c^13 / (c^12 + s^12)^(13/12), overflow-safe (in (0, c])."""
    m = np.maximum(s_abs, c)
    base = (c / m) ** EXPONENT + (s_abs / m) ** EXPONENT
    return (c / m) ** (EXPONENT + 1) * base ** (-(EXPONENT + 1.0) / EXPONENT)


def _iron_nuhat(s_abs, nu0, nu_low, knee):
    return nu0 + (nu_low - nu0) * _sat_ratio(s_abs, knee)


def _iron_nuhat_prime_over_s(s_abs, nu0, nu_low, knee):
    """nuhat'(s)/s for the iron law; finite at s=0 (limit 0)."""
    m = np.maximum(s_abs, knee)
    t = s_abs / m
    k = knee / m
    base = k ** EXPONENT + t ** EXPONENT
    return (nu0 - nu_low) * knee * t ** (EXPONENT - 2) / (
        m ** 3 * base ** ((EXPONENT + 1.0) / EXPONENT)
    )


def eval_h(codes, params, b):
    """Field strength h(b) per element. b: (E,2) -> (E,2)."""
    b = np.asarray(b, dtype=np.float64)
    h = np.empty_like(b)

    m = codes == AIR
    if m.any():
        h[m] = params[m, 0:1] * b[m]

    m = codes == IRON
    if m.any():
        bm = b[m]
        s = np.hypot(bm[:, 0], bm[:, 1])
        nuhat = _iron_nuhat(s, params[m, 0], params[m, 1], params[m, 2])
        h[m] = nuhat[:, None] * bm

    for code in (MAGNET_LINEAR, MAGNET_NONLINEAR):
        m = codes == code
        if not m.any():
            continue
        bm = b[m]
        cs, sn = params[m, 2], params[m, 3]
        nu_m = params[m, 0]
        s = cs * bm[:, 0] + sn * bm[:, 1]        # b . e_M
        t = -sn * bm[:, 0] + cs * bm[:, 1]       # b . e_M-perp
        if code == MAGNET_LINEAR:
            f = nu_m * (s - params[m, 1])
        else:
            knee = params[m, 4]
            drop = nu_m * (1.0 - params[m, 5])
            f = nu_m * s - drop * s * _sat_ratio(np.abs(s), knee) - params[m, 1]
        ht = nu_m * t
        h[m, 0] = cs * f - sn * ht
        h[m, 1] = sn * f + cs * ht

    return h


def eval_h_jac(codes, params, b):
    """Jacobian dh/db per element. b: (E,2) -> (E,2,2)."""
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    jac = np.zeros((n, 2, 2), dtype=np.float64)

    m = codes == AIR
    if m.any():
        jac[m, 0, 0] = params[m, 0]
        jac[m, 1, 1] = params[m, 0]

    m = codes == IRON
    if m.any():
        bm = b[m]
        s = np.hypot(bm[:, 0], bm[:, 1])
        nu0, nu_low, knee = params[m, 0], params[m, 1], params[m, 2]
        nuhat = _iron_nuhat(s, nu0, nu_low, knee)
        w = _iron_nuhat_prime_over_s(s, nu0, nu_low, knee)
        jac[m, 0, 0] = nuhat + w * bm[:, 0] * bm[:, 0]
        jac[m, 0, 1] = w * bm[:, 0] * bm[:, 1]
        jac[m, 1, 0] = jac[m, 0, 1]
        jac[m, 1, 1] = nuhat + w * bm[:, 1] * bm[:, 1]

    for code in (MAGNET_LINEAR, MAGNET_NONLINEAR):
        m = codes == code
        if not m.any():
            continue
        bm = b[m]
        cs, sn = params[m, 2], params[m, 3]
        nu_m = params[m, 0]
        if code == MAGNET_LINEAR:
            fp = nu_m
        else:
            s = cs * bm[:, 0] + sn * bm[:, 1]
            drop = nu_m * (1.0 - params[m, 5])
            fp = nu_m - drop * _sat_slope_term(np.abs(s), params[m, 4])
        # Q diag(f', nu_m) Q^T = f' e e^T + nu_m eperp eperp^T
        jac[m, 0, 0] = fp * cs * cs + nu_m * sn * sn
        jac[m, 0, 1] = (fp - nu_m) * cs * sn
        jac[m, 1, 0] = jac[m, 0, 1]
        jac[m, 1, 1] = fp * sn * sn + nu_m * cs * cs

    return jac


def assemble(tri, curl_ops, areas, codes, params, a, bg=None, want_matrix=True):
    """One assembly pass over all elements.

    tri: (E,3) vertex indices; curl_ops: (E,2,3) element curl operators;
    areas: (E,); a: nodal potential (N,); bg: optional (2,) or (E,2)
    background flux added to curl(a).

    Returns (residual (N,), vals (E,3,3) or None): residual of the
    h-term only (no source) and the element stiffness blocks.
    """
    n_nodes = a.shape[0]
    ae = a[tri]
    b = np.einsum("eij,ej->ei", curl_ops, ae)
    if bg is not None:
        b = b + bg
    h = eval_h(codes, params, b)
    r_el = areas[:, None] * np.einsum("eij,ei->ej", curl_ops, h)
    res = np.bincount(tri.ravel(), weights=r_el.ravel(), minlength=n_nodes)
    vals = None
    if want_matrix:
        hj = eval_h_jac(codes, params, b)
        vals = areas[:, None, None] * np.einsum(
            "eai,eab,ebj->eij", curl_ops, hj, curl_ops
        )
    return res, vals
