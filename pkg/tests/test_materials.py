import math

import numpy as np
import pytest

from demagopt import materials as M
from demagopt.materials import NU0, MaterialParams


def fd_jacobian(law, b, step=1e-6):
    b = np.asarray(b, dtype=float)
    eps = step * max(np.linalg.norm(b), 1.0)
    jac = np.zeros((2, 2))
    for k in range(2):
        db = np.zeros(2)
        db[k] = eps
        jac[:, k] = (M.eval_h(law, b + db) - M.eval_h(law, b - db)) / (2 * eps)
    return jac


def test_air_value():
    h = M.eval_h(M.air(), [1.0, 0.0])
    assert h == pytest.approx([1e7 / (4 * math.pi), 0.0], rel=1e-14)


def test_iron_at_zero_is_zero():
    assert np.all(M.eval_h(M.iron(), [0.0, 0.0]) == 0.0)


def test_iron_nuhat_at_zero():
    # f_I(s)/s has the removable-singularity value 200 at s = 0
    jac = M.eval_h_jacobian(M.iron(), [0.0, 0.0])
    assert jac[0, 0] == pytest.approx(200.0, rel=1e-9)
    assert jac[1, 1] == pytest.approx(200.0, rel=1e-9)
    assert jac[0, 1] == 0.0


def test_linear_magnet_zero_at_remanence():
    law = M.magnet(0.0, "linear")
    assert np.all(M.eval_h(law, [1.2, 0.0]) == pytest.approx([0.0, 0.0], abs=1e-9))


def test_nonlinear_magnet_at_zero_flux_gives_coercivity():
    phi = math.radians(30.0)
    law = M.magnet(phi, "nonlinear")
    h = M.eval_h(law, [0.0, 0.0])
    expected = -4.75e5 * np.array([math.cos(phi), math.sin(phi)])
    assert h == pytest.approx(expected, rel=1e-12)


def test_magnet_equivalence_single():
    law = M.magnet(math.radians(30.0), "linear")
    assert M.magnet_equivalence_check(law, [0.3, -0.8])
    assert M.magnet_equivalence_check(M.magnet(0.0, "linear"), [1.2, 0.0])


def test_magnet_equivalence_sweep():
    rng = np.random.default_rng(7)
    law = M.magnet(math.radians(117.0), "linear")
    for _ in range(1000):
        assert M.magnet_equivalence_check(law, rng.uniform(-2, 2, 2))


def test_continuity_no_jumps():
    rng = np.random.default_rng(1)
    laws = [M.air(), M.iron(), M.magnet(0.4, "linear"), M.magnet(0.9, "nonlinear")]
    for law in laws:
        for _ in range(50):
            b = rng.uniform(-2, 2, 2)
            d = rng.standard_normal(2)
            d *= 1e-8 / np.linalg.norm(d)
            jump = np.linalg.norm(M.eval_h(law, b + d) - M.eval_h(law, b))
            assert jump <= 10.0 * NU0 * 1e-8


def test_isotropy_air_iron():
    rng = np.random.default_rng(2)
    for law in (M.air(), M.iron()):
        for _ in range(30):
            b = rng.uniform(-2, 2, 2)
            ang = rng.uniform(0, 2 * math.pi)
            R = np.array([[math.cos(ang), -math.sin(ang)],
                          [math.sin(ang), math.cos(ang)]])
            lhs = M.eval_h(law, R @ b)
            rhs = R @ M.eval_h(law, b)
            scale = max(np.linalg.norm(rhs), 1e-30)
            assert np.linalg.norm(lhs - rhs) / scale < 1e-12


def test_iron_curve_monotone_and_bounded():
    s = np.linspace(0.0, 3.0, 1000)
    b = np.column_stack([s, np.zeros_like(s)])
    h = M.eval_h(M.iron(), b)[:, 0]
    assert np.all(np.diff(h) > 0)          # f_I strictly increasing
    nuhat = h[1:] / s[1:]
    # secant reluctivity starts at 200 (most permeable) and rises toward nu0
    assert np.all(nuhat >= 200.0 - 1e-9)
    assert np.all(nuhat <= NU0)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    laws = [M.air(), M.iron(), M.magnet(0.7, "linear"), M.magnet(0.2, "nonlinear")]
    for law in laws:
        for _ in range(100):
            b = rng.uniform(-2, 2, 2)
            jac = M.eval_h_jacobian(law, b)
            ref = fd_jacobian(law, b)
            scale = max(np.max(np.abs(jac)), 1.0)
            assert np.max(np.abs(jac - ref)) / scale < 1e-5


def test_jacobian_symmetry():
    rng = np.random.default_rng(4)
    for law in (M.air(), M.iron()):
        for _ in range(30):
            jac = M.eval_h_jacobian(law, rng.uniform(-2, 2, 2))
            assert abs(jac[0, 1] - jac[1, 0]) <= 1e-12 * max(abs(jac).max(), 1.0)


def test_linear_magnet_jacobian_is_nu_m_identity():
    law = M.magnet(math.radians(25.0), "linear")
    jac = M.eval_h_jacobian(law, [0.4, -1.1])
    nu_m = law.params.nu_m
    assert jac == pytest.approx(nu_m * np.eye(2), rel=1e-12)


def test_nonlinear_magnet_curve_root():
    """f_M is strictly increasing with exactly one positive root (bisection)."""
    law = M.magnet(0.0, "nonlinear")

    def f(s):
        return M.eval_h(law, [s, 0.0])[0]

    s = np.linspace(0.0, 3.0, 3000)
    vals = np.array([f(x) for x in s])
    assert np.all(np.diff(vals) > 0)
    sign_changes = np.count_nonzero(np.diff(np.sign(vals)) != 0)
    assert sign_changes == 1
    lo, hi = 0.0, 3.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    root = 0.5 * (lo + hi)
    assert f(root - 1e-6) < 0 < f(root + 1e-6)
    # the nonlinear curve rejoins the linear one near the remanence
    assert root == pytest.approx(1.2, abs=0.02)


def test_overflow_safe_far_field():
    for law in (M.iron(), M.magnet(0.3, "nonlinear")):
        h = M.eval_h(law, [1e200, -3e199])
        assert np.all(np.isfinite(h))


def test_params_validation():
    with pytest.raises(ValueError):
        MaterialParams(B_R=-1.0).validate()
    with pytest.raises(ValueError):
        M.MagnetSpec(0.0, "cubic")
