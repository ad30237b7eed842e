"""Constitutive laws h(b) and their Jacobians.

Four laws are supported: air, saturating iron, and permanent magnets with
a fixed easy axis in a linear and a nonlinear (knee) variant. All laws are
continuous on R^2 and evaluated in overflow-safe factored form, so flux
magnitudes far beyond physical range stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import backend as _kb
from ._kernels.numpy_backend import (
    AIR,
    IRON,
    MAGNET_LINEAR,
    MAGNET_NONLINEAR,
    PARAM_WIDTH,
)

NU0 = 1e7 / (4.0 * math.pi)  # vacuum reluctivity, m/H


@dataclass(frozen=True)
class MaterialParams:
    """Numeric constants of the four constitutive laws.

    nu_m = nu0 / nu_m_divisor. The iron law is
        f_I(s) = nu0*s + (iron_nu_low - nu0) * iron_knee*s / (iron_knee^12 + s^12)^(1/12)
    and the nonlinear magnet law
        f_M(s) = nu_m*s + (magnet_slope_factor - 1)*nu_m * magnet_knee*s /
                 (magnet_knee^12 + s^12)^(1/12) - H_c.
    """

    nu0: float = NU0
    nu_m_divisor: float = 1.086
    B_R: float = 1.2
    H_c: float = 4.75e5
    iron_nu_low: float = 200.0
    iron_knee: float = 2.2
    magnet_knee: float = 0.56
    magnet_slope_factor: float = 1.0 / 70.0

    @property
    def nu_m(self) -> float:
        return self.nu0 / self.nu_m_divisor

    def validate(self):
        vals = (self.nu0, self.nu_m_divisor, self.B_R, self.H_c,
                self.iron_nu_low, self.iron_knee, self.magnet_knee,
                self.magnet_slope_factor)
        if not all(v > 0 for v in vals):
            raise ValueError("material constants must be positive")
        if not self.nu_m < self.nu0:
            raise ValueError("nu_m must be below nu0")


@dataclass(frozen=True)
class MagnetSpec:
    """Easy-axis orientation and law variant of one permanent magnet."""

    phi: float                      # easy-axis angle, radians
    variant: str = "linear"         # "linear" | "nonlinear"

    def __post_init__(self):
        if self.variant not in ("linear", "nonlinear"):
            raise ValueError(f"unknown magnet law variant {self.variant!r}")

    @property
    def easy_axis(self) -> np.ndarray:
        return np.array([math.cos(self.phi), math.sin(self.phi)])


@dataclass(frozen=True)
class MaterialLaw:
    """One constitutive law: kind in {air, iron, magnet}."""

    kind: str
    params: MaterialParams = MaterialParams()
    magnet: MagnetSpec | None = None

    def __post_init__(self):
        if self.kind not in ("air", "iron", "magnet"):
            raise ValueError(f"unknown material kind {self.kind!r}")
        if self.kind == "magnet" and self.magnet is None:
            raise ValueError("magnet law requires a MagnetSpec")

    def code_params(self):
        """(code, params_row) in the kernel encoding."""
        row = np.zeros(PARAM_WIDTH)
        p = self.params
        if self.kind == "air":
            code = AIR
            row[0] = p.nu0
        elif self.kind == "iron":
            code = IRON
            row[0] = p.nu0
            row[1] = p.iron_nu_low
            row[2] = p.iron_knee
        else:
            spec = self.magnet
            row[0] = p.nu_m
            row[2] = math.cos(spec.phi)
            row[3] = math.sin(spec.phi)
            if spec.variant == "linear":
                code = MAGNET_LINEAR
                row[1] = p.B_R
            else:
                code = MAGNET_NONLINEAR
                row[1] = p.H_c
                row[4] = p.magnet_knee
                row[5] = p.magnet_slope_factor
        return code, row


def air(params: MaterialParams = MaterialParams()) -> MaterialLaw:
    return MaterialLaw("air", params)


def iron(params: MaterialParams = MaterialParams()) -> MaterialLaw:
    return MaterialLaw("iron", params)


def magnet(phi: float, variant: str = "linear",
           params: MaterialParams = MaterialParams()) -> MaterialLaw:
    return MaterialLaw("magnet", params, MagnetSpec(phi, variant))


def _as_batch(b):
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    return (b[None, :] if single else b), single


def eval_h(law: MaterialLaw, b):
    """h(b) for one law; b is a 2-vector or an (E,2) batch."""
    bb, single = _as_batch(b)
    code, row = law.code_params()
    codes = np.full(bb.shape[0], code, dtype=np.int8)
    params = np.broadcast_to(row, (bb.shape[0], PARAM_WIDTH)).copy()
    h = _kb.eval_h(codes, params, np.ascontiguousarray(bb))
    return h[0] if single else h


def eval_h_jacobian(law: MaterialLaw, b):
    """Analytic Jacobian dh/db; b is a 2-vector or an (E,2) batch."""
    bb, single = _as_batch(b)
    code, row = law.code_params()
    codes = np.full(bb.shape[0], code, dtype=np.int8)
    params = np.broadcast_to(row, (bb.shape[0], PARAM_WIDTH)).copy()
    jac = _kb.eval_h_jac(codes, params, np.ascontiguousarray(bb))
    return jac[0] if single else jac


def magnet_equivalence_check(law: MaterialLaw, b, rtol=1e-10) -> bool:
    """Check the rotated linear-magnet form against nu_m*(b - B_R*e_M)."""
    if law.kind != "magnet" or law.magnet.variant != "linear":
        raise ValueError("equivalence check applies to the linear magnet law")
    h_rot = eval_h(law, b)
    e = law.magnet.easy_axis
    h_direct = law.params.nu_m * (np.asarray(b, dtype=np.float64) - law.params.B_R * e)
    scale = max(float(np.max(np.abs(h_direct))), law.params.nu_m * law.params.B_R)
    return bool(np.max(np.abs(h_rot - h_direct)) <= rtol * scale)


@dataclass(frozen=True)
class MaterialSet:
    """The four optimization materials in label order (iron, magnet1, magnet2, air)."""

    params: MaterialParams = MaterialParams()
    phi1: float = math.radians(30.0)
    phi2: float = math.radians(15.0)
    magnet_law: str = "linear"

    LABELS = ("iron", "magnet1", "magnet2", "air")

    def laws(self) -> tuple[MaterialLaw, ...]:
        return (
            iron(self.params),
            magnet(self.phi1, self.magnet_law, self.params),
            magnet(self.phi2, self.magnet_law, self.params),
            air(self.params),
        )

    def easy_axes(self) -> np.ndarray:
        """(2,2) rows: easy axes of magnet1 and magnet2."""
        return np.array([
            [math.cos(self.phi1), math.sin(self.phi1)],
            [math.cos(self.phi2), math.sin(self.phi2)],
        ])

    def label_tables(self):
        """(codes (4,), params (4,PARAM_WIDTH)) indexed by label."""
        codes = np.empty(4, dtype=np.int8)
        params = np.empty((4, PARAM_WIDTH))
        for i, law in enumerate(self.laws()):
            codes[i], params[i] = law.code_params()
        return codes, params

    def assignment(self, labels):
        """Per-element (codes, params) arrays from per-element labels."""
        codes, params = self.label_tables()
        labels = np.asarray(labels)
        return codes[labels], params[labels]

    def law_of(self, name: str) -> MaterialLaw:
        return self.laws()[self.LABELS.index(name)]
