"""Operating points, the airgap torque functional, and the two adjoint
problems (torque objective and demagnetization constraint).

The torque is evaluated with the Arkkio annulus integral
    T = L * nu0 / (r_o - r_i) * integral over the annulus of r b_r b_phi,
restricted to triangles whose centroid falls inside the annulus. Sources
are piecewise-constant three-phase slot current densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError
from .fem import ElementData, FemSpace, FieldSolution, LinearSystem, solve_linear
from .geometry import Mesh
from .materials import MaterialSet
from .penalty import PenaltyConfig, constraint_gradient_flux

PHASE_OFFSET = {"A": 0.0, "B": -2.0 * math.pi / 3.0, "C": -4.0 * math.pi / 3.0}
DEFAULT_PHASE_PATTERN = (("A", +1), ("A", -1), ("B", +1),
                         ("B", -1), ("C", +1), ("C", -1))


@dataclass(frozen=True)
class SourceConfig:
    """Three-phase slot excitation for one operating point family."""

    j_eff: float = 1512.5          # effective slot current, A
    theta0_deg: float = 6.0        # initial electrical angle, degrees
    damaging_factor: float = 1.5   # source multiplier at the damaging point
    pole_pairs: int = 4
    phase_pattern: tuple = DEFAULT_PHASE_PATTERN   # (phase, polarity) per slot
    axial_length: float = 0.1      # m

    def validate(self):
        if self.damaging_factor <= 0:
            raise ConfigError("damaging factor must be positive")
        for phase, pol in self.phase_pattern:
            if phase not in PHASE_OFFSET or pol not in (-1, 1):
                raise ConfigError(f"bad phase pattern entry ({phase!r}, {pol!r})")


@dataclass(frozen=True)
class TorqueConfig:
    """Arkkio annulus (must lie strictly inside the airgap) and axial length."""

    r_inner: float
    r_outer: float
    axial_length: float = 0.1

    def validate(self):
        if not 0 < self.r_inner < self.r_outer:
            raise GeometryError("torque annulus radii must satisfy 0 < r_i < r_o")


@dataclass
class AdjointSolution:
    """Nodal adjoint potential and its per-element flux."""

    p: np.ndarray
    bhat: np.ndarray
    tag: str  # "torque" | "constraint"


def slot_labels(mesh: Mesh):
    labels = sorted({r for r in np.unique(mesh.region_id) if r.startswith("slot_")},
                    key=lambda s: int(s.split("_")[1]))
    return labels


def assemble_source(mesh: Mesh, edata: ElementData, src: SourceConfig,
                    operating_point: str = "nominal") -> np.ndarray:
    """Nodal load vector for the requested operating point.

    Slot k carries the piecewise-constant current density
    polarity * sqrt(2) j_eff / A_slot * cos(theta0 * pole_pairs + offset),
    scaled by the damaging factor at the damaging point.
    """
    src.validate()
    if operating_point not in ("nominal", "damaging"):
        raise ConfigError(f"unknown operating point {operating_point!r}")
    theta_e = math.radians(src.theta0_deg) * src.pole_pairs

    labels = slot_labels(mesh)
    if len(labels) > len(src.phase_pattern):
        raise ConfigError(
            f"phase pattern has {len(src.phase_pattern)} entries for {len(labels)} slots")
    load = np.zeros(mesh.n_vertices)
    for k, label in enumerate(labels):
        mask = mesh.region_mask(label)
        area = float(np.sum(edata.areas[mask]))
        if area <= 0.0:
            raise ConfigError(f"slot region {label} has zero area")
        phase, pol = src.phase_pattern[k]
        density = (pol * math.sqrt(2.0) * src.j_eff / area
                   * math.cos(theta_e + PHASE_OFFSET[phase]))
        contrib = density * edata.areas[mask] / 3.0
        for loc in range(3):
            np.add.at(load, mesh.triangles[mask, loc], contrib)
    if operating_point == "damaging":
        load = load * src.damaging_factor  # exact componentwise scaling
    return load


def _annulus_elements(mesh: Mesh, edata: ElementData, cfg: TorqueConfig):
    cfg.validate()
    r_c = np.hypot(edata.centroids[:, 0], edata.centroids[:, 1])
    mask = (r_c > cfg.r_inner) & (r_c < cfg.r_outer)
    if not np.any(mask):
        raise GeometryError("torque annulus contains no element centroids")
    outside_airgap = mask & (mesh.region_id != "airgap")
    if np.any(outside_airgap):
        raise GeometryError("torque annulus extends outside the airgap region")
    return mask, r_c


def torque(mesh: Mesh, edata: ElementData, field: FieldSolution,
           cfg: TorqueConfig, nu0: float) -> float:
    """Arkkio annulus torque of the given field, N*m."""
    mask, r_c = _annulus_elements(mesh, edata, cfg)
    c = edata.centroids[mask]
    r = r_c[mask]
    er = c / r[:, None]
    b = field.b[mask]
    b_r = b[:, 0] * er[:, 0] + b[:, 1] * er[:, 1]
    b_phi = -b[:, 0] * er[:, 1] + b[:, 1] * er[:, 0]
    coeff = cfg.axial_length * nu0 / (cfg.r_outer - cfg.r_inner)
    return float(coeff * np.sum(edata.areas[mask] * r * b_r * b_phi))


def torque_linearization(mesh: Mesh, edata: ElementData, field: FieldSolution,
                         cfg: TorqueConfig, nu0: float) -> np.ndarray:
    """Exact gradient dT/da of the discrete Arkkio torque (full numbering)."""
    mask, r_c = _annulus_elements(mesh, edata, cfg)
    c = edata.centroids[mask]
    r = r_c[mask]
    er = c / r[:, None]
    ephi = np.column_stack([-er[:, 1], er[:, 0]])
    b = field.b[mask]
    b_r = (b * er).sum(axis=1)
    b_phi = (b * ephi).sum(axis=1)
    coeff = cfg.axial_length * nu0 / (cfg.r_outer - cfg.r_inner)
    w = coeff * edata.areas[mask] * r
    dT_db = w[:, None] * (er * b_phi[:, None] + ephi * b_r[:, None])   # (Ea,2)
    contrib = np.einsum("eij,ei->ej", edata.curl_ops[mask], dT_db)     # (Ea,3)
    grad = np.zeros(mesh.n_vertices)
    np.add.at(grad, mesh.triangles[mask].ravel(), contrib.ravel())
    return grad


def _solve_adjoint(space: FemSpace, codes, params, state: FieldSolution,
                   rhs_full: np.ndarray, tag: str) -> AdjointSolution:
    _, mat = space.assemble(codes, params, state.a, want_matrix=True)
    p_red = solve_linear(LinearSystem(mat, space.cons.reduce_vec(rhs_full)))
    p_full = space.cons.expand(p_red)
    from .fem import curl_of_potential

    return AdjointSolution(p=p_full, bhat=curl_of_potential(space.mesh, p_full, space.edata),
                           tag=tag)


def solve_adjoint_torque(space: FemSpace, codes, params, state: FieldSolution,
                         cfg: TorqueConfig, nu0: float) -> AdjointSolution:
    """Adjoint of the torque functional: tangent system with RHS -dT/da."""
    rhs = -torque_linearization(space.mesh, space.edata, state, cfg, nu0)
    return _solve_adjoint(space, codes, params, state, rhs, "torque")


def solve_adjoint_constraint(space: FemSpace, codes, params, state: FieldSolution,
                             labels, matset: MaterialSet,
                             pcfg: PenaltyConfig) -> AdjointSolution:
    """Adjoint of the relaxed demagnetization constraint at the damaging state."""
    grad_flux = constraint_gradient_flux(state.b, labels, matset.easy_axes(), pcfg)
    contrib = space.edata.areas[:, None] * np.einsum(
        "eij,ei->ej", space.edata.curl_ops, grad_flux)
    dC_da = np.zeros(space.mesh.n_vertices)
    np.add.at(dC_da, space.mesh.triangles.ravel(), contrib.ravel())
    return _solve_adjoint(space, codes, params, state, -dC_da, "constraint")


def default_torque_annulus(r_rotor: float, airgap: float, axial_length: float) -> TorqueConfig:
    """Middle third of the airgap (aligned with the generated mesh layers)."""
    return TorqueConfig(r_inner=r_rotor + airgap / 3.0,
                        r_outer=r_rotor + 2.0 * airgap / 3.0,
                        axial_length=axial_length)
