"""P1 finite-element machinery for 2D curl-curl magnetostatics.

Scalar potential a, elementwise flux b = curl a = (da/dy, -da/dx).
Dirichlet and (anti-)periodic constraints are handled by exact DOF
elimination (master/slave with a sign), so reduced systems stay
symmetric positive definite for all the supported laws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._kernels import backend as _kb
from .errors import SolverError
from .geometry import MARKER_INNER, MARKER_OUTER, Mesh, _triangle_geometry


@dataclass(frozen=True)
class ElementData:
    """Per-element P1 geometry, precomputed once per mesh."""

    areas: np.ndarray       # (E,)
    grads: np.ndarray       # (E,3,2) basis gradients
    curl_ops: np.ndarray    # (E,2,3): column i = (d_y lambda_i, -d_x lambda_i)
    centroids: np.ndarray   # (E,2)


def element_data(mesh: Mesh) -> ElementData:
    p = mesh.vertices[mesh.triangles]
    areas, grads = _triangle_geometry(p)
    curl_ops = np.empty((len(areas), 2, 3))
    curl_ops[:, 0, :] = grads[:, :, 1]
    curl_ops[:, 1, :] = -grads[:, :, 0]
    return ElementData(areas=areas, grads=grads, curl_ops=curl_ops,
                       centroids=p.mean(axis=1))


def curl_of_potential(mesh: Mesh, a, edata: ElementData | None = None):
    """Per-element flux b = (da/dy, -da/dx); constant on each triangle."""
    ed = edata if edata is not None else element_data(mesh)
    return np.einsum("eij,ej->ei", ed.curl_ops, np.asarray(a, float)[mesh.triangles])


@dataclass(frozen=True)
class ConstraintMap:
    """Reduced-DOF map: free_index < 0 marks eliminated Dirichlet nodes;
    slave nodes share the master's reduced index with the configured sign."""

    free_index: np.ndarray  # (N,) int64
    sign: np.ndarray        # (N,) float64
    n_free: int

    def reduce_vec(self, v_full):
        keep = self.free_index >= 0
        return np.bincount(self.free_index[keep],
                           weights=(self.sign * v_full)[keep],
                           minlength=self.n_free)

    def expand(self, v_red):
        out = np.zeros(len(self.free_index))
        keep = self.free_index >= 0
        out[keep] = self.sign[keep] * v_red[self.free_index[keep]]
        return out

    def project(self, v_full):
        """Nearest constraint-satisfying full vector (for initial guesses)."""
        return self.expand(self.reduce_with_average(v_full))

    def reduce_with_average(self, v_full):
        keep = self.free_index >= 0
        counts = np.bincount(self.free_index[keep], minlength=self.n_free)
        sums = np.bincount(self.free_index[keep],
                           weights=(self.sign * v_full)[keep],
                           minlength=self.n_free)
        return sums / np.maximum(counts, 1)


def build_constraints(mesh: Mesh, antiperiodic_sign: float = -1.0,
                      dirichlet_markers=(MARKER_OUTER, MARKER_INNER)) -> ConstraintMap:
    n = mesh.n_vertices
    dirichlet = np.zeros(n, dtype=bool)
    for marker in dirichlet_markers:
        dirichlet[mesh.nodes_with_marker(marker)] = True

    master_of = np.full(n, -1, dtype=np.int64)
    sign = np.ones(n)
    for ia, ib in mesh.periodic_pairs:
        if dirichlet[ia] or dirichlet[ib]:
            dirichlet[ia] = dirichlet[ib] = True
            continue
        master_of[ib] = ia
        sign[ib] = antiperiodic_sign

    free_index = np.full(n, -1, dtype=np.int64)
    counter = 0
    for node in range(n):
        if dirichlet[node] or master_of[node] >= 0:
            continue
        free_index[node] = counter
        counter += 1
    for node in range(n):
        if master_of[node] >= 0:
            free_index[node] = free_index[master_of[node]]
    return ConstraintMap(free_index=free_index, sign=sign, n_free=counter)


class FemSpace:
    """Mesh + element data + constraint map + precomputed sparsity."""

    def __init__(self, mesh: Mesh, cons: ConstraintMap, edata: ElementData | None = None):
        self.mesh = mesh
        self.cons = cons
        self.edata = edata if edata is not None else element_data(mesh)
        tri = mesh.triangles.astype(np.int64)
        gi = cons.free_index[tri]                         # (E,3)
        si = cons.sign[tri]
        rows = np.repeat(gi, 3, axis=1).reshape(-1)       # i index of (i,j) blocks
        cols = np.tile(gi, (1, 3)).reshape(-1)
        scale = (np.repeat(si, 3, axis=1) * np.tile(si, (1, 3))).reshape(-1)
        keep = (rows >= 0) & (cols >= 0)
        self._rows = rows[keep]
        self._cols = cols[keep]
        self._scale = scale[keep]
        self._keep = keep
        self.tri = tri

    def assemble(self, codes, params, a_full, bg=None, want_matrix=True):
        """(reduced residual of the h-term, reduced stiffness or None)."""
        res_full, vals = _kb.assemble(self.mesh.triangles, self.edata.curl_ops,
                                      self.edata.areas, codes, params,
                                      np.asarray(a_full, float), bg=bg,
                                      want_matrix=want_matrix)
        res_red = self.cons.reduce_vec(res_full)
        if not want_matrix:
            return res_red, None
        data = vals.reshape(-1)[self._keep] * self._scale
        mat = sp.coo_matrix((data, (self._rows, self._cols)),
                            shape=(self.cons.n_free, self.cons.n_free)).tocsr()
        return res_red, mat


@dataclass
class LinearSystem:
    """Reduced sparse system K x = rhs."""

    matrix: sp.spmatrix
    rhs: np.ndarray


def solve_linear(system: LinearSystem, rtol: float = 1e-10) -> np.ndarray:
    """Direct sparse solve with an explicit residual check."""
    rhs = np.asarray(system.rhs, dtype=np.float64)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros_like(rhs)
    try:
        lu = spla.splu(system.matrix.tocsc())
        x = lu.solve(rhs)
    except RuntimeError as exc:  # singular factorization
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    rel = np.linalg.norm(system.matrix @ x - rhs) / rhs_norm
    if rel > rtol:
        raise SolverError(f"linear solve stagnated: relative residual {rel:.3e} > {rtol:g}")
    return x


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-8
    max_iter: int = 50
    damping_floor: float = 1e-4


@dataclass
class FieldSolution:
    """Nodal potential plus per-element flux for one operating point."""

    a: np.ndarray            # (N,) nodal potential, constraints satisfied
    b: np.ndarray            # (E,2) per-element flux density
    tag: str = "nominal"
    newton_iters: int = 0
    residual_history: list = field(default_factory=list)


def newton_solve(space: FemSpace, codes, params, load_full=None, a0_full=None,
                 bg=None, cfg: NewtonConfig = NewtonConfig(), ref_norm=None,
                 tag: str = "nominal") -> FieldSolution:
    """Damped Newton iteration for the reduced nonlinear system.

    Stops when the residual max-norm drops below tol*(1 + ref), where ref
    defaults to the reduced load max-norm. Backtracking halves the step
    while the residual 2-norm does not decrease (floor cfg.damping_floor).
    """
    cons = space.cons
    n_full = space.mesh.n_vertices
    a = cons.project(np.zeros(n_full) if a0_full is None else np.asarray(a0_full, float))
    load_red = cons.reduce_vec(load_full) if load_full is not None else np.zeros(cons.n_free)
    ref = float(np.max(np.abs(load_red))) if ref_norm is None else float(ref_norm)
    tol_abs = cfg.tol * (1.0 + ref)

    history = []

    def residual(a_try, want_matrix):
        res, mat = space.assemble(codes, params, a_try, bg=bg, want_matrix=want_matrix)
        return res - load_red, mat

    r_red, _ = residual(a, want_matrix=False)
    r_inf = float(np.max(np.abs(r_red))) if r_red.size else 0.0
    history.append((r_inf, float(np.linalg.norm(r_red))))

    for it in range(cfg.max_iter + 1):
        if r_inf <= tol_abs:
            b = curl_of_potential(space.mesh, a, space.edata)
            if bg is not None:
                b = b + bg
            return FieldSolution(a=a, b=b, tag=tag, newton_iters=it,
                                 residual_history=history)
        if it == cfg.max_iter:
            raise SolverError(
                f"Newton did not converge in {cfg.max_iter} iterations "
                f"(|r|_inf={r_inf:.3e}, tol={tol_abs:.3e})", history=history)

        _, mat = space.assemble(codes, params, a, bg=bg, want_matrix=True)
        delta = solve_linear(LinearSystem(mat, -r_red))
        delta_full = cons.expand(delta)

        r_norm2 = float(np.linalg.norm(r_red))
        alpha = 1.0
        while True:
            a_try = a + alpha * delta_full
            r_try, _ = residual(a_try, want_matrix=False)
            if float(np.linalg.norm(r_try)) < r_norm2 or r_norm2 == 0.0:
                break
            alpha *= 0.5
            if alpha < cfg.damping_floor:
                raise SolverError(
                    f"Newton line search failed at damping floor "
                    f"{cfg.damping_floor:g} (|r|_2={r_norm2:.3e})", history=history)
        a = a_try
        r_red = r_try
        r_inf = float(np.max(np.abs(r_red)))
        history.append((r_inf, float(np.linalg.norm(r_red))))

    raise AssertionError("unreachable")


def assemble_residual(space: FemSpace, codes, params, a_full, load_full=None, bg=None):
    """Reduced residual of the weak form minus the source (spec surface)."""
    res, _ = space.assemble(codes, params, a_full, bg=bg, want_matrix=False)
    if load_full is not None:
        res = res - space.cons.reduce_vec(load_full)
    return res


def assemble_jacobian(space: FemSpace, codes, params, a_full, bg=None):
    """Reduced tangent stiffness at a_full (spec surface)."""
    _, mat = space.assemble(codes, params, a_full, bg=bg, want_matrix=True)
    return mat
