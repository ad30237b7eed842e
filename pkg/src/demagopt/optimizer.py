"""Multi-material vector level-set optimization driven by interpolated
topological derivatives, with an Augmented Lagrangian magnet-volume bound.

The design is a unit 3-vector per design node; the material of a design
element is the tetrahedron direction closest to the nodal average of the
level set (iron, magnet1, magnet2, air in this order). One outer
iteration solves both operating points and both adjoints, composes the
per-element sensitivity field g, line-searches the update step, and
updates the volume multiplier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TabulationError
from .fem import (FemSpace, FieldSolution, NewtonConfig, curl_of_potential,
                  newton_solve)
from .geometry import DESIGN_REGION, Mesh
from .machine import (SourceConfig, TorqueConfig, assemble_source,
                      solve_adjoint_constraint, solve_adjoint_torque, torque)
from .materials import MaterialSet
from .penalty import PenaltyConfig, constraint_functional, demag_metric
from .tderiv import (ExteriorConfig, GridSpec, TDTable, build_table,
                     interpolate, td_sample)

# Regular-tetrahedron sector directions for (iron, magnet1, magnet2, air).
DIRECTIONS = np.array([
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
]) / math.sqrt(3.0)

LABEL_IRON, LABEL_MAGNET1, LABEL_MAGNET2, LABEL_AIR = 0, 1, 2, 3
MAGNET_VOLUME_FLAG = np.array([0.0, 1.0, 1.0, 0.0])

FIXED_REGION_LABEL = {"airgap": LABEL_AIR, "stator_iron": LABEL_IRON,
                      "shaft": LABEL_IRON}


@dataclass
class DesignState:
    """Nodal level-set field; rows outside the design region are inert."""

    psi: np.ndarray                 # (N,3), unit rows on design nodes
    design_nodes: np.ndarray        # (N,) bool

    def copy(self):
        return DesignState(psi=self.psi.copy(), design_nodes=self.design_nodes)

    def normalized(self):
        out = self.psi.copy()
        norms = np.linalg.norm(out[self.design_nodes], axis=1)
        out[self.design_nodes] /= np.maximum(norms, 1e-300)[:, None]
        return DesignState(psi=out, design_nodes=self.design_nodes)


@dataclass
class ALState:
    """Augmented Lagrangian state for the magnet volume bound."""

    lam: float = 0.0
    c: float = 1.0
    v_target: float = 0.0

    def value(self, volume: float) -> float:
        g = volume - self.v_target
        return (max(0.0, self.lam + self.c * g) ** 2 - self.lam ** 2) / (2.0 * self.c)

    def prime(self, volume: float) -> float:
        return max(0.0, self.lam + self.c * (volume - self.v_target))


@dataclass(frozen=True)
class OptimizerConfig:
    kappa0: float = 0.5
    kappa_floor: float = 0.5 ** 8
    theta_tol_deg: float = 1.0
    max_iter: int = 100
    al_c_growth: float = 2.0
    al_shrink: float = 0.9          # required violation reduction factor
    stall_patience: int = 3         # consecutive failed line searches

    def validate(self):
        if not 0.0 < self.kappa0 <= 1.0:
            raise ValueError("kappa0 must be in (0, 1]")


def design_masks(mesh: Mesh):
    """(design element mask, design node mask) for the rotor design region."""
    elems = mesh.region_mask(DESIGN_REGION)
    nodes = np.zeros(mesh.n_vertices, dtype=bool)
    nodes[np.unique(mesh.triangles[elems])] = True
    return elems, nodes


def material_map(design: DesignState, mesh: Mesh) -> np.ndarray:
    """Per-element labels: argmax direction of the nodal-average level set
    on design elements (ties to the lowest index), fixed labels elsewhere."""
    labels = np.empty(mesh.n_triangles, dtype=np.int64)
    labels.fill(LABEL_AIR)
    for region, lab in FIXED_REGION_LABEL.items():
        labels[mesh.region_mask(region)] = lab
    for region in np.unique(mesh.region_id):
        if region.startswith("slot_"):
            labels[mesh.region_mask(region)] = LABEL_AIR
    elems = mesh.region_mask(DESIGN_REGION)
    psi_avg = design.psi[mesh.triangles[elems]].mean(axis=1)
    labels[elems] = np.argmax(psi_avg @ DIRECTIONS.T, axis=1)
    return labels


def update_levelset(design: DesignState, g_elem: np.ndarray, kappa: float,
                    mesh: Mesh, areas: np.ndarray) -> DesignState:
    """psi <- normalize((1-kappa) psi + kappa ghat) on design nodes, where
    ghat is the area-weighted nodal average of the element field g."""
    ghat = nodal_direction(g_elem, mesh, areas, design.design_nodes)
    out = design.psi.copy()
    mask = design.design_nodes
    mixed = (1.0 - kappa) * out[mask] + kappa * ghat[mask]
    norms = np.linalg.norm(mixed, axis=1)
    ok = norms > 1e-300
    rows = np.where(mask)[0]
    out[rows[ok]] = mixed[ok] / norms[ok, None]
    return DesignState(psi=out, design_nodes=design.design_nodes)


def nodal_direction(g_elem: np.ndarray, mesh: Mesh, areas: np.ndarray,
                    node_mask: np.ndarray) -> np.ndarray:
    """Area-weighted average of per-design-element vectors onto nodes,
    normalized; zero rows stay zero."""
    elems = mesh.region_mask(DESIGN_REGION)
    tri = mesh.triangles[elems]
    w = areas[elems]
    acc = np.zeros((mesh.n_vertices, 3))
    wsum = np.zeros(mesh.n_vertices)
    for loc in range(3):
        np.add.at(acc, tri[:, loc], w[:, None] * g_elem)
        np.add.at(wsum, tri[:, loc], w)
    out = np.zeros_like(acc)
    rows = node_mask & (wsum > 0)
    out[rows] = acc[rows] / wsum[rows, None]
    norms = np.linalg.norm(out[rows], axis=1)
    ok = norms > 1e-300
    idx = np.where(rows)[0]
    out[idx[ok]] /= norms[ok, None]
    out[idx[~ok]] = 0.0
    return out


def mean_angle_deg(design: DesignState, ghat: np.ndarray, mesh: Mesh,
                   areas: np.ndarray) -> float:
    """Area-weighted mean angle between psi and the nodal update direction."""
    elems = mesh.region_mask(DESIGN_REGION)
    tri = mesh.triangles[elems]
    w = areas[elems]
    wsum = np.zeros(mesh.n_vertices)
    for loc in range(3):
        np.add.at(wsum, tri[:, loc], w)
    mask = design.design_nodes & (np.linalg.norm(ghat, axis=1) > 0.5)
    if not np.any(mask):
        return 0.0
    dots = np.clip(np.sum(design.psi[mask] * ghat[mask], axis=1), -1.0, 1.0)
    ang = np.degrees(np.arccos(dots))
    return float(np.sum(wsum[mask] * ang) / np.sum(wsum[mask]))


@dataclass
class ObjectiveResult:
    J: float
    T: float
    C: float
    volume: float
    D_nominal: float
    D_damaging: float
    state_nominal: FieldSolution
    state_damaging: FieldSolution
    labels: np.ndarray


@dataclass
class MachineProblem:
    """Snapshot of everything needed to evaluate one design."""

    mesh: Mesh
    space: FemSpace
    matset: MaterialSet
    source: SourceConfig
    torque_cfg: TorqueConfig
    penalty_cfg: PenaltyConfig
    newton_cfg: NewtonConfig = NewtonConfig()
    tables: "TableStore | None" = None
    exact_td: bool = False
    ext_cfg: ExteriorConfig = ExteriorConfig()

    def __post_init__(self):
        self.design_elems, self.design_nodes = design_masks(self.mesh)
        self.load_nominal = assemble_source(self.mesh, self.space.edata,
                                            self.source, "nominal")
        self.load_damaging = assemble_source(self.mesh, self.space.edata,
                                             self.source, "damaging")
        self.areas = self.space.edata.areas

    def solve_states(self, labels):
        codes, params = self.matset.assignment(labels)
        nominal = newton_solve(self.space, codes, params,
                               load_full=self.load_nominal,
                               cfg=self.newton_cfg, tag="nominal")
        damaging = newton_solve(self.space, codes, params,
                                load_full=self.load_damaging,
                                a0_full=nominal.a, cfg=self.newton_cfg,
                                tag="damaging")
        return nominal, damaging

    def magnet_volume(self, labels) -> float:
        return float(np.sum(self.areas[MAGNET_VOLUME_FLAG[labels] > 0]))

    def evaluate(self, design: DesignState, al: ALState) -> ObjectiveResult:
        labels = material_map(design, self.mesh)
        nominal, damaging = self.solve_states(labels)
        axes = self.matset.easy_axes()
        t_val = torque(self.mesh, self.space.edata, nominal, self.torque_cfg,
                       self.matset.params.nu0)
        c_val = constraint_functional(self.areas, damaging.b, labels, axes,
                                      self.penalty_cfg)
        vol = self.magnet_volume(labels)
        d_nom = demag_metric(self.areas, nominal.b, labels, axes, self.penalty_cfg)
        d_dam = demag_metric(self.areas, damaging.b, labels, axes, self.penalty_cfg)
        j_val = -t_val + self.penalty_cfg.gamma * c_val + al.value(vol)
        return ObjectiveResult(J=j_val, T=t_val, C=c_val, volume=vol,
                               D_nominal=d_nom, D_damaging=d_dam,
                               state_nominal=nominal, state_damaging=damaging,
                               labels=labels)

    def td_field(self, result: ObjectiveResult, al: ALState):
        """Per-design-element sensitivity vectors g and the clamp count."""
        labels = result.labels
        codes, params = self.matset.assignment(labels)
        adj_t = solve_adjoint_torque(self.space, codes, params,
                                     result.state_nominal, self.torque_cfg,
                                     self.matset.params.nu0)
        gamma = self.penalty_cfg.gamma
        adj_c = None
        if gamma != 0.0:
            adj_c = solve_adjoint_constraint(self.space, codes, params,
                                             result.state_damaging, labels,
                                             self.matset, self.penalty_cfg)

        elems = np.where(self.design_elems)[0]
        lab_e = labels[elems]
        b_nom = result.state_nominal.b[elems]
        bhat_t = adj_t.bhat[elems]
        b_dam = result.state_damaging.b[elems]
        bhat_c = adj_c.bhat[elems] if adj_c is not None else None
        al_prime = al.prime(result.volume)

        g = np.zeros((len(elems), 3))
        clamps = 0
        for i in range(4):
            sel = lab_e == i
            if not np.any(sel):
                continue
            for j in range(4):
                if j == i:
                    continue
                d_t, n1 = self._pair_td(i, j, b_nom[sel], bhat_t[sel])
                clamps += n1
                composite = -d_t
                if gamma != 0.0:
                    d_c, n2 = self._pair_td(i, j, b_dam[sel], bhat_c[sel])
                    clamps += n2
                    composite = composite + gamma * d_c
                composite = composite + al_prime * (MAGNET_VOLUME_FLAG[j]
                                                    - MAGNET_VOLUME_FLAG[i])
                g[sel] += (-composite)[:, None] * DIRECTIONS[j][None, :]
        return g, clamps

    def _pair_td(self, i, j, B, Bhat):
        if self.exact_td:
            laws = self.matset.laws()
            vals = np.array([
                float(np.dot(smp.v, bh) + smp.s)
                for smp, bh in ((td_sample(bb, laws[i], laws[j],
                                           self.penalty_cfg, self.ext_cfg), bh)
                                for bb, bh in zip(B, Bhat))
            ])
            return vals, 0
        if self.tables is None:
            raise TabulationError("no TD tables available (and exact mode is off)")
        table = self.tables.get(i, j)
        return interpolate(table, B, Bhat)


class TableStore:
    """Lazy per-pair table cache: memory, then directory, then build."""

    def __init__(self, matset: MaterialSet, pcfg: PenaltyConfig,
                 grid: GridSpec = GridSpec(), ext: ExteriorConfig = ExteriorConfig(),
                 threads: int = 1, directory=None):
        self.matset = matset
        self.pcfg = pcfg
        self.grid = grid
        self.ext = ext
        self.threads = threads
        self.directory = directory
        self._tables: dict = {}

    def put(self, i: int, j: int, table: TDTable):
        self._tables[(i, j)] = table

    def path_of(self, i: int, j: int):
        import os

        names = MaterialSet.LABELS
        fname = (f"td_{names[i]}_{names[j]}_{self.matset.magnet_law}"
                 f"_n{self.grid.n}.tdt")
        return os.path.join(self.directory, fname)

    def get(self, i: int, j: int) -> TDTable:
        key = (i, j)
        if key in self._tables:
            return self._tables[key]
        names = MaterialSet.LABELS
        if self.directory is not None:
            import os

            from .tderiv import check_table_compatible, load_table

            path = self.path_of(i, j)
            if os.path.exists(path):
                table = load_table(path)
                check_table_compatible(table, self.pcfg, self.matset.magnet_law)
                if (table.grid.n != self.grid.n
                        or table.grid.b_min != self.grid.b_min
                        or table.grid.b_max != self.grid.b_max):
                    raise TabulationError(
                        f"table {path} grid {table.grid} does not match the "
                        f"configured grid {self.grid}")
                self._tables[key] = table
                return table
        laws = self.matset.laws()
        table = build_table(laws[i], laws[j], (names[i], names[j]),
                            grid=self.grid, pcfg=self.pcfg, ext=self.ext,
                            threads=self.threads,
                            meta={"law": self.matset.magnet_law})
        self._tables[key] = table
        if self.directory is not None:
            import os

            from .tderiv import save_table

            os.makedirs(self.directory, exist_ok=True)
            save_table(table, self.path_of(i, j))
        return table


LOG_COLUMNS = ("iter", "J", "T", "C", "volume", "lambda", "c", "kappa",
               "mean_angle_deg", "D_nominal", "D_damaging", "clamp_count")


@dataclass
class OptimizeOutcome:
    design: DesignState
    log_rows: list
    status: str                 # "converged" | "max_iter" | "stalled"
    final: ObjectiveResult


def initial_al_state(problem: MachineProblem, v_target: float,
                     c_scale: float = 10.0) -> ALState:
    area_dr = float(np.sum(problem.areas[problem.design_elems]))
    return ALState(lam=0.0, c=c_scale / area_dr, v_target=v_target)


def optimize(problem: MachineProblem, design: DesignState,
             cfg: OptimizerConfig, al: ALState,
             snapshot_cb=None, log_cb=None) -> OptimizeOutcome:
    """Outer loop: states/adjoints -> sensitivity field -> line-searched
    level-set update -> Augmented Lagrangian update; stops on the
    area-weighted mean angle criterion or iteration/stall limits."""
    cfg.validate()
    design = design.normalized()
    mesh, areas = problem.mesh, problem.areas

    result = problem.evaluate(design, al)
    log_rows = []
    status = "max_iter"
    prev_violation = None
    fails = 0
    kappa_acc = cfg.kappa0

    for it in range(cfg.max_iter):
        # J of the current design under the *current* multipliers: the line
        # search may only compare objectives within one AL parameter set
        result.J = (-result.T + problem.penalty_cfg.gamma * result.C
                    + al.value(result.volume))
        g, clamps = problem.td_field(result, al)
        ghat = nodal_direction(g, mesh, areas, design.design_nodes)
        angle = mean_angle_deg(design, ghat, mesh, areas)

        row = {"iter": it, "J": result.J, "T": result.T, "C": result.C,
               "volume": result.volume, "lambda": al.lam, "c": al.c,
               "kappa": 0.0, "mean_angle_deg": angle,
               "D_nominal": result.D_nominal, "D_damaging": result.D_damaging,
               "clamp_count": clamps}

        if angle < cfg.theta_tol_deg:
            log_rows.append(row)
            if log_cb:
                log_cb(row)
            status = "converged"
            break

        # line search on the step size; once a step no longer changes any
        # label, smaller steps cannot either
        kappa = min(cfg.kappa0, 2.0 * kappa_acc)
        accepted = None
        while kappa >= cfg.kappa_floor:
            trial = update_levelset(design, g, kappa, mesh, areas)
            if np.array_equal(material_map(trial, mesh), result.labels):
                break
            trial_result = problem.evaluate(trial, al)
            if trial_result.J < result.J:
                accepted = (trial, trial_result, kappa)
                break
            kappa *= 0.5

        if accepted is None:
            fails += 1
            row["kappa"] = 0.0
        else:
            fails = 0
            design, result, kappa_acc = accepted
            row["kappa"] = kappa_acc

        log_rows.append(row)
        if log_cb:
            log_cb(row)
        if snapshot_cb:
            snapshot_cb(it, design, result)

        # Augmented Lagrangian update on the volume bound; the infeasibility
        # measure max(g, -lam/c) is the standard inequality residual (zero
        # while the bound is slack and the multiplier rests at zero)
        violation = result.volume - al.v_target
        lam_old, c_old = al.lam, al.c
        al.lam = max(0.0, al.lam + al.c * violation)
        measure = max(violation, -lam_old / al.c)
        if (prev_violation is not None and abs(measure) > 1e-16
                and abs(measure) > cfg.al_shrink * abs(prev_violation)):
            al.c *= cfg.al_c_growth
        prev_violation = measure

        # a failed line search only counts as a stall once the multipliers
        # have settled; while they still move, the next iteration minimizes
        # a different augmented objective
        al_settled = (abs(al.lam - lam_old) <= 0.01 * (abs(lam_old) + 1e-30)
                      and al.c == c_old)
        if accepted is not None or not al_settled:
            fails = 0
        if accepted is None and fails >= cfg.stall_patience:
            status = "stalled"
            break

    return OptimizeOutcome(design=design, log_rows=log_rows, status=status,
                           final=result)


def bar_design(mesh: Mesh, matset: MaterialSet, geom_r_shaft: float,
               geom_r_rotor: float, bar_length: float = 0.024,
               bar_thickness: float = 0.0042, bar_radius_frac: float = 0.62,
               bar_angles_deg=(11.25, 33.75), air_pockets=()) -> DesignState:
    """Initial design: iron rotor with one rectangular bar per magnet,
    each oriented perpendicular to its easy axis; optional air pockets
    (cx, cy, radius) carve air into the level set."""
    _, node_mask = design_masks(mesh)
    psi = np.zeros((mesh.n_vertices, 3))
    psi[node_mask] = DIRECTIONS[LABEL_IRON]

    r_mid = geom_r_shaft + bar_radius_frac * (geom_r_rotor - geom_r_shaft)
    pts = mesh.vertices
    for k, ang_deg in enumerate(bar_angles_deg):
        phi = (matset.phi1, matset.phi2)[k]
        center = r_mid * np.array([math.cos(math.radians(ang_deg)),
                                   math.sin(math.radians(ang_deg))])
        e = np.array([math.cos(phi), math.sin(phi)])     # easy axis
        t = np.array([-e[1], e[0]])                      # bar long axis
        rel = pts - center
        u = rel @ t
        w = rel @ e
        inside = node_mask & (np.abs(u) <= bar_length / 2) & (np.abs(w) <= bar_thickness / 2)
        psi[inside] = DIRECTIONS[LABEL_MAGNET1 + k]
    for (cx, cy, rad) in air_pockets:
        d2 = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2
        psi[node_mask & (d2 <= rad * rad)] = DIRECTIONS[LABEL_AIR]
    return DesignState(psi=psi, design_nodes=node_mask)


DESIGN_HEADER = "demagdesign v1"


def write_design(design: DesignState, path):
    lines = [DESIGN_HEADER]
    for idx in np.where(design.design_nodes)[0]:
        p = design.psi[idx]
        lines.append(f"{idx} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_design(path, mesh: Mesh) -> DesignState:
    from .errors import MeshFormatError

    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != DESIGN_HEADER:
        raise MeshFormatError(f"bad design header, expected {DESIGN_HEADER!r}", line=1)
    _, node_mask = design_masks(mesh)
    psi = np.zeros((mesh.n_vertices, 3))
    seen = np.zeros(mesh.n_vertices, dtype=bool)
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MeshFormatError(f"design row needs 'node psi1 psi2 psi3', got {line!r}",
                                  line=no)
        try:
            idx = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise MeshFormatError(f"bad number in {line!r}", line=no) from None
        if idx < 0 or idx >= mesh.n_vertices:
            raise MeshFormatError(f"node index {idx} out of range", line=no)
        psi[idx] = vals
        seen[idx] = True
    missing = node_mask & ~seen
    if np.any(missing):
        raise MeshFormatError(
            f"design file misses {int(np.count_nonzero(missing))} design nodes")
    return DesignState(psi=psi, design_nodes=node_mask)


def uniform_design(mesh: Mesh, label: int) -> DesignState:
    _, node_mask = design_masks(mesh)
    psi = np.zeros((mesh.n_vertices, 3))
    psi[node_mask] = DIRECTIONS[label]
    return DesignState(psi=psi, design_nodes=node_mask)
