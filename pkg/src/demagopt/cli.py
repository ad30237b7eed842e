"""Command-line interface and run orchestration.

Commands: mesh, solve, adjoint, td-table, optimize, evaluate.
Exit codes: 2 config/geometry, 3 solver, 4 tabulation, 5 stalled
optimization. Every command writes a `run_meta` file with the resolved
configuration into the output directory; identical inputs produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .config import SCHEMA, dump_config, parse_config
from .errors import (ConfigError, DemagoptError, GeometryError,
                     MeshFormatError, MeshValidationError, OptimizationStalled,
                     SolverError, TabulationError)
from .fem import FemSpace, NewtonConfig, build_constraints, element_data
from .geometry import (DESIGN_REGION, Mesh, SectorGeometry,
                       generate_sector_mesh, read_mesh, write_mesh)
from .machine import (SourceConfig, TorqueConfig, assemble_source,
                      solve_adjoint_constraint, solve_adjoint_torque, torque)
from .materials import MaterialParams, MaterialSet
from .optimizer import (ALState, DesignState, LOG_COLUMNS, MachineProblem,
                        OptimizerConfig, TableStore, bar_design, design_masks,
                        material_map, optimize, read_design, uniform_design,
                        write_design)
from .penalty import (PenaltyConfig, constraint_functional, demag_integrand,
                      demag_metric)
from .tderiv import ExteriorConfig, GridSpec, build_table, save_table
from .vtk_io import export_vtk

MESH_FILENAME = "sector.mesh"


def geometry_from_config(cfg) -> SectorGeometry:
    return SectorGeometry(
        r_shaft=cfg["geometry.r_shaft"], r_rotor=cfg["geometry.r_rotor"],
        airgap=cfg["geometry.airgap"], r_stator=cfg["geometry.r_stator"],
        sector_angle=cfg["geometry.sector_angle"], slots=cfg["geometry.slots"],
        slot_width_frac=cfg["geometry.slot_width_frac"],
        slot_depth_frac=cfg["geometry.slot_depth_frac"], h=cfg["geometry.h"])


def matset_from_config(cfg, magnet_law=None) -> MaterialSet:
    params = MaterialParams(nu_m_divisor=cfg["material.nu0_over"],
                            B_R=cfg["material.B_R"], H_c=cfg["material.H_c"])
    params.validate()
    return MaterialSet(params=params,
                       phi1=math.radians(cfg["material.phi1_deg"]),
                       phi2=math.radians(cfg["material.phi2_deg"]),
                       magnet_law=magnet_law or cfg["material.magnet_law"])


def penalty_from_config(cfg, gamma=None) -> PenaltyConfig:
    pcfg = PenaltyConfig(B_star=cfg["penalty.B_star"], p=cfg["penalty.p"],
                         B0_star=cfg["penalty.B0_star"],
                         gamma=cfg["penalty.gamma"] if gamma is None else gamma)
    pcfg.validate()
    return pcfg


def source_from_config(cfg) -> SourceConfig:
    return SourceConfig(j_eff=cfg["source.j_eff"],
                        theta0_deg=cfg["source.theta0_deg"],
                        damaging_factor=cfg["source.damaging_factor"],
                        pole_pairs=cfg["source.pole_pairs"],
                        phase_pattern=cfg["source.phase_pattern"],
                        axial_length=cfg["machine.axial_length"])


def torque_from_config(cfg) -> TorqueConfig:
    r_i, r_o = cfg["torque.r_inner"], cfg["torque.r_outer"]
    g = cfg["geometry.airgap"]
    if r_i <= 0:
        r_i = cfg["geometry.r_rotor"] + g / 3.0
    if r_o <= 0:
        r_o = cfg["geometry.r_rotor"] + 2.0 * g / 3.0
    return TorqueConfig(r_inner=r_i, r_outer=r_o,
                        axial_length=cfg["machine.axial_length"])


def newton_from_config(cfg) -> NewtonConfig:
    return NewtonConfig(tol=cfg["solver.newton_tol"],
                        max_iter=cfg["solver.newton_max_iter"],
                        damping_floor=cfg["solver.damping_floor"])


def grid_from_config(cfg) -> GridSpec:
    return GridSpec(b_min=cfg["tderiv.b_min"], b_max=cfg["tderiv.b_max"],
                    n=cfg["tderiv.grid_n"])


def exterior_from_config(cfg) -> ExteriorConfig:
    return ExteriorConfig(r_trunc=cfg["tderiv.r_trunc"],
                          n_theta=cfg["tderiv.n_theta"],
                          newton_tol=cfg["tderiv.newton_tol"])


def write_run_meta(out_dir, cfg, command):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_meta"), "w", encoding="utf-8") as f:
        f.write(f"# demagopt {__version__} run_meta\n")
        f.write(f"command = {command}\n")
        f.write(dump_config(cfg))


def load_or_generate_mesh(cfg, out_dir, mesh_path=None) -> Mesh:
    if mesh_path:
        return read_mesh(mesh_path)
    cached = os.path.join(out_dir, MESH_FILENAME)
    if os.path.exists(cached):
        return read_mesh(cached)
    mesh = generate_sector_mesh(geometry_from_config(cfg))
    os.makedirs(out_dir, exist_ok=True)
    write_mesh(mesh, cached)
    return mesh


def design_from_arg(arg, mesh, cfg, matset) -> DesignState:
    if arg in (None, "bars"):
        return bar_design(mesh, matset, cfg["geometry.r_shaft"],
                          cfg["geometry.r_rotor"],
                          bar_length=cfg["optimizer.bar_length"],
                          bar_thickness=cfg["optimizer.bar_thickness"],
                          bar_radius_frac=cfg["optimizer.bar_radius_frac"],
                          bar_angles_deg=(cfg["optimizer.bar1_angle_deg"],
                                          cfg["optimizer.bar2_angle_deg"]),
                          air_pockets=cfg["optimizer.air_pockets"])
    if arg == "all-air":
        return uniform_design(mesh, 3)
    if arg == "all-iron":
        return uniform_design(mesh, 0)
    return read_design(arg, mesh)


def build_problem(cfg, mesh, magnet_law=None, gamma=None, tables=None,
                  exact_td=False) -> MachineProblem:
    cons = build_constraints(mesh, antiperiodic_sign=cfg["solver.antiperiodic_sign"])
    space = FemSpace(mesh, cons)
    return MachineProblem(mesh=mesh, space=space,
                          matset=matset_from_config(cfg, magnet_law),
                          source=source_from_config(cfg),
                          torque_cfg=torque_from_config(cfg),
                          penalty_cfg=penalty_from_config(cfg, gamma),
                          newton_cfg=newton_from_config(cfg),
                          tables=tables, exact_td=exact_td,
                          ext_cfg=exterior_from_config(cfg))


def _region_areas(mesh):
    ed = element_data(mesh)
    out = {}
    for label in np.unique(mesh.region_id):
        out[label] = float(np.sum(ed.areas[mesh.region_mask(label)]))
    return out


def cmd_mesh(args, cfg):
    out_dir = args.out
    if args.h:
        if args.h.endswith("x"):
            cfg["geometry.h"] = cfg["geometry.h"] * float(args.h[:-1])
        else:
            cfg["geometry.h"] = float(args.h)
    write_run_meta(out_dir, cfg, "mesh")
    mesh = generate_sector_mesh(geometry_from_config(cfg))
    path = os.path.join(out_dir, MESH_FILENAME)
    write_mesh(mesh, path)
    print(f"mesh written to {path}")
    print(f"vertices={mesh.n_vertices} triangles={mesh.n_triangles}")
    for label, area in sorted(_region_areas(mesh).items()):
        print(f"region {label}: area={area!r} m^2")
    return 0


def _field_block(problem, labels, field, axes):
    t_val = torque(problem.mesh, problem.space.edata, field,
                   problem.torque_cfg, problem.matset.params.nu0)
    c_val = constraint_functional(problem.areas, field.b, labels, axes,
                                  problem.penalty_cfg)
    d_val = demag_metric(problem.areas, field.b, labels, axes,
                         problem.penalty_cfg)
    return t_val, c_val, d_val


def cmd_solve(args, cfg):
    out_dir = args.out
    write_run_meta(out_dir, cfg, "solve")
    mesh = load_or_generate_mesh(cfg, out_dir, args.mesh)
    problem = build_problem(cfg, mesh)
    design = design_from_arg(args.design, mesh, cfg, problem.matset)
    labels = material_map(design, mesh)
    codes, params = problem.matset.assignment(labels)
    load = assemble_source(mesh, problem.space.edata, problem.source, args.op)
    from .fem import newton_solve

    field = newton_solve(problem.space, codes, params, load_full=load,
                         cfg=problem.newton_cfg, tag=args.op)
    axes = problem.matset.easy_axes()
    t_val, c_val, d_val = _field_block(problem, labels, field, axes)

    vtk_path = os.path.join(out_dir, f"field_{args.op}.vtk")
    export_vtk(mesh, vtk_path,
               cell_data={"material": labels.astype(np.int32),
                          "b": field.b,
                          "demag": demag_integrand(field.b, labels, axes,
                                                   problem.penalty_cfg)},
               point_data={"a": field.a, "psi": design.psi})
    print(f"field written to {vtk_path}")
    print(f"torque={t_val!r} Nm")
    print(f"constraint={c_val!r}")
    print(f"demag={d_val!r}")
    return 0


def cmd_adjoint(args, cfg):
    out_dir = args.out
    write_run_meta(out_dir, cfg, "adjoint")
    mesh = load_or_generate_mesh(cfg, out_dir, args.mesh)
    problem = build_problem(cfg, mesh)
    design = design_from_arg(args.design, mesh, cfg, problem.matset)
    labels = material_map(design, mesh)
    codes, params = problem.matset.assignment(labels)
    load = assemble_source(mesh, problem.space.edata, problem.source, args.op)
    from .fem import newton_solve

    field = newton_solve(problem.space, codes, params, load_full=load,
                         cfg=problem.newton_cfg, tag=args.op)
    if args.functional == "torque":
        adj = solve_adjoint_torque(problem.space, codes, params, field,
                                   problem.torque_cfg, problem.matset.params.nu0)
    else:
        adj = solve_adjoint_constraint(problem.space, codes, params, field,
                                       labels, problem.matset,
                                       problem.penalty_cfg)
    vtk_path = os.path.join(out_dir, f"adjoint_{args.functional}_{args.op}.vtk")
    export_vtk(mesh, vtk_path, cell_data={"bhat": adj.bhat},
               point_data={"p": adj.p})
    print(f"adjoint written to {vtk_path}")
    return 0


def cmd_td_table(args, cfg):
    out_dir = args.out
    write_run_meta(out_dir, cfg, "td-table")
    if args.grid:
        cfg["tderiv.grid_n"] = int(args.grid)
    names = args.pair.split(":")
    if len(names) != 2 or any(n not in MaterialSet.LABELS for n in names):
        raise ConfigError(f"--pair must be 'from:to' with materials in "
                          f"{MaterialSet.LABELS}, got {args.pair!r}")
    matset = matset_from_config(cfg)
    laws = matset.laws()
    i, j = (MaterialSet.LABELS.index(n) for n in names)
    grid = grid_from_config(cfg)
    t0 = time.time()
    table = build_table(laws[i], laws[j], (names[0], names[1]), grid=grid,
                        pcfg=penalty_from_config(cfg),
                        ext=exterior_from_config(cfg),
                        threads=args.threads,
                        meta={"law": matset.magnet_law})
    elapsed = time.time() - t0
    path = os.path.join(out_dir,
                        f"td_{names[0]}_{names[1]}_{matset.magnet_law}"
                        f"_n{grid.n}.tdt")
    save_table(table, path)
    print(f"table written to {path}")
    print(f"samples={grid.n * grid.n} wall_time={elapsed:.2f}s")
    return 0


MODE_SETTINGS = {"linear": ("linear", 0.0),
                 "nonlinear": ("nonlinear", 0.0),
                 "constrained": ("nonlinear", None)}


def cmd_optimize(args, cfg):
    out_dir = args.out
    write_run_meta(out_dir, cfg, f"optimize --mode {args.mode}")
    mesh = load_or_generate_mesh(cfg, out_dir, args.mesh)
    magnet_law, gamma = MODE_SETTINGS[args.mode]

    tables = None
    if not (args.exact_td or cfg["optimizer.exact_td"]):
        tables_dir = args.tables or os.path.join(out_dir, "tables")
        tables = TableStore(matset_from_config(cfg, magnet_law),
                            penalty_from_config(cfg, gamma),
                            grid=grid_from_config(cfg),
                            ext=exterior_from_config(cfg),
                            threads=args.threads, directory=tables_dir)
    problem = build_problem(cfg, mesh, magnet_law=magnet_law, gamma=gamma,
                            tables=tables,
                            exact_td=args.exact_td or cfg["optimizer.exact_td"])
    design = design_from_arg(args.design, mesh, cfg, problem.matset)

    v_target = cfg["optimizer.volume_frac"] * float(
        np.sum(problem.areas[problem.design_elems]))
    area_dr = float(np.sum(problem.areas[problem.design_elems]))
    al = ALState(lam=0.0, c=cfg["optimizer.al_c_scale"] / area_dr,
                 v_target=v_target)
    ocfg = OptimizerConfig(kappa0=cfg["optimizer.kappa0"],
                           kappa_floor=cfg["optimizer.kappa_floor"],
                           theta_tol_deg=cfg["optimizer.theta_tol_deg"],
                           max_iter=args.max_iter or cfg["optimizer.max_iter"],
                           al_c_growth=cfg["optimizer.al_c_growth"],
                           al_shrink=cfg["optimizer.al_shrink"])

    log_path = os.path.join(out_dir, f"log_{args.mode}.csv")
    log_file = open(log_path, "w", encoding="utf-8")
    log_file.write(",".join(LOG_COLUMNS) + "\n")

    def log_cb(row):
        log_file.write(",".join(
            repr(row[c]) if isinstance(row[c], float) else str(row[c])
            for c in LOG_COLUMNS) + "\n")
        log_file.flush()
        print(f"iter {row['iter']:3d}  J={row['J']:+.6e}  T={row['T']:.6e}  "
              f"vol={row['volume']:.4e}  angle={row['mean_angle_deg']:.2f}")

    def snapshot_cb(it, design, result):
        write_design(design, os.path.join(out_dir,
                                          f"design_{args.mode}_{it:04d}.design"))

    try:
        outcome = optimize(problem, design, ocfg, al, snapshot_cb=snapshot_cb,
                           log_cb=log_cb)
    finally:
        log_file.close()

    write_design(outcome.design, os.path.join(out_dir, f"design_{args.mode}_final.design"))
    final = outcome.final
    axes = problem.matset.easy_axes()
    export_vtk(mesh, os.path.join(out_dir, f"final_{args.mode}.vtk"),
               cell_data={"material": final.labels.astype(np.int32),
                          "b_nominal": final.state_nominal.b,
                          "b_damaging": final.state_damaging.b,
                          "demag_nominal": demag_integrand(
                              final.state_nominal.b, final.labels, axes,
                              problem.penalty_cfg),
                          "demag_damaging": demag_integrand(
                              final.state_damaging.b, final.labels, axes,
                              problem.penalty_cfg)},
               point_data={"a_nominal": final.state_nominal.a,
                           "psi": outcome.design.psi})
    report = [f"mode={args.mode}", f"status={outcome.status}",
              f"iterations={len(outcome.log_rows)}",
              f"torque={final.T!r} Nm", f"constraint={final.C!r}",
              f"volume={final.volume!r} m^2", f"volume_target={al.v_target!r} m^2",
              f"demag_nominal={final.D_nominal!r}",
              f"demag_damaging={final.D_damaging!r}"]
    with open(os.path.join(out_dir, f"report_{args.mode}.txt"), "w",
              encoding="utf-8") as f:
        f.write("\n".join(report) + "\n")
    print("\n".join(report))
    if outcome.status == "stalled":
        raise OptimizationStalled("optimization stalled at the step floor",
                                  design=outcome.design,
                                  log_rows=outcome.log_rows)
    return 0


def cmd_evaluate(args, cfg):
    out_dir = args.out
    write_run_meta(out_dir, cfg, "evaluate")
    mesh = load_or_generate_mesh(cfg, out_dir, args.mesh)
    problem = build_problem(cfg, mesh)
    design = design_from_arg(args.design, mesh, cfg, problem.matset)
    v_target = cfg["optimizer.volume_frac"] * float(
        np.sum(problem.areas[problem.design_elems]))
    area_dr = float(np.sum(problem.areas[problem.design_elems]))
    al = ALState(lam=0.0, c=cfg["optimizer.al_c_scale"] / area_dr,
                 v_target=v_target)
    result = problem.evaluate(design, al)
    print(f"J={result.J!r}")
    print(f"torque={result.T!r} Nm")
    print(f"constraint={result.C!r}")
    print(f"volume={result.volume!r} m^2")
    print(f"demag_nominal={result.D_nominal!r}")
    print(f"demag_damaging={result.D_damaging!r}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(prog="demagopt",
                                     description="2D magnetostatic rotor topology "
                                                 "optimization with a demagnetization "
                                                 "constraint")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="configuration file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key")
        p.add_argument("--threads", type=int, default=1)

    p_mesh = sub.add_parser("mesh", help="generate and write the sector mesh")
    common(p_mesh)
    p_mesh.add_argument("--h", default=None,
                        help="target mesh size in meters, or a multiplier like 0.5x")

    for name, helptext in (("solve", "solve one operating point"),
                           ("adjoint", "solve an adjoint problem"),
                           ("evaluate", "evaluate the full objective of a design")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--mesh", default=None, help="mesh file (default: generated)")
        p.add_argument("--design", default=None,
                       help="design file, or one of bars|all-air|all-iron")
        p.add_argument("--op", choices=("nominal", "damaging"), default="nominal")
        if name == "adjoint":
            p.add_argument("--functional", choices=("torque", "constraint"),
                           default="torque")

    p_td = sub.add_parser("td-table", help="tabulate a topological-derivative pair")
    common(p_td)
    p_td.add_argument("--pair", required=True, metavar="FROM:TO")
    p_td.add_argument("--grid", default=None, help="grid nodes per axis")

    p_opt = sub.add_parser("optimize", help="run the optimization loop")
    common(p_opt)
    p_opt.add_argument("--mesh", default=None)
    p_opt.add_argument("--design", default=None)
    p_opt.add_argument("--mode", choices=("linear", "nonlinear", "constrained"),
                       default="constrained")
    p_opt.add_argument("--exact-td", action="store_true",
                       help="evaluate derivatives directly instead of tables")
    p_opt.add_argument("--tables", default=None, help="table cache directory")
    p_opt.add_argument("--max-iter", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, _, value = item.partition("=")
            overrides[key.strip()] = value.strip()
        cfg = parse_config(args.config, overrides)
        handler = {"mesh": cmd_mesh, "solve": cmd_solve, "adjoint": cmd_adjoint,
                   "td-table": cmd_td_table, "optimize": cmd_optimize,
                   "evaluate": cmd_evaluate}[args.command]
        return handler(args, cfg)
    except (ConfigError, GeometryError, MeshFormatError, MeshValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except TabulationError as exc:
        print(f"tabulation error: {exc}", file=sys.stderr)
        return 4
    except OptimizationStalled as exc:
        print(f"stalled: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
