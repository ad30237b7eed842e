"""Plain-text run configuration: `section.key = value` lines with a
schema of typed defaults. Unknown keys are rejected; `resolve` returns a
fully materialized dict suitable for run_meta output.
"""

from __future__ import annotations

import math

from .errors import ConfigError

_SENTINEL = object()


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_phase_pattern(s):
    out = []
    for tok in s.split():
        if len(tok) < 2 or tok[:-1] not in ("A", "B", "C") or tok[-1] not in "+-":
            raise ValueError(f"bad phase token {tok!r} (expected like 'A+' 'B-')")
        out.append((tok[:-1], +1 if tok[-1] == "+" else -1))
    if not out:
        raise ValueError("empty phase pattern")
    return tuple(out)


def _parse_pockets(s):
    s = s.strip()
    if not s:
        return ()
    out = []
    for group in s.split(";"):
        parts = group.split()
        if len(parts) != 3:
            raise ValueError(f"air pocket needs 'cx cy r', got {group!r}")
        out.append(tuple(float(p) for p in parts))
    return tuple(out)


# key -> (parser, default); floats marked "auto" (-1) are derived later
SCHEMA = {
    "geometry.r_shaft": (float, 0.030),
    "geometry.r_rotor": (float, 0.078),
    "geometry.airgap": (float, 0.001),
    "geometry.r_stator": (float, 0.130),
    "geometry.sector_angle": (float, math.pi / 4.0),
    "geometry.slots": (int, 6),
    "geometry.slot_width_frac": (float, 0.5),
    "geometry.slot_depth_frac": (float, 0.4),
    "geometry.h": (float, 0.0012),

    "material.nu0_over": (float, 1.086),
    "material.B_R": (float, 1.2),
    "material.H_c": (float, 4.75e5),
    "material.magnet_law": (str, "linear"),
    "material.phi1_deg": (float, 30.0),
    "material.phi2_deg": (float, 15.0),

    "penalty.B_star": (float, 0.56),
    "penalty.p": (int, 16),
    "penalty.B0_star": (float, -0.66),
    "penalty.gamma": (float, 10.0),

    "solver.newton_tol": (float, 1e-8),
    "solver.newton_max_iter": (int, 50),
    "solver.damping_floor": (float, 1e-4),
    "solver.antiperiodic_sign": (float, -1.0),

    "source.j_eff": (float, 1512.5),
    "source.theta0_deg": (float, 6.0),
    "source.damaging_factor": (float, 1.5),
    "source.pole_pairs": (int, 4),
    "source.phase_pattern": (_parse_phase_pattern, _parse_phase_pattern("A+ A- B+ B- C+ C-")),

    "machine.axial_length": (float, 0.1),

    "torque.r_inner": (float, -1.0),     # -1: middle third of the airgap
    "torque.r_outer": (float, -1.0),

    "tderiv.b_min": (float, -2.5),
    "tderiv.b_max": (float, 2.5),
    "tderiv.grid_n": (int, 51),
    "tderiv.r_trunc": (float, 50.0),
    "tderiv.n_theta": (int, 64),
    "tderiv.newton_tol": (float, 1e-10),

    "optimizer.kappa0": (float, 0.5),
    "optimizer.kappa_floor": (float, 0.5 ** 8),
    "optimizer.theta_tol_deg": (float, 1.0),
    "optimizer.max_iter": (int, 100),
    "optimizer.al_c_scale": (float, 10.0),
    "optimizer.al_c_growth": (float, 2.0),
    "optimizer.al_shrink": (float, 0.9),
    "optimizer.volume_frac": (float, 0.10),
    "optimizer.bar_length": (float, 0.024),
    "optimizer.bar_thickness": (float, 0.0042),
    "optimizer.bar_radius_frac": (float, 0.62),
    "optimizer.bar1_angle_deg": (float, 11.25),
    "optimizer.bar2_angle_deg": (float, 33.75),
    "optimizer.air_pockets": (_parse_pockets, ()),
    "optimizer.exact_td": (_parse_bool, False),

    "run.seed": (int, 0),
    "run.threads": (int, 1),
}


def parse_config(path=None, overrides=None) -> dict:
    """Read `section.key = value` lines, apply overrides, validate against
    the schema, and return the fully materialized configuration."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            for no, line in enumerate(f, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{no}: expected 'section.key = value', "
                                      f"got {stripped!r}")
                key, _, value = stripped.partition("=")
                raw[key.strip()] = value.strip()
    for key, value in (overrides or {}).items():
        raw[key] = value

    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser, _ = SCHEMA[key]
        if isinstance(value, str):
            try:
                cfg[key] = parser(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        else:
            cfg[key] = value

    if cfg["material.magnet_law"] not in ("linear", "nonlinear"):
        raise ConfigError("material.magnet_law must be 'linear' or 'nonlinear'")
    return cfg


def format_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple) and len(v[0]) == 2 and isinstance(v[0][0], str):
            return " ".join(f"{ph}{'+' if pol > 0 else '-'}" for ph, pol in v)
        return ";".join(" ".join(repr(float(x)) for x in grp) for grp in v)
    return str(v)


def dump_config(cfg: dict) -> str:
    """Deterministic plain-text dump of a resolved configuration."""
    lines = [f"{key} = {format_value(cfg[key])}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"
