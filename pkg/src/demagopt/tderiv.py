"""Topological derivative engine.

For an ordered material pair (0 -> 1) and a background flux B, the
sensitivity of a functional to inserting a unit-disk inclusion of
material 1 into material 0 is affine in the adjoint flux Bhat:

    d(B, Bhat) = v(B) . Bhat + s(B)

v collects the three constitutive terms of the derivative formula
(Taylor remainder of h over the plane, the Jacobian-contrast term over
the inclusion, and the pointwise contrast h1(B) - h0(B)); s collects the
corresponding three penalty-integrand terms, nonzero only when one of
the materials is a permanent magnet. Both need the corrector field K of
the nonlinear exterior transmission problem, solved here on a truncated
disk with homogeneous Dirichlet data.

Offline, (v, s) are tabulated on a rectangular B-grid; online they are
interpolated bilinearly (out-of-range B is clamped and counted).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels.numpy_backend import PARAM_WIDTH
from .errors import TabulationError
from .fem import FemSpace, NewtonConfig, build_constraints, newton_solve
from .geometry import MARKER_OUTER, Mesh
from .materials import MaterialLaw, eval_h, eval_h_jacobian
from .penalty import PenaltyConfig, phi_p, phi_p_prime

TABLE_HEADER = "tdtable v1"


@dataclass(frozen=True)
class ExteriorConfig:
    """Discretization of the truncated exterior problem."""

    r_trunc: float = 50.0
    n_theta: int = 64          # angular segments; also inclusion-boundary segments
    newton_tol: float = 1e-10
    max_iter: int = 60

    def validate(self):
        if self.r_trunc < 20.0:
            raise ValueError("r_trunc must be >= 20")
        if self.n_theta < 64:
            raise ValueError("inclusion boundary needs >= 64 segments")


@dataclass(frozen=True)
class ExteriorProblem:
    """Unit-disk inclusion of law1 inside law0 under background flux B."""

    law0: MaterialLaw
    law1: MaterialLaw
    B: tuple
    config: ExteriorConfig = ExteriorConfig()


def disk_mesh(cfg: ExteriorConfig) -> Mesh:
    """Truncated-plane mesh: fanned center, wrapped angular seam, rings graded
    geometrically outside the unit inclusion."""
    cfg.validate()
    nth = cfg.n_theta
    n_inner = max(6, nth // 6)
    radii_in = np.linspace(0.0, 1.0, n_inner + 1)[1:]
    growth = 1.0 + 2.0 * math.pi / nth
    n_out = int(math.ceil(math.log(cfg.r_trunc) / math.log(growth)))
    radii_out = cfg.r_trunc ** (np.arange(1, n_out + 1) / n_out)
    radii = np.concatenate([radii_in, radii_out])
    n_rings = len(radii)

    angles = np.linspace(0.0, 2.0 * math.pi, nth + 1)[:-1]
    verts = [np.zeros((1, 2))]
    for r in radii:
        verts.append(np.column_stack([r * np.cos(angles), r * np.sin(angles)]))
    verts = np.concatenate(verts)

    def node(i, j):
        return 1 + i * nth + (j % nth)

    tris = []
    for j in range(nth):
        tris.append((0, node(0, j), node(0, j + 1)))
    for i in range(n_rings - 1):
        for j in range(nth):
            n00, n01 = node(i, j), node(i, j + 1)
            n10, n11 = node(i + 1, j), node(i + 1, j + 1)
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
    tris = np.array(tris, dtype=np.int32)

    pts = verts[tris].mean(axis=1)
    inside = np.hypot(pts[:, 0], pts[:, 1]) < 1.0
    regions = np.where(inside, "inclusion", "exterior")

    edges = [(node(n_rings - 1, j), node(n_rings - 1, j + 1)) for j in range(nth)]
    return Mesh(
        vertices=verts,
        triangles=tris,
        region_id=regions,
        boundary_edges=np.array(edges, dtype=np.int32),
        boundary_markers=np.array([MARKER_OUTER] * nth),
    )


_SPACE_CACHE: dict = {}


def _exterior_space(cfg: ExteriorConfig):
    key = (cfg.r_trunc, cfg.n_theta)
    if key not in _SPACE_CACHE:
        mesh = disk_mesh(cfg)
        cons = build_constraints(mesh, dirichlet_markers=(MARKER_OUTER,))
        space = FemSpace(mesh, cons)
        inside = mesh.region_mask("inclusion")
        _SPACE_CACHE[key] = (space, inside)
    return _SPACE_CACHE[key]


def _pair_arrays(space, inside, law0, law1):
    code0, row0 = law0.code_params()
    code1, row1 = law1.code_params()
    n = space.mesh.n_triangles
    codes = np.where(inside, np.int8(code1), np.int8(code0)).astype(np.int8)
    params = np.where(inside[:, None], row1[None, :], row0[None, :])
    return codes, np.ascontiguousarray(params)


def solve_exterior(prob: ExteriorProblem):
    """Corrector potential K on the truncated mesh (zero outer trace).

    Returns (K nodal values, curl K per element, FemSpace, inclusion mask).
    """
    space, inside = _exterior_space(prob.config)
    codes, params = _pair_arrays(space, inside, prob.law0, prob.law1)
    bg = np.asarray(prob.B, dtype=np.float64)

    h0 = eval_h(prob.law0, bg)
    h1 = eval_h(prob.law1, bg)
    contrast = np.linalg.norm(h1 - h0)
    if contrast <= 1e-12 * (np.linalg.norm(h0) + np.linalg.norm(h1) + 1.0):
        # no load: K = 0 is exact, skip the noise-level Newton iteration
        zeros = np.zeros(space.mesh.n_vertices)
        return zeros, np.zeros((space.mesh.n_triangles, 2)), space, inside

    res0, _ = space.assemble(codes, params, np.zeros(space.mesh.n_vertices),
                             bg=bg, want_matrix=False)
    ref = float(np.max(np.abs(res0))) if res0.size else 0.0
    cfg = NewtonConfig(tol=prob.config.newton_tol, max_iter=prob.config.max_iter)
    sol = newton_solve(space, codes, params, bg=bg, cfg=cfg, ref_norm=ref,
                       tag="exterior")
    curl_k = sol.b - bg
    return sol.a, curl_k, space, inside


def _j_value(law: MaterialLaw, b, pcfg: PenaltyConfig):
    """Penalty integrand of one material: phi_p(b . e_M) for magnets, else 0."""
    b = np.asarray(b, dtype=np.float64)
    if law.kind != "magnet":
        return np.zeros(b.shape[:-1]) if b.ndim > 1 else 0.0
    return phi_p(b @ law.magnet.easy_axis, pcfg)


def _j_grad(law: MaterialLaw, b, pcfg: PenaltyConfig):
    """Gradient of the penalty integrand w.r.t. b (vector)."""
    b = np.asarray(b, dtype=np.float64)
    e = law.magnet.easy_axis if law.kind == "magnet" else None
    if e is None:
        return np.zeros_like(b)
    w = phi_p_prime(b @ e, pcfg)
    return np.asarray(w)[..., None] * e


@dataclass(frozen=True)
class TDSample:
    """Affine decomposition of the derivative at one background flux."""

    B: tuple
    v: tuple   # coefficient of the adjoint flux
    s: float   # adjoint-free part


def td_sample(B, law0: MaterialLaw, law1: MaterialLaw,
              pcfg: PenaltyConfig = PenaltyConfig(),
              ext: ExteriorConfig = ExteriorConfig()) -> TDSample:
    """Compute (v, s) at background flux B for the pair law0 -> law1."""
    B = np.asarray(B, dtype=np.float64)
    _, curl_k, space, inside = solve_exterior(ExteriorProblem(law0, law1, tuple(B), ext))
    areas = space.edata.areas
    codes, params = _pair_arrays(space, inside, law0, law1)

    from ._kernels import backend as _kb

    b_tot = B[None, :] + curl_k
    h_tot = _kb.eval_h(codes, params, b_tot)

    h0_B = eval_h(law0, B)
    h1_B = eval_h(law1, B)
    j0_B = eval_h_jacobian(law0, B)
    j1_B = eval_h_jacobian(law1, B)
    h_B = np.where(inside[:, None], h1_B[None, :], h0_B[None, :])
    jac_B = np.where(inside[:, None, None], j1_B[None], j0_B[None])

    # The pointwise contrast terms are integrals over the unit disk divided
    # by pi; use the discrete inclusion area so they stay consistent with
    # the polygonal quadrature of the other terms (the mismatch dominates
    # when the inclusion-field terms nearly cancel them).
    w_disk = float(np.sum(areas[inside])) / math.pi

    # terms linear in the adjoint flux
    remainder = h_tot - h_B - np.einsum("eij,ej->ei", jac_B, curl_k)
    term1 = np.sum(areas[:, None] * remainder, axis=0)
    term2 = (j1_B - j0_B) @ np.sum(areas[inside, None] * curl_k[inside], axis=0)
    v = (term1 + term2) / math.pi + w_disk * (h1_B - h0_B)

    # adjoint-free penalty terms
    s = 0.0
    if law0.kind == "magnet" or law1.kind == "magnet":
        jv_tot = np.where(inside, _j_value(law1, b_tot, pcfg), _j_value(law0, b_tot, pcfg))
        jv_B = np.where(inside, float(np.atleast_1d(_j_value(law1, B, pcfg))[0]),
                        float(np.atleast_1d(_j_value(law0, B, pcfg))[0]))
        jg_B = np.where(inside[:, None], _j_grad(law1, B, pcfg)[None, :],
                        _j_grad(law0, B, pcfg)[None, :])
        rem_j = jv_tot - jv_B - np.einsum("ei,ei->e", jg_B, curl_k)
        term4 = float(np.sum(areas * rem_j))
        dgrad = _j_grad(law1, B, pcfg) - _j_grad(law0, B, pcfg)
        term5 = float(dgrad @ np.sum(areas[inside, None] * curl_k[inside], axis=0))
        term6 = float(np.atleast_1d(_j_value(law1, B, pcfg))[0]
                      - np.atleast_1d(_j_value(law0, B, pcfg))[0])
        s = (term4 + term5) / math.pi + w_disk * term6

    return TDSample(B=tuple(B), v=tuple(v), s=float(s))


def evaluate_td(B, Bhat, law0: MaterialLaw, law1: MaterialLaw,
                pcfg: PenaltyConfig = PenaltyConfig(),
                ext: ExteriorConfig = ExteriorConfig()) -> float:
    """Direct (non-tabulated) derivative d = v(B) . Bhat + s(B)."""
    sample = td_sample(B, law0, law1, pcfg, ext)
    return float(np.dot(sample.v, np.asarray(Bhat, dtype=np.float64)) + sample.s)


@dataclass(frozen=True)
class GridSpec:
    b_min: float = -2.5
    b_max: float = 2.5
    n: int = 51

    def validate(self):
        if not self.b_min < self.b_max:
            raise TabulationError("grid must satisfy b_min < b_max")
        if self.n < 2:
            raise TabulationError("grid needs at least 2 nodes per axis")

    @property
    def axis(self):
        return np.linspace(self.b_min, self.b_max, self.n)


@dataclass
class TDTable:
    """Sampled affine decomposition over a square B-grid (row-major in Bx)."""

    pair: tuple                # (from_name, to_name)
    grid: GridSpec
    v: np.ndarray              # (n, n, 2), indexed [ix, iy]
    s: np.ndarray              # (n, n)
    meta: dict = field(default_factory=dict)

    def sample_at(self, ix, iy) -> TDSample:
        ax = self.grid.axis
        return TDSample(B=(ax[ix], ax[iy]), v=tuple(self.v[ix, iy]),
                        s=float(self.s[ix, iy]))


_WORKER_STATE: dict = {}


def _sample_worker(args):
    (bx, by), law0, law1, pcfg, ext = args
    sample = td_sample((bx, by), law0, law1, pcfg, ext)
    return sample.v, sample.s


def build_table(law0: MaterialLaw, law1: MaterialLaw, pair_names,
                grid: GridSpec = GridSpec(),
                pcfg: PenaltyConfig = PenaltyConfig(),
                ext: ExteriorConfig = ExteriorConfig(),
                threads: int = 1, meta=None) -> TDTable:
    """Sample (v, s) at every grid node; deterministic given inputs."""
    grid.validate()
    ax = grid.axis
    points = [(float(ax[i]), float(ax[j])) for i in range(grid.n) for j in range(grid.n)]
    v = np.empty((grid.n, grid.n, 2))
    s = np.empty((grid.n, grid.n))
    try:
        if threads > 1:
            jobs = [(pt, law0, law1, pcfg, ext) for pt in points]
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(_sample_worker, jobs, chunksize=16))
        else:
            results = [_sample_worker((pt, law0, law1, pcfg, ext)) for pt in points]
    except Exception as exc:
        raise TabulationError(f"table build failed for pair {pair_names}: {exc}") from exc
    for k, (vv, ss) in enumerate(results):
        i, j = divmod(k, grid.n)
        v[i, j] = vv
        s[i, j] = ss
    table_meta = dict(meta or {})
    table_meta.setdefault("penalty", (pcfg.B_star, pcfg.p))
    return TDTable(pair=tuple(pair_names), grid=grid, v=v, s=s, meta=table_meta)


def interpolate(table: TDTable, B, Bhat):
    """Bilinear interpolation of (v, s), then d = v . Bhat + s.

    B, Bhat: (,2) or (M,2). Returns (d, clamp_count); out-of-grid B is
    clamped to the boundary.
    """
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    Bhat = np.atleast_2d(np.asarray(Bhat, dtype=np.float64))
    g = table.grid
    step = (g.b_max - g.b_min) / (g.n - 1)
    clamped = (B[:, 0] < g.b_min) | (B[:, 0] > g.b_max) \
        | (B[:, 1] < g.b_min) | (B[:, 1] > g.b_max)
    x = np.clip(B[:, 0], g.b_min, g.b_max)
    y = np.clip(B[:, 1], g.b_min, g.b_max)
    ix = np.clip(((x - g.b_min) / step).astype(np.int64), 0, g.n - 2)
    iy = np.clip(((y - g.b_min) / step).astype(np.int64), 0, g.n - 2)
    tx = (x - (g.b_min + ix * step)) / step
    ty = (y - (g.b_min + iy * step)) / step

    def lerp(arr):
        a00 = arr[ix, iy]
        a10 = arr[ix + 1, iy]
        a01 = arr[ix, iy + 1]
        a11 = arr[ix + 1, iy + 1]
        wx, wy = tx.reshape(tx.shape + (1,) * (arr.ndim - 2)), \
            ty.reshape(ty.shape + (1,) * (arr.ndim - 2))
        return (a00 * (1 - wx) * (1 - wy) + a10 * wx * (1 - wy)
                + a01 * (1 - wx) * wy + a11 * wx * wy)

    v = lerp(table.v)
    s = lerp(table.s)
    d = np.einsum("mi,mi->m", v, np.broadcast_to(Bhat, v.shape)) + s
    return d, int(np.count_nonzero(clamped))


def interpolate_scalar(table: TDTable, B, Bhat) -> float:
    d, _ = interpolate(table, B, Bhat)
    return float(d[0])


def save_table(table: TDTable, path):
    """Versioned plain-text table file, full decimal precision."""
    g = table.grid
    lines = [TABLE_HEADER,
             f"pair={table.pair[0]}:{table.pair[1]}",
             f"grid={float(g.b_min)!r} {float(g.b_max)!r} {g.n}"]
    bs, p = table.meta.get("penalty", (None, None))
    lines.append(f"penalty={bs!r} {p}")
    lines.append(f"law={table.meta.get('law', 'linear')}")
    ax = g.axis
    for i in range(g.n):
        for j in range(g.n):
            lines.append(f"{float(ax[i])!r} {float(ax[j])!r} "
                         f"{float(table.v[i, j, 0])!r} "
                         f"{float(table.v[i, j, 1])!r} {float(table.s[i, j])!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_table(path) -> TDTable:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != TABLE_HEADER:
        raise TabulationError(f"{path}: bad header, expected {TABLE_HEADER!r}")

    meta = {}
    idx = 1
    for key in ("pair", "grid", "penalty", "law"):
        if idx >= len(lines) or not lines[idx].startswith(key + "="):
            raise TabulationError(f"{path}: line {idx + 1}: missing '{key}=' metadata")
        meta[key] = lines[idx].split("=", 1)[1]
        idx += 1

    pair = tuple(meta["pair"].split(":"))
    if len(pair) != 2:
        raise TabulationError(f"{path}: bad pair metadata {meta['pair']!r}")
    try:
        b_min_s, b_max_s, n_s = meta["grid"].split()
        grid = GridSpec(float(b_min_s), float(b_max_s), int(n_s))
        bs_s, p_s = meta["penalty"].split()
        penalty = (float(bs_s), int(p_s))
    except ValueError as exc:
        raise TabulationError(f"{path}: bad grid/penalty metadata: {exc}") from exc
    grid.validate()

    n = grid.n
    expected = n * n
    if len(lines) - idx < expected:
        raise TabulationError(
            f"{path}: truncated file: {len(lines) - idx} sample lines, expected {expected}")
    v = np.empty((n, n, 2))
    s = np.empty((n, n))
    for k in range(expected):
        line_no = idx + k + 1
        parts = lines[idx + k].split()
        if len(parts) != 5:
            raise TabulationError(f"{path}: line {line_no}: expected 5 fields, "
                                  f"got {lines[idx + k]!r}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise TabulationError(f"{path}: line {line_no}: bad number in "
                                  f"{lines[idx + k]!r}") from None
        i, j = divmod(k, n)
        v[i, j] = vals[2:4]
        s[i, j] = vals[4]
    return TDTable(pair=pair, grid=grid, v=v, s=s,
                   meta={"penalty": penalty, "law": meta["law"]})


def check_table_compatible(table: TDTable, pcfg: PenaltyConfig, law_variant: str):
    """Refuse a loaded table whose metadata mismatches the run configuration."""
    bs, p = table.meta.get("penalty", (None, None))
    if bs is None or abs(bs - pcfg.B_star) > 1e-12 or p != pcfg.p:
        raise TabulationError(
            f"table {table.pair} penalty metadata ({bs}, {p}) does not match "
            f"run config ({pcfg.B_star}, {pcfg.p})")
    law = table.meta.get("law")
    if law != law_variant:
        raise TabulationError(
            f"table {table.pair} law={law!r} does not match run config {law_variant!r}")
