"""Triangular meshes: data structures, the parametric one-pole sector
generator, and the versioned plain-text mesh format.

Meshes are conforming P1 triangulations with string region labels per
triangle, marked boundary edges, and explicit periodic node pairing
between the two radial cut edges of a sector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, MeshFormatError, MeshValidationError

MACHINE_REGIONS_FIXED = ("airgap", "stator_iron", "shaft")
DESIGN_REGION = "rotor_design"

MARKER_OUTER = "outer_dirichlet"
MARKER_INNER = "inner_dirichlet"
MARKER_CUT_A = "cut_a"
MARKER_CUT_B = "cut_b"

MESH_HEADER = "demagmesh v1"


@dataclass(frozen=True)
class Mesh:
    """Immutable conforming triangle mesh.

    vertices: (N,2) float64, meters. triangles: (E,3) int32, CCW.
    region_id: (E,) unicode labels. boundary_edges: (B,2) int32 with
    boundary_markers: (B,) unicode. periodic_pairs: (P,2) int32 rows
    (node on cut A, matching node on cut B).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    region_id: np.ndarray
    boundary_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int32))
    boundary_markers: np.ndarray = field(default_factory=lambda: np.zeros(0, "U16"))
    periodic_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int32))

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, np.float64))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, np.int32))
        object.__setattr__(self, "region_id", np.asarray(self.region_id, dtype="U24"))
        object.__setattr__(self, "boundary_edges", np.ascontiguousarray(self.boundary_edges, np.int32).reshape(-1, 2))
        object.__setattr__(self, "boundary_markers", np.asarray(self.boundary_markers, dtype="U16"))
        object.__setattr__(self, "periodic_pairs", np.ascontiguousarray(self.periodic_pairs, np.int32).reshape(-1, 2))
        for arr in (self.vertices, self.triangles, self.region_id,
                    self.boundary_edges, self.boundary_markers, self.periodic_pairs):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def region_mask(self, label: str) -> np.ndarray:
        return self.region_id == label

    def nodes_with_marker(self, marker: str) -> np.ndarray:
        sel = self.boundary_markers == marker
        return np.unique(self.boundary_edges[sel].ravel())


@dataclass(frozen=True)
class SectorGeometry:
    """Parametric one-pole machine sector.

    Radii in meters, strictly increasing: shaft bore, rotor surface,
    then stator outer radius; the airgap sits between rotor surface and
    stator bore. Slots are radial trapezoids in the stator, evenly spaced.
    """

    r_shaft: float = 0.030
    r_rotor: float = 0.078
    airgap: float = 0.001
    r_stator: float = 0.130
    sector_angle: float = math.pi / 4.0
    slots: int = 6
    slot_width_frac: float = 0.5    # angular fill of one slot pitch
    slot_depth_frac: float = 0.4    # radial fill of the stator annulus
    h: float = 0.0012               # target mesh size, meters

    def validate(self):
        r_si = self.r_rotor + self.airgap
        if not (0.0 < self.r_shaft < self.r_rotor < r_si < self.r_stator):
            raise GeometryError(
                "radii must satisfy 0 < r_shaft < r_rotor < r_rotor+airgap < r_stator; "
                f"got r_shaft={self.r_shaft}, r_rotor={self.r_rotor}, "
                f"airgap={self.airgap}, r_stator={self.r_stator}")
        if not 0.0 < self.sector_angle <= 2.0 * math.pi:
            raise GeometryError(f"sector angle must be in (0, 2*pi], got {self.sector_angle}")
        if self.slots < 1:
            raise GeometryError(f"slot count must be >= 1, got {self.slots}")
        if not 0.0 < self.slot_width_frac < 1.0:
            raise GeometryError("slot_width_frac must be in (0,1)")
        if not 0.0 < self.slot_depth_frac < 1.0:
            raise GeometryError("slot_depth_frac must be in (0,1)")
        if self.h <= 0:
            raise GeometryError("target mesh size h must be positive")


def _subdivide(lo, hi, step):
    """Endpoints of ceil((hi-lo)/step) uniform cells on [lo, hi]."""
    n = max(1, int(math.ceil((hi - lo) / step - 1e-9)))
    return np.linspace(lo, hi, n + 1)


def _merge_grids(segments):
    """Concatenate per-segment grids sharing endpoints into one grid."""
    out = [segments[0]]
    for seg in segments[1:]:
        out.append(seg[1:])
    return np.concatenate(out)


def polar_grid_mesh(radii, angles, region_of_cell, closed=False,
                    inner_marker=MARKER_INNER, outer_marker=MARKER_OUTER):
    """Tensor-product polar mesh; each (r,theta) cell split into 2 triangles.

    region_of_cell(i, j, r_mid, theta_mid) -> label. With closed=True the
    angular seam is identified by wrapping indices (full annulus); otherwise
    the first/last angular lines are marked cut_a/cut_b and paired.
    """
    radii = np.asarray(radii, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    nr = len(radii) - 1
    nth = len(angles) - 1
    n_ang_nodes = nth if closed else nth + 1

    def node(i, j):
        return i * n_ang_nodes + (j % nth if closed else j)

    rr, tt = np.meshgrid(radii, angles[:n_ang_nodes], indexing="ij")
    verts = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])

    tris = []
    regions = []
    for i in range(nr):
        r_mid = 0.5 * (radii[i] + radii[i + 1])
        for j in range(nth):
            t_mid = 0.5 * (angles[j] + angles[j + 1])
            n00, n01 = node(i, j), node(i, j + 1)
            n10, n11 = node(i + 1, j), node(i + 1, j + 1)
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
            label = region_of_cell(i, j, r_mid, t_mid)
            regions.append(label)
            regions.append(label)

    edges = []
    markers = []
    for j in range(nth):
        edges.append((node(0, j), node(0, j + 1)))
        markers.append(inner_marker)
        edges.append((node(nr, j), node(nr, j + 1)))
        markers.append(outer_marker)
    pairs = []
    if not closed:
        for i in range(nr):
            edges.append((node(i, 0), node(i + 1, 0)))
            markers.append(MARKER_CUT_A)
            edges.append((node(i, nth), node(i + 1, nth)))
            markers.append(MARKER_CUT_B)
        # pair interior cut nodes; the end nodes sit on Dirichlet arcs
        for i in range(1, nr):
            pairs.append((node(i, 0), node(i, nth)))

    return Mesh(
        vertices=verts,
        triangles=np.array(tris, dtype=np.int32),
        region_id=np.array(regions),
        boundary_edges=np.array(edges, dtype=np.int32).reshape(-1, 2),
        boundary_markers=np.array(markers),
        periodic_pairs=np.array(pairs, dtype=np.int32).reshape(-1, 2),
    )


def generate_sector_mesh(geom: SectorGeometry) -> Mesh:
    """Mesh of one machine sector with labeled regions.

    Radial bands: rotor_design, airgap (split at thirds so a torque
    annulus can align with element layers), slot band, stator back iron.
    The angular grid contains every slot edge, so slot shapes are exact
    and independent of the target mesh size.
    """
    geom.validate()
    r_si = geom.r_rotor + geom.airgap
    r_slot_out = r_si + geom.slot_depth_frac * (geom.r_stator - r_si)
    g3 = geom.airgap / 3.0

    radial_breaks = [geom.r_shaft, geom.r_rotor, geom.r_rotor + g3,
                     geom.r_rotor + 2 * g3, r_si, r_slot_out, geom.r_stator]
    r_segments = [_subdivide(a, b, geom.h) for a, b in zip(radial_breaks[:-1], radial_breaks[1:])]
    radii = _merge_grids(r_segments)
    band_of_row = np.concatenate([
        np.full(len(seg) - 1, k) for k, seg in enumerate(r_segments)
    ])
    # bands: 0 rotor, 1..3 airgap, 4 slot band, 5 back iron
    band_region = {0: DESIGN_REGION, 1: "airgap", 2: "airgap", 3: "airgap",
                   4: None, 5: "stator_iron"}

    # angular grid: per slot pitch, tooth half / slot / tooth half
    pitch = geom.sector_angle / geom.slots
    w_slot = geom.slot_width_frac * pitch
    r_size_ref = 0.5 * (geom.r_shaft + geom.r_stator)  # arc-length sizing radius
    ang_step = geom.h / r_size_ref
    segments = []
    slot_windows = []
    for k in range(geom.slots):
        t0 = k * pitch
        ta = t0 + 0.5 * (pitch - w_slot)
        tb = ta + w_slot
        slot_windows.append((ta, tb))
        segments.append(_subdivide(t0, ta, ang_step))
        segments.append(_subdivide(ta, tb, ang_step))
        segments.append(_subdivide(tb, t0 + pitch, ang_step))
    angles = _merge_grids(segments)

    def region_of_cell(i, j, r_mid, t_mid):
        band = band_of_row[i]
        label = band_region[band]
        if label is not None:
            return label
        for k, (ta, tb) in enumerate(slot_windows):
            if ta < t_mid < tb:
                return f"slot_{k + 1}"
        return "stator_iron"

    mesh = polar_grid_mesh(radii, angles, region_of_cell, closed=False)
    validate_mesh(mesh)
    return mesh


def element_geometry(mesh: Mesh, t: int):
    """(area, gradients (3,2)) of the three P1 basis functions on triangle t."""
    p = mesh.vertices[mesh.triangles[t]]
    area, grads = _triangle_geometry(p[None])
    return float(area[0]), grads[0]


def _triangle_geometry(p):
    """Vectorized P1 geometry. p: (E,3,2) -> (areas (E,), grads (E,3,2))."""
    x, y = p[..., 0], p[..., 1]
    det = ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
           - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    areas = 0.5 * det
    grads = np.empty_like(p)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / det
        grads[:, i, 1] = (x[:, k] - x[:, j]) / det
    return areas, grads


def validate_mesh(mesh: Mesh):
    """Structural validation: positive areas, conformity, periodic radii."""
    p = mesh.vertices[mesh.triangles]
    areas, _ = _triangle_geometry(p)
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise MeshValidationError(f"triangle {bad} has non-positive area {areas[bad]:g}")

    # conformity: every edge is shared by exactly 2 triangles or is boundary
    e = np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]],
                        mesh.triangles[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshValidationError("an edge is shared by more than 2 triangles")
    boundary = uniq[counts == 1]
    marked = np.sort(np.asarray(mesh.boundary_edges, dtype=np.int64), axis=1)
    b_set = {tuple(r) for r in boundary.tolist()}
    m_set = {tuple(r) for r in marked.tolist()}
    if not b_set.issubset(m_set) or not m_set.issubset(b_set):
        raise MeshValidationError("marked boundary edges do not match the mesh boundary")

    if mesh.periodic_pairs.size:
        pa = mesh.vertices[mesh.periodic_pairs[:, 0]]
        pb = mesh.vertices[mesh.periodic_pairs[:, 1]]
        ra = np.hypot(pa[:, 0], pa[:, 1])
        rb = np.hypot(pb[:, 0], pb[:, 1])
        rel = np.abs(ra - rb) / np.maximum(ra, 1e-300)
        if np.any(rel > 1e-9):
            raise MeshValidationError("periodic pair radii mismatch exceeds 1e-9")
        a_nodes = mesh.periodic_pairs[:, 0]
        b_nodes = mesh.periodic_pairs[:, 1]
        if (len(np.unique(a_nodes)) != len(a_nodes)
                or len(np.unique(b_nodes)) != len(b_nodes)):
            raise MeshValidationError("periodic pairing is not a bijection")


def rectangle_mesh(nx, ny, width=1.0, height=1.0, region=DESIGN_REGION) -> Mesh:
    """Structured unit-style rectangle mesh, all boundary Dirichlet-marked.

    Used by manufactured-solution and fixture tests.
    """
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([xx.ravel(), yy.ravel()])

    def node(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            n00, n01 = node(i, j), node(i, j + 1)
            n10, n11 = node(i + 1, j), node(i + 1, j + 1)
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
    edges = []
    for i in range(nx):
        edges.append((node(i, 0), node(i + 1, 0)))
        edges.append((node(i, ny), node(i + 1, ny)))
    for j in range(ny):
        edges.append((node(0, j), node(0, j + 1)))
        edges.append((node(nx, j), node(nx, j + 1)))
    return Mesh(
        vertices=verts,
        triangles=np.array(tris, dtype=np.int32),
        region_id=np.array([region] * len(tris)),
        boundary_edges=np.array(edges, dtype=np.int32),
        boundary_markers=np.array([MARKER_OUTER] * len(edges)),
    )


def write_mesh(mesh: Mesh, path):
    """Write the versioned plain-text format; floats at full precision."""
    lines = [MESH_HEADER]
    lines.append(f"vertices {mesh.n_vertices}")
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    lines.append(f"triangles {mesh.n_triangles}")
    for (i, j, k), reg in zip(mesh.triangles, mesh.region_id):
        lines.append(f"{i} {j} {k} {reg}")
    lines.append(f"boundary {len(mesh.boundary_edges)}")
    for (i, j), mark in zip(mesh.boundary_edges, mesh.boundary_markers):
        lines.append(f"{i} {j} {mark}")
    lines.append(f"periodic {len(mesh.periodic_pairs)}")
    for ia, ib in mesh.periodic_pairs:
        lines.append(f"{ia} {ib}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        with open(path, encoding="utf-8") as f:
            self.lines = f.read().splitlines()
        self.pos = 0

    def next(self):
        if self.pos >= len(self.lines):
            raise MeshFormatError("unexpected end of file", line=len(self.lines))
        self.pos += 1
        return self.lines[self.pos - 1], self.pos


def _parse_section(reader, name):
    line, no = reader.next()
    parts = line.split()
    if len(parts) != 2 or parts[0] != name:
        raise MeshFormatError(f"expected section header '{name} N', got {line!r}", line=no)
    try:
        return int(parts[1])
    except ValueError:
        raise MeshFormatError(f"bad count in section header {line!r}", line=no) from None


def read_mesh(path) -> Mesh:
    """Read and validate a mesh file; raises MeshFormatError with the
    offending line number on malformed input."""
    reader = _LineReader(path)
    line, no = reader.next()
    if line.strip() != MESH_HEADER:
        raise MeshFormatError(f"bad header {line!r}, expected {MESH_HEADER!r}", line=no)

    nv = _parse_section(reader, "vertices")
    verts = np.empty((nv, 2))
    for i in range(nv):
        line, no = reader.next()
        parts = line.split()
        if len(parts) != 2:
            raise MeshFormatError(f"vertex needs 2 coordinates, got {line!r}", line=no)
        try:
            verts[i] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError(f"bad coordinate in {line!r}", line=no) from None

    nt = _parse_section(reader, "triangles")
    tris = np.empty((nt, 3), dtype=np.int32)
    regions = []
    for i in range(nt):
        line, no = reader.next()
        parts = line.split()
        if len(parts) != 4:
            raise MeshFormatError(f"triangle needs 'i j k region', got {line!r}", line=no)
        try:
            idx = [int(p) for p in parts[:3]]
        except ValueError:
            raise MeshFormatError(f"bad vertex index in {line!r}", line=no) from None
        if any(k < 0 or k >= nv for k in idx):
            raise MeshFormatError(f"vertex index out of range in {line!r}", line=no)
        tris[i] = idx
        regions.append(parts[3])

    nb = _parse_section(reader, "boundary")
    edges = np.empty((nb, 2), dtype=np.int32)
    markers = []
    for i in range(nb):
        line, no = reader.next()
        parts = line.split()
        if len(parts) != 3:
            raise MeshFormatError(f"boundary edge needs 'i j marker', got {line!r}", line=no)
        try:
            idx = [int(p) for p in parts[:2]]
        except ValueError:
            raise MeshFormatError(f"bad node index in {line!r}", line=no) from None
        if any(k < 0 or k >= nv for k in idx):
            raise MeshFormatError(f"node index out of range in {line!r}", line=no)
        edges[i] = idx
        markers.append(parts[2])

    np_ = _parse_section(reader, "periodic")
    pairs = np.empty((np_, 2), dtype=np.int32)
    for i in range(np_):
        line, no = reader.next()
        parts = line.split()
        if len(parts) != 2:
            raise MeshFormatError(f"periodic pair needs 'ia ib', got {line!r}", line=no)
        try:
            idx = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError(f"bad node index in {line!r}", line=no) from None
        if any(k < 0 or k >= nv for k in idx):
            raise MeshFormatError(f"node index out of range in {line!r}", line=no)
        pairs[i] = idx

    mesh = Mesh(vertices=verts, triangles=tris, region_id=np.array(regions),
                boundary_edges=edges, boundary_markers=np.array(markers),
                periodic_pairs=pairs)
    validate_mesh(mesh)
    return mesh
