"""Legacy ASCII VTK unstructured-grid export for meshes, fields, and
designs; one named array per quantity, readable by standard viewers."""

from __future__ import annotations

import numpy as np

from .geometry import Mesh


def export_vtk(mesh: Mesh, path, cell_data=None, point_data=None,
               title="demagopt export"):
    """Write the mesh with optional named per-cell/per-point arrays.

    Scalars are written as SCALARS, (n,2) or (n,3) arrays as VECTORS
    (2D vectors get z=0). Integer scalars stay integers.
    """
    cell_data = cell_data or {}
    point_data = point_data or {}
    for name, arr in cell_data.items():
        if len(arr) != mesh.n_triangles:
            raise ValueError(f"cell array {name!r} has length {len(arr)}, "
                             f"expected {mesh.n_triangles}")
    for name, arr in point_data.items():
        if len(arr) != mesh.n_vertices:
            raise ValueError(f"point array {name!r} has length {len(arr)}, "
                             f"expected {mesh.n_vertices}")

    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r} 0.0")
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    for i, j, k in mesh.triangles:
        lines.append(f"3 {i} {j} {k}")
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines.extend(["5"] * mesh.n_triangles)

    def emit(section, data):
        if not data:
            return
        lines.append(section)
        for name, arr in data.items():
            arr = np.asarray(arr)
            if arr.ndim == 1:
                if np.issubdtype(arr.dtype, np.integer):
                    lines.append(f"SCALARS {name} int 1")
                    lines.append("LOOKUP_TABLE default")
                    lines.extend(str(int(v)) for v in arr)
                else:
                    lines.append(f"SCALARS {name} double 1")
                    lines.append("LOOKUP_TABLE default")
                    lines.extend(repr(float(v)) for v in arr)
            elif arr.ndim == 2 and arr.shape[1] in (2, 3):
                lines.append(f"VECTORS {name} double")
                for row in arr:
                    z = repr(float(row[2])) if arr.shape[1] == 3 else "0.0"
                    lines.append(f"{float(row[0])!r} {float(row[1])!r} {z}")
            else:
                raise ValueError(f"array {name!r} has unsupported shape {arr.shape}")

    emit(f"CELL_DATA {mesh.n_triangles}", cell_data)
    emit(f"POINT_DATA {mesh.n_vertices}", point_data)

    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
