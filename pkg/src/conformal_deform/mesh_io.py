"""Mesh readers and writers: native JSON, Gmsh 2.2 ASCII, legacy VTK."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .mesh import NONE, MeshError, TriMesh, signed_areas

NATIVE_JSON = "NATIVE_JSON"
GMSH22_ASCII = "GMSH22_ASCII"


class MeshFormatError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _check_ccw(nodes, triangles):
    bad = np.flatnonzero(signed_areas(nodes, triangles) <= 0)
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} is clockwise or degenerate")


def guess_format(path) -> str:
    return GMSH22_ASCII if str(path).endswith(".msh") else NATIVE_JSON


def load_mesh(path, format: str | None = None) -> TriMesh:
    fmt = format or guess_format(path)
    if fmt == NATIVE_JSON:
        return _load_json(path)
    if fmt == GMSH22_ASCII:
        return _load_gmsh(path)
    raise ValueError(f"unknown mesh format {fmt!r}")


def save_mesh(mesh: TriMesh, path, format: str | None = None) -> None:
    fmt = format or guess_format(path)
    if fmt == NATIVE_JSON:
        doc = {
            "nodes": mesh.nodes.tolist(),
            "triangles": mesh.triangles.tolist(),
            "boundary_edges": [
                [int(i), int(j), str(t)] for (i, j), t in zip(mesh.boundary_edges, mesh.edge_tags)
            ],
        }
        Path(path).write_text(json.dumps(doc))
    elif fmt == GMSH22_ASCII:
        _save_gmsh(mesh, path)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")


def load_bundled(name: str) -> TriMesh:
    ref = resources.files("conformal_deform") / "data" / f"{name}.json"
    with resources.as_file(ref) as p:
        return load_mesh(p, NATIVE_JSON)


def _load_json(path) -> TriMesh:
    # json errors carry a line number; structural errors are reported by key
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshFormatError(exc.msg, exc.lineno) from exc
    try:
        nodes = np.array(doc["nodes"], dtype=float)
        tris = np.array(doc["triangles"], dtype=np.int64)
        edges = doc.get("boundary_edges", [])
    except (KeyError, ValueError, TypeError) as exc:
        raise MeshFormatError(f"malformed mesh document: {exc}") from exc
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshFormatError("nodes must be a list of [x, y] pairs")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise MeshFormatError("triangles must be a list of index triples")
    bad = np.flatnonzero((tris < 0).any(axis=1) | (tris >= len(nodes)).any(axis=1))
    if len(bad):
        raise MeshFormatError(f"triangle {int(bad[0])} references a missing node")
    _check_ccw(nodes, tris)
    pairs = np.array([[e[0], e[1]] for e in edges], dtype=np.int64).reshape(-1, 2)
    tags = [str(e[2]) if len(e) > 2 else NONE for e in edges]
    return TriMesh(nodes, tris, pairs, tags)


def _load_gmsh(path) -> TriMesh:
    lines = Path(path).read_text().splitlines()
    names: dict[int, str] = {}
    node_ids: dict[int, int] = {}
    coords: list[tuple[float, float]] = []
    tris: list[tuple[int, int, int]] = []
    tri_lines: list[int] = []
    edges: list[tuple[int, int]] = []
    tags: list[str] = []
    raw_tris: list[tuple[int, tuple[int, int, int]]] = []
    raw_edges: list[tuple[int, tuple[int, int], int]] = []

    i = 0
    n = len(lines)

    def section_count(idx):
        try:
            return int(lines[idx].split()[0])
        except (IndexError, ValueError):
            raise MeshFormatError("expected an entry count", idx + 1) from None

    while i < n:
        head = lines[i].strip()
        if head == "$MeshFormat":
            parts = lines[i + 1].split()
            if not parts or not parts[0].startswith("2."):
                raise MeshFormatError("only MSH 2.x ASCII is supported", i + 2)
            if len(parts) > 1 and parts[1] != "0":
                raise MeshFormatError("binary MSH files are not supported", i + 2)
            i += 3
        elif head == "$PhysicalNames":
            count = section_count(i + 1)
            for k in range(count):
                ln = i + 2 + k
                parts = lines[ln].split(maxsplit=2)
                try:
                    names[int(parts[1])] = parts[2].strip().strip('"')
                except (IndexError, ValueError):
                    raise MeshFormatError("malformed physical name", ln + 1) from None
            i += count + 3
        elif head == "$Nodes":
            count = section_count(i + 1)
            for k in range(count):
                ln = i + 2 + k
                parts = lines[ln].split()
                try:
                    node_ids[int(parts[0])] = len(coords)
                    coords.append((float(parts[1]), float(parts[2])))
                except (IndexError, ValueError):
                    raise MeshFormatError("malformed node", ln + 1) from None
            i += count + 3
        elif head == "$Elements":
            count = section_count(i + 1)
            for k in range(count):
                ln = i + 2 + k
                try:
                    parts = [int(x) for x in lines[ln].split()]
                    etype, ntags = parts[1], parts[2]
                    phys = parts[3] if ntags > 0 else 0
                    conn = parts[3 + ntags :]
                except (IndexError, ValueError):
                    raise MeshFormatError("malformed element", ln + 1) from None
                if etype == 2:
                    if len(conn) != 3:
                        raise MeshFormatError("triangle needs three nodes", ln + 1)
                    raw_tris.append((ln + 1, tuple(conn)))
                elif etype == 1:
                    if len(conn) != 2:
                        raise MeshFormatError("line needs two nodes", ln + 1)
                    raw_edges.append((ln + 1, tuple(conn), phys))
            i += count + 3
        else:
            i += 1

    def lookup(nid, ln):
        try:
            return node_ids[nid]
        except KeyError:
            raise MeshFormatError(f"unknown node id {nid}", ln) from None

    for ln, conn in raw_tris:
        tris.append(tuple(lookup(c, ln) for c in conn))
        tri_lines.append(ln)
    for ln, conn, phys in raw_edges:
        edges.append(tuple(lookup(c, ln) for c in conn))
        tags.append(names.get(phys, str(phys) if phys else NONE))

    nodes = np.array(coords, dtype=float).reshape(-1, 2)
    tri_arr = np.array(tris, dtype=np.int64).reshape(-1, 3)
    bad = np.flatnonzero(signed_areas(nodes, tri_arr) <= 0)
    if len(bad):
        raise MeshFormatError(
            f"triangle {int(bad[0])} is clockwise or degenerate", tri_lines[int(bad[0])]
        )
    return TriMesh(nodes, tri_arr, np.array(edges, dtype=np.int64).reshape(-1, 2), tags)


def _save_gmsh(mesh: TriMesh, path) -> None:
    tag_names = sorted(set(mesh.edge_tags))
    phys = {t: k + 1 for k, t in enumerate(tag_names)}
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames", str(len(tag_names))]
    out += [f'1 {phys[t]} "{t}"' for t in tag_names]
    out += ["$EndPhysicalNames", "$Nodes", str(mesh.n_nodes)]
    out += [f"{k + 1} {x!r} {y!r} 0" for k, (x, y) in enumerate(mesh.nodes.tolist())]
    out += ["$EndNodes", "$Elements", str(len(mesh.boundary_edges) + mesh.n_triangles)]
    eid = 1
    for (a, b), t in zip(mesh.boundary_edges.tolist(), mesh.edge_tags):
        out.append(f"{eid} 1 2 {phys[t]} {phys[t]} {a + 1} {b + 1}")
        eid += 1
    for a, b, c in mesh.triangles.tolist():
        out.append(f"{eid} 2 2 0 1 {a + 1} {b + 1} {c + 1}")
        eid += 1
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")


def export_vtk(mesh: TriMesh, path, cell_data: dict[str, np.ndarray] | None = None,
               point_data: dict[str, np.ndarray] | None = None) -> None:
    """Write a legacy ASCII VTK unstructured grid."""
    out = [
        "# vtk DataFile Version 3.0",
        "conformal_deform mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
    ]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.nodes.tolist()]
    out.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    out.append(f"CELL_TYPES {mesh.n_triangles}")
    out += ["5"] * mesh.n_triangles
    if cell_data:
        out.append(f"CELL_DATA {mesh.n_triangles}")
        for name, values in cell_data.items():
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(float(v)) for v in np.asarray(values).ravel()]
    if point_data:
        out.append(f"POINT_DATA {mesh.n_nodes}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 2:
                out.append(f"VECTORS {name} double")
                out += [f"{u!r} {v!r} 0.0" for u, v in values.tolist()]
            else:
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += [repr(float(v)) for v in values]
    Path(path).write_text("\n".join(out) + "\n")
