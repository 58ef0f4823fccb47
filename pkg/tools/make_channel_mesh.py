"""Generate the bundled channel-with-hole mesh.

One quadrant of (-3, 3) x (-2, 2) minus the disc of radius 1/2 is
triangulated (graded rings around the hole, hexagonal lattice elsewhere),
then mirrored across both axes so the mesh is exactly symmetric.

    python tools/make_channel_mesh.py src/conformal_deform/data/channel.json
"""

import argparse

import numpy as np
from scipy.spatial import Delaunay

from conformal_deform.mesh import (
    GAMMA,
    GAMMA_INF,
    TriMesh,
    boundary_edges_of,
    check_topology,
    element_quality,
    normalize_orientation,
)
from conformal_deform.mesh_io import save_mesh

LX, LY, R = 3.0, 2.0, 0.5


def quadrant_points(h0, h_far, growth):
    pts = []
    r, h = R, h0
    while True:
        n = max(2, int(np.ceil(0.5 * np.pi * r / h)))
        th = np.linspace(0, 0.5 * np.pi, n + 1)
        pts.extend(np.column_stack([r * np.cos(th), r * np.sin(th)]))
        r_next = r + h * np.sqrt(3) / 2
        h = min(h_far, h * growth)
        if h >= h_far or r_next > 1.4:
            r_last = r
            break
        r = r_next
    gap = r_last + 0.8 * h_far
    dy = h_far * np.sqrt(3) / 2
    for k, y in enumerate(np.arange(0.0, LY + 1e-9, dy)):
        off = 0.5 * h_far * (k % 2)
        for x in np.arange(off, LX + 1e-9, h_far):
            if np.hypot(x, y) < gap:
                continue
            if x < 0.45 * h_far and y > 0:
                continue
            if LX - x < 0.45 * h_far or LY - y < 0.45 * h_far:
                continue
            pts.append((x, y))
    # box edges and the y axis beyond the rings
    nx = int(round(LX / h_far))
    ny = int(round(LY / h_far))
    pts.extend((LX, y) for y in np.linspace(0, LY, ny + 1))
    pts.extend((x, LY) for x in np.linspace(0, LX, nx + 1)[:-1])
    ys = np.linspace(0, LY, ny + 1)
    pts.extend((0.0, y) for y in ys[ys > gap - 0.2 * h_far][:-1])
    pts = np.array(pts)
    pts = np.round(pts, 12)
    return np.unique(pts, axis=0)


def quadrant_mesh(h0, h_far, growth):
    pts = quadrant_points(h0, h_far, growth)
    tri = Delaunay(pts).simplices
    cent = pts[tri].mean(axis=1)
    tri = tri[np.hypot(cent[:, 0], cent[:, 1]) > R]
    return pts, normalize_orientation(pts, tri)


def mirror(pts, tri):
    allp, allt = [pts], [tri]
    for sx, sy in ((-1, 1), (1, -1), (-1, -1)):
        allp.append(pts * [sx, sy])
        allt.append(tri + sum(len(p) for p in allp[:-1]))
    P = np.concatenate(allp)
    T = np.concatenate(allt)
    key = np.round(P, 10)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    return uniq, normalize_orientation(uniq, inv[T])


def build(h0=0.05, h_far=0.16, growth=1.12) -> TriMesh:
    pts, tri = quadrant_mesh(h0, h_far, growth)
    nodes, tris = mirror(pts, tri)
    edges = boundary_edges_of(tris)
    mid = nodes[edges].mean(axis=1)
    on_hole = np.hypot(mid[:, 0], mid[:, 1]) < R + 1e-6
    tags = np.where(on_hole, GAMMA, GAMMA_INF)
    mesh = TriMesh(nodes, tris, edges, tags)
    check_topology(mesh)
    return mesh


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("output")
    ap.add_argument("--h0", type=float, default=0.05)
    ap.add_argument("--h-far", type=float, default=0.16)
    ap.add_argument("--growth", type=float, default=1.12)
    args = ap.parse_args()
    mesh = build(args.h0, args.h_far, args.growth)
    q = element_quality(mesh)
    print(f"{mesh.n_nodes} nodes, {mesh.n_triangles} triangles, eta max {q.max():.3f}, "
          f"fraction eta>2 {np.mean(q > 2):.4f}")
    save_mesh(mesh, args.output)


if __name__ == "__main__":
    main()
