"""Synthetic test surfaces: spheres, flat sheets and an atrium-like shell."""
from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriMesh


def icosphere(subdivisions: int = 4, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron; ``10 * 4**s + 2`` vertices."""
    t = (1 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(v) * radius, np.array(f))


def rectangle(lx: float = 1.0, ly: float = 1.0, nx: int = 41, ny: int = 41) -> TriMesh:
    """Flat ``lx`` by ``ly`` sheet in the z=0 plane, ``nx`` by ``ny`` grid with alternating diagonals."""
    x, y = np.meshgrid(np.linspace(0, lx, nx), np.linspace(0, ly, ny), indexing="ij")
    verts = np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])
    idx = np.arange(nx * ny).reshape(nx, ny)
    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return TriMesh(verts, np.array(tris))


def fibonacci_sphere(n: int) -> TriMesh:
    """Near-uniform unit-sphere triangulation with exactly ``n`` vertices."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * k
    pts = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    hull = ConvexHull(pts)
    tris = hull.simplices.copy()
    # orient outward
    c = pts[tris].mean(axis=1)
    nrm = np.cross(pts[tris[:, 1]] - pts[tris[:, 0]], pts[tris[:, 2]] - pts[tris[:, 0]])
    flip = np.einsum("ij,ij->i", nrm, c) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return TriMesh(pts, tris)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# Opening directions (unit sphere frame) and angular radii (rad) of the
# atrium-like shell: four pulmonary veins and the mitral annulus.
ATRIUM_OPENINGS = (
    (_unit([0.55, 0.55, 0.63]), 0.24),
    (_unit([0.55, -0.55, 0.63]), 0.24),
    (_unit([-0.45, 0.60, 0.66]), 0.22),
    (_unit([-0.45, -0.60, 0.66]), 0.22),
    (_unit([0.0, 0.25, -1.0]), 0.55),
)
ATRIUM_BUMPS = (
    # (direction, angular width, relative height); the last one is appendage-like
    (_unit([0.55, 0.55, 0.63]), 0.35, 0.22),
    (_unit([0.55, -0.55, 0.63]), 0.35, 0.22),
    (_unit([-0.45, 0.60, 0.66]), 0.33, 0.20),
    (_unit([-0.45, -0.60, 0.66]), 0.33, 0.20),
    (_unit([-0.75, 0.0, -0.35]), 0.30, 0.25),
)


def atrium_like(n_vertices: int = 5000, semi_axes=(25.0, 21.0, 18.0)) -> TriMesh:
    """Ellipsoidal shell (mm) with vein-like protrusions and five circular openings.

    A stand-in for a left-atrial surface mesh: four pulmonary-vein openings
    on raised cuffs, an appendage-like bulge and a large mitral opening.
    The vertex count after cutting the openings is close to ``n_vertices``.
    """
    removed = sum((1 - np.cos(r)) / 2 for _, r in ATRIUM_OPENINGS)
    sphere = fibonacci_sphere(int(round(n_vertices / (1 - removed))))
    u = sphere.vertices
    scale = np.ones(len(u))
    for d, width, height in ATRIUM_BUMPS:
        ang = np.arccos(np.clip(u @ d, -1, 1))
        scale += height * np.exp(-0.5 * (ang / width) ** 2)
    pts = u * scale[:, None] * np.asarray(semi_axes)
    drop = np.zeros(len(u), dtype=bool)
    for d, r in ATRIUM_OPENINGS:
        drop |= u @ d > np.cos(r)
    tris = sphere.triangles[~drop[sphere.triangles].any(axis=1)]
    used = np.unique(tris)
    remap = -np.ones(len(u), dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TriMesh(pts[used], remap[tris])
