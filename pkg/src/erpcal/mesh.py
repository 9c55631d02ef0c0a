"""Triangle meshes, the discrete Laplace-Beltrami eigenbasis, and distances on it."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulated surface with vertex positions in millimetres."""

    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must have shape (n, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (m, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("invalid vertex index in triangle list")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if len(lab) != len(v):
                raise MeshError("labels must have one entry per vertex")
            object.__setattr__(self, "labels", lab)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def validate(self):
        areas = self.triangle_areas()
        scale = max(np.ptp(self.vertices, axis=0).max(), 1e-300) if len(self.vertices) else 1.0
        if np.any(areas <= 1e-14 * scale**2):
            raise MeshError(f"{int(np.sum(areas <= 1e-14 * scale**2))} zero-area triangle(s)")
        counts = self._edge_counts()[1]
        if counts.size and counts.max() > 2:
            raise MeshError("non-manifold edge shared by more than two triangles")

    def _edge_counts(self):
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an ``(n_edges, 2)`` array."""
        return self._edge_counts()[0]

    def boundary_vertices(self) -> np.ndarray:
        e, c = self._edge_counts()
        return np.unique(e[c == 1])

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def scaled(self, factor: float) -> "TriMesh":
        return TriMesh(self.vertices * factor, self.triangles, self.labels)

    def n_components(self) -> int:
        return connected_components(edge_graph(self), directed=False)[0]


# ---------------------------------------------------------------------------
# file formats

def load_mesh(path, format: str | None = None, unit_scale: float = 1.0) -> TriMesh:
    """Read a mesh and convert coordinates to millimetres.

    Parameters
    ----------
    path : path-like
        ``.ply`` file, or the ``.pts``/``.elem`` pair of a carp mesh (either
        file or the common basename may be given).
    format : {"carp-pts-elem", "ply"}, optional
        Inferred from the suffix when omitted.
    unit_scale : float
        Factor converting file units to millimetres.
    """
    path = Path(path)
    if format is None:
        format = "ply" if path.suffix.lower() == ".ply" else "carp-pts-elem"
    try:
        if format == "ply":
            verts, tris = _read_ply(path)
            labels = None
        elif format == "carp-pts-elem":
            verts, tris, labels = _read_carp(path)
        else:
            raise MeshError(f"unknown mesh format {format!r}")
    except (OSError, IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"failed to parse {path}: {exc}") from exc
    mesh = TriMesh(verts * unit_scale, tris, labels)
    log.info("loaded %s: %d vertices, %d triangles", path, mesh.n_vertices, mesh.n_triangles)
    return mesh


def _read_ply(path):
    with open(path, "r") as fh:
        if fh.readline().strip() != "ply":
            raise MeshError("not a PLY file")
        n_vert = n_face = None
        vert_props = []
        current = None
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise MeshError("only ASCII PLY is supported")
            if tok[0] == "element":
                current = tok[1]
                if current == "vertex":
                    n_vert = int(tok[2])
                elif current == "face":
                    n_face = int(tok[2])
            elif tok[0] == "property" and current == "vertex":
                vert_props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_vert is None or n_face is None:
            raise MeshError("PLY header lacks vertex or face element")
        ix = [vert_props.index(c) for c in "xyz"]
        body = [ln.split() for ln in fh if ln.strip()]
        if len(body) < n_vert + n_face:
            raise MeshError("PLY body is shorter than its header declares")
        verts = np.array([[float(row[i]) for i in ix] for row in body[:n_vert]])
        tris = []
        for tok in body[n_vert:n_vert + n_face]:
            if int(tok[0]) != 3:
                raise MeshError("only triangular faces are supported")
            tris.append([int(x) for x in tok[1:4]])
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3)


def _read_carp(path):
    base = path.with_suffix("") if path.suffix in (".pts", ".elem") else path
    pts_lines = Path(str(base) + ".pts").read_text().split("\n")
    n = int(pts_lines[0].split()[0])
    verts = np.array([[float(x) for x in pts_lines[1 + i].split()[:3]] for i in range(n)])
    elem_lines = Path(str(base) + ".elem").read_text().split("\n")
    m = int(elem_lines[0].split()[0])
    tris, regions = [], []
    for i in range(m):
        tok = elem_lines[1 + i].split()
        if tok[0] != "Tr":
            raise MeshError(f"unsupported element type {tok[0]!r}")
        tris.append([int(x) for x in tok[1:4]])
        regions.append(int(tok[4]) if len(tok) > 4 else 0)
    tris = np.array(tris, dtype=np.int64)
    if tris.min() < 0 or tris.max() >= n:
        raise MeshError("invalid vertex index in element file")
    labels = np.zeros(n, dtype=int)
    labels[tris.ravel()] = np.repeat(regions, 3)
    return verts, tris, labels


def save_ply(mesh: TriMesh, path):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\nproperty float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {mesh.n_triangles}\nproperty list uchar int vertex_indices\nend_header\n")
        np.savetxt(fh, mesh.vertices, fmt="%.9g")
        np.savetxt(fh, np.column_stack([np.full(mesh.n_triangles, 3), mesh.triangles]), fmt="%d")


def save_carp(mesh: TriMesh, basename):
    base = str(basename)
    with open(base + ".pts", "w") as fh:
        fh.write(f"{mesh.n_vertices}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.9g")
    with open(base + ".elem", "w") as fh:
        fh.write(f"{mesh.n_triangles}\n")
        for t in mesh.triangles:
            fh.write(f"Tr {t[0]} {t[1]} {t[2]} 1\n")


# ---------------------------------------------------------------------------
# finite element operators

def edge_graph(mesh: TriMesh) -> sp.csr_matrix:
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    g = sp.coo_matrix((np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
    return g.tocsr()


def cotangent_stiffness(mesh: TriMesh, weights=None) -> sp.csr_matrix:
    """P1 stiffness matrix ``S_ij = -(cot a_ij + cot b_ij) / 2`` (positive semidefinite).

    ``weights`` optionally scales each triangle's contribution (e.g. a
    per-element diffusivity).
    """
    v, t = mesh.vertices, mesh.triangles
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=float)
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = t[:, (k + 1) % 3], t[:, (k + 2) % 3], t[:, k]
        a, b = v[i] - v[o], v[j] - v[o]
        cot = w * np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
        rows += [i, j]
        cols += [j, i]
        vals += [-0.5 * cot, -0.5 * cot]
    off = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Barycentric lumped mass: one third of the incident triangle areas per vertex."""
    a = mesh.triangle_areas() / 3.0
    return np.bincount(mesh.triangles.ravel(), weights=np.repeat(a, 3), minlength=mesh.n_vertices)


# ---------------------------------------------------------------------------
# eigenbasis

@dataclass(frozen=True, eq=False)
class Eigenbasis:
    """Smallest Laplace-Beltrami eigenpairs with M-orthonormal eigenfunctions.

    ``eigenvalues`` are in 1/mm^2, ``eigenvectors`` has shape (n_vertices, K)
    and ``mass`` holds the lumped mass diagonal in mm^2.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    mesh: TriMesh | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_vertices(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def area(self) -> float:
        return float(self.mass.sum())

    @property
    def phi1_magnitude(self) -> float:
        """Value of the constant first eigenfunction, ``1/sqrt(area)``."""
        return 1.0 / np.sqrt(self.area)

    def truncated(self, K: int) -> "Eigenbasis":
        if K > self.K:
            raise ValueError(f"basis has only {self.K} eigenpairs, {K} requested")
        return Eigenbasis(self.eigenvalues[:K], self.eigenvectors[:, :K], self.mass, self.mesh)

    def save(self, path):
        np.savez(path, format_version=1, eigenvalues=self.eigenvalues,
                 eigenvectors=self.eigenvectors, mass=self.mass)

    @classmethod
    def load(cls, path, mesh: TriMesh | None = None) -> "Eigenbasis":
        with np.load(path) as d:
            return cls(d["eigenvalues"], d["eigenvectors"], d["mass"], mesh)


class EigenSolverError(RuntimeError):
    pass


def solve_eigenbasis(mesh: TriMesh, K: int, tol: float = 1e-9) -> Eigenbasis:
    """Solve ``S phi = lambda M phi`` for the ``K`` smallest eigenpairs.

    Natural (Neumann) conditions hold on open boundaries.  Shift-invert
    Lanczos with a small negative shift keeps the factorised operator
    definite despite the constant null space.
    """
    n = mesh.n_vertices
    if not 1 <= K < n:
        raise ValueError(f"need 1 <= K < n_vertices, got K={K}")
    if mesh.n_components() != 1:
        raise MeshError("mesh is not connected")
    S = cotangent_stiffness(mesh)
    m = lumped_mass(mesh)
    M = sp.diags(m).tocsc()
    sigma = -0.5 * 4 * np.pi / m.sum()
    # Lanczos can drop copies of a repeated eigenvalue at the edge of the
    # requested window, so solve for a buffer of extra pairs and truncate
    k_solve = min(n - 1, K + max(8, K // 4))
    # a fixed start vector: ARPACK's default one depends on hidden RNG state, which
    # rotates eigenvectors inside degenerate clusters from call to call
    v0 = np.random.default_rng(0).uniform(0.5, 1.5, n)
    try:
        vals, vecs = eigsh(S.tocsc(), k=k_solve, M=M, sigma=sigma, which="LM", tol=tol,
                           maxiter=max(10 * k_solve, 300), v0=v0)
    except Exception as exc:  # ArpackNoConvergence and factorisation failures
        raise EigenSolverError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(vals)[:K]
    vals, vecs = vals[order], vecs[:, order]
    # re-orthonormalise in the M inner product (eigsh leaves ~1e-10 errors in clusters)
    gram = vecs.T @ (m[:, None] * vecs)
    L = np.linalg.cholesky(0.5 * (gram + gram.T))
    vecs = np.linalg.solve(L, vecs.T).T
    for k in range(K):
        col = vecs[:, k]
        first = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0]
        if col[first] < 0:
            vecs[:, k] = -col
    vecs.setflags(write=False)
    vals.setflags(write=False)
    return Eigenbasis(vals, vecs, m, mesh)


# ---------------------------------------------------------------------------
# distances

def biharmonic_embedding(basis: Eigenbasis) -> np.ndarray:
    """Coordinates whose Euclidean distances are biharmonic distances (skips mode 1)."""
    if basis.K < 2:
        raise ValueError("biharmonic distance needs at least two eigenpairs")
    return basis.eigenvectors[:, 1:] / basis.eigenvalues[1:]


def biharmonic_distance(basis: Eigenbasis, i, j) -> np.ndarray:
    """``sqrt(sum_{k>=2} (phi_k(i) - phi_k(j))^2 / lambda_k^2)``; broadcasts over indices."""
    E = biharmonic_embedding(basis)
    return np.linalg.norm(E[np.asarray(i)] - E[np.asarray(j)], axis=-1)


def biharmonic_distances(E: np.ndarray, rows, cols=None) -> np.ndarray:
    """Pairwise biharmonic distances between two vertex sets from an embedding."""
    A = E[np.asarray(rows)]
    B = E if cols is None else E[np.asarray(cols)]
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(d2, 0.0))


def graph_geodesic(mesh: TriMesh, sources) -> np.ndarray:
    """Shortest edge-path distance (mm) from the nearest of ``sources``."""
    sources = np.atleast_1d(np.asarray(sources, dtype=int))
    if sources.size == 0:
        raise ValueError("need at least one source vertex")
    return dijkstra(edge_graph(mesh), directed=False, indices=sources, min_only=True)


# ---------------------------------------------------------------------------
# measurement design

@dataclass(frozen=True)
class DesignSites:
    vertices: np.ndarray
    exclusion_cm: float
    min_distance: float = np.nan


def admissible_vertices(mesh: TriMesh, exclusion_cm: float) -> np.ndarray:
    boundary = mesh.boundary_vertices()
    if boundary.size == 0:
        return np.arange(mesh.n_vertices)
    d = graph_geodesic(mesh, boundary)
    return np.flatnonzero(d > 10.0 * exclusion_cm)


def _max_pair(E, chunk=1024):
    best, pair = -1.0, (0, 0)
    sq = (E * E).sum(1)
    for s in range(0, len(E), chunk):
        d2 = sq[s:s + chunk, None] + sq[None, :] - 2.0 * E[s:s + chunk] @ E.T
        k = int(np.argmax(d2))
        i, j = divmod(k, len(E))
        if d2[i, j] > best + 1e-12 * max(best, 1.0):
            best, pair = d2[i, j], (s + i, j)
    return tuple(sorted(pair))


def maximin_design(mesh: TriMesh, basis: Eigenbasis, n: int, exclusion_cm: float = 0.6,
                   seed=None, candidate_fraction: float = 1.0, max_passes: int = 100) -> DesignSites:
    """Choose ``n`` measurement vertices maximising the minimum biharmonic distance.

    Starts from the most distant admissible pair, adds vertices greedily and
    then applies single-site exchanges while any site's nearest-neighbour
    distance can be increased.  Vertices within ``exclusion_cm`` (graph
    geodesic) of the mesh boundary are excluded.  With
    ``candidate_fraction < 1`` the candidates are a random subset of the
    admissible vertices drawn from ``seed``, which yields distinct designs for
    distinct seeds.
    """
    adm = admissible_vertices(mesh, exclusion_cm)
    if candidate_fraction < 1.0:
        rng = np.random.default_rng(seed)
        size = max(n, int(np.ceil(candidate_fraction * adm.size)))
        adm = np.sort(rng.choice(adm, size=min(size, adm.size), replace=False))
    if adm.size < n:
        raise ValueError(f"only {adm.size} admissible vertices for {n} sites")
    if n == 1:
        return DesignSites(adm[:1].copy(), exclusion_cm)
    E = biharmonic_embedding(basis)[adm]
    chosen = list(_max_pair(E))
    mind = np.minimum(*(np.linalg.norm(E - E[c], axis=1) for c in chosen))
    while len(chosen) < n:
        mind[chosen] = -1.0
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(E - E[nxt], axis=1))
    D = biharmonic_distances(E, np.arange(len(E)), chosen)  # candidates x sites
    for _ in range(max_passes):
        improved = False
        for s in range(n):
            others = [k for k in range(n) if k != s]
            current = D[chosen[s], others].min()
            score = D[:, others].min(axis=1)
            score[chosen] = -1.0
            best = int(np.argmax(score))
            if score[best] > current * (1 + 1e-12) + 1e-15:
                chosen[s] = best
                D[:, s] = biharmonic_distances(E, np.arange(len(E)), [best])[:, 0]
                improved = True
        if not improved:
            break
    chosen = np.array(chosen)
    pd = biharmonic_distances(E, chosen, chosen)
    min_pair = pd[np.triu_indices(n, 1)].min()
    return DesignSites(adm[chosen], exclusion_cm, float(min_pair))


# ---------------------------------------------------------------------------
# transfer between meshes

def _closest_point_on_triangles(p, a, b, c):
    """Closest points of ``p`` on triangles ``(a, b, c)``; all arrays (..., 3)."""
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = np.einsum("...i,...i->...", n, n)
    w = p - a
    # barycentric coordinates of the plane projection
    v = np.einsum("...i,...i->...", np.cross(w, ac), n) / nn
    u = np.einsum("...i,...i->...", np.cross(ab, w), n) / nn
    inside = (v >= 0) & (u >= 0) & (v + u <= 1)
    q = a + v[..., None] * ab + u[..., None] * ac
    best = q.copy()
    best_d = np.where(inside, np.linalg.norm(p - q, axis=-1), np.inf)
    for s0, s1 in ((a, b), (b, c), (c, a)):
        e = s1 - s0
        t = np.clip(np.einsum("...i,...i->...", p - s0, e) / np.einsum("...i,...i->...", e, e), 0, 1)
        qe = s0 + t[..., None] * e
        de = np.linalg.norm(p - qe, axis=-1)
        better = ~inside & (de < best_d)
        best[better] = qe[better]
        best_d = np.where(better, de, best_d)
    return best, best_d


def _barycentric(q, a, b, c):
    v0, v1, v2 = b - a, c - a, q - a
    d00 = np.einsum("...i,...i->...", v0, v0)
    d01 = np.einsum("...i,...i->...", v0, v1)
    d11 = np.einsum("...i,...i->...", v1, v1)
    d20 = np.einsum("...i,...i->...", v2, v0)
    d21 = np.einsum("...i,...i->...", v2, v1)
    den = d00 * d11 - d01 * d01
    wb = (d11 * d20 - d01 * d21) / den
    wc = (d00 * d21 - d01 * d20) / den
    return np.stack([1 - wb - wc, wb, wc], axis=-1)


def barycentric_transfer(src: TriMesh, values, dst_points, tolerance: float | None = None,
                         k_candidates: int = 16) -> np.ndarray:
    """Interpolate per-vertex ``values`` of ``src`` at arbitrary 3D points.

    Each point is projected onto its nearest source triangle and the value is
    the barycentric combination of that triangle's vertex values.
    ``tolerance`` (mm) defaults to the longest source edge.
    """
    values = np.asarray(values, dtype=float)
    pts = np.atleast_2d(np.asarray(dst_points, dtype=float))
    tri = src.triangles
    corners = src.vertices[tri]
    centroids = corners.mean(axis=1)
    radius = np.linalg.norm(corners - centroids[:, None], axis=2).max()
    if tolerance is None:
        tolerance = src.edge_lengths().max()
    tree = cKDTree(centroids)
    k = min(k_candidates, len(tri))
    dc, cand = tree.query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    dc = dc.reshape(len(pts), k)
    P = np.repeat(pts[:, None, :], k, axis=1)
    q, d = _closest_point_on_triangles(P, corners[cand, 0], corners[cand, 1], corners[cand, 2])
    j = np.argmin(d, axis=1)
    rows = np.arange(len(pts))
    best_tri, best_q, best_d = cand[rows, j], q[rows, j], d[rows, j]
    # a closer triangle could lie beyond the k nearest centroids
    unsure = np.flatnonzero((k < len(tri)) & (dc[:, -1] < best_d + radius))
    for r in unsure:
        ids = np.asarray(tree.query_ball_point(pts[r], best_d[r] + radius), dtype=int)
        qq, dd = _closest_point_on_triangles(np.broadcast_to(pts[r], (len(ids), 3)),
                                             corners[ids, 0], corners[ids, 1], corners[ids, 2])
        m = int(np.argmin(dd))
        best_tri[r], best_q[r], best_d[r] = ids[m], qq[m], dd[m]
    if np.any(best_d > tolerance):
        raise MeshError(f"{int(np.sum(best_d > tolerance))} point(s) farther than {tolerance} mm from the surface")
    c = corners[best_tri]
    w = _barycentric(best_q, c[:, 0], c[:, 1], c[:, 2])
    w = np.clip(w, 0.0, 1.0)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("ij,ij...->i...", w, values[tri[best_tri]])
