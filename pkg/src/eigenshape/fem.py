"""P1 finite elements for the Dirichlet Laplace eigenproblem on polygonal domains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh
from scipy.spatial import Delaunay

from .geometry import points_inside

MIN_ANGLE_DEG = 20.0
MAX_EDGE_FACTOR = 1.5
RESIDUAL_TOL = 1e-8
_LATTICE_OFFSETS = ((0.0, 0.0), (0.5, 0.25), (0.25, 0.6), (0.7, 0.35))


class MeshFailure(Exception):
    """Quality targets unreachable for this boundary and mesh size."""


class ConvergenceFailure(Exception):
    """Eigensolver did not meet the residual contract."""


class ZeroFunction(Exception):
    """Raster is identically zero."""


@dataclass
class Mesh:
    vertices: np.ndarray      # (nv, 2)
    triangles: np.ndarray     # (nt, 3) int, counterclockwise
    is_boundary: np.ndarray   # (nv,) bool
    h: float

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


@dataclass
class SparsePair:
    """Stiffness and mass matrices restricted to interior (non-Dirichlet) vertices."""

    K: sp.csr_matrix
    M_mass: sp.csr_matrix
    interior: np.ndarray  # indices into mesh vertices


@dataclass
class EigenPair:
    lam: float
    vec: np.ndarray       # interior-vertex coefficients
    residual: float


def _resample_ring(boundary: np.ndarray, h: float) -> np.ndarray:
    """Subdivide each polyline edge into <= h pieces, keeping original vertices."""
    ring = boundary[:-1]
    out = []
    n = ring.shape[0]
    for i in range(n):
        a = ring[i]
        b = ring[(i + 1) % n]
        length = float(np.hypot(*(b - a)))
        if length == 0.0:
            continue
        m = max(1, int(np.ceil(length / h)))
        for t in range(m):
            out.append(a + (t / m) * (b - a))
    return np.asarray(out)


def _dist_to_polyline(pts: np.ndarray, boundary: np.ndarray) -> np.ndarray:
    a = boundary[:-1]
    seg = boundary[1:] - a
    seg_len2 = np.maximum(np.einsum("ij,ij->i", seg, seg), 1e-300)
    diff = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pej,ej->pe", diff, seg) / seg_len2, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * seg[None, :, :]
    d = np.linalg.norm(pts[:, None, :] - closest, axis=2)
    return d.min(axis=1)


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    return 0.5 * (
        (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
        - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1])
    )


def _min_angles(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    e0 = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
    e1 = np.linalg.norm(v[:, 0] - v[:, 2], axis=1)
    e2 = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
    angles = np.empty((len(triangles), 3))
    for i, (a, b, c) in enumerate(((e0, e1, e2), (e1, e2, e0), (e2, e0, e1))):
        cos = np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1.0, 1.0)
        angles[:, i] = np.degrees(np.arccos(cos))
    return angles.min(axis=1)


def _max_edge(vertices: np.ndarray, triangles: np.ndarray) -> float:
    v = vertices[triangles]
    e = np.stack([
        np.linalg.norm(v[:, 1] - v[:, 0], axis=1),
        np.linalg.norm(v[:, 2] - v[:, 1], axis=1),
        np.linalg.norm(v[:, 0] - v[:, 2], axis=1),
    ])
    return float(e.max())


def _lattice_points(boundary: np.ndarray, h: float, offset: tuple[float, float]) -> np.ndarray:
    lo = boundary.min(axis=0)
    hi = boundary.max(axis=0)
    dy = h * np.sqrt(3.0) / 2.0
    ys = np.arange(lo[1] + (offset[1] - 1.0) * dy, hi[1] + dy, dy)
    cand = []
    for row, y in enumerate(ys):
        shift = (offset[0] + 0.5 * (row % 2) - 1.0) * h
        xs = np.arange(lo[0] + shift, hi[0] + h, h)
        cand.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    if not cand:
        return np.zeros((0, 2))
    cand = np.concatenate(cand)
    cand = cand[points_inside(boundary, cand)]
    if cand.size:
        cand = cand[_dist_to_polyline(cand, boundary) >= 0.5 * h]
    return cand


def _connect(boundary: np.ndarray, vertices: np.ndarray, nb: int) -> np.ndarray:
    """Delaunay, orient, and cull to the (possibly concave) domain."""
    triangles = Delaunay(vertices).simplices.astype(np.int64)
    areas = _signed_areas(vertices, triangles)
    flip = areas < 0
    triangles[flip] = triangles[flip][:, ::-1]
    triangles = triangles[np.abs(areas) > 1e-14]

    centroids = vertices[triangles].mean(axis=1)
    triangles = triangles[points_inside(boundary, centroids)]

    # drop triangles whose chord between non-adjacent boundary vertices leaves the domain
    is_b = triangles < nb
    suspect = np.where(is_b.sum(axis=1) >= 2)[0]
    bad = np.zeros(len(triangles), dtype=bool)
    for e0, e1 in ((0, 1), (1, 2), (2, 0)):
        pair = triangles[suspect][:, [e0, e1]]
        both_b = np.all(pair < nb, axis=1)
        if not np.any(both_b):
            continue
        idx = suspect[both_b]
        pa, pb = triangles[idx, e0], triangles[idx, e1]
        gap = np.abs(pa - pb)
        non_adjacent = np.minimum(gap, nb - gap) > 1
        chord_idx = idx[non_adjacent]
        if chord_idx.size:
            mids = 0.5 * (vertices[triangles[chord_idx, e0]] + vertices[triangles[chord_idx, e1]])
            bad[chord_idx] |= ~points_inside(boundary, mids)
    return triangles[~bad]


def _smooth_positions(vertices: np.ndarray, triangles: np.ndarray, movable: np.ndarray,
                      iterations: int) -> np.ndarray:
    """Damped Laplacian smoothing; vertices whose move would invert a triangle stay."""
    nv = vertices.shape[0]
    rows = np.concatenate([triangles[:, 0], triangles[:, 1], triangles[:, 2],
                           triangles[:, 1], triangles[:, 2], triangles[:, 0]])
    cols = np.concatenate([triangles[:, 1], triangles[:, 2], triangles[:, 0],
                           triangles[:, 0], triangles[:, 1], triangles[:, 2]])
    adj = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(nv, nv)).tocsr()
    adj.data[:] = 1.0
    degree = np.maximum(np.asarray(adj.sum(axis=1)).ravel(), 1.0)
    pos = vertices.copy()
    for _ in range(iterations):
        mean = adj @ pos / degree[:, None]
        proposal = pos.copy()
        proposal[movable] += 0.5 * (mean[movable] - pos[movable])
        for _guard in range(4):
            bad = _signed_areas(proposal, triangles) <= 1e-14
            if not np.any(bad):
                break
            frozen = np.unique(triangles[bad])
            proposal[frozen] = pos[frozen]
        if np.any(_signed_areas(proposal, triangles) <= 1e-14):
            break
        pos = proposal
    return pos


def _circumcenters(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    ab, ac = b - a, c - a
    d = 2.0 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
    d = np.where(np.abs(d) < 1e-300, 1e-300, d)
    ab2 = (ab * ab).sum(axis=1)
    ac2 = (ac * ac).sum(axis=1)
    ux = (ac[:, 1] * ab2 - ab[:, 1] * ac2) / d
    uy = (ab[:, 0] * ac2 - ac[:, 0] * ab2) / d
    return a + np.stack([ux, uy], axis=1)


def _build_candidate(boundary: np.ndarray, h: float, offset: tuple[float, float]) -> Mesh:
    bpts = _resample_ring(boundary, h)
    ipts = _lattice_points(boundary, h, offset)

    def connect_and_relax(bpts, ipts, rounds=2):
        nb = bpts.shape[0]
        vertices = np.vstack([bpts, ipts]) if ipts.size else bpts.copy()
        movable = np.arange(vertices.shape[0]) >= nb
        triangles = _connect(boundary, vertices, nb)
        for _ in range(rounds):
            vertices = _smooth_positions(vertices, triangles, movable, iterations=4)
            triangles = _connect(boundary, vertices, nb)
        return vertices, triangles, nb

    vertices, triangles, nb = connect_and_relax(bpts, ipts, rounds=3)

    # refinement: insert circumcenters of bad triangles (or split their edges)
    for _ in range(8):
        angles = _min_angles(vertices, triangles)
        v = vertices[triangles]
        edge_len = np.stack([
            np.linalg.norm(v[:, 1] - v[:, 0], axis=1),
            np.linalg.norm(v[:, 2] - v[:, 1], axis=1),
            np.linalg.norm(v[:, 0] - v[:, 2], axis=1),
        ], axis=1)
        bad = np.where((angles < MIN_ANGLE_DEG) | (edge_len.max(axis=1) > MAX_EDGE_FACTOR * h))[0]
        if bad.size == 0:
            break
        ipts = vertices[nb:]
        centers = _circumcenters(vertices, triangles[bad])
        center_ok = points_inside(boundary, centers)
        center_ok &= _dist_to_polyline(centers, boundary) >= 0.4 * h
        new_interior = []
        split_ring_edges = set()
        edge_order = ((0, 1), (1, 2), (2, 0))
        for row, t_idx in enumerate(bad):
            tri = triangles[t_idx]
            placed = False
            if center_ok[row]:
                new_interior.append(centers[row])
                placed = True
            else:
                longest = int(np.argmax(edge_len[t_idx]))
                e0, e1 = edge_order[longest]
                va, vb = tri[e0], tri[e1]
                if va < nb and vb < nb:
                    gap = abs(int(va) - int(vb))
                    if min(gap, nb - gap) == 1:
                        split_ring_edges.add(min(int(va), int(vb))
                                             if abs(int(va) - int(vb)) == 1 else nb - 1)
                        placed = True
                if not placed:
                    new_interior.append(0.5 * (vertices[va] + vertices[vb]))
        if split_ring_edges:
            ring = list(map(np.asarray, vertices[:nb]))
            for e in sorted(split_ring_edges, reverse=True):
                mid = 0.5 * (ring[e] + ring[(e + 1) % len(ring)])
                ring.insert(e + 1, mid)
            bpts_new = np.asarray(ring)
        else:
            bpts_new = vertices[:nb]
        if new_interior:
            cand = np.asarray(new_interior)
            existing = np.vstack([bpts_new, ipts]) if ipts.size else bpts_new
            keep = np.ones(len(cand), dtype=bool)
            for i, p in enumerate(cand):
                pool = existing if not np.any(keep[:i]) else np.vstack([existing, cand[:i][keep[:i]]])
                if np.min(np.hypot(*(pool - p).T)) < 0.3 * h:
                    keep[i] = False
            cand = cand[keep]
            ipts = np.vstack([ipts, cand]) if ipts.size else cand
        if not split_ring_edges and not new_interior:
            break
        vertices, triangles, nb = connect_and_relax(bpts_new, ipts, rounds=1)

    used = np.unique(triangles)
    remap = -np.ones(vertices.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.size)
    return Mesh(
        vertices=vertices[used],
        triangles=remap[triangles],
        is_boundary=used < nb,
        h=h,
    )


def triangulate(boundary: np.ndarray, h: float) -> Mesh:
    """Conforming triangulation with edges <= 1.5h and angles >= 20 degrees.

    Boundary vertices are placed exactly on the input polyline (original
    vertices plus <= h subdivisions); the interior is a hexagonal lattice,
    Delaunay-connected, culled to the domain, and lightly smoothed. Lattice
    phase offsets are retried until the quality targets hold.
    """
    if h <= 0:
        raise ValueError("mesh size must be positive")
    best: Mesh | None = None
    best_angle = -1.0
    for offset in _LATTICE_OFFSETS:
        mesh = _build_candidate(boundary, h, offset)
        if mesh.n_triangles == 0:
            continue
        angle = float(_min_angles(mesh.vertices, mesh.triangles).min())
        if angle > best_angle:
            best, best_angle = mesh, angle
        if angle >= MIN_ANGLE_DEG and _max_edge(mesh.vertices, mesh.triangles) <= MAX_EDGE_FACTOR * h:
            return mesh
    if best is None:
        raise MeshFailure("no triangles produced; degenerate boundary?")
    if best_angle < MIN_ANGLE_DEG:
        raise MeshFailure(f"min angle {best_angle:.2f} deg below {MIN_ANGLE_DEG}")
    if _max_edge(best.vertices, best.triangles) > MAX_EDGE_FACTOR * h:
        raise MeshFailure("max edge exceeds 1.5h")
    return best


def assemble_full(mesh: Mesh) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Global P1 stiffness and mass matrices before Dirichlet elimination."""
    v = mesh.vertices[mesh.triangles]
    x, y = v[:, :, 0], v[:, :, 1]
    b = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
    c = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
    area = _signed_areas(mesh.vertices, mesh.triangles)
    ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area)[:, None, None]
    me = (area / 12.0)[:, None, None] * (np.ones((3, 3)) + np.eye(3))[None, :, :]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    nv = mesh.n_vertices
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    M = sp.coo_matrix((me.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    return K, M


def assemble(mesh: Mesh) -> SparsePair:
    """Assemble and eliminate Dirichlet rows/columns."""
    K, M = assemble_full(mesh)
    interior = np.where(~mesh.is_boundary)[0]
    return SparsePair(
        K=K[np.ix_(interior, interior)].tocsr(),
        M_mass=M[np.ix_(interior, interior)].tocsr(),
        interior=interior,
    )


def solve_eigs(pair: SparsePair, k: int) -> list[EigenPair]:
    """k smallest eigenpairs of K x = lambda M x, ascending, M-orthonormal."""
    n = pair.K.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if n < max(100, 3 * k):
        lams, vecs = scipy.linalg.eigh(
            pair.K.toarray(), pair.M_mass.toarray(), subset_by_index=[0, k - 1]
        )
    else:
        try:
            lams, vecs = eigsh(pair.K, k=k, M=pair.M_mass, sigma=0.0, which="LM")
        except (ArpackNoConvergence, ArpackError) as exc:
            raise ConvergenceFailure(str(exc)) from exc
    order = np.argsort(lams)
    lams, vecs = lams[order], vecs[:, order]
    # tighten M-orthonormality
    gram = vecs.T @ (pair.M_mass @ vecs)
    vecs = vecs @ np.linalg.inv(np.linalg.cholesky(gram)).T
    pairs = []
    for i in range(k):
        v = vecs[:, i]
        res = float(np.linalg.norm(pair.K @ v - lams[i] * (pair.M_mass @ v)) / np.linalg.norm(v))
        if res > RESIDUAL_TOL:
            raise ConvergenceFailure(f"residual {res:.2e} above {RESIDUAL_TOL}")
        pairs.append(EigenPair(lam=float(lams[i]), vec=v, residual=res))
    return pairs


def rasterize_eigenfunction(mesh: Mesh, pair: EigenPair, d: int,
                            interior: np.ndarray | None = None) -> np.ndarray:
    """Sample the P1 eigenfunction at pixel centers of the [0,1]^2 grid.

    ``interior`` are the vertex indices the coefficient vector refers to
    (defaults to the non-boundary vertices in mesh order).
    """
    full = np.zeros(mesh.n_vertices)
    if interior is None:
        interior = np.where(~mesh.is_boundary)[0]
    full[interior] = pair.vec

    out = np.zeros((d, d))
    centers = (np.arange(d) + 0.5) / d
    v = mesh.vertices[mesh.triangles]
    for t_idx in range(mesh.n_triangles):
        tri = v[t_idx]
        lo = tri.min(axis=0)
        hi = tri.max(axis=0)
        c0 = np.searchsorted(centers, lo[0] - 1e-12)
        c1 = np.searchsorted(centers, hi[0] + 1e-12)
        r0 = np.searchsorted(centers, lo[1] - 1e-12)
        r1 = np.searchsorted(centers, hi[1] + 1e-12)
        if c0 >= c1 or r0 >= r1:
            continue
        xs = centers[c0:c1]
        ys = centers[r0:r1]
        xx, yy = np.meshgrid(xs, ys)
        det = (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1]) - (tri[2, 0] - tri[0, 0]) * (
            tri[1, 1] - tri[0, 1]
        )
        l1 = ((tri[1, 0] - xx) * (tri[2, 1] - yy) - (tri[2, 0] - xx) * (tri[1, 1] - yy)) / det
        l2 = ((tri[2, 0] - xx) * (tri[0, 1] - yy) - (tri[0, 0] - xx) * (tri[2, 1] - yy)) / det
        l3 = 1.0 - l1 - l2
        inside = (l1 >= -1e-12) & (l2 >= -1e-12) & (l3 >= -1e-12)
        if not np.any(inside):
            continue
        coeffs = full[mesh.triangles[t_idx]]
        vals = l1 * coeffs[0] + l2 * coeffs[1] + l3 * coeffs[2]
        block = out[r0:r1, c0:c1]
        block[inside] = vals[inside]
    return out


def normalize_and_sign(raster: np.ndarray) -> np.ndarray:
    """Scale to discrete norm ||y||_2 = d and fix the sign (positive mass)."""
    d = raster.shape[0]
    nrm = float(np.linalg.norm(raster))
    if nrm == 0.0:
        raise ZeroFunction("raster is identically zero")
    out = raster * (d / nrm)
    total = float(out.sum())
    if abs(total) > 1e-9 * d:
        sign = 1.0 if total > 0 else -1.0
    else:
        flat = out.ravel()
        big = np.abs(flat) >= 0.01 * np.abs(flat).max()
        first = flat[np.argmax(big)]
        sign = 1.0 if first > 0 else -1.0
    return out * sign


def write_off(mesh: Mesh, path) -> None:
    """ASCII OFF dump (z = 0) for external viewers."""
    with open(path, "w") as f:
        f.write("OFF\n")
        f.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for x, y in mesh.vertices:
            f.write(f"{float(x)!r} {float(y)!r} 0\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
