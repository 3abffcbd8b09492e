"""Rigid object pose estimation: Kabsch alignment and marker-to-template ICP.

Also owns the triangle-mesh container (OBJ load/save) and the procedural
mesh generators used to build fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .util import apply_thread_cap

BRUTE_FORCE_LIMIT = 512


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(x) = R_s (R_o x + t_o) + t_s."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_json(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "RigidTransform":
        return cls(np.array(obj["rotation"]), np.array(obj["translation"]))


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (M, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size:
            areas = triangle_areas(v, f)
            bad = np.flatnonzero(areas <= 0.0)
            if bad.size:
                raise ValueError(f"degenerate zero-area faces: {bad.tolist()}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def edges(self) -> np.ndarray:
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]], axis=0
        )
        return np.unique(np.sort(e, axis=1), axis=0)

    def save_obj(self, path: str | Path) -> None:
        lines = []
        for v in self.vertices:
            lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        for f in self.faces:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path: str | Path) -> "TriMesh":
        verts, faces = [], []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangular faces are supported")
                faces.append(idx)
        return cls(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


class DegenerateGeometryError(ValueError):
    """Raised when point sets are too degenerate for a unique rigid fit."""


def kabsch(p: np.ndarray, q: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform with R p_i + T ~ q_i, reflections excluded."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 3:
        raise ValueError("point sets must both be (n, 3) with n >= 3")
    cp = p.mean(axis=0)
    cq = q.mean(axis=0)
    h = (p - cp).T @ (q - cq)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("cross-covariance is rank-deficient (collinear points)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cq - r @ cp)


def nearest_vertex_indices(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Index of the nearest vertex for each query point (lowest index on ties)."""
    points = np.asarray(points, dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) <= BRUTE_FORCE_LIMIT:
        d2 = np.sum((points[:, None, :] - vertices[None, :, :]) ** 2, axis=2)
        return np.argmin(d2, axis=1)
    return cKDTree(vertices).query(points)[1]


@dataclass
class IcpResult:
    transform: RigidTransform
    rms_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def rms(self) -> float:
        return self.rms_history[-1] if self.rms_history else float("nan")


def icp_rigid(
    markers: np.ndarray,
    template: TriMesh,
    init: RigidTransform | None = None,
    iters: int = 100,
    tol: float = 1e-8,
) -> IcpResult:
    """Alternate nearest-surface-point correspondence and Kabsch until the RMS settles.

    Solves template -> markers: returns t with t(template) ~ markers, so the
    inverse transform maps markers onto the template. Correspondences target
    the closest point on the template surface; matching vertices alone leaves
    spurious fixed points that stall convergence well short of registration.
    """
    markers = np.asarray(markers, dtype=np.float64)
    if markers.ndim != 2 or markers.shape[1] != 3 or markers.shape[0] < 3:
        raise ValueError("markers must be (n, 3) with n >= 3")
    if not np.all(np.isfinite(markers)):
        raise ValueError("markers contain non-finite values")
    current = init if init is not None else RigidTransform.identity()
    result = IcpResult(current)
    prev_rms = np.inf
    for it in range(iters):
        back = current.inverse().apply(markers)
        _, corr = closest_surface_points(back, template)
        current = kabsch(corr, markers)
        residual = current.apply(corr) - markers
        rms = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
        result.transform = current
        result.rms_history.append(rms)
        result.iterations = it + 1
        if prev_rms - rms < tol:
            break
        prev_rms = rms
    return result


def apply_transform(mesh: TriMesh, t: RigidTransform) -> TriMesh:
    return TriMesh(t.apply(mesh.vertices), mesh.faces)


def closest_surface_points(points: np.ndarray, mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Exact unsigned distances and nearest surface points on the mesh."""
    points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    tri = mesh.vertices[mesh.faces]
    centroids = np.ascontiguousarray(tri.mean(axis=1))
    radii = np.ascontiguousarray(np.linalg.norm(tri - centroids[:, None, :], axis=2).max(axis=1))
    apply_thread_cap()
    return _min_distance_kernel(
        points,
        np.ascontiguousarray(tri[:, 0]),
        np.ascontiguousarray(tri[:, 1]),
        np.ascontiguousarray(tri[:, 2]),
        centroids,
        radii,
    )


def point_mesh_distance(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Exact unsigned distance from each point to the mesh surface."""
    return closest_surface_points(points, mesh)[0]


@njit(parallel=True, cache=True)
def _min_distance_kernel(points, v0, v1, v2, centroids, radii):
    n = points.shape[0]
    n_f = v0.shape[0]
    out = np.empty(n)
    nearest = np.empty((n, 3))
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        # pass 1: upper bound from centroid distances
        best = 1e300
        for f in range(n_f):
            dx = px - centroids[f, 0]
            dy = py - centroids[f, 1]
            dz = pz - centroids[f, 2]
            ub = np.sqrt(dx * dx + dy * dy + dz * dz) + radii[f]
            if ub < best:
                best = ub
        # pass 2: exact distances for triangles that can still beat the bound
        bx = by = bz = 0.0
        found = False
        for f in range(n_f):
            dx = px - centroids[f, 0]
            dy = py - centroids[f, 1]
            dz = pz - centroids[f, 2]
            lower = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[f]
            if lower > best:
                continue
            qx, qy, qz = _point_triangle_closest(
                px, py, pz,
                v0[f, 0], v0[f, 1], v0[f, 2],
                v1[f, 0], v1[f, 1], v1[f, 2],
                v2[f, 0], v2[f, 1], v2[f, 2],
            )
            ddx, ddy, ddz = qx - px, qy - py, qz - pz
            d = np.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
            if d < best or not found:
                best = d
                bx, by, bz = qx, qy, qz
                found = True
        out[i] = best
        nearest[i, 0] = bx
        nearest[i, 1] = by
        nearest[i, 2] = bz
    return out, nearest


@njit(cache=True, inline="always")
def _point_triangle_closest(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # closest point on triangle via barycentric region tests (Ericson)
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return ax + t * abx, ay + t * aby, az + t * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return ax + t * acx, ay + t * acy, az + t * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + t * (cx - bx), by + t * (cy - by), bz + t * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w



def make_icosphere(radius: float = 1.0, subdivisions: int = 2, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Unit icosahedron subdivided and projected to the sphere; 20 * 4^k faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))


def make_box(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    ex, ey, ez = (e / 2.0 for e in extents)
    cx, cy, cz = center
    v = np.array(
        [
            [cx - ex, cy - ey, cz - ez], [cx + ex, cy - ey, cz - ez],
            [cx + ex, cy + ey, cz - ez], [cx - ex, cy + ey, cz - ez],
            [cx - ex, cy - ey, cz + ez], [cx + ex, cy - ey, cz + ez],
            [cx + ex, cy + ey, cz + ez], [cx - ex, cy + ey, cz + ez],
        ]
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
            [1, 2, 6], [1, 6, 5], [3, 0, 4], [3, 4, 7],
        ],
        dtype=np.int64,
    )
    return TriMesh(v, f)


def make_lumpy_blob(radius: float = 1.0, seed: int = 0, subdivisions: int = 2) -> TriMesh:
    """Asymmetric star-shaped mesh; useful when registration must be unambiguous."""
    base = make_icosphere(1.0, subdivisions)
    rng = np.random.default_rng(seed)
    n_lobes = 6
    dirs = rng.normal(size=(n_lobes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(0.15, 0.45, size=n_lobes)
    widths = rng.uniform(4.0, 9.0, size=n_lobes)
    r = np.ones(len(base.vertices))
    for d, a, w in zip(dirs, amps, widths):
        r += a * np.exp(-w * (1.0 - base.vertices @ d))
    scale = np.array([0.7, 1.0, 1.35])
    return TriMesh(base.vertices * (r[:, None] * radius) * scale, base.faces)
