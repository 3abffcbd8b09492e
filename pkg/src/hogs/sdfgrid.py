"""Signed distance voxelization of a watertight mesh and trilinear sampling.

The grid is built once per object: exact point-to-triangle distances at the
cell centers, signed by a 3-axis ray-parity majority vote. Queries are
mesh-free afterwards: trilinear values, interpolated central-difference
normals, and the piecewise trilinear gradient used by penetration penalties.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SDF_CACHE_VERSION
from .objtrack import TriMesh, point_mesh_distance
from .util import read_header_block, sha256_bytes, write_header_block


class NotWatertightError(ValueError):
    def __init__(self, bad_edges):
        self.bad_edges = bad_edges
        super().__init__(f"mesh is not watertight; offending edges: {bad_edges[:20]}")


@dataclass(frozen=True)
class SdfGrid:
    origin: np.ndarray  # corner of the grid volume (meters)
    voxel: float  # uniform cell size h
    dims: tuple[int, int, int]
    values: np.ndarray  # signed distances at cell centers, shape dims
    pad: float  # padding fraction used at build time

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.voxel <= 0:
            raise ValueError("voxel size must be positive")
        if self.values.shape != self.dims:
            raise ValueError("values shape does not match dims")

    def cell_centers_axis(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel

    def gradient_grid(self) -> np.ndarray:
        """Central-difference gradient field, shape dims + (3,); cached."""
        if not hasattr(self, "_grad"):
            g = np.stack(np.gradient(self.values, self.voxel), axis=-1)
            object.__setattr__(self, "_grad", np.ascontiguousarray(g))
        return self._grad

    def save(self, path: str | Path, mesh_hash: str = "") -> None:
        header = {
            "version": SDF_CACHE_VERSION,
            "origin": self.origin.tolist(),
            "voxel": self.voxel,
            "dims": list(self.dims),
            "pad": self.pad,
            "mesh_hash": mesh_hash,
        }
        payload = self.values.astype("<f4").tobytes()
        write_header_block(path, header, payload)

    @classmethod
    def load(cls, path: str | Path, expect_mesh_hash: str | None = None) -> "SdfGrid":
        header, payload = read_header_block(path)
        if header.get("version") != SDF_CACHE_VERSION:
            raise ValueError("SDF cache version mismatch")
        if expect_mesh_hash is not None and header.get("mesh_hash") != expect_mesh_hash:
            raise ValueError("SDF cache mesh hash mismatch; rebuild required")
        dims = tuple(header["dims"])
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
        return cls(
            np.array(header["origin"]), float(header["voxel"]), dims, values, float(header["pad"])
        )


def mesh_content_hash(mesh: TriMesh) -> str:
    return sha256_bytes(mesh.vertices.tobytes() + mesh.faces.tobytes())


def validate_watertight(mesh: TriMesh) -> None:
    edges = {}
    for f in mesh.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (int(min(a, b)), int(max(a, b)))
            edges[key] = edges.get(key, 0) + 1
    bad = sorted(k for k, c in edges.items() if c != 2)
    if bad:
        raise NotWatertightError(bad)


def build_sdf(mesh: TriMesh, dims: int | tuple[int, int, int] = 64, pad: float = 0.1) -> SdfGrid:
    """Voxelize exact unsigned distances and sign them by interior parity."""
    validate_watertight(mesh)
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    dims = tuple(int(d) for d in dims)
    if min(dims) < 2:
        raise ValueError("dims must be >= 2 along every axis")
    lo, hi = mesh.bbox
    center = (lo + hi) / 2.0
    extent = (hi - lo) * (1.0 + 2.0 * pad)
    voxel = float(np.max(extent / np.asarray(dims)))
    origin = center - np.asarray(dims) * voxel / 2.0

    axes = [origin[a] + (np.arange(dims[a]) + 0.5) * voxel for a in range(3)]
    gx, gy, gz = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    centers = np.ascontiguousarray(np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1))

    unsigned = point_mesh_distance(centers, mesh)

    inside_votes = np.zeros(len(centers), dtype=np.int64)
    for axis in range(3):
        inside_votes += _parity_along_axis(mesh, dims, axes, axis)
    sign = np.where(inside_votes >= 2, -1.0, 1.0)
    values = (sign * unsigned).reshape(dims)
    return SdfGrid(origin, voxel, dims, values, pad)


def _parity_along_axis(mesh: TriMesh, dims, axes, axis: int) -> np.ndarray:
    """1 where the cell center is inside by ray parity along the given axis."""
    other = [a for a in range(3) if a != axis]
    u_axis, v_axis = other
    tri = mesh.vertices[mesh.faces]
    crossings = _column_crossings(
        np.ascontiguousarray(tri[:, :, u_axis]),
        np.ascontiguousarray(tri[:, :, v_axis]),
        np.ascontiguousarray(tri[:, :, axis]),
        axes[u_axis],
        axes[v_axis],
    )
    inside = np.zeros(dims, dtype=np.int64)
    w_centers = axes[axis]
    n_v = len(axes[v_axis])
    for iu in range(dims[u_axis]):
        for iv in range(n_v):
            zs = crossings[iu * n_v + iv]
            if not zs:
                continue
            zs = np.sort(np.array(zs))
            above = len(zs) - np.searchsorted(zs, w_centers, side="right")
            idx: list = [slice(None)] * 3
            idx[u_axis] = iu
            idx[v_axis] = iv
            inside[tuple(idx)] = (above % 2).astype(np.int64)
    return inside.ravel()


def _column_crossings(tu, tv, tw, u_centers, v_centers):
    """For each (u, v) grid column, the w-coordinates where triangles cross it."""
    n_u, n_v = len(u_centers), len(v_centers)
    du = u_centers[1] - u_centers[0] if n_u > 1 else 1.0
    dv = v_centers[1] - v_centers[0] if n_v > 1 else 1.0
    cols: list[list[float]] = [[] for _ in range(n_u * n_v)]
    iu0 = np.clip(np.ceil((tu.min(axis=1) - u_centers[0]) / du), 0, n_u).astype(np.int64)
    iu1 = np.clip(np.floor((tu.max(axis=1) - u_centers[0]) / du), -1, n_u - 1).astype(np.int64)
    iv0 = np.clip(np.ceil((tv.min(axis=1) - v_centers[0]) / dv), 0, n_v).astype(np.int64)
    iv1 = np.clip(np.floor((tv.max(axis=1) - v_centers[0]) / dv), -1, n_v - 1).astype(np.int64)
    for f in range(len(tu)):
        for iu in range(iu0[f], iu1[f] + 1):
            for iv in range(iv0[f], iv1[f] + 1):
                w = _line_triangle_w(u_centers[iu], v_centers[iv], tu[f], tv[f], tw[f])
                if w is not None:
                    cols[iu * n_v + iv].append(w)
    return cols


def _line_triangle_w(u, v, tu, tv, tw):
    """Crossing w of the axis-parallel line (u, v) with a triangle, or None."""
    d1u, d1v = tu[1] - tu[0], tv[1] - tv[0]
    d2u, d2v = tu[2] - tu[0], tv[2] - tv[0]
    det = d1u * d2v - d1v * d2u
    if det == 0.0:
        return None
    pu, pv = u - tu[0], v - tv[0]
    a = (pu * d2v - pv * d2u) / det
    b = (d1u * pv - d1v * pu) / det
    if a < 0.0 or b < 0.0 or a + b > 1.0:
        return None
    return tw[0] + a * (tw[1] - tw[0]) + b * (tw[2] - tw[0])


def _cell_coords(grid: SdfGrid, p: np.ndarray):
    c = (p - grid.origin) / grid.voxel - 0.5
    c = np.minimum(np.maximum(c, 0.0), np.asarray(grid.dims, dtype=np.float64) - 1.0)
    i0 = np.minimum(c.astype(np.int64), np.asarray(grid.dims) - 2)
    frac = c - i0
    return i0, frac


def _trilinear(values: np.ndarray, i0, frac):
    x, y, z = i0
    fx, fy, fz = frac
    c00 = values[x, y, z] * (1 - fx) + values[x + 1, y, z] * fx
    c10 = values[x, y + 1, z] * (1 - fx) + values[x + 1, y + 1, z] * fx
    c01 = values[x, y, z + 1] * (1 - fx) + values[x + 1, y, z + 1] * fx
    c11 = values[x, y + 1, z + 1] * (1 - fx) + values[x + 1, y + 1, z + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sample(grid: SdfGrid, p) -> tuple[float, np.ndarray, bool]:
    """Trilinear signed distance and unit normal at p.

    Points outside the grid clamp to the boundary cells. A flat gradient
    region returns the +x axis with the degeneracy flag set.
    """
    p = np.asarray(p, dtype=np.float64)
    i0, frac = _cell_coords(grid, p)
    delta = float(_trilinear(grid.values, i0, frac))
    ggrid = grid.gradient_grid()
    n = np.array([_trilinear(ggrid[..., a], i0, frac) for a in range(3)])
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return delta, np.array([1.0, 0.0, 0.0]), True
    return delta, n / norm, False


def sample_values(grid: SdfGrid, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(len(points))
    for i, p in enumerate(points):
        i0, frac = _cell_coords(grid, p)
        out[i] = _trilinear(grid.values, i0, frac)
    return out


def sample_with_gradient(grid: SdfGrid, p) -> tuple[float, np.ndarray]:
    """Value plus the exact gradient of the trilinear interpolant.

    This is the derivative used by penalty terms; facet boundaries use the
    one-sided derivative from the containing cell.
    """
    p = np.asarray(p, dtype=np.float64)
    i0, frac = _cell_coords(grid, p)
    x, y, z = i0
    fx, fy, fz = frac
    v = grid.values
    c = np.array(
        [
            [[v[x, y, z], v[x, y, z + 1]], [v[x, y + 1, z], v[x, y + 1, z + 1]]],
            [[v[x + 1, y, z], v[x + 1, y, z + 1]], [v[x + 1, y + 1, z], v[x + 1, y + 1, z + 1]]],
        ]
    )
    value = float(_trilinear(grid.values, i0, frac))
    wy = np.array([1 - fy, fy])
    wz = np.array([1 - fz, fz])
    wx = np.array([1 - fx, fx])
    dx = ((c[1] - c[0]) * np.outer(wy, wz)).sum()
    dy = ((c[:, 1] - c[:, 0]) * np.outer(wx, wz)).sum()
    dz = ((c[:, :, 1] - c[:, :, 0]) * np.outer(wx, wy)).sum()
    return value, np.array([dx, dy, dz]) / grid.voxel
