"""Differentiable splatting: EWA projection, alpha compositing, image losses.

The forward pass projects 3D Gaussians to screen-space ellipses, sorts them
by depth (ties broken by index), bins them into pixel tiles and composites
front-to-back. The backward pass replays the compositing per pixel and chains
analytically through the projection into every Gaussian parameter. Pixels are
partitioned across workers and per-pixel accumulation is serial, so results
are bitwise identical for any thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange
from PIL import Image

from .mathcore import quat_normalize, quat_to_matrix
from .util import apply_thread_cap, read_json, write_json

TILE = 16
ALPHA_CLAMP = 0.999
TRANSMITTANCE_FLOOR = 1e-4
COV2D_DILATION = 0.3
CONDITION_LIMIT = 1e12
RADIUS_SIGMA = 3.0


@dataclass
class Camera:
    w2c: np.ndarray  # 4x4 world-to-camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64)
        if self.w2c.shape != (4, 4):
            raise ValueError("w2c must be 4x4")
        r = self.w2c[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation block of w2c must be orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        up=(0.0, 0.0, 1.0),
        fx: float = 80.0,
        fy: float | None = None,
        width: int = 64,
        height: int = 64,
        near: float = 0.01,
    ) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        fy = fx if fy is None else fy
        return cls(w2c, fx, fy, width / 2.0, height / 2.0, width, height, near)

    def to_json(self) -> dict:
        return {
            "w2c": self.w2c.ravel().tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(
            np.array(obj["w2c"], dtype=np.float64).reshape(4, 4),
            float(obj["fx"]),
            float(obj["fy"]),
            float(obj["cx"]),
            float(obj["cy"]),
            int(obj["width"]),
            int(obj["height"]),
            float(obj.get("near", 0.01)),
        )

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Camera":
        return cls.from_json(read_json(path))


@dataclass
class Projection:
    """Screen-space quantities for the subset of Gaussians that survive culling."""

    order: np.ndarray  # indices into the input arrays, depth sorted
    mean2d: np.ndarray  # (m, 2)
    conic: np.ndarray  # (m, 3) upper-triangular inverse covariance
    depth: np.ndarray
    bounds: np.ndarray  # (m, 4) int32 pixel ranges x0, x1, y0, y1
    cam_t: np.ndarray  # (m, 3) camera-space means
    jac: np.ndarray  # (m, 2, 3)
    cam_cov: np.ndarray  # (m, 3, 3) camera-space covariances
    rot_mats: np.ndarray  # (m, 3, 3)
    scale_mats: np.ndarray  # (m, 3, 3) rotation times diag(scale)
    skipped_singular: int


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W)
    background: np.ndarray
    skipped_singular: int
    ctx: dict | None = field(default=None, repr=False)


@dataclass
class ParamGrads:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    screen_means: np.ndarray  # (N, 2) gradient wrt projected centers, for densify stats


def _gaussian_arrays(gaussians):
    if hasattr(gaussians, "packed"):
        return gaussians.packed()
    return (
        np.ascontiguousarray(gaussians.means, dtype=np.float64),
        np.ascontiguousarray(gaussians.quats, dtype=np.float64),
        np.ascontiguousarray(gaussians.scales, dtype=np.float64),
        np.ascontiguousarray(gaussians.opacities, dtype=np.float64),
        np.ascontiguousarray(gaussians.colors, dtype=np.float64),
    )


def project_arrays(means: np.ndarray, quats: np.ndarray, scales: np.ndarray, cam: Camera) -> Projection:
    m_all = len(means)
    w_rot = cam.w2c[:3, :3]
    w_tr = cam.w2c[:3, 3]
    t = means @ w_rot.T + w_tr
    depth = t[:, 2]
    in_front = depth > cam.near

    rot = quat_to_matrix(quat_normalize(quats))
    m3 = rot * scales[:, None, :]
    sigma = m3 @ m3.transpose(0, 2, 1)
    cam_cov = np.einsum("ij,mjk,lk->mil", w_rot, sigma, w_rot)

    z = np.where(in_front, depth, 1.0)
    jac = np.zeros((m_all, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * t[:, 0] / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * t[:, 1] / z**2
    cov2d = jac @ cam_cov @ jac.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    half_tr = (a + c) / 2.0
    disc = np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    lam_max = half_tr + disc
    lam_min = half_tr - disc
    ok = (det > 0) & (lam_min > 0) & (lam_max <= CONDITION_LIMIT * lam_min)
    skipped = int(np.count_nonzero(in_front & ~ok))
    valid = in_front & ok

    safe_det = np.where(valid, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    mean2d = np.stack(
        [cam.fx * t[:, 0] / z + cam.cx, cam.fy * t[:, 1] / z + cam.cy], axis=1
    )
    radius = RADIUS_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))

    x0 = np.clip(np.ceil(mean2d[:, 0] - radius - 0.5), 0, cam.width).astype(np.int32)
    x1 = np.clip(np.floor(mean2d[:, 0] + radius - 0.5) + 1, 0, cam.width).astype(np.int32)
    y0 = np.clip(np.ceil(mean2d[:, 1] - radius - 0.5), 0, cam.height).astype(np.int32)
    y1 = np.clip(np.floor(mean2d[:, 1] + radius - 0.5) + 1, 0, cam.height).astype(np.int32)
    valid &= (x1 > x0) & (y1 > y0)

    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((idx, depth[idx]))]
    return Projection(
        order=order,
        mean2d=np.ascontiguousarray(mean2d[order]),
        conic=np.ascontiguousarray(conic[order]),
        depth=np.ascontiguousarray(depth[order]),
        bounds=np.ascontiguousarray(np.stack([x0, x1, y0, y1], axis=1)[order]),
        cam_t=np.ascontiguousarray(t[order]),
        jac=np.ascontiguousarray(jac[order]),
        cam_cov=np.ascontiguousarray(cam_cov[order]),
        rot_mats=np.ascontiguousarray(rot[order]),
        scale_mats=np.ascontiguousarray(m3[order]),
        skipped_singular=skipped,
    )


def project_gaussian(gaussian, cam: Camera):
    """Single-Gaussian projection: (mean2d, cov2d, depth) or None when culled."""
    means = np.asarray(gaussian.mean, dtype=np.float64)[None]
    quats = np.asarray(
        gaussian.rot.as_array() if hasattr(gaussian.rot, "as_array") else gaussian.rot,
        dtype=np.float64,
    )[None]
    scales = np.asarray(gaussian.scale, dtype=np.float64)[None]
    proj = project_arrays(means, quats, scales, cam)
    if len(proj.order) == 0:
        return None
    qa, qb, qc = proj.conic[0]
    det = qa * qc - qb * qb
    cov2d = np.array([[qc, -qb], [-qb, qa]]) / det
    return proj.mean2d[0].copy(), cov2d, float(proj.depth[0])


def _bin_tiles(bounds: np.ndarray, width: int, height: int):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    offsets, items = _bin_tiles_kernel(bounds, tiles_x, tiles_y)
    return tiles_x, tiles_y, offsets, items


@njit(cache=True)
def _bin_tiles_kernel(bounds, tiles_x, tiles_y):
    n = bounds.shape[0]
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in range(n):
        tx0 = bounds[g, 0] // TILE
        tx1 = (bounds[g, 1] - 1) // TILE
        ty0 = bounds[g, 2] // TILE
        ty1 = (bounds[g, 3] - 1) // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[1 + ty * tiles_x + tx] += 1
    offsets = np.empty(n_tiles + 1, dtype=np.int64)
    offsets[0] = 0
    for i in range(n_tiles):
        offsets[i + 1] = offsets[i] + counts[i + 1]
    items = np.empty(offsets[n_tiles], dtype=np.int32)
    cursor = offsets[:-1].copy()
    for g in range(n):
        tx0 = bounds[g, 0] // TILE
        tx1 = (bounds[g, 1] - 1) // TILE
        ty0 = bounds[g, 2] // TILE
        ty1 = (bounds[g, 3] - 1) // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tid = ty * tiles_x + tx
                items[cursor[tid]] = g
                cursor[tid] += 1
    return offsets, items


@njit(parallel=True, cache=True)
def _forward_kernel(
    offsets, items, mean2d, conic, opacity, color, bounds,
    bg, width, height, tiles_x, tiles_y,
    out_color, out_alpha, out_tfinal, out_count,
):
    for tid in prange(tiles_x * tiles_y):
        ty = tid // tiles_x
        tx = tid % tiles_x
        y_lo = ty * TILE
        y_hi = min(y_lo + TILE, height)
        x_lo = tx * TILE
        x_hi = min(x_lo + TILE, width)
        start = offsets[tid]
        end = offsets[tid + 1]
        for py in range(y_lo, y_hi):
            v = py + 0.5
            for px in range(x_lo, x_hi):
                u = px + 0.5
                trans = 1.0
                r = 0.0
                g_ = 0.0
                b_ = 0.0
                count = 0
                for n in range(start, end):
                    if trans < TRANSMITTANCE_FLOOR:
                        break
                    gi = items[n]
                    if px < bounds[gi, 0] or px >= bounds[gi, 1]:
                        continue
                    if py < bounds[gi, 2] or py >= bounds[gi, 3]:
                        continue
                    dx = u - mean2d[gi, 0]
                    dy = v - mean2d[gi, 1]
                    power = (
                        -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy)
                        - conic[gi, 1] * dx * dy
                    )
                    alpha = opacity[gi] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    w = alpha * trans
                    r += color[gi, 0] * w
                    g_ += color[gi, 1] * w
                    b_ += color[gi, 2] * w
                    trans *= 1.0 - alpha
                    count += 1
                out_color[py, px, 0] = r + trans * bg[0]
                out_color[py, px, 1] = g_ + trans * bg[1]
                out_color[py, px, 2] = b_ + trans * bg[2]
                out_alpha[py, px] = 1.0 - trans
                out_tfinal[py, px] = trans
                out_count[py, px] = count


@njit(cache=True)
def _backward_kernel(
    offsets, items, mean2d, conic, opacity, color, bounds,
    bg, width, height, tiles_x, tiles_y,
    d_image, d_alpha,
    d_mean2d, d_conic, d_opacity, d_color,
):
    max_items = 0
    for tid in range(tiles_x * tiles_y):
        span = offsets[tid + 1] - offsets[tid]
        if span > max_items:
            max_items = span
    comp_idx = np.empty(max_items, dtype=np.int64)
    comp_alpha = np.empty(max_items)
    for tid in range(tiles_x * tiles_y):
        ty = tid // tiles_x
        tx = tid % tiles_x
        y_lo = ty * TILE
        y_hi = min(y_lo + TILE, height)
        x_lo = tx * TILE
        x_hi = min(x_lo + TILE, width)
        start = offsets[tid]
        end = offsets[tid + 1]
        for py in range(y_lo, y_hi):
            v = py + 0.5
            for px in range(x_lo, x_hi):
                u = px + 0.5
                # replay forward to collect composited entries
                trans = 1.0
                count = 0
                for n in range(start, end):
                    if trans < TRANSMITTANCE_FLOOR:
                        break
                    gi = items[n]
                    if px < bounds[gi, 0] or px >= bounds[gi, 1]:
                        continue
                    if py < bounds[gi, 2] or py >= bounds[gi, 3]:
                        continue
                    dx = u - mean2d[gi, 0]
                    dy = v - mean2d[gi, 1]
                    power = (
                        -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy)
                        - conic[gi, 1] * dx * dy
                    )
                    alpha = opacity[gi] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    comp_idx[count] = gi
                    comp_alpha[count] = alpha
                    trans *= 1.0 - alpha
                    count += 1
                t_final = trans
                dc0 = d_image[py, px, 0]
                dc1 = d_image[py, px, 1]
                dc2 = d_image[py, px, 2]
                da = d_alpha[py, px]
                if count == 0:
                    continue
                s0 = t_final * bg[0]
                s1 = t_final * bg[1]
                s2 = t_final * bg[2]
                t_after = t_final
                for ridx in range(count - 1, -1, -1):
                    gi = comp_idx[ridx]
                    alpha = comp_alpha[ridx]
                    one_m = 1.0 - alpha
                    t_i = t_after / one_m
                    w = alpha * t_i
                    dal = (
                        dc0 * (color[gi, 0] * t_i - s0 / one_m)
                        + dc1 * (color[gi, 1] * t_i - s1 / one_m)
                        + dc2 * (color[gi, 2] * t_i - s2 / one_m)
                        + da * (t_final / one_m)
                    )
                    d_color[gi, 0] += dc0 * w
                    d_color[gi, 1] += dc1 * w
                    d_color[gi, 2] += dc2 * w
                    if alpha < ALPHA_CLAMP:
                        d_opacity[gi] += (alpha / opacity[gi]) * dal
                        dpower = alpha * dal
                        dx = u - mean2d[gi, 0]
                        dy = v - mean2d[gi, 1]
                        qx = conic[gi, 0] * dx + conic[gi, 1] * dy
                        qy = conic[gi, 1] * dx + conic[gi, 2] * dy
                        d_mean2d[gi, 0] += dpower * qx
                        d_mean2d[gi, 1] += dpower * qy
                        d_conic[gi, 0] += dpower * (-0.5 * dx * dx)
                        d_conic[gi, 1] += dpower * (-dx * dy)
                        d_conic[gi, 2] += dpower * (-0.5 * dy * dy)
                    s0 += color[gi, 0] * w
                    s1 += color[gi, 1] * w
                    s2 += color[gi, 2] * w
                    t_after = t_i


def rasterize(gaussians, cam: Camera, background=(0.0, 0.0, 0.0), retain: bool = False) -> RenderOutput:
    """Composite the Gaussian set front-to-back over the given camera."""
    means, quats, scales, opacities, colors = _gaussian_arrays(gaussians)
    bg = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    out_color = np.empty((h, w, 3))
    out_alpha = np.empty((h, w))
    out_tfinal = np.empty((h, w))
    out_count = np.empty((h, w), dtype=np.int32)

    proj = project_arrays(means, quats, scales, cam)
    opac_s = np.ascontiguousarray(opacities[proj.order])
    colors_s = np.ascontiguousarray(colors[proj.order])
    tiles_x, tiles_y, offsets, items = _bin_tiles(proj.bounds, w, h)
    apply_thread_cap()
    _forward_kernel(
        offsets, items, proj.mean2d, proj.conic, opac_s, colors_s, proj.bounds,
        bg, w, h, tiles_x, tiles_y,
        out_color, out_alpha, out_tfinal, out_count,
    )
    ctx = None
    if retain:
        ctx = {
            "proj": proj,
            "opacities": opac_s,
            "colors": colors_s,
            "offsets": offsets,
            "items": items,
            "tiles": (tiles_x, tiles_y),
            "cam": cam,
            "n_input": len(means),
            "scales": np.ascontiguousarray(scales[proj.order]),
            "quats": np.ascontiguousarray(quats[proj.order]),
            "tfinal": out_tfinal,
            "count": out_count,
        }
    return RenderOutput(out_color, out_alpha, bg, proj.skipped_singular, ctx)


def backward(render: RenderOutput, d_image: np.ndarray, d_alpha: np.ndarray | None = None) -> ParamGrads:
    """Exact reverse of compositing and projection; gradients per input Gaussian."""
    if render.ctx is None:
        raise ValueError("rasterize(..., retain=True) is required before backward")
    ctx = render.ctx
    cam: Camera = ctx["cam"]
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (cam.height, cam.width, 3):
        raise ValueError("d_image dimensions do not match the render")
    if d_alpha is None:
        d_alpha = np.zeros((cam.height, cam.width))
    d_alpha = np.asarray(d_alpha, dtype=np.float64)
    if d_alpha.shape != (cam.height, cam.width):
        raise ValueError("d_alpha dimensions do not match the render")

    proj: Projection = ctx["proj"]
    m = len(proj.order)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opacity = np.zeros(m)
    d_color = np.zeros((m, 3))
    tiles_x, tiles_y = ctx["tiles"]
    _backward_kernel(
        ctx["offsets"], ctx["items"], proj.mean2d, proj.conic,
        ctx["opacities"], ctx["colors"], proj.bounds,
        render.background, cam.width, cam.height, tiles_x, tiles_y,
        d_image, d_alpha,
        d_mean2d, d_conic, d_opacity, d_color,
    )

    n = ctx["n_input"]
    grads = ParamGrads(
        means=np.zeros((n, 3)),
        quats=np.zeros((n, 4)),
        scales=np.zeros((n, 3)),
        opacities=np.zeros(n),
        colors=np.zeros((n, 3)),
        screen_means=np.zeros((n, 2)),
    )
    if m == 0:
        return grads

    # conic -> 2D covariance
    qa, qb, qc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    qm = np.empty((m, 2, 2))
    qm[:, 0, 0] = qa
    qm[:, 0, 1] = qb
    qm[:, 1, 0] = qb
    qm[:, 1, 1] = qc
    gmat = np.empty((m, 2, 2))
    gmat[:, 0, 0] = d_conic[:, 0]
    gmat[:, 0, 1] = d_conic[:, 1] / 2.0
    gmat[:, 1, 0] = d_conic[:, 1] / 2.0
    gmat[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -qm @ gmat @ qm  # symmetric

    # 2D covariance -> camera covariance and Jacobian
    jac = proj.jac
    d_jac = 2.0 * d_cov2d @ jac @ proj.cam_cov
    d_cam_cov = jac.transpose(0, 2, 1) @ d_cov2d @ jac

    # camera covariance -> world covariance -> rotation/scale
    w_rot = cam.w2c[:3, :3]
    d_sigma = np.einsum("ji,mjk,kl->mil", w_rot, d_cam_cov, w_rot)
    d_m3 = 2.0 * d_sigma @ proj.scale_mats
    d_rot = d_m3 * ctx["scales"][:, None, :]
    d_scale = np.einsum("mij,mij->mj", d_m3, proj.rot_mats)
    d_quat = _quat_vjp(ctx["quats"], d_rot)

    # screen mean and Jacobian -> camera-space mean
    t = proj.cam_t
    z = t[:, 2]
    fx, fy = cam.fx, cam.fy
    d_t = np.zeros((m, 3))
    d_t[:, 0] += d_mean2d[:, 0] * fx / z
    d_t[:, 1] += d_mean2d[:, 1] * fy / z
    d_t[:, 2] += -(d_mean2d[:, 0] * fx * t[:, 0] + d_mean2d[:, 1] * fy * t[:, 1]) / z**2
    d_t[:, 0] += d_jac[:, 0, 2] * (-fx / z**2)
    d_t[:, 1] += d_jac[:, 1, 2] * (-fy / z**2)
    d_t[:, 2] += (
        d_jac[:, 0, 0] * (-fx / z**2)
        + d_jac[:, 1, 1] * (-fy / z**2)
        + d_jac[:, 0, 2] * (2.0 * fx * t[:, 0] / z**3)
        + d_jac[:, 1, 2] * (2.0 * fy * t[:, 1] / z**3)
    )
    d_mean = d_t @ w_rot

    order = proj.order
    grads.means[order] = d_mean
    grads.quats[order] = d_quat
    grads.scales[order] = d_scale
    grads.opacities[order] = d_opacity
    grads.colors[order] = d_color
    grads.screen_means[order] = d_mean2d
    return grads


def _quat_vjp(quats: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain d(rotation matrix) to the raw quaternion through normalization."""
    q = quat_normalize(quats)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dr_dw = 2.0 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
    ).reshape(-1, 3, 3)
    dr_dx = 2.0 * np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1
    ).reshape(-1, 3, 3)
    dr_dy = 2.0 * np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1
    ).reshape(-1, 3, 3)
    dr_dz = 2.0 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1
    ).reshape(-1, 3, 3)
    d_hat = np.stack(
        [
            np.einsum("mij,mij->m", d_rot, dr_dw),
            np.einsum("mij,mij->m", d_rot, dr_dx),
            np.einsum("mij,mij->m", d_rot, dr_dy),
            np.einsum("mij,mij->m", d_rot, dr_dz),
        ],
        axis=1,
    )
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    return (d_hat - np.sum(d_hat * q, axis=1, keepdims=True) * q) / norms


# ---------------------------------------------------------------------------
# image losses


def loss_l1(img: np.ndarray, gt: np.ndarray) -> float:
    img, gt = _check_pair(img, gt)
    return float(np.mean(np.abs(img - gt)))


def loss_l1_grad(img: np.ndarray, gt: np.ndarray) -> np.ndarray:
    img, gt = _check_pair(img, gt)
    return np.sign(img - gt) / img.size


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _ssim_kernel() -> np.ndarray:
    ax = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


def _correlate_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, k.shape)
    return np.einsum("ijuv,uv->ij", win, k)


def _correlate_valid_adjoint(d_out: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    dx = np.zeros(shape)
    h_out, w_out = d_out.shape
    for u in range(k.shape[0]):
        for v in range(k.shape[1]):
            dx[u : u + h_out, v : v + w_out] += k[u, v] * d_out
    return dx


def _ssim_channel_stats(x: np.ndarray, y: np.ndarray, k: np.ndarray):
    mu_x = _correlate_valid(x, k)
    mu_y = _correlate_valid(y, k)
    sxx = _correlate_valid(x * x, k) - mu_x**2
    syy = _correlate_valid(y * y, k) - mu_y**2
    sxy = _correlate_valid(x * y, k) - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * sxy + c2
    b1 = mu_x**2 + mu_y**2 + c1
    b2 = sxx + syy + c2
    return mu_x, mu_y, a1, a2, b1, b2


def loss_ssim(img: np.ndarray, gt: np.ndarray) -> float:
    """1 - SSIM with an 11x11 Gaussian window over valid positions, channel mean."""
    img, gt = _check_pair(img, gt)
    if img.shape[0] < SSIM_WINDOW or img.shape[1] < SSIM_WINDOW:
        raise ValueError("images smaller than the SSIM window")
    k = _ssim_kernel()
    total = 0.0
    channels = 1 if img.ndim == 2 else img.shape[2]
    for ch in range(channels):
        x = img[..., ch] if img.ndim == 3 else img
        y = gt[..., ch] if img.ndim == 3 else gt
        _, _, a1, a2, b1, b2 = _ssim_channel_stats(x, y, k)
        total += float(np.mean(a1 * a2 / (b1 * b2)))
    return 1.0 - total / channels


def loss_ssim_grad(img: np.ndarray, gt: np.ndarray) -> np.ndarray:
    img, gt = _check_pair(img, gt)
    k = _ssim_kernel()
    grad = np.zeros_like(img, dtype=np.float64)
    channels = 1 if img.ndim == 2 else img.shape[2]
    for ch in range(channels):
        x = img[..., ch] if img.ndim == 3 else img
        y = gt[..., ch] if img.ndim == 3 else gt
        mu_x, mu_y, a1, a2, b1, b2 = _ssim_channel_stats(x, y, k)
        n_win = a1.size
        d_s = np.full(a1.shape, -1.0 / (n_win * channels))
        denom = b1 * b2
        d_a1 = d_s * a2 / denom
        d_a2 = d_s * a1 / denom
        d_b1 = -d_s * a1 * a2 / (b1 * denom)
        d_b2 = -d_s * a1 * a2 / (b2 * denom)
        d_mu_x = d_a1 * 2 * mu_y + d_b1 * 2 * mu_x
        d_sxy = d_a2 * 2.0
        d_sxx = d_b2
        # sxx = Sxx - mu_x^2, sxy = Sxy - mu_x mu_y
        d_mu_x += -2 * mu_x * d_sxx - mu_y * d_sxy
        d_x = (
            _correlate_valid_adjoint(d_mu_x, k, x.shape)
            + 2 * x * _correlate_valid_adjoint(d_sxx, k, x.shape)
            + y * _correlate_valid_adjoint(d_sxy, k, x.shape)
        )
        if img.ndim == 3:
            grad[..., ch] = d_x
        else:
            grad = d_x
    return grad


def loss_mask(alpha: np.ndarray, gt_mask: np.ndarray) -> float:
    alpha, gt_mask = _check_pair(alpha, gt_mask)
    return float(np.mean(np.abs(alpha - gt_mask)))


def loss_mask_grad(alpha: np.ndarray, gt_mask: np.ndarray) -> np.ndarray:
    alpha, gt_mask = _check_pair(alpha, gt_mask)
    return np.sign(alpha - gt_mask) / alpha.size


PSNR_CAP = 99.0


def psnr(img: np.ndarray, gt: np.ndarray) -> float:
    img, gt = _check_pair(img, gt)
    mse = float(np.mean((img - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# image files


def save_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode).save(str(path))


def load_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(str(path)), dtype=np.float64) / 255.0


def save_array(path: str | Path, img: np.ndarray) -> None:
    np.save(str(path), np.asarray(img, dtype=np.float64))


def load_array(path: str | Path) -> np.ndarray:
    return np.load(str(path))
