"""Sparse-view pose refinement with occlusion-driven dynamic view weighting.

Each view contributes a squared reprojection cost plus quadratic pose/shape
regularizers; views are weighted by softmax(-alpha * occlusion rate) and the
weighted total is minimized by damped Gauss-Newton with a backtracking
gradient-descent fallback. The view weights are treated as locally constant
when differentiating (they are piecewise constant in the pose).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyTemplate, Pose, fk_joint_jacobian, forward_kinematics
from .mathcore import softmax
from .splat import Camera
from .util import read_json, write_json


@dataclass
class ViewObservation:
    camera: Camera
    joints_2d: np.ndarray  # (K, 2) detected joint pixels
    mask: np.ndarray | None = None  # (H, W) binary human mask
    visibility: np.ndarray | None = None  # (K,) bits, alternative to a mask
    valid: np.ndarray | None = None  # (K,) detection confidence flags

    def __post_init__(self):
        self.joints_2d = np.asarray(self.joints_2d, dtype=np.float64)
        if not np.all(np.isfinite(self.joints_2d)):
            raise ValueError("joint detections must be finite")
        if self.valid is None:
            self.valid = np.ones(len(self.joints_2d), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != (self.camera.height, self.camera.width):
                raise ValueError("mask dimensions must equal the camera image dimensions")
        if self.visibility is not None:
            self.visibility = np.asarray(self.visibility, dtype=bool)


@dataclass
class RefineConfig:
    alpha: float = 5.0
    lambda_theta: float = 1.0
    lambda_beta: float = 0.001
    lambda_1: float = 5.0
    lambda_2: float = 5.0
    lambda_3: float = 0.001
    max_iters: int = 100
    step: float = 1.0
    tol: float = 1e-10

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for name in ("lambda_theta", "lambda_beta", "lambda_1", "lambda_2", "lambda_3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def project_joints(joints_3d: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection; non-positive depth flags the joint invalid."""
    joints_3d = np.asarray(joints_3d, dtype=np.float64)
    t = joints_3d @ cam.w2c[:3, :3].T + cam.w2c[:3, 3]
    valid = t[:, 2] > cam.near
    z = np.where(valid, t[:, 2], 1.0)
    pix = np.stack([cam.fx * t[:, 0] / z + cam.cx, cam.fy * t[:, 1] / z + cam.cy], axis=1)
    return pix, valid


def posed_joints(template: BodyTemplate, pose: Pose) -> np.ndarray:
    return forward_kinematics(template, pose).posed_joints + pose.trans


def per_view_cost(template: BodyTemplate, pose: Pose, obs: ViewObservation, cfg: RefineConfig) -> float:
    """Squared reprojection error over valid joints plus quadratic regularizers."""
    pix, proj_valid = project_joints(posed_joints(template, pose), obs.camera)
    use = obs.valid & proj_valid
    r = pix[use] - obs.joints_2d[use]
    return float(
        np.sum(r**2)
        + cfg.lambda_theta * np.sum(pose.theta**2)
        + cfg.lambda_beta * np.sum(pose.beta**2)
    )


def occlusion_rate(template: BodyTemplate, pose: Pose, obs: ViewObservation) -> float:
    """1 - visible/K; a joint is visible when its projection lands in the mask."""
    k = template.joint_count
    if obs.visibility is not None:
        return 1.0 - float(np.count_nonzero(obs.visibility)) / k
    pix, proj_valid = project_joints(posed_joints(template, pose), obs.camera)
    visible = 0
    h, w = obs.camera.height, obs.camera.width
    for j in range(k):
        if not proj_valid[j]:
            continue
        ix = int(np.floor(pix[j, 0]))
        iy = int(np.floor(pix[j, 1]))
        if 0 <= ix < w and 0 <= iy < h:
            if obs.mask is None or obs.mask[iy, ix] > 0.5:
                visible += 1
    return 1.0 - visible / k


def dynamic_weights(rates, alpha: float) -> np.ndarray:
    """softmax(-alpha * occlusion rate): sums to 1, decreasing in each rate."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return softmax(-alpha * np.asarray(rates, dtype=np.float64))


def total_cost(
    template: BodyTemplate,
    pose: Pose,
    observations: list[ViewObservation],
    cfg: RefineConfig,
) -> float:
    if not observations:
        raise ValueError("at least one view is required")
    rates = [occlusion_rate(template, pose, o) for o in observations]
    d = dynamic_weights(rates, cfg.alpha)
    costs = np.array([per_view_cost(template, pose, o, cfg) for o in observations])
    return float(d @ costs)


def _reprojection_terms(template, pose, observations, cfg):
    """Residuals and Jacobian blocks for every view at the current pose."""
    k = template.joint_count
    fk_jac = fk_joint_jacobian(template, pose)  # (K, 3, K, 3)
    joints = posed_joints(template, pose)
    rates = [occlusion_rate(template, pose, o) for o in observations]
    d = dynamic_weights(rates, cfg.alpha)
    rows_r = []
    rows_j = []
    n_theta = 3 * k
    n_beta = template.shape_count
    for obs, w in zip(observations, d):
        cam = obs.camera
        t = joints @ cam.w2c[:3, :3].T + cam.w2c[:3, 3]
        pix, proj_valid = project_joints(joints, cam)
        use = obs.valid & proj_valid
        sw = np.sqrt(w)
        for j in np.flatnonzero(use):
            z = t[j, 2]
            dproj = np.array(
                [
                    [cam.fx / z, 0.0, -cam.fx * t[j, 0] / z**2],
                    [0.0, cam.fy / z, -cam.fy * t[j, 1] / z**2],
                ]
            ) @ cam.w2c[:3, :3]
            jac_theta = (dproj @ fk_jac[j].reshape(3, n_theta)).reshape(2, n_theta)
            row = np.zeros((2, n_theta + n_beta + 3))
            row[:, :n_theta] = jac_theta
            row[:, n_theta + n_beta :] = dproj
            rows_j.append(sw * row)
            rows_r.append(sw * (pix[j] - obs.joints_2d[j]))
    s = float(np.sum(d))
    return rows_r, rows_j, s, d


def total_cost_grad(
    template: BodyTemplate,
    pose: Pose,
    observations: list[ViewObservation],
    cfg: RefineConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradient wrt (theta, beta, trans), view weights held fixed."""
    rows_r, rows_j, s, _ = _reprojection_terms(template, pose, observations, cfg)
    n_theta = 3 * template.joint_count
    n_beta = template.shape_count
    grad = np.zeros(n_theta + n_beta + 3)
    for r, jrow in zip(rows_r, rows_j):
        grad += 2.0 * jrow.T @ r
    grad[:n_theta] += 2.0 * s * cfg.lambda_theta * pose.theta.ravel()
    grad[n_theta : n_theta + n_beta] += 2.0 * s * cfg.lambda_beta * pose.beta
    return (
        grad[:n_theta].reshape(-1, 3),
        grad[n_theta : n_theta + n_beta],
        grad[n_theta + n_beta :],
    )


@dataclass
class RefineResult:
    pose: Pose
    joints_3d: np.ndarray  # (K, 3) optimized joints, shared across views
    cost_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


class DivergenceError(RuntimeError):
    pass


def _pack(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.theta.ravel(), pose.beta, pose.trans])


def _unpack(x: np.ndarray, template: BodyTemplate) -> Pose:
    k = template.joint_count
    b = template.shape_count
    return Pose(x[: 3 * k].reshape(k, 3).copy(), x[3 * k : 3 * k + b].copy(), x[3 * k + b :].copy())


def refine(
    template: BodyTemplate,
    initial: Pose,
    observations: list[ViewObservation],
    cfg: RefineConfig,
) -> RefineResult:
    """Damped Gauss-Newton descent on the weighted multi-view cost.

    Accepted iterations never increase the cost; if neither the Gauss-Newton
    step nor a backtracked gradient step decreases it, the solve stops.
    """
    if not observations:
        raise ValueError("at least one view is required")
    x = _pack(initial)
    pose = _unpack(x, template)
    cost = total_cost(template, pose, observations, cfg)
    if not np.isfinite(cost):
        raise DivergenceError(f"non-finite cost at the initial pose: {cost}")
    result = RefineResult(pose, posed_joints(template, pose), [cost])
    damping = 1e-6
    n_theta = 3 * template.joint_count
    n_beta = template.shape_count
    for it in range(cfg.max_iters):
        rows_r, rows_j, s, _ = _reprojection_terms(template, pose, observations, cfg)
        dim = n_theta + n_beta + 3
        jtj = np.zeros((dim, dim))
        jtr = np.zeros(dim)
        for r, jrow in zip(rows_r, rows_j):
            jtj += jrow.T @ jrow
            jtr += jrow.T @ r
        reg = np.zeros(dim)
        reg[:n_theta] = s * cfg.lambda_theta
        reg[n_theta : n_theta + n_beta] = s * cfg.lambda_beta
        jtj += np.diag(reg)
        jtr += reg * x
        grad = 2.0 * jtr
        if np.max(np.abs(grad)) < cfg.tol:
            break
        accepted = False
        for trial in range(2):
            if trial == 0:
                step = np.linalg.solve(jtj + damping * np.eye(dim), -jtr)
            else:
                step = -grad / max(np.linalg.norm(grad), 1e-12)
            t = cfg.step
            for _ in range(20):
                x_try = x + t * step
                pose_try = _unpack(x_try, template)
                cost_try = total_cost(template, pose_try, observations, cfg)
                if not np.isfinite(cost_try):
                    raise DivergenceError(
                        f"non-finite cost at iteration {it}: {cost_try}"
                    )
                if cost_try < cost:
                    x, pose, cost = x_try, pose_try, cost_try
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                damping = max(damping * 0.5, 1e-9)
                break
            damping *= 10.0
        result.cost_history.append(cost)
        result.iterations = it + 1
        if not accepted:
            break
        if len(result.cost_history) > 1:
            drop = result.cost_history[-2] - cost
            if 0 <= drop < cfg.tol * max(1.0, abs(cost)):
                break
    result.pose = pose
    result.joints_3d = posed_joints(template, pose)
    return result


def pose_parameter_vector(pose: Pose) -> np.ndarray:
    """Pose and shape stacked: the quantity compared by the joint-training loss."""
    return np.concatenate([pose.theta.ravel(), pose.beta])


def hpr_loss(
    reg_2d: np.ndarray,  # (N, K, 2) regressed detections per view
    gt_2d: np.ndarray,  # (N, K, 2)
    gt_3d: np.ndarray,  # (N, K, 3)
    opt_3d: np.ndarray,  # (N, K, 3) optimized joints per view
    reg_params: np.ndarray,  # (N, P) regressed pose/shape vectors per view
    opt_params: np.ndarray,  # (P,) optimized pose/shape vector
    cfg: RefineConfig,
) -> float:
    """Weighted sum of 2D, 3D and parameter-space residual norms per view."""
    reg_2d = np.asarray(reg_2d, dtype=np.float64)
    gt_2d = np.asarray(gt_2d, dtype=np.float64)
    gt_3d = np.asarray(gt_3d, dtype=np.float64)
    opt_3d = np.asarray(opt_3d, dtype=np.float64)
    reg_params = np.asarray(reg_params, dtype=np.float64)
    opt_params = np.asarray(opt_params, dtype=np.float64)
    l_2d = sum(np.linalg.norm(reg_2d[i] - gt_2d[i]) for i in range(len(reg_2d)))
    l_3d = sum(np.linalg.norm(gt_3d[i] - opt_3d[i]) for i in range(len(gt_3d)))
    l_h = sum(np.linalg.norm(reg_params[i] - opt_params) for i in range(len(reg_params)))
    return float(cfg.lambda_1 * l_2d + cfg.lambda_2 * l_3d + cfg.lambda_3 * l_h)


# ---------------------------------------------------------------------------
# observation fixtures


def save_observations(path: str | Path, observations: list[ViewObservation], camera_ids: list[str]) -> None:
    views = []
    base = Path(path).parent
    for i, (obs, cam_id) in enumerate(zip(observations, camera_ids)):
        entry: dict = {
            "camera_id": cam_id,
            "joints_2d": obs.joints_2d.tolist(),
            "valid": obs.valid.astype(int).tolist(),
        }
        if obs.visibility is not None:
            entry["visibility"] = obs.visibility.astype(int).tolist()
        if obs.mask is not None:
            mask_name = f"obs_mask_{i:02d}.npy"
            np.save(base / mask_name, obs.mask)
            entry["mask_path"] = mask_name
        views.append(entry)
    write_json(path, {"views": views})


def load_observations(path: str | Path, cameras_by_id: dict[str, Camera]) -> list[ViewObservation]:
    doc = read_json(path)
    base = Path(path).parent
    out = []
    for entry in doc["views"]:
        mask = None
        if "mask_path" in entry:
            mask = np.load(base / entry["mask_path"])
        visibility = None
        if "visibility" in entry:
            visibility = np.array(entry["visibility"], dtype=bool)
        out.append(
            ViewObservation(
                camera=cameras_by_id[entry["camera_id"]],
                joints_2d=np.array(entry["joints_2d"], dtype=np.float64),
                mask=mask,
                visibility=visibility,
                valid=np.array(entry["valid"], dtype=bool),
            )
        )
    return out
