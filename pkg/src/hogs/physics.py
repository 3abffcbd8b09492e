"""Physics-aware optimization: contact-restricted attraction/repulsion terms
plus the image objective, minimized with per-class adaptive-moment updates.

Attraction is a mutual nearest-mean pull between contact Gaussians and object
Gaussians; repulsion penalizes signed-distance penetration sampled from the
precomputed voxel grid. Both act on Gaussian means only. Physics terms are
ramped in after a photometric warm-up since cold-start physics on an
unconverged scene destabilizes means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import splat
from .gscene import ComposedScene, DensifyConfig, densify_and_prune
from .mathcore import quat_normalize
from .objtrack import TriMesh
from .sdfgrid import SdfGrid, point_mesh_distance, sample, sample_with_gradient


@dataclass
class LossWeights:
    lambda_ssim: float = 0.5
    lambda_lpips: float = 0.1
    lambda_mask: float = 0.3
    lambda_attr: float = 0.01
    lambda_rep: float = 0.01

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_lpips", "lambda_mask", "lambda_attr", "lambda_rep"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_json(self) -> dict:
        return {
            "lambda_ssim": self.lambda_ssim,
            "lambda_lpips": self.lambda_lpips,
            "lambda_mask": self.lambda_mask,
            "lambda_attr": self.lambda_attr,
            "lambda_rep": self.lambda_rep,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LossWeights":
        return cls(**obj)


@dataclass(frozen=True)
class ContactSet:
    indices: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def validate_range(self, n: int) -> None:
        if len(self.indices) and (self.indices[0] < 0 or self.indices[-1] >= n):
            raise ValueError("contact indices out of range")


def contact_oracle(points: np.ndarray, mesh: TriMesh, threshold: float) -> ContactSet:
    """Indices whose unsigned distance to the mesh surface is within threshold."""
    if threshold <= 0:
        raise ValueError("contact threshold must be positive")
    d = point_mesh_distance(np.asarray(points, dtype=np.float64), mesh)
    return ContactSet(np.flatnonzero(d <= threshold))


def attraction_loss(
    human_means: np.ndarray,
    contacts: np.ndarray,
    object_means: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mutual nearest-mean distance between the contact set and the object set.

    Returns the loss and gradients wrt all human means and all object means.
    Argmin ties resolve to the lowest index; coincident pairs contribute a
    zero subgradient.
    """
    human_means = np.asarray(human_means, dtype=np.float64)
    object_means = np.asarray(object_means, dtype=np.float64)
    d_human = np.zeros_like(human_means)
    d_object = np.zeros_like(object_means)
    contacts = np.asarray(contacts, dtype=np.int64)
    if len(contacts) == 0 or len(object_means) == 0:
        return 0.0, d_human, d_object
    ch = human_means[contacts]
    diff = ch[:, None, :] - object_means[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    n_c = len(contacts)
    n_o = len(object_means)

    j_star = np.argmin(dist, axis=1)
    loss1 = float(dist[np.arange(n_c), j_star].mean())
    for row, i in enumerate(contacts):
        j = j_star[row]
        d = dist[row, j]
        if d > 1e-12:
            g = diff[row, j] / d / n_c
            d_human[i] += g
            d_object[j] -= g

    i_star = np.argmin(dist, axis=0)
    loss2 = float(dist[i_star, np.arange(n_o)].mean())
    for j in range(n_o):
        row = i_star[j]
        d = dist[row, j]
        if d > 1e-12:
            g = -diff[row, j] / d / n_o
            d_object[j] += g
            d_human[contacts[row]] -= g
    return loss1 + loss2, d_human, d_object


def repulsion_loss(
    human_means: np.ndarray,
    contacts: np.ndarray,
    grid: SdfGrid,
) -> tuple[float, np.ndarray]:
    """Mean penetration depth over the contact set, with unit interpolated normals.

    Only negative signed distances are penalized; the gradient chains through
    the trilinear interpolant.
    """
    human_means = np.asarray(human_means, dtype=np.float64)
    d_human = np.zeros_like(human_means)
    contacts = np.asarray(contacts, dtype=np.int64)
    if len(contacts) == 0:
        return 0.0, d_human
    loss = 0.0
    n_c = len(contacts)
    for i in contacts:
        delta, grad = sample_with_gradient(grid, human_means[i])
        _, normal, _ = sample(grid, human_means[i])
        factor = float(normal @ normal)  # unit by the sampler contract
        if delta < 0:
            loss += -delta * factor / n_c
            d_human[i] += -grad * factor / n_c
    return float(loss), d_human


def total_loss(
    l_image: float,
    l_ssim: float,
    l_lpips: float,
    l_mask: float,
    l_attr: float,
    l_rep: float,
    w: LossWeights,
) -> float:
    """Weighted objective; the perceptual term is accepted but contributes zero
    (no pretrained network in scope)."""
    del l_lpips
    return float(
        l_image
        + w.lambda_ssim * l_ssim
        + w.lambda_lpips * 0.0
        + w.lambda_mask * l_mask
        + w.lambda_attr * l_attr
        + w.lambda_rep * l_rep
    )


def mean_penetration(grid: SdfGrid, means: np.ndarray, contacts: np.ndarray) -> float:
    contacts = np.asarray(contacts, dtype=np.int64)
    if len(contacts) == 0:
        return 0.0
    depths = [max(0.0, -sample(grid, means[i])[0]) for i in contacts]
    return float(np.mean(depths))


def penetration_fraction_below(
    grid: SdfGrid, means: np.ndarray, contacts: np.ndarray, level: float
) -> float:
    """Fraction of contact Gaussians with signed distance below the level."""
    contacts = np.asarray(contacts, dtype=np.int64)
    if len(contacts) == 0:
        return 0.0
    deltas = np.array([sample(grid, means[i])[0] for i in contacts])
    return float(np.mean(deltas < level))


def mean_nearest_object_distance(
    human_means: np.ndarray, contacts: np.ndarray, object_means: np.ndarray
) -> float:
    contacts = np.asarray(contacts, dtype=np.int64)
    if len(contacts) == 0 or len(object_means) == 0:
        return 0.0
    diff = human_means[contacts][:, None, :] - object_means[None, :, :]
    return float(np.linalg.norm(diff, axis=2).min(axis=1).mean())


@dataclass
class OptimizeConfig:
    iterations: int = 2000
    lr_means: float = 2e-3
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity_logits: float = 5e-2
    lr_colors: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_fraction: float = 0.3  # photometric only
    ramp_fraction: float = 0.1  # linear ramp of the physics weights
    densify_enabled: bool = True
    densify_start: int = 100
    densify_interval: int = 100
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    max_gaussians: int = 20000
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    photometric: bool = True  # image terms off isolates the physics losses
    seed: int = 0

    def physics_scale(self, iteration: int) -> float:
        """0 during warm-up, linear ramp, then 1."""
        start = self.warmup_fraction * self.iterations
        span = max(self.ramp_fraction * self.iterations, 1e-12)
        return float(np.clip((iteration - start) / span, 0.0, 1.0))


class OptimizeAbort(RuntimeError):
    def __init__(self, iteration: int, record: dict):
        self.iteration = iteration
        self.record = record
        super().__init__(f"non-finite loss at iteration {iteration}: {json.dumps(record)}")


class _Adam:
    def __init__(self, shape, lr, b1, b2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return -self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _logit(x):
    x = np.clip(x, 1e-6, 1 - 1e-6)
    return np.log(x / (1 - x))


def optimize(
    scene: ComposedScene,
    views: list[tuple[splat.Camera, np.ndarray, np.ndarray]],
    grid: SdfGrid | None,
    weights: LossWeights,
    cfg: OptimizeConfig,
    log_stream=None,
) -> tuple[ComposedScene, list[dict]]:
    """Optimize all Gaussian parameters under image and physics losses.

    views holds (camera, ground-truth image, ground-truth mask) triples; the
    per-view losses are averaged. Returns the optimized scene and one metrics
    record per iteration (optionally streamed as JSON lines).
    """
    if not views:
        raise ValueError("at least one view is required")
    if cfg.iterations == 0:
        return scene.copy(), []
    scene = scene.copy()
    rng = np.random.default_rng(cfg.seed)
    metrics: list[dict] = []
    opts = _make_optimizers(scene, cfg)

    for it in range(cfg.iterations):
        record, grads, screen_norms = _loss_and_grads(scene, views, grid, weights, cfg, it)
        record["iter"] = it
        record["n_gaussians"] = len(scene)
        if not np.isfinite(record["total"]):
            raise OptimizeAbort(it, record)
        metrics.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record, sort_keys=True) + "\n")

        _apply_updates(scene, grads, opts)

        if (
            cfg.densify_enabled
            and cfg.physics_scale(it) == 0.0
            and it >= cfg.densify_start
            and (it - cfg.densify_start) % cfg.densify_interval == 0
            and len(scene) < cfg.max_gaussians
        ):
            scene, info = densify_and_prune(scene, screen_norms, cfg.densify, rng)
            if info["pruned"] or info["cloned"] or info["split"]:
                opts = _make_optimizers(scene, cfg)
    return scene, metrics


def _make_optimizers(scene: ComposedScene, cfg: OptimizeConfig) -> dict:
    n = len(scene)
    return {
        "means": _Adam((n, 3), cfg.lr_means, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        "quats": _Adam((n, 4), cfg.lr_quats, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        "log_scales": _Adam((n, 3), cfg.lr_log_scales, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        "opacity_logits": _Adam(
            (n,), cfg.lr_opacity_logits, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        ),
        "colors": _Adam((n, 3), cfg.lr_colors, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
    }


def _loss_and_grads(scene, views, grid, weights, cfg, iteration):
    n = len(scene)
    n_h = len(scene.human)
    g_means = np.zeros((n, 3))
    g_quats = np.zeros((n, 4))
    g_scales = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros((n, 3))
    screen_norms = np.zeros(n)
    l1_sum = ssim_sum = mask_sum = 0.0
    n_views = len(views)
    if cfg.photometric:
        for cam, gt_img, gt_mask in views:
            out = splat.rasterize(scene, cam, background=cfg.background, retain=True)
            l1_sum += splat.loss_l1(out.color, gt_img)
            ssim_sum += splat.loss_ssim(out.color, gt_img)
            mask_sum += splat.loss_mask(out.alpha, gt_mask)
            d_img = (
                splat.loss_l1_grad(out.color, gt_img)
                + weights.lambda_ssim * splat.loss_ssim_grad(out.color, gt_img)
            ) / n_views
            d_alpha = weights.lambda_mask * splat.loss_mask_grad(out.alpha, gt_mask) / n_views
            g = splat.backward(out, d_img, d_alpha)
            g_means += g.means
            g_quats += g.quats
            g_scales += g.scales
            g_opac += g.opacities
            g_colors += g.colors
            screen_norms += np.linalg.norm(g.screen_means, axis=1)
    l1 = l1_sum / n_views
    ssim = ssim_sum / n_views
    mask = mask_sum / n_views
    screen_norms /= n_views

    phys = cfg.physics_scale(iteration)
    attr = rep = 0.0
    if phys > 0.0 and len(scene.contacts):
        means_h = scene.human.means
        means_o = scene.object.means
        if weights.lambda_attr > 0:
            attr, d_h, d_o = attraction_loss(means_h, scene.contacts, means_o)
            g_means[:n_h] += phys * weights.lambda_attr * d_h
            g_means[n_h:] += phys * weights.lambda_attr * d_o
        if weights.lambda_rep > 0 and grid is not None:
            rep, d_h = repulsion_loss(means_h, scene.contacts, grid)
            g_means[:n_h] += phys * weights.lambda_rep * d_h
    total = total_loss(l1, ssim, 0.0, mask, phys * attr, phys * rep, weights)
    record = {
        "l1": l1,
        "ssim": ssim,
        "mask": mask,
        "attr": attr,
        "rep": rep,
        "phys_scale": phys,
        "total": total,
    }
    grads = {
        "means": g_means,
        "quats": g_quats,
        "scales": g_scales,
        "opacities": g_opac,
        "colors": g_colors,
    }
    return record, grads, screen_norms


def _apply_updates(scene: ComposedScene, grads: dict, opts: dict) -> None:
    n_h = len(scene.human)
    means, quats, scales, opac, colors = scene.packed()

    means = means + opts["means"].step(grads["means"])
    quats = quat_normalize(quats + opts["quats"].step(grads["quats"]))
    log_scales = np.log(scales) + opts["log_scales"].step(grads["scales"] * scales)
    scales = np.exp(np.clip(log_scales, np.log(1e-6), np.log(1e3)))
    logits = _logit(opac) + opts["opacity_logits"].step(grads["opacities"] * opac * (1 - opac))
    opac = 1.0 / (1.0 + np.exp(-logits))
    colors = np.clip(colors + opts["colors"].step(grads["colors"]), 0.0, 1.0)

    scene.human.means[:] = means[:n_h]
    scene.human.quats[:] = quats[:n_h]
    scene.human.scales[:] = scales[:n_h]
    scene.human.opacities[:] = opac[:n_h]
    scene.human.colors[:] = colors[:n_h]
    scene.object.means[:] = means[n_h:]
    scene.object.quats[:] = quats[n_h:]
    scene.object.scales[:] = scales[n_h:]
    scene.object.opacities[:] = opac[n_h:]
    scene.object.colors[:] = colors[n_h:]


def smoothed(series: list[float], window: int = 50) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if len(x) == 0:
        return x
    w = min(window, len(x))
    kernel = np.ones(w) / w
    return np.convolve(x, kernel, mode="valid")
