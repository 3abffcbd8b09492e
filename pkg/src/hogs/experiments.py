"""Paired A/B experiments isolating the physics losses.

Both experiments start from a ground-truth contact scene whose contact
Gaussians are displaced (into the object for the repulsion study, away from
it for the attraction study) and compare optimization with the studied term
enabled against the identical run with it disabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import ModulationNet, Pose, generate_toy_body
from .gscene import ComposedScene, compose, deform_human, init_from_vertices, init_human_gaussians
from .objtrack import RigidTransform, apply_transform, make_lumpy_blob
from .physics import (
    LossWeights,
    OptimizeConfig,
    contact_oracle,
    mean_nearest_object_distance,
    mean_penetration,
    optimize,
    penetration_fraction_below,
)
from .sdfgrid import build_sdf, sample
from .splat import Camera, rasterize
from .synth import BACKGROUND, body_colors, object_colors


@dataclass
class ContactBench:
    scene: ComposedScene  # ground-truth configuration (contacts resting on the object)
    views: list
    grid: object
    voxel: float


def build_contact_bench(
    seed: int = 0,
    grid_dims: int = 48,
    n_views: int = 4,
    image_size: int = 48,
    contact_threshold: float = 0.02,
) -> ContactBench:
    """Toy body resting against a lumpy object, with oracle contacts and GT views."""
    template = generate_toy_body(6, 0, seed=seed)
    net = ModulationNet.create(6, freq_count=4, hidden=32, seed=seed, init_scale=0.0)
    pose = Pose.rest(6, 0)

    blob = make_lumpy_blob(radius=0.07, seed=seed + 1, subdivisions=2)
    human = init_human_gaussians(template, colors=body_colors(template, seed + 2), opacity=0.95)
    posed = deform_human(compose(human, init_from_vertices(blob.vertices, blob.faces)),
                         template, pose, net)
    # place the object tangent to the posed body at mid-height, +x side
    verts = posed.human.means
    mid_y = 0.5 * template.joints[-1, 1]
    score = -np.abs(verts[:, 1] - mid_y) * 4.0 + verts[:, 0]
    anchor = verts[int(np.argmax(score))]
    n_hat = np.array([1.0, 0.0, 0.0])
    support = float(np.max(blob.vertices @ (-n_hat)))
    transform = RigidTransform(np.eye(3), anchor + n_hat * (support + 0.003))
    target_mesh = apply_transform(blob, transform)

    obj = init_from_vertices(
        target_mesh.vertices, target_mesh.faces,
        colors=object_colors(blob, seed + 3), opacity=0.95,
    )
    contacts = contact_oracle(verts, target_mesh, contact_threshold).indices
    scene = ComposedScene(posed.human, obj, contacts)

    grid = build_sdf(target_mesh, dims=grid_dims, pad=0.2)
    center = np.array([anchor[0] / 2, mid_y, 0.0])
    views = []
    for i in range(n_views):
        phi = 2 * np.pi * i / n_views
        eye = center + np.array([1.1 * np.cos(phi), 0.3, 1.1 * np.sin(phi)])
        cam = Camera.look_at(eye, center, up=(0, 1, 0), fx=55.0,
                             width=image_size, height=image_size)
        out = rasterize(scene, cam, background=BACKGROUND)
        views.append((cam, out.color, (out.alpha > 0.5).astype(np.float64)))
    return ContactBench(scene, views, grid, grid.voxel)


def displace_contacts(bench: ContactBench, depth: float, outward: bool) -> ComposedScene:
    """Move every contact mean to the given signed distance from the surface."""
    scene = bench.scene.copy()
    target = depth if outward else -depth
    for i in scene.contacts:
        p = scene.human.means[i]
        delta, normal, _ = sample(bench.grid, p)
        scene.human.means[i] = p + normal * (target - delta)
    return scene


def repulsion_ab(
    seed: int = 0,
    penetration_voxels: float = 5.0,
    iterations: int = 240,
    bench: ContactBench | None = None,
) -> dict:
    """Seeded penetration, full image losses, repulsion on vs off."""
    bench = bench or build_contact_bench(seed)
    h = bench.voxel
    start = displace_contacts(bench, penetration_voxels * h, outward=False)
    cfg = OptimizeConfig(
        iterations=iterations, densify_enabled=False,
        warmup_fraction=0.1, ramp_fraction=0.1, seed=seed,
    )
    runs = {}
    for name, lam in (("on", 0.01), ("off", 0.0)):
        weights = LossWeights(lambda_attr=0.0, lambda_rep=lam)
        final, _ = optimize(start.copy(), bench.views, bench.grid, weights, cfg)
        runs[name] = final
    return {
        "voxel": h,
        "initial_penetration": mean_penetration(bench.grid, start.human.means, start.contacts),
        "penetration_on": mean_penetration(bench.grid, runs["on"].human.means, runs["on"].contacts),
        "penetration_off": mean_penetration(bench.grid, runs["off"].human.means, runs["off"].contacts),
        "fraction_below_minus_h_on": penetration_fraction_below(
            bench.grid, runs["on"].human.means, runs["on"].contacts, -h
        ),
        "n_contacts": len(start.contacts),
    }


def attraction_ab(
    seed: int = 0,
    gap_voxels: float = 20.0,
    iterations: int = 240,
    bench: ContactBench | None = None,
) -> dict:
    """Seeded gap, physics-only optimization, attraction on vs off."""
    bench = bench or build_contact_bench(seed)
    h = bench.voxel
    start = displace_contacts(bench, gap_voxels * h, outward=True)
    cfg = OptimizeConfig(
        iterations=iterations, densify_enabled=False, photometric=False,
        warmup_fraction=0.0, ramp_fraction=0.0, seed=seed,
    )
    runs = {}
    for name, lam in (("on", 0.01), ("off", 0.0)):
        weights = LossWeights(lambda_attr=lam, lambda_rep=0.0)
        final, _ = optimize(start.copy(), bench.views, bench.grid, weights, cfg)
        runs[name] = final
    return {
        "voxel": h,
        "initial_distance": mean_nearest_object_distance(
            start.human.means, start.contacts, start.object.means
        ),
        "distance_on": mean_nearest_object_distance(
            runs["on"].human.means, runs["on"].contacts, runs["on"].object.means
        ),
        "distance_off": mean_nearest_object_distance(
            runs["off"].human.means, runs["off"].contacts, runs["off"].object.means
        ),
        "n_contacts": len(start.contacts),
    }
