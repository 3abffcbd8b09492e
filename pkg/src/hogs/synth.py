"""Synthetic fixture generation: toy body, lumpy rigid object, camera ring,
ground-truth renders/masks, noisy detections, markers, and contact features.

Everything is seeded; rerunning with the same config writes bit-identical
trees. The object is asymmetric so marker-based registration is well posed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import BodyTemplate, ModulationNet, Pose, forward_kinematics, generate_toy_body
from .config import ContactTrainConfig, SynthConfig
from .contact import FeatureEncoder
from .gscene import ComposedScene, GaussianSet, compose, deform_human, init_from_vertices, init_human_gaussians, save_scene
from .mathcore import axis_angle_to_rotation
from .objtrack import RigidTransform, TriMesh, apply_transform, make_lumpy_blob
from .physics import contact_oracle
from .poseref import ViewObservation, posed_joints, project_joints, save_observations
from .splat import Camera, rasterize, save_array, save_png
from .util import sha256_file, write_json

BACKGROUND = (0.0, 0.0, 0.0)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = (np.asarray(h) % 1.0) * 6.0
    i = np.floor(h).astype(int)
    f = h - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]):
        m = i % 6 == k
        out[m, 0] = np.broadcast_to(r, h.shape)[m]
        out[m, 1] = np.broadcast_to(g, h.shape)[m]
        out[m, 2] = np.broadcast_to(b, h.shape)[m]
    return out


def body_colors(template: BodyTemplate, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    y = template.canonical_vertices[:, 1]
    span = y.max() - y.min() + 1e-12
    hue = 0.55 + 0.35 * (y - y.min()) / span + rng.normal(0, 0.01, len(y))
    sat = np.full(len(y), 0.6) + rng.normal(0, 0.03, len(y))
    val = np.full(len(y), 0.85) + rng.normal(0, 0.03, len(y))
    return np.clip(hsv_to_rgb(hue, np.clip(sat, 0, 1), np.clip(val, 0, 1)), 0, 1)


def object_colors(mesh: TriMesh, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    d = np.linalg.norm(mesh.vertices - mesh.vertices.mean(axis=0), axis=1)
    span = d.max() - d.min() + 1e-12
    hue = 0.02 + 0.12 * (d - d.min()) / span + rng.normal(0, 0.01, len(d))
    return np.clip(hsv_to_rgb(hue, np.full(len(d), 0.8), np.full(len(d), 0.9)), 0, 1)


def ring_cameras(cfg: SynthConfig, center: np.ndarray) -> tuple[list[Camera], list[Camera]]:
    train, heldout = [], []
    n = cfg.n_views
    for i in range(n):
        for offset, bucket in ((0.0, train), (0.5, heldout)):
            phi = 2 * np.pi * (i + offset) / n
            eye = center + np.array(
                [cfg.camera_radius * np.cos(phi), cfg.camera_height, cfg.camera_radius * np.sin(phi)]
            )
            bucket.append(
                Camera.look_at(
                    eye, center, up=(0, 1, 0), fx=cfg.focal,
                    width=cfg.image_size, height=cfg.image_size,
                )
            )
    return train, heldout


@dataclass
class Frame:
    pose: Pose
    object_transform: RigidTransform
    contact_labels: np.ndarray  # (V,) bool, on posed vertices


def _posed_vertices(template, net, pose):
    scene = compose(init_human_gaussians(template, pose.beta), GaussianSet.empty())
    return deform_human(scene, template, pose, net).human.means


def build_trajectory(
    cfg: SynthConfig,
    template: BodyTemplate,
    net: ModulationNet,
    object_template: TriMesh,
    rng: np.random.Generator,
) -> list[Frame]:
    K = template.joint_count
    base_theta = rng.normal(0.0, 0.08, (K, 3))
    beta = rng.normal(0.0, 0.3, template.shape_count)
    amp = rng.uniform(0.01, 0.03, (K, 3))
    phase = rng.uniform(0, 2 * np.pi, (K, 3))
    spin_axis = rng.normal(size=3)
    spin_axis /= np.linalg.norm(spin_axis)

    y_lo = 0.2 * template.joints[-1, 1]
    y_hi = 0.8 * template.joints[-1, 1]
    frames = []
    for t in range(cfg.n_frames):
        u = t / max(cfg.n_frames - 1, 1)
        theta = base_theta + amp * np.sin(2 * np.pi * u + phase)
        pose = Pose(theta, beta, np.zeros(3))
        posed_v = _posed_vertices(template, net, pose)
        fk = forward_kinematics(template, pose)

        station_y = y_lo + (y_hi - y_lo) * (0.5 - 0.5 * np.cos(2 * np.pi * u))
        side = 2 * np.pi * (0.1 + 0.2 * u)
        target_dir = np.array([np.cos(side), 0.0, np.sin(side)])
        canon = template.canonical_vertices
        radial = canon[:, [0, 2]] / np.maximum(np.linalg.norm(canon[:, [0, 2]], axis=1, keepdims=True), 1e-9)
        score = -np.abs(canon[:, 1] - station_y) * 4.0 + radial @ target_dir[[0, 2]]
        anchor = int(np.argmax(score))

        v_anchor = posed_v[anchor]
        joint_d = np.linalg.norm(fk.posed_joints + pose.trans - v_anchor, axis=1)
        nearest_joint = (fk.posed_joints + pose.trans)[int(np.argmin(joint_d))]
        n_hat = v_anchor - nearest_joint
        n_hat = n_hat / max(np.linalg.norm(n_hat), 1e-9)

        angle = 0.25 * np.sin(2 * np.pi * u + 0.7)
        rot = axis_angle_to_rotation(spin_axis * angle)
        support = float(np.max((object_template.vertices @ rot.T) @ (-n_hat)))
        center = v_anchor + n_hat * (support + cfg.object_gap)
        transform = RigidTransform(rot, center)

        labels = np.zeros(len(canon), dtype=bool)
        obj_t = apply_transform(object_template, transform)
        labels[contact_oracle(posed_v, obj_t, cfg.contact_threshold).indices] = True
        frames.append(Frame(pose, transform, labels))
    return frames


def generate_fixture(cfg: SynthConfig, contact_cfg: ContactTrainConfig, out_dir: str | Path) -> dict:
    """Write the full fixture tree; returns the manifest (also saved)."""
    out = Path(out_dir)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "cameras").mkdir(exist_ok=True)
    (out / "contact").mkdir(exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    template = generate_toy_body(
        cfg.joint_count, cfg.shape_count, seed=cfg.seed,
        bone_length=cfg.bone_length, radius=cfg.body_radius,
        rings_per_bone=cfg.rings_per_bone, ring_segments=cfg.ring_segments,
    )
    write_json(out / "template.json", template.to_json())
    net = ModulationNet.create(
        cfg.joint_count, freq_count=cfg.modulation_freqs, hidden=cfg.modulation_hidden,
        seed=cfg.seed + 1, init_scale=cfg.modulation_init_scale,
    )
    write_json(out / "modulation_net.json", net.to_json())
    object_template = make_lumpy_blob(radius=cfg.object_radius, seed=cfg.seed + 2,
                                      subdivisions=cfg.object_subdivisions)
    object_template.save_obj(out / "object_template.obj")

    frames = build_trajectory(cfg, template, net, object_template, rng)
    target = frames[cfg.target_frame]
    write_json(
        out / "trajectory.json",
        {
            "n_frames": len(frames),
            "target_frame": cfg.target_frame,
            "frames": [
                {
                    "pose": f.pose.to_json(),
                    "object_transform": f.object_transform.to_json(),
                    "contact_vertices": np.flatnonzero(f.contact_labels).tolist(),
                }
                for f in frames
            ],
        },
    )
    write_json(out / "gt" / "pose_target.json", target.pose.to_json())
    write_json(out / "gt" / "object_transform.json", target.object_transform.to_json())

    # ground-truth composed scene at the target frame
    human_gt = init_human_gaussians(
        template, beta=target.pose.beta,
        colors=body_colors(template, cfg.seed + 3), opacity=cfg.gaussian_opacity,
    )
    obj_tar = apply_transform(object_template, target.object_transform)
    obj_gt = init_from_vertices(
        obj_tar.vertices, obj_tar.faces,
        colors=object_colors(object_template, cfg.seed + 4), opacity=cfg.gaussian_opacity,
    )
    scene_gt = deform_human(compose(human_gt, obj_gt), template, target.pose, net)
    save_scene(out / "gt" / "scene_gt.ckpt", scene_gt)

    center = np.array([0.0, template.joints[-1, 1] / 2, 0.0])
    train_cams, heldout_cams = ring_cameras(cfg, center)
    for i, cam in enumerate(train_cams):
        cam.save(out / "cameras" / f"train_{i:02d}.json")
    for i, cam in enumerate(heldout_cams):
        cam.save(out / "cameras" / f"heldout_{i:02d}.json")

    human_only = ComposedScene(scene_gt.human.copy(), GaussianSet.empty())
    observations = []
    joints_gt = posed_joints(template, target.pose)
    det_rng = np.random.default_rng([cfg.seed, 5])
    for split, cams in (("train", train_cams), ("heldout", heldout_cams)):
        for i, cam in enumerate(cams):
            render = rasterize(scene_gt, cam, background=BACKGROUND)
            save_array(out / "gt" / f"{split}_view_{i:02d}.npy", render.color)
            save_png(out / "gt" / f"{split}_view_{i:02d}.png", render.color)
            union_mask = (render.alpha > 0.5).astype(np.float64)
            save_array(out / "gt" / f"{split}_mask_union_{i:02d}.npy", union_mask)
            human_alpha = rasterize(human_only, cam, background=BACKGROUND).alpha
            human_mask = (human_alpha > 0.5).astype(np.float64)
            save_array(out / "gt" / f"{split}_mask_human_{i:02d}.npy", human_mask)
            if split == "train":
                pix, valid = project_joints(joints_gt, cam)
                noisy = pix + det_rng.normal(0, cfg.detection_noise_px, pix.shape)
                observations.append(
                    ViewObservation(cam, noisy, mask=human_mask, valid=valid)
                )
    save_observations(out / "observations.json", observations, [f"train_{i:02d}" for i in range(len(train_cams))])

    init_rng = np.random.default_rng([cfg.seed, 6])
    init_pose = Pose(
        target.pose.theta + init_rng.normal(0, np.deg2rad(cfg.init_pose_noise_deg), target.pose.theta.shape),
        target.pose.beta + init_rng.normal(0, cfg.init_shape_noise, target.pose.beta.shape),
        target.pose.trans + init_rng.normal(0, cfg.init_trans_noise, 3),
    )
    write_json(out / "init_pose.json", init_pose.to_json())

    marker_rng = np.random.default_rng([cfg.seed, 7])
    marker_ids = marker_rng.choice(len(object_template.vertices), size=cfg.marker_count, replace=False)
    markers = target.object_transform.apply(object_template.vertices[np.sort(marker_ids)])
    if cfg.marker_noise > 0:
        markers = markers + marker_rng.normal(0, cfg.marker_noise, markers.shape)
    write_json(out / "markers.json", {"points": markers.tolist()})

    encoder = FeatureEncoder.create(
        contact_cfg.feature_dim, template.vertex_count, cfg.n_views,
        seed=contact_cfg.seed + 11,
        noise_sigma=contact_cfg.noise_sigma, keep_prob=contact_cfg.keep_prob,
    )
    feats = np.stack(
        [
            encoder.encode(f.contact_labels, np.random.default_rng([contact_cfg.seed, 20, t])).features
            for t, f in enumerate(frames)
        ]
    )
    from .util import write_header_block

    write_header_block(
        out / "contact" / "features.bin",
        {"n_frames": len(frames), "n_views": cfg.n_views, "dim": contact_cfg.feature_dim},
        feats.astype("<f8").tobytes(),
    )
    write_json(
        out / "contact" / "labels.json",
        {"vertex_count": template.vertex_count,
         "frames": [np.flatnonzero(f.contact_labels).tolist() for f in frames]},
    )

    manifest = {
        "config": {"synth": cfg.__dict__.copy(), "contact": contact_cfg.__dict__.copy()},
        "files": {
            str(p.relative_to(out)): sha256_file(p)
            for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"
        },
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def load_features(path: str | Path) -> np.ndarray:
    from .util import read_header_block

    header, payload = read_header_block(path)
    return np.frombuffer(payload, dtype="<f8").reshape(
        header["n_frames"], header["n_views"], header["dim"]
    )


def benchmark_scene(n: int, seed: int = 0) -> GaussianSet:
    """Seeded random Gaussian cloud for throughput measurements."""
    rng = np.random.default_rng(seed)
    quats = rng.normal(size=(n, 4))
    return GaussianSet(
        rng.uniform(-0.5, 0.5, (n, 3)),
        quats,
        rng.uniform(0.004, 0.02, (n, 3)),
        rng.uniform(0.2, 0.95, n),
        rng.uniform(0, 1, (n, 3)),
    )
