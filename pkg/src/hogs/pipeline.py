"""Stage orchestration: track, fit-pose, build-sdf, contact, optimize, render,
eval, with content-addressed caching between stages.

Each stage hashes its configuration plus the content of its input files; a
matching manifest in the stage directory lets the stage be skipped, so
changing an upstream artifact invalidates exactly the stages downstream of
it. Deterministic metrics go to report.json; wall-clock and throughput go to
timing.json so reports stay byte-comparable across runs.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import contact as contact_mod
from . import physics, splat
from .body import BodyTemplate, ModulationNet, Pose
from .config import RunConfig
from .gscene import compose, deform_human, init_from_vertices, init_human_gaussians, load_scene, save_scene
from .objtrack import RigidTransform, TriMesh, apply_transform, icp_rigid
from .poseref import (
    dynamic_weights,
    load_observations,
    occlusion_rate,
    posed_joints,
    refine,
)
from .sdfgrid import SdfGrid, build_sdf, mesh_content_hash
from .synth import BACKGROUND, benchmark_scene, generate_fixture, load_features
from .util import dumps_canonical, read_json, sha256_bytes, sha256_file, write_json

# pinned on this repository's reference machine (single core, 10k Gaussians
# at 256x256); regression alarm fires 30% below this
FPS_BASELINE = 10.0

STAGE_ORDER = ["synth", "track", "fit-pose", "build-sdf", "contact", "optimize", "render", "eval"]


class StageError(Exception):
    def __init__(self, stage: str, message: str, dump_path: Path | None = None):
        self.stage = stage
        self.dump_path = dump_path
        where = f" (inputs dumped to {dump_path})" if dump_path else ""
        super().__init__(f"stage '{stage}' failed: {message}{where}")


def _stage_key(config_part: dict, input_paths: list[Path]) -> str:
    doc = {
        "config": config_part,
        "inputs": {p.name: sha256_file(p) for p in sorted(input_paths)},
    }
    return sha256_bytes(dumps_canonical(doc).encode())


def _cache_hit(stage_dir: Path, key: str) -> bool:
    manifest = stage_dir / "stage_manifest.json"
    if not manifest.exists():
        return False
    doc = read_json(manifest)
    if doc.get("key") != key:
        return False
    return all((stage_dir / name).exists() for name in doc.get("outputs", []))


def _finish_stage(stage_dir: Path, key: str, outputs: list[str]) -> None:
    write_json(stage_dir / "stage_manifest.json", {"key": key, "outputs": outputs})


def _guarded(stage: str, stage_dir: Path, config_part: dict, input_paths: list[Path]):
    """Returns (key, skip) and raises StageError when inputs are missing."""
    missing = [str(p) for p in input_paths if not p.exists()]
    if missing:
        raise StageError(stage, f"missing inputs: {missing}")
    key = _stage_key(config_part, input_paths)
    stage_dir.mkdir(parents=True, exist_ok=True)
    return key, _cache_hit(stage_dir, key)


def _dump_failure(stage: str, stage_dir: Path, config_part: dict, input_paths: list[Path], exc: Exception) -> StageError:
    stage_dir.mkdir(parents=True, exist_ok=True)
    dump = stage_dir / "failure.json"
    write_json(
        dump,
        {
            "stage": stage,
            "error": repr(exc),
            "config": config_part,
            "inputs": {str(p): (sha256_file(p) if p.exists() else None) for p in input_paths},
        },
    )
    return StageError(stage, repr(exc), dump)


def fixture_dir(workdir: str | Path) -> Path:
    return Path(workdir) / "fixture"


def stage_dir(workdir: str | Path, name: str) -> Path:
    return Path(workdir) / "stages" / name.replace("-", "_")


def run_synth(cfg: RunConfig, workdir: str | Path) -> Path:
    fix = fixture_dir(workdir)
    config_part = {"synth": cfg.synth.__dict__.copy(), "contact": cfg.contact.__dict__.copy()}
    key = sha256_bytes(dumps_canonical(config_part).encode())
    manifest = fix / "manifest.json"
    if manifest.exists():
        doc = read_json(manifest)
        if sha256_bytes(dumps_canonical(doc.get("config", {})).encode()) == key:
            return fix
    try:
        generate_fixture(cfg.synth, cfg.contact, fix)
    except Exception as exc:  # noqa: BLE001 - stage boundary
        raise _dump_failure("synth", fix, config_part, [], exc) from exc
    return fix


def run_track(cfg: RunConfig, workdir: str | Path) -> Path:
    fix = fixture_dir(workdir)
    sdir = stage_dir(workdir, "track")
    inputs = [fix / "object_template.obj", fix / "markers.json"]
    config_part = {"icp": cfg.icp.__dict__.copy()}
    key, skip = _guarded("track", sdir, config_part, inputs)
    out_path = sdir / "object_transform.json"
    if skip:
        return out_path
    try:
        template = TriMesh.load_obj(inputs[0])
        markers = np.array(read_json(inputs[1])["points"], dtype=np.float64)
        # centroid pre-alignment keeps the solve inside the correspondence basin
        init = RigidTransform(
            np.eye(3), markers.mean(axis=0) - template.vertices.mean(axis=0)
        )
        result = icp_rigid(markers, template, init=init, iters=cfg.icp.iters, tol=cfg.icp.tol)
        write_json(out_path, result.transform.to_json())
        write_json(
            sdir / "track_info.json",
            {"rms": result.rms, "iterations": result.iterations, "rms_history": result.rms_history},
        )
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise _dump_failure("track", sdir, config_part, inputs, exc) from exc
    _finish_stage(sdir, key, ["object_transform.json", "track_info.json"])
    return out_path


def run_fit_pose(cfg: RunConfig, workdir: str | Path) -> Path:
    fix = fixture_dir(workdir)
    sdir = stage_dir(workdir, "fit_pose")
    cam_paths = sorted(fix.glob("cameras/train_*.json"))
    mask_paths = sorted(fix.glob("obs_mask_*.npy"))
    inputs = [fix / "template.json", fix / "observations.json", fix / "init_pose.json"] + cam_paths + mask_paths
    config_part = {"refine": cfg.refine.__dict__.copy()}
    key, skip = _guarded("fit-pose", sdir, config_part, inputs)
    out_path = sdir / "pose_opt.json"
    if skip:
        return out_path
    try:
        template = BodyTemplate.from_json(read_json(fix / "template.json"))
        cameras = {p.stem: splat.Camera.load(p) for p in cam_paths}
        observations = load_observations(fix / "observations.json", cameras)
        init = Pose.from_json(read_json(fix / "init_pose.json"))
        result = refine(template, init, observations, cfg.refine)
        write_json(out_path, result.pose.to_json())
        rates = [occlusion_rate(template, result.pose, o) for o in observations]
        weights = dynamic_weights(rates, cfg.refine.alpha)
        info = {
            "final_cost": result.cost,
            "initial_cost": result.cost_history[0],
            "iterations": result.iterations,
            "occlusion_rates": list(map(float, rates)),
            "view_weights": weights.tolist(),
        }
        gt_path = fix / "gt" / "pose_target.json"
        if gt_path.exists():
            gt_pose = Pose.from_json(read_json(gt_path))
            gt_joints = posed_joints(template, gt_pose)
            info["joint_error_m"] = float(
                np.linalg.norm(result.joints_3d - gt_joints, axis=1).mean()
            )
        write_json(sdir / "fit_info.json", info)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise _dump_failure("fit-pose", sdir, config_part, inputs, exc) from exc
    _finish_stage(sdir, key, ["pose_opt.json", "fit_info.json"])
    return out_path


def run_build_sdf(cfg: RunConfig, workdir: str | Path) -> Path:
    fix = fixture_dir(workdir)
    sdir = stage_dir(workdir, "build_sdf")
    transform_path = stage_dir(workdir, "track") / "object_transform.json"
    inputs = [fix / "object_template.obj", transform_path]
    config_part = {"sdf": cfg.sdf.__dict__.copy()}
    key, skip = _guarded("build-sdf", sdir, config_part, inputs)
    out_path = sdir / "object_sdf.bin"
    if skip:
        return out_path
    try:
        template = TriMesh.load_obj(inputs[0])
        transform = RigidTransform.from_json(read_json(transform_path))
        target = apply_transform(template, transform)
        grid = build_sdf(target, dims=cfg.sdf.dims, pad=cfg.sdf.pad)
        grid.save(out_path, mesh_hash=mesh_content_hash(target))
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise _dump_failure("build-sdf", sdir, config_part, inputs, exc) from exc
    _finish_stage(sdir, key, ["object_sdf.bin"])
    return out_path


def run_contact(cfg: RunConfig, workdir: str | Path) -> Path:
    fix = fixture_dir(workdir)
    sdir = stage_dir(workdir, "contact")
    inputs = [fix / "contact" / "features.bin", fix / "contact" / "labels.json"]
    config_part = {"contact": cfg.contact.__dict__.copy()}
    key, skip = _guarded("contact", sdir, config_part, inputs)
    out_path = sdir / "prediction.json"
    if skip:
        return out_path
    try:
        feats = load_features(inputs[0])
        labels_doc = read_json(inputs[1])
        v_count = labels_doc["vertex_count"]
        labels = []
        for idx in labels_doc["frames"]:
            row = np.zeros(v_count, dtype=bool)
            row[np.asarray(idx, dtype=np.int64)] = True
            labels.append(row)
        # interleaved split: held-out frames sit between training frames
        every = max(cfg.contact.heldout_every, 2)
        heldout_ids = [t for t in range(len(feats)) if t % every == every - 1]
        train_ids = [t for t in range(len(feats)) if t % every != every - 1]
        train_ids = train_ids[: cfg.contact.train_frames]
        dataset = [(contact_mod.FeatureSet(feats[t]), labels[t]) for t in train_ids]
        w0 = contact_mod.AttentionWeights.create(
            cfg.contact.feature_dim, cfg.contact.projected_dim, v_count, seed=cfg.contact.seed
        )
        trained, history = contact_mod.train_contact(
            dataset, w0, epochs=cfg.contact.epochs, lr=cfg.contact.lr,
            scale_dim=cfg.contact.scale_dim,
        )
        trained.save(sdir / "weights.bin")
        f1s = []
        for t in heldout_ids:
            _, pred = contact_mod.predict_contacts(
                contact_mod.FeatureSet(feats[t]), trained, tau=cfg.contact.tau,
                scale_dim=cfg.contact.scale_dim,
            )
            f1s.append(
                contact_mod.contact_f1(
                    pred, physics.ContactSet(np.flatnonzero(labels[t])), v_count
                )
            )
        target_frame = read_json(fix / "trajectory.json")["target_frame"]
        probs, pred_target = contact_mod.predict_contacts(
            contact_mod.FeatureSet(feats[target_frame]), trained, tau=cfg.contact.tau,
            scale_dim=cfg.contact.scale_dim,
        )
        write_json(
            out_path,
            {"vertices": pred_target.indices.tolist(), "probabilities": probs.tolist()},
        )
        write_json(
            sdir / "eval.json",
            {
                "heldout_f1_mean": float(np.mean(f1s)) if f1s else 0.0,
                "heldout_f1": list(map(float, f1s)),
                "heldout_frames": heldout_ids,
                "final_train_loss": history[-1],
                "train_frames": len(train_ids),
            },
        )
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise _dump_failure("contact", sdir, config_part, inputs, exc) from exc
    _finish_stage(sdir, key, ["prediction.json", "weights.bin", "eval.json"])
    return out_path


def _load_views(fix: Path, split: str) -> list[tuple[splat.Camera, np.ndarray, np.ndarray]]:
    views = []
    for cam_path in sorted(fix.glob(f"cameras/{split}_*.json")):
        idx = cam_path.stem.split("_")[-1]
        cam = splat.Camera.load(cam_path)
        gt = splat.load_array(fix / "gt" / f"{split}_view_{idx}.npy")
        mask = splat.load_array(fix / "gt" / f"{split}_mask_union_{idx}.npy")
        views.append((cam, gt, mask))
    return views


def build_initial_scene(cfg: RunConfig, workdir: str | Path):
    """Compose the deformed human and tracked object sets with predicted contacts."""
    fix = fixture_dir(workdir)
    template = BodyTemplate.from_json(read_json(fix / "template.json"))
    net = ModulationNet.from_json(read_json(fix / "modulation_net.json"))
    pose = Pose.from_json(read_json(stage_dir(workdir, "fit_pose") / "pose_opt.json"))
    transform = RigidTransform.from_json(
        read_json(stage_dir(workdir, "track") / "object_transform.json")
    )
    object_template = TriMesh.load_obj(fix / "object_template.obj")
    target_mesh = apply_transform(object_template, transform)
    human = init_human_gaussians(template, beta=pose.beta)
    obj = init_from_vertices(target_mesh.vertices, target_mesh.faces)
    contacts = np.array(
        read_json(stage_dir(workdir, "contact") / "prediction.json")["vertices"],
        dtype=np.int64,
    )
    scene = compose(human, obj, contacts)
    return deform_human(scene, template, pose, net), template, net, pose


def run_optimize(cfg: RunConfig, workdir: str | Path) -> Path:
    fix = fixture_dir(workdir)
    sdir = stage_dir(workdir, "optimize")
    inputs = (
        [
            fix / "template.json",
            fix / "modulation_net.json",
            fix / "object_template.obj",
            stage_dir(workdir, "fit_pose") / "pose_opt.json",
            stage_dir(workdir, "track") / "object_transform.json",
            stage_dir(workdir, "build_sdf") / "object_sdf.bin",
            stage_dir(workdir, "contact") / "prediction.json",
        ]
        + sorted(fix.glob("cameras/train_*.json"))
        + sorted(fix.glob("gt/train_view_*.npy"))
        + sorted(fix.glob("gt/train_mask_union_*.npy"))
    )
    from dataclasses import asdict

    config_part = {
        "optimize": asdict(cfg.optimize),
        "weights": cfg.weights.to_json(),
        "physics_enabled": cfg.physics_enabled,
    }
    config_part["optimize"]["background"] = list(config_part["optimize"]["background"])
    key, skip = _guarded("optimize", sdir, config_part, inputs)
    out_path = sdir / "scene_opt.ckpt"
    if skip:
        return out_path
    try:
        scene, template, net, pose = build_initial_scene(cfg, workdir)
        grid = SdfGrid.load(stage_dir(workdir, "build_sdf") / "object_sdf.bin")
        views = _load_views(fix, "train")
        weights = cfg.weights
        if not cfg.physics_enabled:
            weights = physics.LossWeights(
                lambda_ssim=weights.lambda_ssim,
                lambda_lpips=weights.lambda_lpips,
                lambda_mask=weights.lambda_mask,
                lambda_attr=0.0,
                lambda_rep=0.0,
            )
        with open(sdir / "metrics.jsonl", "w") as stream:
            optimized, metrics = physics.optimize(
                scene, views, grid, weights, cfg.optimize, log_stream=stream
            )
        save_scene(out_path, optimized)
        write_json(
            sdir / "optimize_info.json",
            {
                "iterations": len(metrics),
                "final": metrics[-1] if metrics else {},
                "n_gaussians": len(optimized),
                "physics_enabled": cfg.physics_enabled,
            },
        )
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise _dump_failure("optimize", sdir, config_part, inputs, exc) from exc
    _finish_stage(sdir, key, ["scene_opt.ckpt", "metrics.jsonl", "optimize_info.json"])
    return out_path


def render_fps(scene, cam: splat.Camera, frames: int) -> tuple[float, int]:
    """Steady-state frames per second over at least `frames` renders."""
    frames = max(frames, 100)
    splat.rasterize(scene, cam, background=BACKGROUND)  # warm caches
    start = time.perf_counter()
    for _ in range(frames):
        splat.rasterize(scene, cam, background=BACKGROUND)
    elapsed = time.perf_counter() - start
    return frames / elapsed, frames


def run_render(cfg: RunConfig, workdir: str | Path) -> Path:
    fix = fixture_dir(workdir)
    sdir = stage_dir(workdir, "render")
    ckpt = stage_dir(workdir, "optimize") / "scene_opt.ckpt"
    inputs = (
        [ckpt]
        + sorted(fix.glob("cameras/*.json"))
        + sorted(fix.glob("gt/heldout_view_*.npy"))
        + sorted(fix.glob("gt/train_view_*.npy"))
    )
    config_part = {"benchmark": cfg.benchmark.__dict__.copy()}
    key, skip = _guarded("render", sdir, config_part, inputs)
    out_path = sdir / "render_metrics.json"
    if skip:
        return out_path
    try:
        scene = load_scene(ckpt)
        per_split = {}
        for split in ("train", "heldout"):
            psnrs, ssims = [], []
            for cam_path in sorted(fix.glob(f"cameras/{split}_*.json")):
                idx = cam_path.stem.split("_")[-1]
                cam = splat.Camera.load(cam_path)
                gt = splat.load_array(fix / "gt" / f"{split}_view_{idx}.npy")
                out = splat.rasterize(scene, cam, background=BACKGROUND)
                if split == "heldout":
                    splat.save_png(sdir / f"heldout_{idx}.png", out.color)
                    splat.save_array(sdir / f"heldout_{idx}.npy", out.color)
                psnrs.append(splat.psnr(out.color, gt))
                ssims.append(1.0 - splat.loss_ssim(out.color, gt))
            per_split[split] = {"psnr": psnrs, "ssim": ssims}
        grid = SdfGrid.load(stage_dir(workdir, "build_sdf") / "object_sdf.bin")
        pen = physics.mean_penetration(grid, scene.human.means, scene.contacts)
        write_json(
            out_path,
            {
                "train": per_split["train"],
                "heldout": per_split["heldout"],
                "mean_penetration_depth": pen,
                "n_gaussians": len(scene),
            },
        )
        bench = benchmark_scene(cfg.benchmark.gaussians, cfg.benchmark.seed)
        bench_cam = splat.Camera.look_at(
            (0, -2.5, 0.6), (0, 0, 0), up=(0, 0, 1), fx=300.0,
            width=cfg.benchmark.image_size, height=cfg.benchmark.image_size,
        )
        fps, n_frames = render_fps(bench, bench_cam, cfg.benchmark.frames)
        write_json(
            sdir / "render_timing.json",
            {
                "fps_benchmark": fps,
                "frames": n_frames,
                "benchmark_gaussians": cfg.benchmark.gaussians,
                "benchmark_image_size": cfg.benchmark.image_size,
                "fps_baseline": FPS_BASELINE,
                "fps_alarm": bool(fps < 0.7 * FPS_BASELINE),
            },
        )
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise _dump_failure("render", sdir, config_part, inputs, exc) from exc
    _finish_stage(sdir, key, ["render_metrics.json", "render_timing.json"])
    return out_path


def run_eval(cfg: RunConfig, workdir: str | Path) -> Path:
    workdir = Path(workdir)
    fix = fixture_dir(workdir)
    needed = [
        stage_dir(workdir, "render") / "render_metrics.json",
        stage_dir(workdir, "contact") / "eval.json",
        stage_dir(workdir, "fit_pose") / "fit_info.json",
        stage_dir(workdir, "track") / "track_info.json",
        fix / "gt" / "object_transform.json",
    ]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise StageError("eval", f"missing inputs: {missing}")
    render_metrics = read_json(stage_dir(workdir, "render") / "render_metrics.json")
    contact_eval = read_json(stage_dir(workdir, "contact") / "eval.json")
    fit_info = read_json(stage_dir(workdir, "fit_pose") / "fit_info.json")
    track_info = read_json(stage_dir(workdir, "track") / "track_info.json")

    gt_transform = RigidTransform.from_json(read_json(fix / "gt" / "object_transform.json"))
    est = RigidTransform.from_json(
        read_json(stage_dir(workdir, "track") / "object_transform.json")
    )
    rel = est.inverse().compose(gt_transform)
    rot_err = float(np.arccos(np.clip((np.trace(rel.rotation) - 1) / 2, -1, 1)))
    trans_err = float(np.linalg.norm(est.translation - gt_transform.translation))

    report = {
        "train_views": render_metrics["train"],
        "heldout_views": render_metrics["heldout"],
        "mean_train_psnr": float(np.mean(render_metrics["train"]["psnr"])),
        "mean_heldout_psnr": float(np.mean(render_metrics["heldout"]["psnr"])),
        "mean_train_ssim": float(np.mean(render_metrics["train"]["ssim"])),
        "mean_heldout_ssim": float(np.mean(render_metrics["heldout"]["ssim"])),
        "mean_penetration_depth": render_metrics["mean_penetration_depth"],
        "contact_f1": contact_eval["heldout_f1_mean"],
        "pose_joint_error_m": fit_info.get("joint_error_m"),
        "pose_view_weights": fit_info["view_weights"],
        "track_rms": track_info["rms"],
        "track_rotation_error_rad": rot_err,
        "track_translation_error_m": trans_err,
        "n_gaussians": render_metrics["n_gaussians"],
        "physics_enabled": cfg.physics_enabled,
    }
    write_json(workdir / "report.json", report)
    return workdir / "report.json"


def run_pipeline(cfg: RunConfig, workdir: str | Path) -> Path:
    """Run every stage, resuming from caches; returns the report path."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg.save(workdir / "config.json")
    timings: dict[str, float] = {}

    def timed(name, fn):
        start = time.perf_counter()
        out = fn()
        timings[name] = time.perf_counter() - start
        return out

    timed("synth", lambda: run_synth(cfg, workdir))
    timed("track", lambda: run_track(cfg, workdir))
    timed("fit-pose", lambda: run_fit_pose(cfg, workdir))
    timed("build-sdf", lambda: run_build_sdf(cfg, workdir))
    timed("contact", lambda: run_contact(cfg, workdir))
    timed("optimize", lambda: run_optimize(cfg, workdir))
    timed("render", lambda: run_render(cfg, workdir))
    report = timed("eval", lambda: run_eval(cfg, workdir))

    render_timing = read_json(stage_dir(workdir, "render") / "render_timing.json")
    write_json(
        workdir / "timing.json",
        {"stages_seconds": timings, **render_timing},
    )
    return report
