import numpy as np
import pytest

from hogs.body import BodyTemplate, ModulationNet, Pose
from hogs.config import ContactTrainConfig, SynthConfig
from hogs.objtrack import RigidTransform, TriMesh, apply_transform
from hogs.physics import contact_oracle
from hogs.splat import Camera, load_array
from hogs.synth import benchmark_scene, body_colors, generate_fixture, hsv_to_rgb, load_features
from hogs.util import read_json


def small_cfg(seed=0):
    return SynthConfig(n_frames=8, n_views=3, image_size=32, seed=seed)


@pytest.fixture(scope="module")
def fixture(tmp_path_factory):
    out = tmp_path_factory.mktemp("fix")
    cfg = small_cfg()
    manifest = generate_fixture(cfg, ContactTrainConfig(feature_dim=32), out)
    return out, cfg, manifest


def test_hsv_to_rgb_primaries():
    rgb = hsv_to_rgb(np.array([0.0, 1 / 3, 2 / 3]), np.ones(3), np.ones(3))
    assert np.allclose(rgb, np.eye(3), atol=1e-12)


def test_fixture_file_inventory(fixture):
    out, cfg, manifest = fixture
    assert (out / "template.json").exists()
    assert (out / "modulation_net.json").exists()
    assert (out / "object_template.obj").exists()
    assert len(list(out.glob("cameras/train_*.json"))) == cfg.n_views
    assert len(list(out.glob("cameras/heldout_*.json"))) == cfg.n_views
    assert len(list(out.glob("gt/train_view_*.npy"))) == cfg.n_views
    assert len(list(out.glob("gt/train_view_*.png"))) == cfg.n_views
    assert len(list(out.glob("gt/heldout_view_*.npy"))) == cfg.n_views
    assert (out / "markers.json").exists()
    assert (out / "observations.json").exists()
    assert len(manifest["files"]) > 20


def test_fixture_deterministic_bytes(tmp_path):
    cfg = small_cfg(seed=3)
    ccfg = ContactTrainConfig(feature_dim=32)
    m1 = generate_fixture(cfg, ccfg, tmp_path / "a")
    m2 = generate_fixture(cfg, ccfg, tmp_path / "b")
    assert m1["files"] == m2["files"]
    for name, digest in m1["files"].items():
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fixture_seed_changes_content(tmp_path):
    ccfg = ContactTrainConfig(feature_dim=32)
    m1 = generate_fixture(small_cfg(seed=1), ccfg, tmp_path / "a")
    m2 = generate_fixture(small_cfg(seed=2), ccfg, tmp_path / "b")
    assert m1["files"] != m2["files"]


def test_trajectory_contacts_match_oracle(fixture):
    out, cfg, _ = fixture
    template = BodyTemplate.from_json(read_json(out / "template.json"))
    net = ModulationNet.from_json(read_json(out / "modulation_net.json"))
    obj = TriMesh.load_obj(out / "object_template.obj")
    traj = read_json(out / "trajectory.json")
    frame = traj["frames"][2]
    pose = Pose.from_json(frame["pose"])
    transform = RigidTransform.from_json(frame["object_transform"])
    from hogs.gscene import GaussianSet, compose, deform_human, init_human_gaussians

    scene = compose(init_human_gaussians(template, pose.beta), GaussianSet.empty())
    posed = deform_human(scene, template, pose, net).human.means
    oracle = contact_oracle(posed, apply_transform(obj, transform), cfg.contact_threshold)
    assert np.array_equal(np.array(frame["contact_vertices"]), oracle.indices)
    assert len(oracle) > 0


def test_every_frame_has_contact(fixture):
    out, _, _ = fixture
    traj = read_json(out / "trajectory.json")
    for frame in traj["frames"]:
        assert len(frame["contact_vertices"]) > 0


def test_masks_binary_and_nested(fixture):
    out, cfg, _ = fixture
    union = load_array(out / "gt" / "train_mask_union_00.npy")
    human = load_array(out / "gt" / "train_mask_human_00.npy")
    assert set(np.unique(union)) <= {0.0, 1.0}
    assert union.shape == (cfg.image_size, cfg.image_size)
    assert union.sum() > 0
    assert human.sum() > 0


def test_features_shape_and_split(fixture):
    out, cfg, _ = fixture
    feats = load_features(out / "contact" / "features.bin")
    assert feats.shape == (cfg.n_frames, cfg.n_views, 32)
    labels = read_json(out / "contact" / "labels.json")
    assert len(labels["frames"]) == cfg.n_frames


def test_cameras_look_at_scene(fixture):
    out, cfg, _ = fixture
    template = BodyTemplate.from_json(read_json(out / "template.json"))
    center = np.array([0.0, template.joints[-1, 1] / 2, 0.0])
    for path in out.glob("cameras/*.json"):
        cam = Camera.load(path)
        t = center @ cam.w2c[:3, :3].T + cam.w2c[:3, 3]
        assert t[2] > 0.5  # scene center in front of every camera
        u = cam.fx * t[0] / t[2] + cam.cx
        v = cam.fy * t[1] / t[2] + cam.cy
        assert 0 <= u < cam.width and 0 <= v < cam.height


def test_benchmark_scene_seeded():
    a = benchmark_scene(100, 1)
    b = benchmark_scene(100, 1)
    assert np.array_equal(a.means, b.means)
    assert len(a) == 100


def test_body_colors_in_range(fixture):
    out, _, _ = fixture
    template = BodyTemplate.from_json(read_json(out / "template.json"))
    colors = body_colors(template, 0)
    assert colors.shape == (template.vertex_count, 3)
    assert colors.min() >= 0 and colors.max() <= 1
