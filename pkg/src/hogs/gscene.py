"""Gaussian primitives, scene composition, deformation and adaptive refinement.

Human Gaussians keep a canonical anchor (canonical mean, base skin weights,
source vertex id); deformation maps the canonical set to a posed set without
touching the anchors, so contact bookkeeping and re-deformation stay valid
across cloning, splitting and pruning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import CHECKPOINT_VERSION
from .body import (
    BodyTemplate,
    ModulationNet,
    Pose,
    blended_rotations,
    forward_kinematics,
    lbs_points,
    modulated_weights_backward,
    modulated_weights_batch,
)
from .mathcore import matrix_to_quat, quat_multiply, quat_normalize, quat_to_matrix
from .objtrack import RigidTransform
from .util import read_header_block, write_header_block

TAG_HUMAN = 0
TAG_OBJECT = 1


@dataclass(frozen=True)
class Gaussian:
    """One splatting primitive."""

    mean: np.ndarray
    rot: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray  # positive per-axis extents
    opacity: float
    color: np.ndarray  # RGB in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "rot", quat_normalize(np.asarray(self.rot, dtype=np.float64)))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError("opacity must be in (0, 1]")

    def covariance(self) -> np.ndarray:
        r = quat_to_matrix(self.rot)
        return r @ np.diag(self.scale**2) @ r.T


@dataclass
class GaussianSet:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(-1, 4)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(-1, 3)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        if not (len(self.quats) == len(self.scales) == len(self.opacities) == len(self.colors) == n):
            raise ValueError("field lengths disagree")

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.means)

    def get(self, i: int) -> Gaussian:
        return Gaussian(self.means[i], self.quats[i], self.scales[i], float(self.opacities[i]), self.colors[i])

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.means.copy(), self.quats.copy(), self.scales.copy(),
            self.opacities.copy(), self.colors.copy(),
        )

    def covariances(self) -> np.ndarray:
        r = quat_to_matrix(quat_normalize(self.quats))
        m3 = r * self.scales[:, None, :]
        return m3 @ m3.transpose(0, 2, 1)


@dataclass
class HumanGaussians(GaussianSet):
    canonical: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    base_weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        super().__post_init__()
        self.canonical = np.ascontiguousarray(self.canonical, dtype=np.float64).reshape(-1, 3)
        self.base_weights = np.ascontiguousarray(self.base_weights, dtype=np.float64)
        self.anchors = np.ascontiguousarray(self.anchors, dtype=np.int64).reshape(-1)
        n = len(self.means)
        if len(self.canonical) != n or len(self.anchors) != n or len(self.base_weights) != n:
            raise ValueError("anchor fields must match the Gaussian count")

    def copy(self) -> "HumanGaussians":
        return HumanGaussians(
            self.means.copy(), self.quats.copy(), self.scales.copy(),
            self.opacities.copy(), self.colors.copy(),
            self.canonical.copy(), self.base_weights.copy(), self.anchors.copy(),
        )


@dataclass
class ComposedScene:
    human: HumanGaussians
    object: GaussianSet
    contacts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.contacts = np.unique(np.asarray(self.contacts, dtype=np.int64))
        if len(self.contacts) and (self.contacts[0] < 0 or self.contacts[-1] >= len(self.human)):
            raise ValueError("contact indices out of range of the human set")

    def __len__(self) -> int:
        return len(self.human) + len(self.object)

    @property
    def tags(self) -> np.ndarray:
        return np.concatenate(
            [np.full(len(self.human), TAG_HUMAN, dtype=np.int32),
             np.full(len(self.object), TAG_OBJECT, dtype=np.int32)]
        )

    def packed(self):
        """Concatenated parameter arrays, human block first."""
        return (
            np.ascontiguousarray(np.concatenate([self.human.means, self.object.means])),
            np.ascontiguousarray(np.concatenate([self.human.quats, self.object.quats])),
            np.ascontiguousarray(np.concatenate([self.human.scales, self.object.scales])),
            np.ascontiguousarray(np.concatenate([self.human.opacities, self.object.opacities])),
            np.ascontiguousarray(np.concatenate([self.human.colors, self.object.colors])),
        )

    def copy(self) -> "ComposedScene":
        return ComposedScene(self.human.copy(), self.object.copy(), self.contacts.copy())


def mean_incident_edge_lengths(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-vertex mean incident edge length; isolated vertices fall back to the
    global mean edge length."""
    edges = np.unique(
        np.sort(
            np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1
        ),
        axis=0,
    )
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    total = np.zeros(len(vertices))
    count = np.zeros(len(vertices))
    np.add.at(total, edges[:, 0], lengths)
    np.add.at(total, edges[:, 1], lengths)
    np.add.at(count, edges[:, 0], 1.0)
    np.add.at(count, edges[:, 1], 1.0)
    mean_global = float(lengths.mean()) if len(lengths) else 0.0
    out = np.where(count > 0, total / np.maximum(count, 1.0), mean_global)
    return out


def init_from_vertices(
    vertices: np.ndarray,
    faces: np.ndarray | None = None,
    colors: np.ndarray | None = None,
    opacity: float = 0.5,
    scale_ratio: float = 0.5,
    fallback_scale: float | None = None,
) -> GaussianSet:
    """One isotropic Gaussian per vertex; scale from the local edge-length policy."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) == 0:
        raise ValueError("cannot initialize from an empty vertex list")
    if faces is not None and len(faces):
        base = mean_incident_edge_lengths(vertices, np.asarray(faces, dtype=np.int64))
        scale = scale_ratio * base
        if np.any(scale <= 0):
            raise ValueError("degenerate edges produce non-positive scales")
    else:
        if fallback_scale is None:
            raise ValueError("faces or fallback_scale required to set Gaussian sizes")
        scale = np.full(len(vertices), float(fallback_scale))
    n = len(vertices)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    if colors is None:
        colors = np.full((n, 3), 0.5)
    return GaussianSet(
        vertices.copy(), quats, np.repeat(scale[:, None], 3, axis=1),
        np.full(n, float(opacity)), np.asarray(colors, dtype=np.float64).copy(),
    )


def init_human_gaussians(
    template: BodyTemplate,
    beta: np.ndarray | None = None,
    colors: np.ndarray | None = None,
    opacity: float = 0.5,
) -> HumanGaussians:
    """Canonical human Gaussians anchored one-per-vertex on the shaped template."""
    beta = np.zeros(template.shape_count) if beta is None else np.asarray(beta, dtype=np.float64)
    verts = template.shaped_vertices(beta)
    base = init_from_vertices(verts, template.faces, colors=colors, opacity=opacity)
    return HumanGaussians(
        base.means, base.quats, base.scales, base.opacities, base.colors,
        canonical=verts.copy(),
        base_weights=template.skin_weights.copy(),
        anchors=np.arange(len(verts), dtype=np.int64),
    )


def covariance_to_quat_scale(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor an SPD matrix into a rotation quaternion and positive axis scales.

    Eigenvector signs are canonicalized (largest-magnitude entry positive,
    then determinant fixed) so the factorization is deterministic.
    """
    eigval, eigvec = np.linalg.eigh(cov)
    eigval = np.maximum(eigval, 1e-24)
    for c in range(3):
        col = eigvec[:, c]
        if col[np.argmax(np.abs(col))] < 0:
            eigvec[:, c] = -col
    if np.linalg.det(eigvec) < 0:
        eigvec[:, 2] = -eigvec[:, 2]
    return matrix_to_quat(eigvec), np.sqrt(eigval)


def deform_human(
    scene: ComposedScene,
    template: BodyTemplate,
    pose: Pose,
    net: ModulationNet,
) -> ComposedScene:
    """Map the canonical human set to the posed space; object set untouched.

    The input scene's human Gaussians are interpreted as canonical: each
    Gaussian is transformed by the blend of joint transforms under its
    modulated weights, and the blended covariance is refactored into
    quaternion and scales. Canonical anchors are preserved.
    """
    fk = forward_kinematics(template, pose)
    human = scene.human
    if len(human) == 0:
        return scene.copy()
    weights = modulated_weights_batch(human.canonical, human.base_weights, net)
    new_means = lbs_points(human.canonical, weights, fk.rotations, fk.translations, pose.trans)
    blended = blended_rotations(weights, fk.rotations)
    covs = blended @ human.covariances() @ blended.transpose(0, 2, 1)
    quats = np.empty_like(human.quats)
    scales = np.empty_like(human.scales)
    for i in range(len(human)):
        quats[i], scales[i] = covariance_to_quat_scale(covs[i])
    posed = HumanGaussians(
        new_means, quats, scales, human.opacities.copy(), human.colors.copy(),
        human.canonical.copy(), human.base_weights.copy(), human.anchors.copy(),
    )
    return ComposedScene(posed, scene.object.copy(), scene.contacts.copy())


def deform_human_means_backward(
    scene: ComposedScene,
    template: BodyTemplate,
    pose: Pose,
    net: ModulationNet,
    d_posed_means: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Chain gradients wrt posed means back to canonical means and translation.

    Includes the dependence of the modulated weights on the canonical point.
    """
    fk = forward_kinematics(template, pose)
    human = scene.human
    d_posed_means = np.asarray(d_posed_means, dtype=np.float64)
    weights = modulated_weights_batch(human.canonical, human.base_weights, net)
    blended = blended_rotations(weights, fk.rotations)
    d_canonical = np.einsum("nij,ni->nj", blended, d_posed_means)
    moved = (
        np.einsum("kij,nj->nki", fk.rotations, human.canonical) + fk.translations[None]
    )  # (N, K, 3)
    d_weights = np.einsum("nki,ni->nk", moved, d_posed_means)
    for i in range(len(human)):
        _, _, d_point, _ = modulated_weights_backward(
            human.canonical[i], human.base_weights[i], net, d_weights[i]
        )
        d_canonical[i] += d_point
    d_trans = d_posed_means.sum(axis=0)
    return d_canonical, d_trans


def deform_object(scene: ComposedScene, t: RigidTransform) -> ComposedScene:
    """Rigidly move the object set: means transform, quaternions rotate, scales stay."""
    obj = scene.object
    rot_quat = matrix_to_quat(t.rotation)
    new = GaussianSet(
        t.apply(obj.means),
        quat_multiply(np.broadcast_to(rot_quat, obj.quats.shape), obj.quats),
        obj.scales.copy(),
        obj.opacities.copy(),
        obj.colors.copy(),
    )
    return ComposedScene(scene.human.copy(), new, scene.contacts.copy())


def compose(human: HumanGaussians, obj: GaussianSet, contacts=None) -> ComposedScene:
    """Merge human and object sets, human block first, tags preserved."""
    contacts = np.zeros(0, dtype=np.int64) if contacts is None else contacts
    return ComposedScene(human.copy(), obj.copy(), np.asarray(contacts, dtype=np.int64))


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    scale_threshold: float = 0.02
    split_factor: float = 1.6
    opacity_floor: float = 0.005
    max_scale: float = 0.5


def densify_and_prune(
    scene: ComposedScene,
    screen_grads: np.ndarray,
    cfg: DensifyConfig,
    rng: np.random.Generator,
) -> tuple[ComposedScene, dict]:
    """Clone small/split large high-gradient Gaussians, prune faint or huge ones.

    screen_grads holds one positional-gradient magnitude per Gaussian in
    packed order (human block first). Children inherit the parent's canonical
    anchor and contact membership.
    """
    screen_grads = np.asarray(screen_grads, dtype=np.float64)
    if len(screen_grads) != len(scene):
        raise ValueError("one gradient magnitude per Gaussian is required")
    n_h = len(scene.human)
    contact_mask = np.zeros(n_h, dtype=bool)
    contact_mask[scene.contacts] = True

    new_human, h_info = _densify_subset(scene.human, screen_grads[:n_h], cfg, rng, contact_mask)
    new_obj, o_info = _densify_subset(scene.object, screen_grads[n_h:], cfg, rng, None)
    new_contacts = np.flatnonzero(h_info["contact_mask"])
    info = {
        "pruned": h_info["pruned"] + o_info["pruned"],
        "cloned": h_info["cloned"] + o_info["cloned"],
        "split": h_info["split"] + o_info["split"],
        "human_source": h_info["source"],
        "object_source": o_info["source"],
    }
    return ComposedScene(new_human, new_obj, new_contacts), info


def _densify_subset(gset, grads, cfg: DensifyConfig, rng, contact_mask):
    n = len(gset)
    if n == 0:
        return gset.copy(), {"pruned": 0, "cloned": 0, "split": 0, "source": np.zeros(0, np.int64),
                             "contact_mask": np.zeros(0, bool)}
    max_scale = gset.scales.max(axis=1)
    prune = (gset.opacities < cfg.opacity_floor) | (max_scale > cfg.max_scale)
    hot = (grads > cfg.grad_threshold) & ~prune
    split = hot & (max_scale >= cfg.scale_threshold)
    clone = hot & ~split
    keep = ~prune & ~split

    source = [np.flatnonzero(keep), np.flatnonzero(clone)]
    split_idx = np.flatnonzero(split)
    source += [split_idx, split_idx]
    source = np.concatenate(source)

    means = gset.means[source].copy()
    quats = gset.quats[source].copy()
    scales = gset.scales[source].copy()
    opacities = gset.opacities[source].copy()
    colors = gset.colors[source].copy()

    n_keep = int(keep.sum())
    n_clone = int(clone.sum())
    n_split = len(split_idx)
    if n_split:
        rot = quat_to_matrix(quat_normalize(gset.quats[split_idx]))
        z = rng.standard_normal((n_split, 3))
        offsets = np.einsum("mij,mj->mi", rot * gset.scales[split_idx][:, None, :], z)
        a = n_keep + n_clone
        means[a : a + n_split] += offsets
        means[a + n_split :] -= offsets
        scales[a:] /= cfg.split_factor

    if isinstance(gset, HumanGaussians):
        new = HumanGaussians(
            means, quats, scales, opacities, colors,
            gset.canonical[source].copy(), gset.base_weights[source].copy(),
            gset.anchors[source].copy(),
        )
        new_contact = contact_mask[source]
    else:
        new = GaussianSet(means, quats, scales, opacities, colors)
        new_contact = np.zeros(len(source), bool)
    return new, {
        "pruned": int(prune.sum()),
        "cloned": n_clone,
        "split": n_split,
        "source": source,
        "contact_mask": new_contact,
    }


# ---------------------------------------------------------------------------
# checkpoint format: JSON header + flat binary records

RECORD_DTYPE = np.dtype(
    [
        ("mean", "<f8", (3,)),
        ("quat", "<f8", (4,)),
        ("scale", "<f8", (3,)),
        ("opacity", "<f8"),
        ("rgb", "<f8", (3,)),
        ("tag", "<i4"),
        ("anchor", "<i4"),
    ]
)


def save_scene(path: str | Path, scene: ComposedScene) -> None:
    n_h, n_o = len(scene.human), len(scene.object)
    rec = np.zeros(n_h + n_o, dtype=RECORD_DTYPE)
    means, quats, scales, opac, colors = scene.packed()
    rec["mean"] = means
    rec["quat"] = quats
    rec["scale"] = scales
    rec["opacity"] = opac
    rec["rgb"] = colors
    rec["tag"] = scene.tags
    rec["anchor"][:n_h] = scene.human.anchors
    rec["anchor"][n_h:] = -1
    header = {
        "version": CHECKPOINT_VERSION,
        "n_human": n_h,
        "n_object": n_o,
        "contacts": scene.contacts.tolist(),
    }
    write_header_block(path, header, rec.tobytes())


def load_scene(
    path: str | Path,
    template: BodyTemplate | None = None,
    beta: np.ndarray | None = None,
) -> ComposedScene:
    """Rebuild a scene; canonical anchors are restored when a template is given."""
    header, payload = read_header_block(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError("scene checkpoint version mismatch")
    rec = np.frombuffer(payload, dtype=RECORD_DTYPE)
    n_h = header["n_human"]
    n_o = header["n_object"]
    if len(rec) != n_h + n_o:
        raise ValueError("checkpoint record count disagrees with header")
    hu = rec[:n_h]
    ob = rec[n_h:]
    anchors = hu["anchor"].astype(np.int64)
    if template is not None:
        verts = template.shaped_vertices(
            np.zeros(template.shape_count) if beta is None else np.asarray(beta)
        )
        canonical = verts[anchors]
        base_weights = template.skin_weights[anchors]
    else:
        canonical = hu["mean"].astype(np.float64)
        base_weights = np.zeros((n_h, 0))
    human = HumanGaussians(
        hu["mean"].astype(np.float64), hu["quat"].astype(np.float64),
        hu["scale"].astype(np.float64), hu["opacity"].astype(np.float64),
        hu["rgb"].astype(np.float64),
        canonical, base_weights, anchors,
    )
    obj = GaussianSet(
        ob["mean"].astype(np.float64), ob["quat"].astype(np.float64),
        ob["scale"].astype(np.float64), ob["opacity"].astype(np.float64),
        ob["rgb"].astype(np.float64),
    )
    return ComposedScene(human, obj, np.array(header["contacts"], dtype=np.int64))
