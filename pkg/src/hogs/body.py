"""Procedural skinned body template and linear blend skinning.

The template is a watertight articulated tube generated along a joint chain,
standing in for a licensed parametric body while keeping the deformation
equations structurally identical: per-joint rigid transforms from forward
kinematics, convex blend weights, and an MLP that modulates those weights
from a positional encoding of the canonical position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mathcore import (
    axis_angle_to_rotation,
    positional_encoding,
    positional_encoding_point_jacobian,
    rotation_jacobian,
    softmax,
    softmax_backward,
)


@dataclass(frozen=True)
class BodyTemplate:
    canonical_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    joints: np.ndarray  # (K, 3) rest positions
    parent: np.ndarray  # (K,) parent indices, parent[0] == -1
    skin_weights: np.ndarray  # (V, K) rows sum to 1
    shape_dirs: np.ndarray  # (V, 3, B)

    def __post_init__(self):
        v = np.asarray(self.canonical_vertices, dtype=np.float64)
        j = np.asarray(self.joints, dtype=np.float64)
        par = np.asarray(self.parent, dtype=np.int64)
        w = np.asarray(self.skin_weights, dtype=np.float64)
        sd = np.asarray(self.shape_dirs, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        K = len(j)
        if K < 2 or len(v) < K:
            raise ValueError("template requires V >= K >= 2")
        if par.shape != (K,) or par[0] != -1:
            raise ValueError("parent[0] must be -1 (root)")
        for k in range(1, K):
            if not 0 <= par[k] < k:
                raise ValueError("parent indices must form a tree rooted at joint 0")
        if w.shape != (len(v), K):
            raise ValueError("skin_weights must be (V, K)")
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("skin weight rows must be nonnegative and sum to 1")
        if sd.ndim != 3 or sd.shape[:2] != (len(v), 3):
            raise ValueError("shape_dirs must be (V, 3, B)")
        object.__setattr__(self, "canonical_vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "parent", par)
        object.__setattr__(self, "skin_weights", w)
        object.__setattr__(self, "shape_dirs", sd)

    @property
    def vertex_count(self) -> int:
        return len(self.canonical_vertices)

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    @property
    def shape_count(self) -> int:
        return self.shape_dirs.shape[2]

    def shaped_vertices(self, beta: np.ndarray) -> np.ndarray:
        """Shape blend applied additively to the canonical vertices."""
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (self.shape_count,):
            raise ValueError("beta does not match template shape count")
        if beta.size == 0:
            return self.canonical_vertices.copy()
        return self.canonical_vertices + self.shape_dirs @ beta

    def nearest_vertex(self, p: np.ndarray) -> int:
        """Nearest canonical vertex; ties break to the lowest vertex id."""
        d2 = np.sum((self.canonical_vertices - np.asarray(p)) ** 2, axis=1)
        return int(np.argmin(d2))

    def to_json(self) -> dict:
        return {
            "vertices": self.canonical_vertices.tolist(),
            "faces": self.faces.tolist(),
            "joints": self.joints.tolist(),
            "parents": self.parent.tolist(),
            "weights": self.skin_weights.tolist(),
            "shape_dirs": self.shape_dirs.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BodyTemplate":
        return cls(
            np.array(obj["vertices"], dtype=np.float64),
            np.array(obj["faces"], dtype=np.int64),
            np.array(obj["joints"], dtype=np.float64),
            np.array(obj["parents"], dtype=np.int64),
            np.array(obj["weights"], dtype=np.float64),
            np.array(obj["shape_dirs"], dtype=np.float64),
        )


@dataclass
class Pose:
    theta: np.ndarray  # (K, 3) axis-angle per joint
    beta: np.ndarray  # (B,)
    trans: np.ndarray  # (3,) global translation

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.theta.ndim != 2 or self.theta.shape[1] != 3:
            raise ValueError("theta must be (K, 3)")
        if not (
            np.all(np.isfinite(self.theta))
            and np.all(np.isfinite(self.beta))
            and np.all(np.isfinite(self.trans))
        ):
            raise ValueError("pose entries must be finite")

    @classmethod
    def rest(cls, joint_count: int, shape_count: int) -> "Pose":
        return cls(np.zeros((joint_count, 3)), np.zeros(shape_count), np.zeros(3))

    def copy(self) -> "Pose":
        return Pose(self.theta.copy(), self.beta.copy(), self.trans.copy())

    def to_json(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "trans": self.trans.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(np.array(obj["theta"]), np.array(obj["beta"]), np.array(obj["trans"]))


@dataclass
class FkResult:
    rotations: np.ndarray  # (K, 3, 3) global joint rotations
    translations: np.ndarray  # (K, 3) translation part of each blend transform
    posed_joints: np.ndarray  # (K, 3) joint positions before global translation
    globals_: np.ndarray  # (K, 4, 4) global joint frames


def forward_kinematics(template: BodyTemplate, pose: Pose) -> FkResult:
    """Compose parent-to-child transforms; the rest pose maps joints to themselves.

    Returns per-joint (R_k, t_k) such that a point rigidly bound to joint k
    moves as R_k p + t_k (identity at rest).
    """
    K = template.joint_count
    if pose.theta.shape != (K, 3):
        raise ValueError("pose joint count does not match template")
    joints = template.joints
    parent = template.parent
    globals_ = np.empty((K, 4, 4))
    for k in range(K):
        local = np.eye(4)
        local[:3, :3] = axis_angle_to_rotation(pose.theta[k])
        local[:3, 3] = joints[k] if k == 0 else joints[k] - joints[parent[k]]
        globals_[k] = local if k == 0 else globals_[parent[k]] @ local
    rotations = globals_[:, :3, :3].copy()
    posed = globals_[:, :3, 3].copy()
    translations = posed - np.einsum("kij,kj->ki", rotations, joints)
    return FkResult(rotations, translations, posed, globals_)


def fk_joint_jacobian(template: BodyTemplate, pose: Pose) -> np.ndarray:
    """d posed_joint[j] / d theta[k, c], shape (K, 3, K, 3)."""
    K = template.joint_count
    fk = forward_kinematics(template, pose)
    g = fk.globals_
    parent = template.parent
    rod = np.stack([rotation_jacobian(pose.theta[k]) for k in range(K)])
    jac = np.zeros((K, 3, K, 3))
    for j in range(K):
        k = j
        chain = []
        while k != -1:
            chain.append(k)
            k = parent[k]
        for k in chain:
            gp = np.eye(4) if k == 0 else g[parent[k]]
            x_kj = _rigid_inverse(g[k]) @ g[j]
            for c in range(3):
                dlocal = np.zeros((4, 4))
                dlocal[:3, :3] = rod[k, c]
                jac[j, :, k, c] = (gp @ dlocal @ x_kj)[:3, 3]
    return jac


def _rigid_inverse(g: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = g[:3, :3].T
    out[:3, 3] = -g[:3, :3].T @ g[:3, 3]
    return out


def lbs_point(p_c, w, rotations, translations, b) -> np.ndarray:
    """Blend of per-joint rigid transforms plus global translation."""
    p_c = np.asarray(p_c, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    moved = rotations @ p_c + translations  # (K, 3)
    return w @ moved + np.asarray(b, dtype=np.float64)


def lbs_points(points, weights, rotations, translations, b) -> np.ndarray:
    """Vectorized lbs_point over N points with per-point weight rows."""
    moved = np.einsum("kij,nj->nki", rotations, points) + translations[None]
    return np.einsum("nk,nki->ni", weights, moved) + np.asarray(b, dtype=np.float64)


def lbs_covariance(cov_c, w, rotations) -> np.ndarray:
    """Conjugate the canonical covariance by the blended rotation; PSD by construction."""
    blended = np.einsum("k,kij->ij", np.asarray(w, dtype=np.float64), rotations)
    return blended @ np.asarray(cov_c, dtype=np.float64) @ blended.T


def blended_rotations(weights, rotations) -> np.ndarray:
    """(N, 3, 3) blended rotation matrices for N weight rows."""
    return np.einsum("nk,kij->nij", np.asarray(weights, dtype=np.float64), rotations)


@dataclass
class ModulationNet:
    """MLP producing per-joint blend-weight offsets from an encoded position.

    Five fully connected layers (input, three hidden, output) with ReLU
    between layers and a linear output.
    """

    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != 5 or len(self.biases) != 5:
            raise ValueError("expected exactly 5 fully connected layers")
        for w, b, w_next in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape does not match layer output")
            if w_next is not None and w_next.shape[0] != w.shape[1]:
                raise ValueError("layer shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def freq_count(self) -> int:
        return (self.input_dim - 3) // 6

    @classmethod
    def create(
        cls,
        joint_count: int,
        freq_count: int = 10,
        hidden: int = 64,
        seed: int = 0,
        init_scale: float = 0.0,
    ) -> "ModulationNet":
        """init_scale == 0 gives the zero net (no modulation beyond re-normalization)."""
        rng = np.random.default_rng(seed)
        dims = [3 + 6 * freq_count, hidden, hidden, hidden, hidden, joint_count]
        weights = [
            rng.normal(0.0, init_scale / np.sqrt(dims[i]), size=(dims[i], dims[i + 1]))
            for i in range(5)
        ]
        biases = [np.zeros(dims[i + 1]) for i in range(5)]
        return cls(weights, biases)

    def to_json(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModulationNet":
        return cls(
            [np.array(w, dtype=np.float64) for w in obj["weights"]],
            [np.array(b, dtype=np.float64) for b in obj["biases"]],
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x: (D,) or (N, D); returns (K,) or (N, K)."""
        h = np.asarray(x, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < 4:
                h = np.maximum(h, 0.0)
        return h

    def forward_with_cache(self, x: np.ndarray):
        h = np.asarray(x, dtype=np.float64)
        cache = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < 4:
                h = np.maximum(h, 0.0)
            cache.append(h)
        return h, cache

    def backward(self, cache, d_out: np.ndarray):
        """Gradients of a scalar loss wrt parameters and the input.

        Returns (d_weights, d_biases, d_input). Accepts the cache from
        forward_with_cache; batched inputs accumulate over the batch.
        """
        d_w = [np.zeros_like(w) for w in self.weights]
        d_b = [np.zeros_like(b) for b in self.biases]
        grad = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
        for i in range(4, -1, -1):
            inp = np.atleast_2d(cache[i])
            if i < 4:
                grad = grad * (np.atleast_2d(cache[i + 1]) > 0)
            d_w[i] = inp.T @ grad
            d_b[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        d_input = grad if np.asarray(d_out).ndim > 1 else grad[0]
        return d_w, d_b, d_input


def modulated_weights(p_c, base_w, net: ModulationNet) -> np.ndarray:
    """softmax(base weights + MLP offsets); always a valid convex combination."""
    enc = positional_encoding(p_c, net.freq_count)
    m = net.forward(enc)
    return softmax(np.asarray(base_w, dtype=np.float64) + m)


def modulated_weights_batch(points, base_w, net: ModulationNet) -> np.ndarray:
    enc = np.stack([positional_encoding(p, net.freq_count) for p in points])
    m = net.forward(enc)
    return softmax(np.asarray(base_w, dtype=np.float64) + m, axis=-1)


def modulated_weights_backward(p_c, base_w, net: ModulationNet, d_weights):
    """Chain a gradient wrt the blended weights back to net params and the point.

    Returns (d_net_weights, d_net_biases, d_point, d_base).
    """
    enc = positional_encoding(p_c, net.freq_count)
    m, cache = net.forward_with_cache(enc)
    out = softmax(np.asarray(base_w, dtype=np.float64) + m)
    d_logits = softmax_backward(out, np.asarray(d_weights, dtype=np.float64))
    d_w, d_b, d_enc = net.backward(cache, d_logits)
    d_point = positional_encoding_point_jacobian(p_c, net.freq_count).T @ d_enc
    return d_w, d_b, d_point, d_logits


def generate_toy_body(
    joint_count: int,
    shape_count: int,
    seed: int = 0,
    bone_length: float = 0.12,
    radius: float = 0.05,
    rings_per_bone: int = 3,
    ring_segments: int = 8,
) -> BodyTemplate:
    """Watertight articulated tube along a joint chain with falloff skin weights."""
    if joint_count < 2:
        raise ValueError("joint_count must be >= 2")
    rng = np.random.default_rng(seed)
    K = joint_count
    joints = np.zeros((K, 3))
    joints[:, 1] = np.arange(K) * bone_length
    parent = np.arange(-1, K - 1)

    n_rings = (K - 1) * rings_per_bone + 1
    ys = np.linspace(0.0, (K - 1) * bone_length, n_rings)
    s = ys / max(ys[-1], 1e-12)
    amp = rng.uniform(0.08, 0.22)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    freq = rng.integers(1, 3)
    r_profile = radius * (1.0 + amp * np.sin(freq * np.pi * s + phase))

    angles = 2.0 * np.pi * np.arange(ring_segments) / ring_segments
    verts = []
    for y, r in zip(ys, r_profile):
        for a in angles:
            verts.append([r * np.cos(a), y, r * np.sin(a)])
    bottom_apex = len(verts)
    verts.append([0.0, ys[0] - 0.6 * r_profile[0], 0.0])
    top_apex = len(verts)
    verts.append([0.0, ys[-1] + 0.6 * r_profile[-1], 0.0])
    verts = np.array(verts)

    faces = []
    m = ring_segments
    for i in range(n_rings - 1):
        for j in range(m):
            a = i * m + j
            b = i * m + (j + 1) % m
            c = (i + 1) * m + (j + 1) % m
            d = (i + 1) * m + j
            faces.append([a, b, c])
            faces.append([a, c, d])
    for j in range(m):
        faces.append([bottom_apex, (j + 1) % m, j])
        base = (n_rings - 1) * m
        faces.append([top_apex, base + j, base + (j + 1) % m])
    faces = np.array(faces, dtype=np.int64)

    d = np.linalg.norm(verts[:, None, :] - joints[None, :, :], axis=2)
    sigma = 0.8 * bone_length
    w = np.exp(-((d / sigma) ** 2))
    w /= w.sum(axis=1, keepdims=True)

    shape_dirs = np.zeros((len(verts), 3, shape_count))
    if shape_count:
        radial = verts - np.stack([np.zeros(len(verts)), verts[:, 1], np.zeros(len(verts))], axis=1)
        norms = np.linalg.norm(radial, axis=1, keepdims=True)
        radial = np.where(norms > 1e-9, radial / np.maximum(norms, 1e-9), 0.0)
        span = max(ys[-1], 1e-12)
        for b_idx in range(shape_count):
            center = rng.uniform(0.1, 0.9) * span
            width = rng.uniform(0.1, 0.3) * span
            gain = rng.uniform(0.01, 0.03)
            bump = gain * np.exp(-(((verts[:, 1] - center) / width) ** 2))
            shape_dirs[:, :, b_idx] = radial * bump[:, None]

    return BodyTemplate(verts, faces, joints, parent, w, shape_dirs)
