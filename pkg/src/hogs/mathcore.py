"""Rotation, softmax and positional-encoding primitives used everywhere else.

All math is 64-bit; rotations are kept orthonormal to 1e-9 so downstream
finite-difference gradient checks have headroom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z); normalized at construction."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n == 0.0:
            raise ValueError("zero quaternion cannot be normalized")
        object.__setattr__(self, "w", self.w / n)
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64)
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_axis_angle(cls, v) -> "Quaternion":
        return cls.from_array(axis_angle_to_quaternion(v))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())

    def multiply(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))


@dataclass(frozen=True)
class AxisAngle:
    """Rotation encoded as direction * angle, canonicalized to angle in [0, pi]."""

    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", axis_angle_canonical(self.v))

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.v))


def axis_angle_canonical(v) -> np.ndarray:
    """Map any axis-angle vector onto the representative with angle in [0, pi]."""
    v = _as_vec3(v)
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return v.copy()
    axis = v / angle
    angle = angle % (2.0 * np.pi)
    if angle > np.pi:
        angle = 2.0 * np.pi - angle
        axis = -axis
    return axis * angle


def axis_angle_to_rotation(v) -> np.ndarray:
    """Rodrigues' formula; the zero vector maps to the identity."""
    v = _as_vec3(v)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def axis_angle_to_quaternion(v) -> np.ndarray:
    v = _as_vec3(v)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def skew(v) -> np.ndarray:
    v = _as_vec3(v)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_jacobian(v) -> np.ndarray:
    """d R(v) / d v_i for Rodrigues' formula, shape (3, 3, 3).

    Uses the closed form dR/dv_i = ((v_i [v]x + [v x (I - R) e_i]x) / |v|^2) R
    with the small-angle limit dR/dv_i = [e_i]x.
    """
    v = _as_vec3(v)
    angle2 = float(v @ v)
    out = np.empty((3, 3, 3))
    if angle2 < 1e-16:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = skew(e)
        return out
    rot = axis_angle_to_rotation(v)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        term = v[i] * skew(v) + skew(np.cross(v, (np.eye(3) - rot) @ e))
        out[i] = (term / angle2) @ rot
    return out


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion(s) (..., 4) in (w, x, y, z) order to rotation matrix (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0 branch-robust, Shepperd)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("expected a single 3x3 matrix")
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Stable softmax (max subtraction); rows sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, d_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output y and upstream d_out."""
    dot = np.sum(y * d_out, axis=axis, keepdims=True)
    return y * (d_out - dot)


def positional_encoding(p, freq_count: int) -> np.ndarray:
    """[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)].

    Output dimension is 3 + 6 * freq_count; freq_count = 10 gives 63.
    """
    p = _as_vec3(p)
    if freq_count < 0:
        raise ValueError("freq_count must be >= 0")
    parts = [p]
    for k in range(freq_count):
        arg = (2.0**k) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts)


def positional_encoding_point_jacobian(p, freq_count: int) -> np.ndarray:
    """d encoding / d p, shape (3 + 6L, 3)."""
    p = _as_vec3(p)
    dim = 3 + 6 * freq_count
    jac = np.zeros((dim, 3))
    jac[:3] = np.eye(3)
    row = 3
    for k in range(freq_count):
        f = (2.0**k) * np.pi
        arg = f * p
        for j in range(3):
            jac[row + j, j] = f * np.cos(arg[j])
            jac[row + 3 + j, j] = -f * np.sin(arg[j])
        row += 6
    return jac
