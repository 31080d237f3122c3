"""Rigid-body helpers: quaternions, poses, pinhole projection, pose-update
encoding and region-of-interest crops.

Quaternions are (w, x, y, z) arrays. Poses are object-to-camera transforms,
translation in meters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quaternions (numpy, float64)

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise GeometryError(f"cannot normalise quaternion {q}")
    q = q / n
    return -q if q[0] < 0 else q


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotmat(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_normalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def quat_angle(a, b):
    """Rotation angle (radians) taking ``a`` to ``b``."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(1.0, d))


def random_quaternion(rng):
    """Uniform over SO(3)."""
    return quat_normalize(rng.normal(size=4))


# ---------------------------------------------------------------------------
# value types

@dataclass(frozen=True)
class Pose:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError(f"non-finite translation {t}")
        object.__setattr__(self, "t", t)

    @property
    def R(self):
        return quat_to_rotmat(self.q)

    def transform(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.t

    def as_vector(self):
        return np.concatenate([self.q, self.t])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:4], v[4:7])

    @classmethod
    def identity(cls, t=(0.0, 0.0, 1.0)):
        return cls(np.array([1.0, 0, 0, 0]), np.asarray(t, dtype=np.float64))

    def to_dict(self):
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["q"], dtype=np.float64), np.array(d["t"], dtype=np.float64))


def compose(a: Pose, b: Pose) -> Pose:
    """a ∘ b: apply b then a."""
    return Pose(quat_mul(a.q, b.q), a.R @ b.t + a.t)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class UpdateVec:
    v_x: float
    v_y: float
    v_z: float
    dq: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))

    def __post_init__(self):
        object.__setattr__(self, "dq", quat_normalize(self.dq))
        if not all(np.isfinite([self.v_x, self.v_y, self.v_z])):
            raise GeometryError("non-finite update")


@dataclass(frozen=True)
class CropSpec:
    """Axis-aligned window centred at (u, v) with half-extents (w, h) in
    source pixels. Pixel centres sit on integer coordinates."""
    u: float
    v: float
    w: float
    h: float
    src_width: int
    src_height: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0) or not np.all(np.isfinite([self.u, self.v, self.w, self.h])):
            raise GeometryError(f"degenerate crop {self}")

    @classmethod
    def full_frame(cls, width, height):
        return cls((width - 1) / 2.0, (height - 1) / 2.0, width / 2.0, height / 2.0, width, height)


# ---------------------------------------------------------------------------
# projection and update parameterisation

def project(K: Intrinsics, p):
    p = np.asarray(p, dtype=np.float64)
    if p[..., 2].min() <= 0:
        raise GeometryError("point behind camera")
    return np.stack([K.fx * p[..., 0] / p[..., 2] + K.cx, K.fy * p[..., 1] / p[..., 2] + K.cy], axis=-1)


def encode_update(src: Pose, tgt: Pose, K: Intrinsics) -> UpdateVec:
    if src.t[2] <= 0 or tgt.t[2] <= 0:
        raise GeometryError("non-positive depth")
    v_x = K.fx * (tgt.t[0] / tgt.t[2] - src.t[0] / src.t[2])
    v_y = K.fy * (tgt.t[1] / tgt.t[2] - src.t[1] / src.t[2])
    v_z = np.log(src.t[2] / tgt.t[2])
    dq = quat_mul(tgt.q, quat_conj(src.q))
    return UpdateVec(float(v_x), float(v_y), float(v_z), dq)


def decode_update(src: Pose, u: UpdateVec, K: Intrinsics) -> Pose:
    if src.t[2] <= 0:
        raise GeometryError("non-positive source depth")
    with np.errstate(over="raise"):
        try:
            z = src.t[2] * np.exp(-u.v_z)
        except FloatingPointError:
            raise GeometryError(f"exp overflow for v_z={u.v_z}") from None
    if not np.isfinite(z) or z <= 0:
        raise GeometryError(f"decoded depth {z} invalid")
    x = (u.v_x / K.fx + src.t[0] / src.t[2]) * z
    y = (u.v_y / K.fy + src.t[1] / src.t[2]) * z
    return Pose(quat_mul(u.dq, src.q), np.array([x, y, z]))


def bbox_corners(vertices):
    v = np.asarray(vertices, dtype=np.float64)
    lo, hi = v.min(axis=0), v.max(axis=0)
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def crop_from_pose(p: Pose, corners, K: Intrinsics, pad: float = 1.4, aspect: float = 4.0 / 3.0) -> CropSpec:
    """ROI centred on the projected object centre, enclosing the projected
    bounding-box ``corners`` (object frame, 8×3) scaled by ``pad``, with
    width/height forced to ``aspect`` by growing the short side."""
    if pad < 1:
        raise GeometryError("pad must be >= 1")
    if p.t[2] <= 0:
        raise GeometryError("object centre behind camera")
    cam = p.transform(corners)
    front = cam[cam[:, 2] > 1e-6]
    if len(front) == 0:
        raise GeometryError("bounding box entirely behind camera")
    uv = project(K, front)
    c = project(K, p.t)
    w = max(np.abs(uv[:, 0] - c[0]).max(), 0.5) * pad
    h = max(np.abs(uv[:, 1] - c[1]).max(), 0.5) * pad
    if w < h * aspect:
        w = h * aspect
    else:
        h = w / aspect
    return CropSpec(float(c[0]), float(c[1]), float(w), float(h), K.width, K.height)


# ---------------------------------------------------------------------------
# batched torch versions used on the differentiable path

def quat_to_rotmat_t(q):
    """q: B×4 (normalised inside) -> B×3×3."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def quat_mul_t(a, b):
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def decode_update_t(src_q, src_t, v, dq, fx, fy):
    """Batched decode. src_q: B×4, src_t: B×3, v: B×3 (v_x, v_y px; v_z), dq: B×4.

    Returns (q, t) with the translation independent of ``dq`` and the
    rotation independent of ``v``.
    """
    z = src_t[:, 2] * torch.exp(-v[:, 2])
    x = (v[:, 0] / fx + src_t[:, 0] / src_t[:, 2]) * z
    y = (v[:, 1] / fy + src_t[:, 1] / src_t[:, 2]) * z
    q = quat_mul_t(dq, src_q)
    return q, torch.stack([x, y, z], dim=-1)
