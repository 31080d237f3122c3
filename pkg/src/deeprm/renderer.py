"""Deterministic software rasteriser for the rendered branch.

Pixel (row r, column c) samples the image-plane point (u=c, v=r); this is
the same convention ``geometry.project`` uses, so projected coordinates
index pixels directly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from .geometry import CropSpec, GeometryError, Intrinsics, Pose

AMBIENT = 0.3
NEAR = 1e-3
OCCLUSION_TOL = 0.005
LUMA = np.array([0.2126, 0.7152, 0.0722])


class MeshError(ValueError):
    pass


class RenderError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # V×3, meters, object frame
    triangles: np.ndarray  # T×3 int
    colors: np.ndarray  # V×3 in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.validate()
        v = self.vertices
        d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        self.diameter = float(np.sqrt(d2.max()))
        if self.diameter <= 0:
            raise MeshError("mesh diameter must be positive")

    def validate(self):
        if len(self.vertices) == 0 or len(self.triangles) == 0:
            raise MeshError("empty mesh")
        if len(self.colors) != len(self.vertices):
            raise MeshError(f"{len(self.colors)} colors for {len(self.vertices)} vertices")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex")
        if self.colors.min() < 0 or self.colors.max() > 1:
            raise MeshError("vertex colors must lie in [0, 1]")
        tri = self.vertices[self.triangles]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        if area.min() <= 1e-12:
            raise MeshError(f"degenerate triangle {int(area.argmin())}")

    def to_json(self) -> str:
        return json.dumps({
            "vertices": [float(x) for x in self.vertices.ravel()],
            "triangles": [int(x) for x in self.triangles.ravel()],
            "colors": [float(x) for x in self.colors.ravel()],
        })

    @classmethod
    def from_json(cls, text: str) -> "Mesh":
        d = json.loads(text)
        for key in ("vertices", "triangles", "colors"):
            if key not in d:
                raise MeshError(f"mesh JSON missing {key!r}")
        if len(d["vertices"]) % 3 or len(d["triangles"]) % 3 or len(d["colors"]) % 3:
            raise MeshError("flat mesh lists must have length divisible by 3")
        return cls(np.array(d["vertices"], dtype=np.float64), np.array(d["triangles"], dtype=np.int64),
                   np.array(d["colors"], dtype=np.float64))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


@dataclass
class RenderOut:
    rgb: np.ndarray  # H×W×3
    depth: np.ndarray  # H×W, 0 = background
    mask: np.ndarray  # H×W bool


@dataclass
class FlowField:
    flow: np.ndarray  # H×W×2, (du, dv) pixels
    valid: np.ndarray  # H×W bool


@numba.njit(cache=True)
def _owns_edge(du, dv):
    # exactly one direction of a shared edge owns the pixels lying on it
    return dv > 0.0 or (dv == 0.0 and du < 0.0)


@numba.njit(cache=True)
def _raster_kernel(u_all, v_all, z_all, tris, colors, shade, color, depth, zbuf):
    H, W = depth.shape
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        z0, z1, z2 = z_all[i0], z_all[i1], z_all[i2]
        if min(z0, z1, z2) <= NEAR:
            continue  # near-plane culling, no clipping
        u0, u1, u2 = u_all[i0], u_all[i1], u_all[i2]
        v0, v1, v2 = v_all[i0], v_all[i1], v_all[i2]
        area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
        if abs(area) < 1e-12:
            continue
        if area < 0:
            i1, i2 = i2, i1
            u1, u2 = u2, u1
            v1, v2 = v2, v1
            z1, z2 = z2, z1
            area = -area
        c0 = max(int(np.ceil(min(u0, u1, u2))), 0)
        c1 = min(int(np.floor(max(u0, u1, u2))), W - 1)
        r0 = max(int(np.ceil(min(v0, v1, v2))), 0)
        r1 = min(int(np.floor(max(v0, v1, v2))), H - 1)
        o0 = _owns_edge(u2 - u1, v2 - v1)
        o1 = _owns_edge(u0 - u2, v0 - v2)
        o2 = _owns_edge(u1 - u0, v1 - v0)
        for r in range(r0, r1 + 1):
            pv = float(r)
            for c in range(c0, c1 + 1):
                pu = float(c)
                e0 = (u2 - u1) * (pv - v1) - (v2 - v1) * (pu - u1)
                if e0 < 0 or (e0 == 0 and not o0):
                    continue
                e1 = (u0 - u2) * (pv - v2) - (v0 - v2) * (pu - u2)
                if e1 < 0 or (e1 == 0 and not o1):
                    continue
                e2 = (u1 - u0) * (pv - v0) - (v1 - v0) * (pu - u0)
                if e2 < 0 or (e2 == 0 and not o2):
                    continue
                l0, l1, l2 = e0 / area, e1 / area, e2 / area
                zz = 1.0 / (l0 / z0 + l1 / z1 + l2 / z2)
                if zz >= zbuf[r, c]:
                    continue
                zbuf[r, c] = zz
                depth[r, c] = zz
                w0, w1, w2 = l0 / z0 * zz, l1 / z1 * zz, l2 / z2 * zz
                for k in range(3):
                    color[r, c, k] = (w0 * colors[i0, k] + w1 * colors[i1, k] + w2 * colors[i2, k]) * shade[t]


def _raster(mesh: Mesh, pose: Pose, K: Intrinsics, size=None):
    """Unclamped shaded colour (brightness 1) and depth buffer."""
    H, W = size if size is not None else (K.height, K.width)
    cam = pose.transform(mesh.vertices)
    tri_cam = cam[mesh.triangles]
    normals = np.cross(tri_cam[:, 1] - tri_cam[:, 0], tri_cam[:, 2] - tri_cam[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    # headlight along the optical axis, two-sided
    shade = AMBIENT + (1.0 - AMBIENT) * np.abs(normals[:, 2])
    z_all = np.ascontiguousarray(cam[:, 2])
    safe_z = np.where(z_all > NEAR, z_all, 1.0)
    u_all = K.fx * cam[:, 0] / safe_z + K.cx
    v_all = K.fy * cam[:, 1] / safe_z + K.cy
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    zbuf = np.full((H, W), np.inf)
    _raster_kernel(u_all, v_all, z_all, mesh.triangles, mesh.colors, shade, color, depth, zbuf)
    return color, depth


def rasterize(mesh: Mesh, pose: Pose, K: Intrinsics, brightness: float = 1.0, size=None) -> RenderOut:
    if brightness <= 0:
        raise RenderError("brightness must be positive")
    if pose.t[2] <= 0:
        raise GeometryError("pose depth must be positive")
    color, depth = _raster(mesh, pose, K, size)
    rgb = np.clip(color * brightness, 0.0, 1.0)
    mask = depth > 0
    rgb[~mask] = 0.0
    return RenderOut(rgb, depth, mask)


def mean_luminance(rgb, mask):
    return float((rgb[mask] @ LUMA).mean())


def meter_brightness(mesh: Mesh, K: Intrinsics, poses, target: float = 0.5,
                     lo: float = 0.1, hi: float = 10.0, iters: int = 60) -> float:
    """Average-metering exposure: the brightness at which the mean foreground
    luminance over the reference renders equals ``target``."""
    if len(poses) == 0:
        raise RenderError("need at least one reference pose")
    raws = []
    for p in poses:
        c, d = _raster(mesh, p, K)
        raws.append(c[d > 0])
    raw = np.concatenate(raws)
    if len(raw) == 0:
        raise RenderError("object not visible from any reference pose")

    def lum(b):
        return float((np.clip(raw * b, 0.0, 1.0) @ LUMA).mean())

    if lum(lo) >= target:
        return lo
    if lum(hi) <= target:
        return hi
    a, b = lo, hi
    for _ in range(iters):
        m = 0.5 * (a + b)
        if lum(m) < target:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def backproject(depth, K: Intrinsics):
    """Camera-frame points for the foreground pixels; returns (rows, cols, P)."""
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols]
    pts = np.stack([(cols - K.cx) / K.fx * z, (rows - K.cy) / K.fy * z, z], axis=1)
    return rows, cols, pts


def gt_flow(mesh: Mesh, pose_rendered: Pose, pose_observed: Pose, K: Intrinsics, size=None,
            depth_rendered=None, depth_observed=None) -> FlowField:
    """Flow from the render at ``pose_rendered`` to the object at
    ``pose_observed``. Precomputed depth buffers may be passed in."""
    H, W = size if size is not None else (K.height, K.width)
    if depth_rendered is None:
        _, depth_rendered = _raster(mesh, pose_rendered, K, (H, W))
    if depth_observed is None:
        _, depth_observed = _raster(mesh, pose_observed, K, (H, W))
    flow = np.zeros((H, W, 2))
    valid = np.zeros((H, W), dtype=bool)
    rows, cols, pts = backproject(depth_rendered, K)
    if len(rows) == 0:
        return FlowField(flow, valid)
    if np.array_equal(pose_rendered.q, pose_observed.q) and np.array_equal(pose_rendered.t, pose_observed.t):
        # no motion: skip the round trip so the field is exactly zero
        valid[rows, cols] = depth_observed[rows, cols] > 0
        return FlowField(flow, valid)
    obj = (pts - pose_rendered.t) @ pose_rendered.R
    cam = obj @ pose_observed.R.T + pose_observed.t
    front = cam[:, 2] > NEAR
    zc = np.where(front, cam[:, 2], 1.0)
    u2 = K.fx * cam[:, 0] / zc + K.cx
    v2 = K.fy * cam[:, 1] / zc + K.cy
    flow[rows, cols, 0] = np.where(front, u2 - cols, 0.0)
    flow[rows, cols, 1] = np.where(front, v2 - rows, 0.0)
    ri, ci = np.round(v2).astype(np.int64), np.round(u2).astype(np.int64)
    inb = front & (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
    d_obs = np.zeros(len(rows))
    d_obs[inb] = depth_observed[ri[inb], ci[inb]]
    ok = inb & (d_obs > 0) & (np.abs(d_obs - cam[:, 2]) < OCCLUSION_TOL)
    valid[rows, cols] = ok
    flow[~valid] = 0.0
    return FlowField(flow, valid)


def _sample_grid(crop: CropSpec, out_size):
    H_out, W_out = out_size
    if H_out < 1 or W_out < 1:
        raise RenderError(f"bad output size {out_size}")
    if abs(crop.w / crop.h - W_out / H_out) > 1e-6 * (W_out / H_out):
        raise RenderError(f"crop aspect {crop.w / crop.h:.6f} != output aspect {W_out / H_out:.6f}")
    xs = (crop.u - crop.w) + (np.arange(W_out) + 0.5) * (2.0 * crop.w / W_out)
    ys = (crop.v - crop.h) + (np.arange(H_out) + 0.5) * (2.0 * crop.h / H_out)
    return xs, ys


@numba.njit(cache=True)
def _bilinear(img, xs, ys):
    """Zero-padded bilinear sampling of H×W×C at the grid xs × ys."""
    H, W, C = img.shape
    out = np.zeros((ys.shape[0], xs.shape[0], C))
    for i in range(ys.shape[0]):
        y0 = int(np.floor(ys[i]))
        ay = ys[i] - y0
        for j in range(xs.shape[0]):
            x0 = int(np.floor(xs[j]))
            ax = xs[j] - x0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= H:
                    continue
                wy = ay if dy else 1.0 - ay
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= W:
                        continue
                    wgt = wy * (ax if dx else 1.0 - ax)
                    for k in range(C):
                        out[i, j, k] += wgt * img[yy, xx, k]
    return out


def crop_resize(image, crop: CropSpec, out_size):
    """Bilinear crop-and-resize. Accepts H×W, H×W×C arrays or a FlowField;
    flow vectors are rescaled into output pixels."""
    xs, ys = _sample_grid(crop, out_size)
    if isinstance(image, FlowField):
        H_out, W_out = out_size
        v = _bilinear(image.valid.astype(np.float64)[..., None], xs, ys)[..., 0]
        valid = v >= 1.0 - 1e-9
        f = _bilinear(np.ascontiguousarray(image.flow * image.valid[..., None]), xs, ys)
        f[..., 0] *= W_out / (2.0 * crop.w)
        f[..., 1] *= H_out / (2.0 * crop.h)
        f[~valid] = 0.0
        return FlowField(f, valid)
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    out = _bilinear(np.ascontiguousarray(img[..., None] if squeeze else img), xs, ys)
    return out[..., 0] if squeeze else out


def save_png(path, rgb):
    arr = np.round(np.clip(np.asarray(rgb), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
