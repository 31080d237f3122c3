"""Synthetic single-object datasets over coloured primitive meshes.

Layout::

    meta.json
    objects/<name>.mesh.json
    splits/{train,test}/NNNNNN.png + NNNNNN.json
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, quat_from_axis_angle, quat_mul, random_quaternion
from .renderer import Mesh, MeshError, load_png, meter_brightness, rasterize, save_png

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
PRIMITIVES = ("cube", "tetrahedron", "prism", "cylinder")
SYMMETRIC = {"cube": False, "tetrahedron": False, "prism": False, "cylinder": True}
DEFAULT_PALETTE = (
    (0.85, 0.20, 0.20), (0.20, 0.75, 0.25), (0.20, 0.35, 0.90),
    (0.90, 0.80, 0.15), (0.80, 0.25, 0.80), (0.15, 0.80, 0.80),
    (0.95, 0.55, 0.15), (0.55, 0.55, 0.55),
)


class DatasetError(RuntimeError):
    pass


def _faces_to_mesh(faces, palette):
    """faces: list of planar polygons (k×3 vertex arrays, CCW seen from outside)."""
    verts, tris, cols = [], [], []
    for i, poly in enumerate(faces):
        color = palette[i % len(palette)]
        base = len(verts)
        verts.extend(poly)
        cols.extend([color] * len(poly))
        for j in range(1, len(poly) - 1):
            tris.append((base, base + j, base + j + 1))
    return Mesh(np.array(verts), np.array(tris), np.array(cols))


def make_primitive_mesh(kind: str, size_m: float = 0.1, palette=DEFAULT_PALETTE, segments: int = 16) -> Mesh:
    """Closed primitive with one flat colour per face. The cylinder uses one
    colour for the mantle and one for both caps, so it is rotationally
    symmetric."""
    if size_m <= 0:
        raise ValueError("size must be positive")
    s = size_m / 2.0
    if kind == "cube":
        c = np.array([[x, y, z] for x in (-s, s) for y in (-s, s) for z in (-s, s)])
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        return _faces_to_mesh([c[list(q)] for q in quads], palette)
    if kind == "tetrahedron":
        a = size_m / np.sqrt(8.0)  # edge length == size_m
        c = np.array([[a, a, a], [a, -a, -a], [-a, a, -a], [-a, -a, a]])
        faces = [(0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2)]
        return _faces_to_mesh([c[list(f)] for f in faces], palette)
    if kind == "prism":
        r = size_m / np.sqrt(3.0)  # triangle edge == size_m
        ang = np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        h = 0.75 * size_m
        bot = np.stack([r * np.cos(ang), r * np.sin(ang), np.full(3, -h)], 1)
        top = bot + [0, 0, 2 * h]
        faces = [bot[::-1], top]
        for i in range(3):
            j = (i + 1) % 3
            faces.append(np.array([bot[i], bot[j], top[j], top[i]]))
        return _faces_to_mesh(faces, palette)
    if kind == "cylinder":
        ang = np.arange(segments) * 2 * np.pi / segments
        ring = np.stack([s * np.cos(ang), s * np.sin(ang)], 1)
        bot = np.column_stack([ring, np.full(segments, -s)])
        top = np.column_stack([ring, np.full(segments, s)])
        cap, side = palette[0], palette[1]
        faces_cols = [(bot[::-1], cap), (top, cap)]
        for i in range(segments):
            j = (i + 1) % segments
            faces_cols.append((np.array([bot[i], bot[j], top[j], top[i]]), side))
        return _faces_to_mesh([f for f, _ in faces_cols], [c for _, c in faces_cols])
    raise ValueError(f"unknown primitive {kind!r}; expected one of {PRIMITIVES}")


@dataclass
class ObjectInfo:
    name: str
    kind: str
    mesh_file: str
    diameter: float
    symmetric: bool
    brightness: float
    points_seed: int


@dataclass
class GenConfig:
    seed: int = 0
    objects: tuple = ("cube", "prism", "cylinder")
    size_m: float = 0.1
    train_size: int = 2000
    test_size: int = 200
    width: int = 192
    height: int = 128
    focal: float = 200.0
    depth_range: tuple = (0.4, 1.2)
    margin: float = 0.15
    pixel_noise: float = 0.01
    brightness_jitter: float = 0.1
    min_fg_pixels: int = 100
    meter_poses: int = 12
    # stored test-split initial poses
    init_rot_sigma_deg: float = 15.0
    init_rot_max_deg: float = 45.0
    init_trans_sigma_xy_m: float = 0.01
    init_trans_sigma_z_m: float = 0.05

    @property
    def intrinsics(self):
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                          self.width, self.height)

    def to_dict(self):
        d = asdict(self)
        d["objects"] = list(self.objects)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("objects", "depth_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class DatasetMeta:
    version: int
    intrinsics: Intrinsics
    image_size: tuple  # (H, W)
    objects: list
    splits: dict
    seed: int
    generator: dict = field(default_factory=dict)
    lighting: str = "ambient 0.3 + two-sided Lambert headlight along the optical axis (stand-in model)"

    def to_dict(self):
        return {"version": self.version, "intrinsics": self.intrinsics.to_dict(),
                "image_size": list(self.image_size), "objects": [asdict(o) for o in self.objects],
                "splits": self.splits, "seed": self.seed, "generator": self.generator, "lighting": self.lighting}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["version"]), Intrinsics.from_dict(d["intrinsics"]), tuple(d["image_size"]),
                   [ObjectInfo(**o) for o in d["objects"]], dict(d["splits"]), int(d["seed"]),
                   d.get("generator", {}), d.get("lighting", ""))

    def object(self, name) -> ObjectInfo:
        for o in self.objects:
            if o.name == name:
                return o
        raise DatasetError(f"unknown object {name!r}")


@dataclass
class SampleRecord:
    sample_id: str
    split: str
    object: str
    gt: Pose
    image: str
    init: Pose | None = None

    def to_dict(self):
        d = {"sample_id": self.sample_id, "split": self.split, "object": self.object,
             "gt": self.gt.to_dict(), "image": self.image}
        if self.init is not None:
            d["init"] = self.init.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["sample_id"], d["split"], d["object"], Pose.from_dict(d["gt"]), d["image"],
                   Pose.from_dict(d["init"]) if "init" in d else None)


def _rng(seed, *keys):
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])


def sample_gt_pose(cfg: GenConfig, rng) -> Pose:
    K = cfg.intrinsics
    z = rng.uniform(*cfg.depth_range)
    mu, mv = cfg.margin * cfg.width, cfg.margin * cfg.height
    u = rng.uniform(mu, cfg.width - 1 - mu)
    v = rng.uniform(mv, cfg.height - 1 - mv)
    return Pose(random_quaternion(rng), np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z]))


def perturb_pose(gt: Pose, rot_sigma_deg, rot_max_deg, sigma_xy, sigma_z, rng, max_tries=100) -> Pose:
    """Random-axis rotation of half-normal angle (clamped) about the object
    centre plus gaussian translation noise; resamples until z > 0."""
    for _ in range(max_tries):
        angle = min(abs(rng.normal(0.0, np.deg2rad(rot_sigma_deg))), np.deg2rad(rot_max_deg))
        axis = rng.normal(size=3)
        while np.linalg.norm(axis) < 1e-9:
            axis = rng.normal(size=3)
        dq = quat_from_axis_angle(axis, angle)
        dt = rng.normal(size=3) * np.array([sigma_xy, sigma_xy, sigma_z])
        t = gt.t + dt
        if t[2] > 0:
            return Pose(quat_mul(dq, gt.q), t)
    raise ValueError(f"could not sample a pose in front of the camera in {max_tries} tries")


def _observe(mesh, pose, K, brightness, cfg: GenConfig, rng):
    b = brightness * rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter)
    out = rasterize(mesh, pose, K, b)
    img = out.rgb + rng.normal(0.0, cfg.pixel_noise, out.rgb.shape)
    return np.clip(img, 0.0, 1.0), int(out.mask.sum())


def generate_dataset(cfg: GenConfig, out_dir) -> DatasetMeta:
    out = Path(out_dir)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    K = cfg.intrinsics
    objects, meshes = [], {}
    for i, kind in enumerate(cfg.objects):
        name = f"{kind}_{i}"
        mesh = make_primitive_mesh(kind, cfg.size_m)
        rng = _rng(cfg.seed, 1, i)
        ref = [sample_gt_pose(cfg, rng) for _ in range(cfg.meter_poses)]
        b = meter_brightness(mesh, K, ref)
        mesh_file = f"objects/{name}.mesh.json"
        mesh.save(out / mesh_file)
        objects.append(ObjectInfo(name, kind, mesh_file, mesh.diameter, SYMMETRIC[kind], float(b), cfg.seed * 1000 + i))
        meshes[name] = mesh
    splits = {"train": cfg.train_size, "test": cfg.test_size}
    for split_idx, (split, n) in enumerate(splits.items()):
        d = out / "splits" / split
        d.mkdir(parents=True, exist_ok=True)
        for k in range(n):
            rng = _rng(cfg.seed, 2, split_idx, k)
            obj = objects[int(rng.integers(len(objects)))]
            for _ in range(1000):
                gt = sample_gt_pose(cfg, rng)
                img, fg = _observe(meshes[obj.name], gt, K, obj.brightness, cfg, rng)
                if fg >= cfg.min_fg_pixels:
                    break
            else:
                raise DatasetError(f"{split}/{k:06d}: no pose with >= {cfg.min_fg_pixels} foreground pixels")
            init = None
            if split == "test":
                init = perturb_pose(gt, cfg.init_rot_sigma_deg, cfg.init_rot_max_deg,
                                    cfg.init_trans_sigma_xy_m, cfg.init_trans_sigma_z_m, rng)
            sid = f"{k:06d}"
            save_png(d / f"{sid}.png", img)
            rec = SampleRecord(sid, split, obj.name, gt, f"splits/{split}/{sid}.png", init)
            (d / f"{sid}.json").write_text(json.dumps(rec.to_dict(), indent=1))
    meta = DatasetMeta(FORMAT_VERSION, K, (cfg.height, cfg.width), objects, splits, cfg.seed, cfg.to_dict())
    (out / "meta.json").write_text(json.dumps(meta.to_dict(), indent=1))
    log.info("wrote %s: %s", out, splits)
    return meta


class Dataset:
    """Loaded dataset directory; iterate a split with ``samples(split)``."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise DatasetError(f"{meta_path}: missing")
        try:
            raw = json.loads(meta_path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{meta_path}: corrupt JSON ({e})") from None
        if raw.get("version") != FORMAT_VERSION:
            raise DatasetError(f"{meta_path}: format version {raw.get('version')} != {FORMAT_VERSION}")
        self.meta = DatasetMeta.from_dict(raw)
        self.meshes = {}
        for o in self.meta.objects:
            p = self.root / o.mesh_file
            if not p.exists():
                raise DatasetError(f"object {o.name}: mesh file {p} missing")
            try:
                self.meshes[o.name] = Mesh.load(p)
            except (MeshError, ValueError) as e:
                raise DatasetError(f"object {o.name}: invalid mesh ({e})") from None
            if o.brightness <= 0:
                raise DatasetError(f"object {o.name}: brightness must be positive")
        self._records = {}

    @property
    def K(self):
        return self.meta.intrinsics

    def records(self, split):
        if split not in self._records:
            n = self.meta.splits.get(split)
            if n is None:
                raise DatasetError(f"no split {split!r}")
            recs = []
            for k in range(n):
                p = self.root / "splits" / split / f"{k:06d}.json"
                if not p.exists():
                    raise DatasetError(f"sample {split}/{k:06d}: record {p} missing")
                try:
                    rec = SampleRecord.from_dict(json.loads(p.read_text()))
                except (json.JSONDecodeError, KeyError, ValueError) as e:
                    raise DatasetError(f"sample {split}/{k:06d}: corrupt record ({e})") from None
                if rec.gt.t[2] <= 0:
                    raise DatasetError(f"sample {split}/{k:06d}: gt depth must be positive")
                recs.append(rec)
            self._records[split] = recs
        return self._records[split]

    def record(self, split, sample_id):
        for r in self.records(split):
            if r.sample_id == sample_id:
                return r
        raise DatasetError(f"unknown sample {split}/{sample_id}")

    def image(self, rec: SampleRecord):
        p = self.root / rec.image
        try:
            img = load_png(p)
        except Exception as e:  # PIL raises a zoo of types for truncated data
            raise DatasetError(f"sample {rec.split}/{rec.sample_id}: cannot read image {p} ({e})") from None
        if img.shape[:2] != tuple(self.meta.image_size):
            raise DatasetError(f"sample {rec.split}/{rec.sample_id}: image {img.shape[:2]} != {self.meta.image_size}")
        return img

    def samples(self, split, shuffle_seed=None):
        """Yields (SampleRecord, image) in file order or a seeded shuffle."""
        recs = self.records(split)
        order = np.arange(len(recs))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(recs))
        for i in order:
            yield recs[i], self.image(recs[i])


def load_dataset(root) -> Dataset:
    return Dataset(root)
