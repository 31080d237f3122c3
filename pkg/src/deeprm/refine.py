"""Iterative render-and-compare refinement, training and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import gradcore as gc
from .datakit import Dataset, perturb_pose
from .geometry import (CropSpec, GeometryError, Intrinsics, Pose, UpdateVec, bbox_corners, crop_from_pose,
                       decode_update_t)
from .network import DeepRMNet, ScaleConfig
from .objectives import (EvalReport, EvalRow, LossConfig, add, add_s, dpml_t, ms_epe, sample_model_points,
                         total_loss)
from .renderer import Mesh, _raster, crop_resize, gt_flow

log = logging.getLogger(__name__)


class RefineError(RuntimeError):
    pass


@dataclass
class NoiseConfig:
    rot_sigma_deg: float = 15.0
    rot_max_deg: float = 45.0
    trans_sigma_xy_m: float = 0.01
    trans_sigma_z_m: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.rot_sigma_deg, self.rot_max_deg, self.trans_sigma_xy_m, self.trans_sigma_z_m) < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.rot_max_deg < self.rot_sigma_deg:
            raise ValueError("rot_max_deg must be >= rot_sigma_deg")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.1
    milestones: tuple = (10, 15)
    warmup_epochs: int = 0
    warmup_factor: float = 0.1
    epochs: int = 20
    batch_size: int = 16
    train_iterations: int = 6
    test_iterations: int = 12
    trunk: str = "lstm"
    phi: int = 0
    alpha: float = 0.1
    flow_weights: tuple = (0.08, 0.04, 0.02, 0.01)
    crop_hw: tuple = (64, 96)
    pad: float = 1.4
    n_points: int = 500
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.train_iterations < 1:
            raise ValueError("train_iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        self.milestones = tuple(self.milestones)
        self.flow_weights = tuple(self.flow_weights)
        self.crop_hw = tuple(self.crop_hw)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr * self.lr_decay ** sum(epoch >= m for m in self.milestones)
        if epoch < self.warmup_epochs:
            lr *= self.warmup_factor
        return lr

    def to_dict(self):
        d = asdict(self)
        for k in ("milestones", "flow_weights", "crop_hw"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**d)

    def scale_config(self):
        return ScaleConfig(phi=self.phi, input_hw=self.crop_hw, trunk=self.trunk)


@dataclass
class ObjectContext:
    """Everything the loop needs about one object."""
    name: str
    mesh: Mesh
    brightness: float
    symmetric: bool
    points: np.ndarray
    diameter: float

    def __post_init__(self):
        self.corners = bbox_corners(self.mesh.vertices)
        self._pts_t = torch.tensor(self.points, dtype=torch.float32)

    @property
    def model_points(self):
        from .objectives import ModelPoints
        return ModelPoints(self.points, self.symmetric)


def object_contexts(ds: Dataset, n_points=500):
    out = {}
    for o in ds.meta.objects:
        mesh = ds.meshes[o.name]
        pts = sample_model_points(mesh, n_points, o.points_seed, o.symmetric).points
        out[o.name] = ObjectContext(o.name, mesh, o.brightness, o.symmetric, pts, mesh.diameter)
    return out


@dataclass
class RefineTrajectory:
    poses: list
    updates: list = field(default_factory=list)


def sample_init_pose(gt: Pose, cfg: NoiseConfig, rng) -> Pose:
    return perturb_pose(gt, cfg.rot_sigma_deg, cfg.rot_max_deg, cfg.trans_sigma_xy_m, cfg.trans_sigma_z_m, rng)


# ---------------------------------------------------------------------------
# one render-and-compare step over a batch

def _render_inputs(observed, poses, objs, K: Intrinsics, crop_hw, pad):
    H, W = crop_hw
    xs, crops, depths = [], [], []
    for img, pose, obj in zip(observed, poses, objs):
        if pose.t[2] <= 0:
            raise RefineError(f"pose behind camera: t={pose.t}")
        try:
            crop = crop_from_pose(pose, obj.corners, K, pad, aspect=W / H)
        except GeometryError as e:
            raise RefineError(f"cannot crop at pose t={pose.t}: {e}") from None
        color, depth = _raster(obj.mesh, pose, K)
        rendered = np.clip(color * obj.brightness, 0.0, 1.0)
        obs_c = crop_resize(img, crop, crop_hw)
        ren_c = crop_resize(rendered, crop, crop_hw)
        xs.append(np.concatenate([obs_c, ren_c], axis=2).transpose(2, 0, 1))
        crops.append(crop)
        depths.append(depth)
    x = torch.from_numpy(np.ascontiguousarray(np.stack(xs), dtype=np.float32))
    return x, crops, depths


def _decode(out, poses, crops, K, dtype=torch.float32):
    src_q = torch.tensor(np.stack([p.q for p in poses]), dtype=dtype)
    src_t = torch.tensor(np.stack([p.t for p in poses]), dtype=dtype)
    # translation head is in crop-normalised units
    scale = torch.tensor([[c.w, c.h, 1.0] for c in crops], dtype=dtype)
    v = out.translation.to(dtype) * scale
    q, t = decode_update_t(src_q, src_t, v, out.quaternion.to(dtype), K.fx, K.fy)
    return q, t, v


def _to_poses(q, t):
    qn = q.detach().double().numpy()
    tn = t.detach().double().numpy()
    poses = []
    for a, b in zip(qn, tn):
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))) or b[2] <= 0:
            raise RefineError(f"refinement produced an invalid pose q={a}, t={b}")
        poses.append(Pose(a, b))
    return poses


def refine_batch(observed, inits, objs, model: DeepRMNet, K: Intrinsics, iterations: int,
                 crop_hw=None, pad=1.4):
    """Refine a batch of independent estimates; one trajectory per sample."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    crop_hw = tuple(crop_hw or model.cfg.input_hw)
    poses = list(inits)
    trajs = [RefineTrajectory([p]) for p in poses]
    state = None
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for _ in range(iterations):
            x, crops, _ = _render_inputs(observed, poses, objs, K, crop_hw, pad)
            out = model(x.to(dtype), state, with_flow=False)
            state = out.state
            q, t, v = _decode(out, poses, crops, K, torch.float64)
            poses = _to_poses(q, t)
            vn = v.numpy()
            dq = out.quaternion.double().numpy()
            for tr, p, vi, qi in zip(trajs, poses, vn, dq):
                tr.poses.append(p)
                tr.updates.append(UpdateVec(float(vi[0]), float(vi[1]), float(vi[2]), qi))
    return trajs


def refine_step(observed, pose: Pose, state, model: DeepRMNet, obj: ObjectContext, K: Intrinsics,
                crop_hw=None, pad=1.4):
    """Single render-and-compare update. Returns (new pose, new state, update)."""
    crop_hw = tuple(crop_hw or model.cfg.input_hw)
    with torch.no_grad():
        x, crops, _ = _render_inputs([observed], [pose], [obj], K, crop_hw, pad)
        out = model(x.to(next(model.parameters()).dtype), state, with_flow=False)
        q, t, v = _decode(out, [pose], crops, K, torch.float64)
    new = _to_poses(q, t)[0]
    vn = v[0].numpy()
    return new, out.state, UpdateVec(float(vn[0]), float(vn[1]), float(vn[2]), out.quaternion[0].double().numpy())


def refine(observed, init: Pose, iterations: int, model: DeepRMNet, obj: ObjectContext, K: Intrinsics,
           crop_hw=None, pad=1.4) -> RefineTrajectory:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    return refine_batch([observed], [init], [obj], model, K, iterations, crop_hw, pad)[0]


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainSample:
    observed: np.ndarray
    gt: Pose
    obj: ObjectContext
    init: Pose


def iteration_loss(out, poses, crops, K, gt_q, gt_t, pts, gt_flow_t=None, gt_valid=None, loss_cfg=LossConfig()):
    """Loss of one unrolled iteration given the network output for the
    current estimates. Returns (loss, dpml, ms_epe, decoded (q, t))."""
    q, t, _ = _decode(out, poses, crops, K, gt_q.dtype)
    d = dpml_t(q, t, gt_q, gt_t, pts).mean()
    if gt_flow_t is not None and loss_cfg.alpha > 0:
        e = ms_epe(out.flows, gt_flow_t, gt_valid, loss_cfg)
    else:
        e = torch.zeros((), dtype=d.dtype)
    return total_loss(d, e, loss_cfg), d, e, (q, t)


def train_step(batch, model: DeepRMNet, optimizer, cfg: TrainConfig, K: Intrinsics, diag_dir=None):
    """Unrolled multi-iteration loss and one optimiser update.

    Gradients flow through the recurrent state across iterations but not
    through the rendered image of the next iteration.
    """
    if not batch:
        raise ValueError("empty batch")
    loss_cfg = LossConfig(cfg.alpha, cfg.flow_weights)
    observed = [s.observed for s in batch]
    objs = [s.obj for s in batch]
    gt_q = torch.tensor(np.stack([s.gt.q for s in batch]), dtype=torch.float32)
    gt_t = torch.tensor(np.stack([s.gt.t for s in batch]), dtype=torch.float32)
    pts = torch.stack([s.obj._pts_t for s in batch])
    use_flow = cfg.alpha > 0
    gt_depths = [_raster(s.obj.mesh, s.gt, K)[1] for s in batch] if use_flow else None

    poses = [s.init for s in batch]
    state = None
    losses, dpmls, epes = [], [], []
    for _ in range(cfg.train_iterations):
        x, crops, depths = _render_inputs(observed, poses, objs, K, cfg.crop_hw, cfg.pad)
        gflow = gvalid = None
        if use_flow:
            flows, valids = [], []
            for s, p, crop, dep, gdep in zip(batch, poses, crops, depths, gt_depths):
                ff = crop_resize(gt_flow(s.obj.mesh, p, s.gt, K, depth_rendered=dep, depth_observed=gdep),
                                 crop, cfg.crop_hw)
                flows.append(ff.flow.transpose(2, 0, 1))
                valids.append(ff.valid)
            gflow = torch.from_numpy(np.ascontiguousarray(np.stack(flows), dtype=np.float32))
            gvalid = torch.from_numpy(np.stack(valids))
        out = model(x, state, with_flow=use_flow)
        state = out.state
        loss, d, e, (q, t) = iteration_loss(out, poses, crops, K, gt_q, gt_t, pts, gflow, gvalid, loss_cfg)
        losses.append(loss)
        dpmls.append(float(d.detach()))
        epes.append(float(e.detach()))
        poses = _to_poses(q, t)
    total = torch.stack(losses).mean()
    stats = {"dpml": float(np.mean(dpmls)), "ms_epe": float(np.mean(epes)), "total": float(total.detach()),
             "dpml_per_iter": dpmls, "rejected": False}
    if not np.isfinite(stats["total"]):
        stats["rejected"] = True
        _dump_diagnostics(diag_dir, batch, stats)
        return stats
    params = [p for p in model.parameters() if p.requires_grad]
    try:
        grads = gc.backward(total, params)
    except gc.NonFiniteError:
        stats["rejected"] = True
        _dump_diagnostics(diag_dir, batch, stats)
        return stats
    optimizer.zero_grad(set_to_none=True)
    for p, g in zip(params, grads):
        p.grad = g
    optimizer.step()
    return stats


def _dump_diagnostics(diag_dir, batch, stats):
    log.warning("non-finite loss, step rejected: %s", {k: stats[k] for k in ("dpml", "ms_epe", "total")})
    if diag_dir is None:
        return
    d = Path(diag_dir)
    d.mkdir(parents=True, exist_ok=True)
    payload = {"stats": stats, "samples": [{"object": s.obj.name, "gt": s.gt.to_dict(), "init": s.init.to_dict()}
                                           for s in batch]}
    (d / f"rejected_{time.strftime('%Y%m%d_%H%M%S')}.json").write_text(json.dumps(payload, indent=1, default=str))


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr)


def set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def save_training_state(path, model, optimizer, epoch, cfg: TrainConfig):
    names = {id(p): n for n, p in model.named_parameters()}
    tensors = dict(model.named_parameters())
    steps = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            tensors[f"adam.exp_avg.{n}"] = st["exp_avg"]
            tensors[f"adam.exp_avg_sq.{n}"] = st["exp_avg_sq"]
            steps[n] = float(st["step"])
    extra = {"scale_config": model.cfg.to_dict(), "epoch": epoch, "train_config": cfg.to_dict(),
             "adam_steps": steps}
    return gc.save_checkpoint(path, tensors, extra)


def load_training_state(path):
    tensors, extra = gc.load_checkpoint(path)
    model = DeepRMNet(ScaleConfig.from_dict(extra["scale_config"]))
    model.load_tensors({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    cfg = TrainConfig.from_dict(extra["train_config"])
    opt = make_optimizer(model, cfg)
    for n, p in model.named_parameters():
        if n in extra.get("adam_steps", {}):
            opt.state[p] = {"step": torch.tensor(extra["adam_steps"][n]),
                            "exp_avg": tensors[f"adam.exp_avg.{n}"].clone(),
                            "exp_avg_sq": tensors[f"adam.exp_avg_sq.{n}"].clone()}
    return model, opt, int(extra["epoch"]), cfg


LOG_FIELDS = ["epoch", "step", "dpml", "ms_epe", "total", "lr"]


def _epoch_batches(n, cfg: TrainConfig, epoch):
    order = np.random.default_rng([cfg.seed, 10, epoch]).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def fit(data_dir, cfg: TrainConfig, out_dir, resume=True, max_steps=None, progress=None):
    """Train on the train split. Writes per-epoch checkpoints
    (``ckpt_eNNN.json/.bin``), ``model.json/.bin`` and ``train_log.csv``.

    Returns the final model path stem.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = Dataset(data_dir)
    K = ds.K
    objs = object_contexts(ds, cfg.n_points)
    recs = ds.records("train")
    images = [ds.image(r) for r in recs]

    start_epoch = 0
    ckpts = sorted(out.glob("ckpt_e*.json"))
    if resume and ckpts:
        model, optimizer, done, saved_cfg = load_training_state(ckpts[-1].with_suffix(""))
        if {**saved_cfg.to_dict(), "epochs": 0} != {**cfg.to_dict(), "epochs": 0}:
            raise ValueError(f"{ckpts[-1]}: checkpoint was trained with a different config")
        start_epoch = done + 1
        log.info("resuming from %s (epoch %d done)", ckpts[-1], done)
    else:
        torch.manual_seed(cfg.seed)
        model = DeepRMNet(cfg.scale_config(), seed=cfg.seed)
        optimizer = make_optimizer(model, cfg)

    log_path = out / "train_log.csv"
    kept = []
    if start_epoch > 0 and log_path.exists():
        with open(log_path, newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["epoch"]) < start_epoch]
    with open(log_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(kept)

    step = sum(1 for _ in kept)
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        set_lr(optimizer, lr)
        t0 = time.time()
        rows = []
        for bi, idx in enumerate(_epoch_batches(len(recs), cfg, epoch)):
            batch = []
            for i in idx:
                rng = np.random.default_rng([cfg.seed, 11, epoch, int(i)])
                init = sample_init_pose(recs[i].gt, cfg.noise, rng)
                batch.append(TrainSample(images[i], recs[i].gt, objs[recs[i].object], init))
            stats = train_step(batch, model, optimizer, cfg, K, diag_dir=out / "diagnostics")
            rows.append({"epoch": epoch, "step": step, "dpml": repr(stats["dpml"]), "ms_epe": repr(stats["ms_epe"]),
                         "total": repr(stats["total"]), "lr": repr(lr)})
            step += 1
            if progress:
                progress(epoch, bi, stats)
            if max_steps is not None and step >= max_steps:
                break
        with open(log_path, "a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n").writerows(rows)
        save_training_state(out / f"ckpt_e{epoch:03d}", model, optimizer, epoch, cfg)
        log.info("epoch %d: mean dpml %.5f (%.1fs)", epoch, np.mean([float(r["dpml"]) for r in rows]),
                 time.time() - t0)
        if max_steps is not None and step >= max_steps:
            break
    model.save(out / "model", {"train_config": cfg.to_dict()})
    return out / "model"


# ---------------------------------------------------------------------------
# evaluation

def evaluate(data_dir, model: DeepRMNet, iterations: int, noise: NoiseConfig | None = None, batch_size=32,
             split="test", crop_hw=None, pad=1.4, n_points=500) -> EvalReport:
    """ADD / ADD-S of every test sample at every refinement iteration
    (iteration 0 is the initial estimate)."""
    if model is None:
        raise ValueError("a trained model is required")
    ds = Dataset(data_dir)
    K = ds.K
    objs = object_contexts(ds, n_points)
    noise = noise or NoiseConfig()
    net = model.for_inference() if model.flow_head is not None else model
    net.eval()
    recs = ds.records(split)
    report = EvalReport(diameters={o.name: o.diameter for o in ds.meta.objects})
    for start in range(0, len(recs), batch_size):
        chunk = recs[start:start + batch_size]
        inits = []
        for r in chunk:
            if r.init is not None:
                inits.append(r.init)
            else:
                inits.append(sample_init_pose(r.gt, noise, np.random.default_rng([noise.seed, 12, int(r.sample_id)])))
        imgs = [ds.image(r) for r in chunk]
        trajs = refine_batch(imgs, inits, [objs[r.object] for r in chunk], net, K, iterations, crop_hw, pad)
        for r, tr in zip(chunk, trajs):
            mp = objs[r.object].model_points
            for k, p in enumerate(tr.poses):
                report.rows.append(EvalRow(r.object, r.sample_id, k, add(p, r.gt, mp), add_s(p, r.gt, mp),
                                           "add_s" if mp.symmetric else "add"))
    return report
