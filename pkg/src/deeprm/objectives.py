"""Training losses and pose-accuracy metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from . import gradcore as gc
from .geometry import Pose, quat_to_rotmat_t

DEFAULT_FLOW_WEIGHTS = (0.08, 0.04, 0.02, 0.01)  # finest (1/4) to coarsest (1/32)


@dataclass
class ModelPoints:
    points: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("empty model point set")

    @property
    def n(self):
        return len(self.points)


@dataclass
class LossConfig:
    alpha: float = 0.1
    flow_scale_weights: tuple = DEFAULT_FLOW_WEIGHTS

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        w = np.asarray(self.flow_scale_weights, dtype=float)
        if (w < 0).any() or not (w > 0).any():
            raise ValueError("flow scale weights must be >= 0 and not all zero")


def sample_surface(mesh, count, rng):
    tri = mesh.vertices[mesh.triangles]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    which = rng.choice(len(tri), size=count, p=area / area.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    a, b, c = 1 - s, s * (1 - r2), s * r2
    t = tri[which]
    return a[:, None] * t[:, 0] + b[:, None] * t[:, 1] + c[:, None] * t[:, 2]


def farthest_point_sampling(points, n, start=0):
    points = np.asarray(points, dtype=np.float64)
    n = min(n, len(points))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(n - 1):
        i = int(dist.argmax())
        chosen.append(i)
        dist = np.minimum(dist, np.linalg.norm(points - points[i], axis=1))
    return points[chosen]


def sample_model_points(mesh, n=500, seed=0, symmetric=False) -> ModelPoints:
    rng = np.random.default_rng(seed)
    cand = np.concatenate([mesh.vertices, sample_surface(mesh, 20 * n, rng)])
    pts = farthest_point_sampling(cand, n, start=int(rng.integers(len(cand))))
    return ModelPoints(pts, symmetric)


# ---------------------------------------------------------------------------
# losses (torch, batched; q: B×4 unnormalised ok, t: B×3, pts: n×3 or B×n×3)

def _transform(q, t, pts):
    R = quat_to_rotmat_t(q)
    if pts.dim() == 2:
        pts = pts.unsqueeze(0).expand(q.shape[0], -1, -1)
    return torch.einsum("bij,bnj->bni", R, pts) + t[:, None, :]


def pml_t(q_est, t_est, q_gt, t_gt, pts):
    """Per-sample mean l1 distance between transformed model points (B,)."""
    if pts.shape[-2] == 0:
        raise ValueError("empty model point set")
    diff = _transform(q_gt, t_gt, pts) - _transform(q_est, t_est, pts)
    return diff.abs().sum(-1).mean(-1)


def dpml_t(q_est, t_est, q_gt, t_gt, pts):
    """Disentangled point matching: predicted rotation throughout, translation
    taken fully predicted, predicted xy with true depth, true xy with
    predicted depth."""
    t_xy = torch.cat([t_est[:, :2], t_gt[:, 2:]], dim=1)
    t_z = torch.cat([t_gt[:, :2], t_est[:, 2:]], dim=1)
    return (pml_t(q_est, t_est, q_gt, t_gt, pts)
            + pml_t(q_est, t_xy, q_gt, t_gt, pts)
            + pml_t(q_est, t_z, q_gt, t_gt, pts)) / 3.0


def _pose_tensors(p: Pose):
    return (torch.tensor(p.q, dtype=torch.float64)[None], torch.tensor(p.t, dtype=torch.float64)[None])


def pml(est: Pose, gt: Pose, pts: ModelPoints) -> float:
    qe, te = _pose_tensors(est)
    qg, tg = _pose_tensors(gt)
    return float(pml_t(qe, te, qg, tg, torch.tensor(pts.points))[0])


def dpml(est: Pose, gt: Pose, pts: ModelPoints) -> float:
    qe, te = _pose_tensors(est)
    qg, tg = _pose_tensors(gt)
    return float(dpml_t(qe, te, qg, tg, torch.tensor(pts.points))[0])


def downsample_flow(flow, valid, size):
    """Area-downsample a B×2×H×W flow and B×H×W mask to ``size``; flow values
    are converted into pixels of the smaller grid."""
    H, W = flow.shape[-2:]
    h, w = size
    vf = valid.to(flow.dtype).unsqueeze(1)
    num = F.adaptive_avg_pool2d(flow * vf, (h, w))
    den = F.adaptive_avg_pool2d(vf, (h, w))
    valid_s = den[:, 0] >= 0.5
    flow_s = num / den.clamp_min(1e-12)
    scale = torch.tensor([w / W, h / H], dtype=flow.dtype).view(1, 2, 1, 1)
    return flow_s * scale, valid_s


def ms_epe(pred_flows, gt_flow, gt_valid, cfg: LossConfig = LossConfig()):
    """Weighted sum over scales of the mean end-point error on valid pixels."""
    if len(pred_flows) != len(cfg.flow_scale_weights):
        raise ValueError(f"{len(pred_flows)} flow scales for {len(cfg.flow_scale_weights)} weights")
    total = gt_flow.new_zeros(())
    for pred, w in zip(pred_flows, cfg.flow_scale_weights):
        gt_s, valid_s = downsample_flow(gt_flow, gt_valid, pred.shape[-2:])
        if not bool(valid_s.any()):
            continue
        epe = gc.l2_norm(pred - gt_s, dim=1)
        total = total + w * epe[valid_s].mean()
    return total


def total_loss(dpml_val, msepe_val, cfg: LossConfig = LossConfig()):
    return dpml_val + cfg.alpha * msepe_val


# ---------------------------------------------------------------------------
# metrics (numpy, float64)

def add(est: Pose, gt: Pose, pts: ModelPoints) -> float:
    return float(np.linalg.norm(est.transform(pts.points) - gt.transform(pts.points), axis=1).mean())


def add_s(est: Pose, gt: Pose, pts: ModelPoints) -> float:
    e = est.transform(pts.points)
    g = gt.transform(pts.points)
    d, _ = cKDTree(e).query(g, k=1)
    return float(d.mean())


def add_or_adds(est: Pose, gt: Pose, pts: ModelPoints) -> float:
    return add_s(est, gt, pts) if pts.symmetric else add(est, gt, pts)


def auc(errors, max_thresh: float = 0.1) -> float:
    """Normalised area under accuracy(θ) = P(err <= θ) for θ in [0, max_thresh].

    Each error e contributes (max_thresh - e)+ / max_thresh exactly.
    """
    if max_thresh <= 0:
        raise ValueError("max_thresh must be positive")
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty error list")
    return float(np.clip(max_thresh - e, 0.0, None).mean() / max_thresh)


def add_10pct(errors, diameters) -> float:
    e = np.asarray(errors, dtype=np.float64)
    d = np.broadcast_to(np.asarray(diameters, dtype=np.float64), e.shape)
    if e.size == 0:
        raise ValueError("empty error list")
    if (d <= 0).any():
        raise ValueError("diameters must be positive")
    return float((e < 0.1 * d).mean())


@dataclass
class EvalRow:
    object: str
    sample_id: str
    iteration: int
    add: float
    add_s: float
    chosen_metric: str

    @property
    def error(self):
        return self.add_s if self.chosen_metric == "add_s" else self.add


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    diameters: dict = field(default_factory=dict)
    max_thresh: float = 0.1

    def iterations(self):
        return sorted({r.iteration for r in self.rows})

    def errors(self, iteration, obj=None):
        return [r.error for r in self.rows if r.iteration == iteration and (obj is None or r.object == obj)]

    def summary(self):
        objs = sorted({r.object for r in self.rows})
        last = max(self.iterations())
        out = {
            "auc_method": "exact step-function integration over [0, max_thresh], no per-point clamping",
            "max_thresh_m": self.max_thresh,
            "final_iteration": last,
            "per_object": {},
            "per_iteration": [],
        }
        for o in objs:
            e = self.errors(last, o)
            out["per_object"][o] = {"n": len(e), "auc": auc(e, self.max_thresh),
                                    "add_10pct": add_10pct(e, self.diameters[o]),
                                    "median": float(np.median(e))}
        e = self.errors(last)
        diam = [self.diameters[r.object] for r in self.rows if r.iteration == last]
        out["overall"] = {"n": len(e), "auc": auc(e, self.max_thresh), "add_10pct": add_10pct(e, diam),
                          "median": float(np.median(e))}
        for it in self.iterations():
            e = self.errors(it)
            diam = [self.diameters[r.object] for r in self.rows if r.iteration == it]
            out["per_iteration"].append({"iteration": it, "label": "init" if it == 0 else str(it),
                                         "auc": auc(e, self.max_thresh), "add_10pct": add_10pct(e, diam),
                                         "median": float(np.median(e))})
        return out

    def medians(self):
        return [float(np.median(self.errors(it))) for it in self.iterations()]

    def write(self, out_dir, stem="eval"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["object", "sample_id", "iteration", "add", "add_s", "chosen_metric"])
            for r in self.rows:
                w.writerow([r.object, r.sample_id, r.iteration, repr(r.add), repr(r.add_s), r.chosen_metric])
        summary = self.summary()
        json_path = out_dir / f"{stem}_summary.json"
        json_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
        table_path = out_dir / f"{stem}_iterations.csv"
        with open(table_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            its = summary["per_iteration"]
            w.writerow(["metric"] + [r["label"] for r in its])
            for key in ("auc", "add_10pct", "median"):
                w.writerow([key] + [repr(r[key]) for r in its])
        return csv_path, json_path, table_path

    @classmethod
    def read_csv(cls, path, diameters, max_thresh=0.1):
        rows = []
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                rows.append(EvalRow(d["object"], d["sample_id"], int(d["iteration"]), float(d["add"]),
                                    float(d["add_s"]), d["chosen_metric"]))
        return cls(rows, diameters, max_thresh)
