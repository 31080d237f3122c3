import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from deeprm import gradcore as gc
from deeprm.datakit import Dataset
from deeprm.geometry import Pose, quat_angle, random_quaternion
from deeprm.network import DeepRMNet, ScaleConfig
from deeprm.refine import (NoiseConfig, RefineError, TrainConfig, TrainSample, evaluate, fit, load_training_state,
                           make_optimizer, object_contexts, refine, refine_batch, refine_step, sample_init_pose,
                           train_step)


@pytest.fixture(scope="module")
def ds(tiny_data):
    return Dataset(tiny_data)


@pytest.fixture(scope="module")
def objs(ds):
    return object_contexts(ds, 100)


def identity_net(**kw):
    net = DeepRMNet(ScaleConfig(phi=0, **kw))
    with torch.no_grad():
        net.heads.w_t.zero_()
        net.heads.w_r.zero_()
    return net


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(rot_sigma_deg=-1)
    with pytest.raises(ValueError):
        NoiseConfig(rot_sigma_deg=30, rot_max_deg=20)


def test_train_config_schedule():
    cfg = TrainConfig(lr=1e-4, warmup_epochs=1)
    assert cfg.lr_at(0) == pytest.approx(1e-5)
    assert cfg.lr_at(9) == pytest.approx(1e-4)
    assert cfg.lr_at(10) == pytest.approx(1e-5)
    assert cfg.lr_at(15) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        TrainConfig(train_iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_sample_init_pose_zero_noise_and_seeded():
    gt = Pose(random_quaternion(np.random.default_rng(0)), [0.01, 0.02, 0.8])
    p = sample_init_pose(gt, NoiseConfig(0, 0, 0, 0), np.random.default_rng(1))
    assert np.array_equal(p.t, gt.t) and quat_angle(p.q, gt.q) < 1e-7
    a = sample_init_pose(gt, NoiseConfig(), np.random.default_rng(5))
    b = sample_init_pose(gt, NoiseConfig(), np.random.default_rng(5))
    assert np.array_equal(a.as_vector(), b.as_vector())


def test_sample_init_pose_angle_distribution():
    cfg = NoiseConfig(rot_sigma_deg=10, rot_max_deg=90)  # clamp far in the tail
    gt = Pose([1, 0, 0, 0], [0, 0, 1.0])
    rng = np.random.default_rng(0)
    ang = np.array([quat_angle(sample_init_pose(gt, cfg, rng).q, gt.q) for _ in range(10000)])
    half_normal_mean = np.deg2rad(10) * np.sqrt(2 / np.pi)
    assert abs(ang.mean() - half_normal_mean) < 0.1 * half_normal_mean
    clamped = NoiseConfig(rot_sigma_deg=15, rot_max_deg=20)
    ang = [quat_angle(sample_init_pose(gt, clamped, rng).q, gt.q) for _ in range(2000)]
    assert max(ang) <= np.deg2rad(20) + 1e-9


def test_sample_init_pose_resample_limit():
    gt = Pose([1, 0, 0, 0], [0, 0, 1e-4])
    with pytest.raises(ValueError, match="tries"):
        sample_init_pose(gt, NoiseConfig(trans_sigma_z_m=10.0), _AlwaysNegative())


class _AlwaysNegative:
    """rng stub whose translation draws always push z behind the camera."""

    def normal(self, loc=0.0, scale=1.0, size=None):
        if size is None:
            return 0.1
        return -np.ones(size)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=30)
def test_sample_init_pose_keeps_depth_positive(seed):
    gt = Pose([1, 0, 0, 0], [0, 0, 0.05])
    assert sample_init_pose(gt, NoiseConfig(), np.random.default_rng(seed)).t[2] > 0


def test_identity_network_leaves_pose_unchanged(ds, objs):
    rec = ds.records("test")[0]
    net = identity_net()
    pose, state, upd = refine_step(ds.image(rec), rec.init, None, net, objs[rec.object], ds.K)
    assert np.allclose(pose.t, rec.init.t, atol=1e-12) and quat_angle(pose.q, rec.init.q) < 1e-7
    assert (upd.v_x, upd.v_y, upd.v_z) == (0.0, 0.0, 0.0)
    zero = net.zero_state(1)
    assert any(not torch.equal(a, b) for s0, s1 in zip(zero, state) for a, b in zip(s0, s1))


def test_refine_single_iteration_equals_step(ds, objs):
    rec = ds.records("test")[1]
    net = DeepRMNet(ScaleConfig(phi=0), seed=1).for_inference()
    tr = refine(ds.image(rec), rec.init, 1, net, objs[rec.object], ds.K)
    p, _, u = refine_step(ds.image(rec), rec.init, None, net, objs[rec.object], ds.K)
    assert len(tr.poses) == 2 and len(tr.updates) == 1
    assert np.array_equal(tr.poses[1].as_vector(), p.as_vector())
    with pytest.raises(ValueError):
        refine(ds.image(rec), rec.init, 0, net, objs[rec.object], ds.K)


def test_crop_tracks_estimate(ds, objs, monkeypatch):
    import deeprm.refine as R
    seen = []
    orig = R.crop_from_pose

    def spy(p, *a, **k):
        seen.append(p.t.copy())
        return orig(p, *a, **k)

    monkeypatch.setattr(R, "crop_from_pose", spy)
    net = DeepRMNet(ScaleConfig(phi=0, head_init_scale=0.3), seed=2).for_inference()
    rec = ds.records("test")[2]
    tr = refine(ds.image(rec), rec.init, 3, net, objs[rec.object], ds.K)
    assert len(seen) == 3
    for k in range(3):
        assert np.array_equal(seen[k], tr.poses[k].t)


def test_refine_batch_matches_single(ds, objs):
    net = DeepRMNet(ScaleConfig(phi=0, trunk="lstm"), seed=3).for_inference().double()
    recs = ds.records("test")[:3]
    imgs = [ds.image(r) for r in recs]
    batch = refine_batch(imgs, [r.init for r in recs], [objs[r.object] for r in recs], net, ds.K, 3)
    for r, img, tr in zip(recs, imgs, batch):
        single = refine(img, r.init, 3, net, objs[r.object], ds.K)
        for a, b in zip(single.poses, tr.poses):
            assert np.allclose(a.as_vector(), b.as_vector(), atol=1e-9)


def test_mlp_step_output_independent_of_position(ds, objs):
    net = DeepRMNet(ScaleConfig(phi=0, trunk="mlp", head_init_scale=0.3), seed=4).for_inference()
    rec = ds.records("test")[0]
    img, obj = ds.image(rec), objs[rec.object]
    p0 = rec.init
    direct, _, _ = refine_step(img, p0, None, net, obj, ds.K)
    _, s1, _ = refine_step(img, rec.gt, None, net, obj, ds.K)
    _, s2, _ = refine_step(img, rec.gt, s1, net, obj, ds.K)
    later, _, _ = refine_step(img, p0, s2, net, obj, ds.K)
    assert np.array_equal(direct.as_vector(), later.as_vector())


def test_behind_camera_aborts_with_diagnostic(ds, objs):
    rec = ds.records("test")[0]
    net = identity_net().for_inference()
    with torch.no_grad():
        net.heads.b_t[2] = -1e4  # v_z huge negative -> depth overflows to inf
    with pytest.raises(RefineError, match="invalid pose"):
        refine(ds.image(rec), rec.init, 2, net, objs[rec.object], ds.K)
    with pytest.raises(RefineError, match="behind camera"):
        refine_step(ds.image(rec), Pose([1, 0, 0, 0], [0, 0, -0.5]), None, net, objs[rec.object], ds.K)


def _batch(ds, objs, n=2, seed=0):
    recs = ds.records("train")[:n]
    rng = np.random.default_rng(seed)
    return [TrainSample(ds.image(r), r.gt, objs[r.object], sample_init_pose(r.gt, NoiseConfig(), rng)) for r in recs]


def test_train_step_positive_loss_and_update(ds, objs):
    cfg = TrainConfig(train_iterations=2, batch_size=2)
    net = DeepRMNet(cfg.scale_config())
    before = [p.detach().clone() for p in net.parameters()]
    stats = train_step(_batch(ds, objs), net, make_optimizer(net, cfg), cfg, ds.K)
    assert stats["dpml"] > 0 and stats["ms_epe"] > 0 and not stats["rejected"]
    assert len(stats["dpml_per_iter"]) == 2
    assert stats["total"] == pytest.approx(stats["dpml"] + 0.1 * stats["ms_epe"], rel=1e-5)
    assert any(not torch.equal(a, b) for a, b in zip(before, net.parameters()))
    with pytest.raises(ValueError):
        train_step([], net, make_optimizer(net, cfg), cfg, ds.K)


def test_train_step_alpha_zero_skips_flow(ds, objs):
    cfg = TrainConfig(train_iterations=1, alpha=0.0)
    net = DeepRMNet(cfg.scale_config())
    flow_before = [p.detach().clone() for p in net.flow_head.parameters()]
    stats = train_step(_batch(ds, objs), net, make_optimizer(net, cfg), cfg, ds.K)
    assert stats["ms_epe"] == 0.0
    assert all(torch.equal(a, b) for a, b in zip(flow_before, net.flow_head.parameters()))


def test_non_finite_loss_rejected_with_diagnostics(ds, objs, tmp_path):
    cfg = TrainConfig(train_iterations=1)
    net = DeepRMNet(cfg.scale_config())
    with torch.no_grad():
        net.flow_head.predict2.bias.fill_(float("inf"))
    before = [p.detach().clone() for p in net.backbone.parameters()]
    gc.set_finite_checks(False)
    try:
        stats = train_step(_batch(ds, objs), net, make_optimizer(net, cfg), cfg, ds.K, diag_dir=tmp_path)
    finally:
        gc.set_finite_checks(True)
    assert stats["rejected"]
    assert all(torch.equal(a, b) for a, b in zip(before, net.backbone.parameters()))
    assert list(tmp_path.glob("rejected_*.json"))


def test_fit_writes_log_and_checkpoints(tiny_data, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, train_iterations=1, milestones=(1,), lr=1e-3)
    path = fit(tiny_data, cfg, tmp_path)
    assert path.with_suffix(".json").exists()
    assert sorted(p.name for p in tmp_path.glob("ckpt_e*.json")) == ["ckpt_e000.json", "ckpt_e001.json"]
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "step", "dpml", "ms_epe", "total", "lr"]
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert [float(r["lr"]) for r in rows] == [1e-3, 1e-3, 1e-4, 1e-4]


def test_resume_is_bit_identical(tiny_data, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, train_iterations=2, lr=1e-3)
    with gc.strict_deterministic():
        fit(tiny_data, cfg, tmp_path / "full")
        first = TrainConfig(**{**cfg.__dict__, "epochs": 1})
        fit(tiny_data, first, tmp_path / "resumed")
        fit(tiny_data, cfg, tmp_path / "resumed")
    a, _ = gc.load_checkpoint(tmp_path / "full" / "model")
    b, _ = gc.load_checkpoint(tmp_path / "resumed" / "model")
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    assert (tmp_path / "full" / "train_log.csv").read_bytes() == (tmp_path / "resumed" / "train_log.csv").read_bytes()
    model, opt, epoch, saved = load_training_state(tmp_path / "full" / "ckpt_e001")
    assert epoch == 1 and saved == cfg and len(opt.state) > 0


def test_resume_rejects_different_config(tiny_data, tmp_path):
    fit(tiny_data, TrainConfig(epochs=1, batch_size=16, train_iterations=1), tmp_path)
    with pytest.raises(ValueError, match="different config"):
        fit(tiny_data, TrainConfig(epochs=2, batch_size=16, train_iterations=1, trunk="mlp"), tmp_path)


def test_evaluate_iterations_and_determinism(tiny_data):
    net = DeepRMNet(ScaleConfig(phi=0), seed=5)
    r0 = evaluate(tiny_data, net, 0)
    assert r0.iterations() == [0]
    assert [r["label"] for r in r0.summary()["per_iteration"]] == ["init"]
    r2 = evaluate(tiny_data, net, 2)
    assert r2.iterations() == [0, 1, 2] and len(r2.rows) == 3 * 6
    assert r2.errors(0) == r0.errors(0)
    again = evaluate(tiny_data, net, 2)
    assert [r.error for r in again.rows] == [r.error for r in r2.rows]
    with pytest.raises(ValueError):
        evaluate(tiny_data, None, 2)


def test_evaluate_uses_symmetric_metric(tiny_data, ds):
    rep = evaluate(tiny_data, identity_net(), 1)
    sym = {o.name: o.symmetric for o in ds.meta.objects}
    for r in rep.rows:
        assert r.chosen_metric == ("add_s" if sym[r.object] else "add")
