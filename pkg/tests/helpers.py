"""Shared oracles for the test suite."""
import numpy as np
import torch

from deeprm import gradcore as gc


def rel_err(a, b, floor=1e-12):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def central_fd(f, x, h=1e-6, index=None):
    """Central differences of scalar f w.r.t. the entries of tensor x (in place).

    ``index`` limits the probe to a list of flat indices."""
    flat = x.data.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = []
    for i in idx:
        old = float(flat[i])
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def directional_fd(f, tensors, directions, h=1e-6):
    for t, d in zip(tensors, directions):
        t.data.add_(h * d)
    fp = float(f())
    for t, d in zip(tensors, directions):
        t.data.add_(-2 * h * d)
    fm = float(f())
    for t, d in zip(tensors, directions):
        t.data.add_(h * d)
    return (fp - fm) / (2 * h)


def check_primitive(fn, inputs, dtype=torch.float64, seed=0, h=1e-6):
    """Max relative error between gc.backward gradients of <fn(*inputs), r>
    (r a fixed random projection) and float64 central differences.

    With dtype=float32 the analytic gradient is taken in float32 and compared
    against differences of the float64 function."""
    g = torch.Generator().manual_seed(seed)
    x64 = [t.detach().to(torch.float64).clone() for t in inputs]
    r = torch.randn(fn(*x64).shape, generator=g, dtype=torch.float64)

    xa = [t.to(dtype).clone().requires_grad_(True) for t in x64]
    grads = gc.backward((fn(*xa) * r.to(dtype)).sum(), xa)

    def f():
        return (fn(*x64) * r).sum()

    errs = []
    for t, ga in zip(x64, grads):
        num = central_fd(f, t, h)
        errs.append(rel_err(ga.detach().numpy(), num))
    return max(errs)


def _away_from_zero(shape, seed, margin=0.05):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g, dtype=torch.float64)
    return torch.where(x.abs() < margin, x.sign() * margin + x, x)


def _rand(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64) * scale


PRIMITIVES = {
    "conv2d": (lambda x, w, b: gc.conv2d(x, w, b, 2, 1), lambda: [_rand(2, 3, 5, 6), _rand(4, 3, 3, 3, seed=1), _rand(4, seed=2)]),
    "conv2d_s1": (lambda x, w, b: gc.conv2d(x, w, b, 1, 1), lambda: [_rand(1, 2, 4, 4), _rand(3, 2, 3, 3, seed=1), _rand(3, seed=2)]),
    "transposed_conv2d": (lambda x, w, b: gc.transposed_conv2d(x, w, b), lambda: [_rand(2, 3, 3, 4), _rand(3, 2, 4, 4, seed=1), _rand(2, seed=2)]),
    "dense": (gc.dense, lambda: [_rand(3, 5), _rand(4, 5, seed=1), _rand(4, seed=2)]),
    "relu": (gc.relu, lambda: [_away_from_zero((4, 5), 0)]),
    "concat": (lambda a, b: gc.concat([a, b], dim=1), lambda: [_rand(2, 3, 2), _rand(2, 1, 2, seed=1)]),
    "bilinear_resize": (lambda x: gc.bilinear_resize(x, (5, 7)), lambda: [_rand(1, 2, 3, 4)]),
    "lstm_cell": (lambda x, h, c, wi, wh, b: torch.cat(gc.lstm_cell(x, h, c, wi, wh, b), 1),
                  lambda: [_rand(2, 3), _rand(2, 4, seed=1), _rand(2, 4, seed=2), _rand(16, 3, seed=3),
                           _rand(16, 4, seed=4), _rand(16, seed=5)]),
    "gru_cell": (gc.gru_cell, lambda: [_rand(2, 3), _rand(2, 4, seed=1), _rand(12, 3, seed=3),
                                       _rand(12, 4, seed=4), _rand(12, seed=5), _rand(12, seed=6)]),
    "l1_mean": (gc.l1_mean, lambda: [_away_from_zero((3, 4), 1)]),
    "l2_norm": (lambda x: gc.l2_norm(x, 1), lambda: [_rand(4, 3)]),
    "add": (gc.add, lambda: [_rand(3, 4), _rand(4, seed=1)]),
    "mul": (gc.mul, lambda: [_rand(3, 4), _rand(3, 1, seed=1)]),
    "div": (gc.div, lambda: [_rand(3, 4), _away_from_zero((3, 4), 2, margin=0.5)]),
    "reduce_mean": (lambda x: gc.reduce_mean(x, 1), lambda: [_rand(3, 4)]),
}
