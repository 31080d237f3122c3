"""Reverse-mode differentiation primitives.

Arrays are ``torch.Tensor`` values and the tape is torch's autograd graph.
This module pins down the small operation set the refiner uses, the shape
and finiteness checks each primitive performs, parameter initialisation,
and the manifest + blob checkpoint format.
"""
from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _finite(name, *arrays):
    if not _CHECK_FINITE:
        return
    for a in arrays:
        # NaN/Inf anywhere propagates into the sum; one reduction per tensor
        if a is not None and a.numel() and not math.isfinite(float(a.detach().sum())):
            if not bool(torch.isfinite(a).all()):
                raise NonFiniteError(f"{name}: non-finite input of shape {tuple(a.shape)}")


def _ndim(name, x, n):
    if x.dim() != n:
        raise ShapeError(f"{name}: expected {n}-d input, got shape {tuple(x.shape)}")


@contextlib.contextmanager
def strict_deterministic(threads: int = 1):
    """Single-threaded, deterministic-kernel execution inside the block."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


# ---------------------------------------------------------------------------
# shape functions (pure, data independent)

def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    if stride < 1 or pad < 0:
        raise ShapeError(f"bad stride/pad {stride}/{pad}")
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"conv output extent {out} from input {n}, kernel {k}")
    return out


def conv_transpose_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


# ---------------------------------------------------------------------------
# forward primitives

def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0):
    """x: N×C×H×W, weight: O×C×kh×kw."""
    _ndim("conv2d", x, 4)
    _ndim("conv2d weight", weight, 4)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {tuple(bias.shape)} for {weight.shape[0]} filters")
    conv_out_size(x.shape[2], weight.shape[2], stride, pad)
    conv_out_size(x.shape[3], weight.shape[3], stride, pad)
    _finite("conv2d", x, weight, bias)
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def transposed_conv2d(x, weight, bias=None, stride: int = 2, pad: int = 1):
    """x: N×C×H×W, weight: C×O×kh×kw (torch layout)."""
    _ndim("transposed_conv2d", x, 4)
    _ndim("transposed_conv2d weight", weight, 4)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"transposed_conv2d: input channels {x.shape[1]} != weight in-channels {weight.shape[0]}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"bad stride/pad {stride}/{pad}")
    _finite("transposed_conv2d", x, weight, bias)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=pad)


def dense(x, weight, bias=None):
    """x: N×I, weight: O×I."""
    _ndim("dense", x, 2)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input width {x.shape[1]} != weight width {weight.shape[1]}")
    _finite("dense", x, weight, bias)
    return F.linear(x, weight, bias)


def relu(x):
    _finite("relu", x)
    return torch.relu(x)


def concat(xs, dim: int = 1):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.dim() != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != dim % len(ref)):
            raise ShapeError(f"concat along {dim}: {tuple(ref)} vs {tuple(x.shape)}")
    _finite("concat", *xs)
    return torch.cat(xs, dim=dim)


def bilinear_resize(x, size):
    """Resize N×C×H×W to N×C×size[0]×size[1] (half-pixel centres)."""
    _ndim("bilinear_resize", x, 4)
    if size[0] < 1 or size[1] < 1:
        raise ShapeError(f"bilinear_resize: bad target {size}")
    _finite("bilinear_resize", x)
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def lstm_cell(x, h, c, w_ih, w_hh, b):
    """Standard LSTM cell, gate order (input, forget, cell, output).

    w_ih: 4H×I, w_hh: 4H×H, b: 4H. Returns (h', c').
    """
    _ndim("lstm_cell", x, 2)
    hid = w_hh.shape[1]
    if w_ih.shape != (4 * hid, x.shape[1]) or w_hh.shape != (4 * hid, hid) or b.shape != (4 * hid,):
        raise ShapeError(
            f"lstm_cell: x {tuple(x.shape)}, w_ih {tuple(w_ih.shape)}, w_hh {tuple(w_hh.shape)}, b {tuple(b.shape)}")
    if h.shape != (x.shape[0], hid) or c.shape != (x.shape[0], hid):
        raise ShapeError(f"lstm_cell: state {tuple(h.shape)}/{tuple(c.shape)} for hidden {hid}")
    _finite("lstm_cell", x, h, c, w_ih, w_hh, b)
    z = F.linear(x, w_ih, b) + F.linear(h, w_hh)
    i, f, g, o = z.chunk(4, dim=1)
    i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
    c_new = f * c + i * torch.tanh(g)
    h_new = o * torch.tanh(c_new)
    return h_new, c_new


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """GRU cell, gate order (reset, update, candidate). Returns h'."""
    _ndim("gru_cell", x, 2)
    hid = w_hh.shape[1]
    if w_ih.shape != (3 * hid, x.shape[1]) or w_hh.shape != (3 * hid, hid):
        raise ShapeError(f"gru_cell: x {tuple(x.shape)}, w_ih {tuple(w_ih.shape)}, w_hh {tuple(w_hh.shape)}")
    if h.shape != (x.shape[0], hid):
        raise ShapeError(f"gru_cell: state {tuple(h.shape)} for hidden {hid}")
    _finite("gru_cell", x, h, w_ih, w_hh, b_ih, b_hh)
    gi = F.linear(x, w_ih, b_ih)
    gh = F.linear(h, w_hh, b_hh)
    ir, iz, in_ = gi.chunk(3, dim=1)
    hr, hz, hn = gh.chunk(3, dim=1)
    r = torch.sigmoid(ir + hr)
    u = torch.sigmoid(iz + hz)
    n = torch.tanh(in_ + r * hn)
    return (1.0 - u) * n + u * h


def l1_mean(x):
    _finite("l1_mean", x)
    return x.abs().mean()


def l2_norm(x, dim: int = -1):
    """Euclidean norm along ``dim``; subgradient 0 at the origin."""
    _finite("l2_norm", x)
    sq = (x * x).sum(dim=dim)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))


def _broadcast_check(name, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{name}: cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from None


def add(a, b):
    _broadcast_check("add", a, b)
    _finite("add", a, b)
    return a + b


def mul(a, b):
    _broadcast_check("mul", a, b)
    _finite("mul", a, b)
    return a * b


def div(a, b):
    _broadcast_check("div", a, b)
    _finite("div", a, b)
    return a / b


def reduce_mean(x, dim=None):
    _finite("reduce_mean", x)
    return x.mean() if dim is None else x.mean(dim=dim)


# ---------------------------------------------------------------------------
# backward

def backward(loss, params):
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``params``.

    Parameters the loss does not depend on get an exact zero gradient.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        _finite("backward", g)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# initialisation

def uniform_fan_in_(t: torch.Tensor, fan_in: int, generator=None):
    bound = math.sqrt(1.0 / fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


# ---------------------------------------------------------------------------
# checkpoints: <stem>.json manifest + <stem>.bin little-endian float32 blob

def save_checkpoint(path, tensors: dict, extra: dict | None = None) -> tuple[Path, Path]:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, t in tensors.items():
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "deeprm-ckpt/1", "blob": blob_path.name, "dtype": "float32-le",
                "params": entries, "extra": extra or {}}
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path, blob_path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (name -> float32 tensor, extra)."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "deeprm-ckpt/1":
        raise ValueError(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 4 * n
        if end > len(blob):
            raise ValueError(f"{manifest_path}: blob too short for {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(tuple(e["shape"]))
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out, manifest.get("extra", {})
