"""Refinement network: scalable conv backbone, recurrent fully connected
trunk, translation/rotation heads and a multi-scale flow decoder used only
while training."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from . import gradcore as gc

TRUNK_KINDS = ("lstm", "gru", "mlp")
BASE_CHANNELS = (16, 24, 40, 80, 384 / 1.1 ** 3)  # last stage lands on 384 at phi=3
BASE_DEPTHS = (1, 1, 2, 2, 1)
TRUNK_DIMS = {0: (256, 256, 128), 1: (320, 256, 128), 2: (384, 256, 256), 3: (512, 256, 128)}
QUAT_EPS = 1e-8


def _round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass
class ScaleConfig:
    phi: int = 0
    input_hw: tuple = (64, 96)
    trunk: str = "lstm"
    trunk_dims: tuple | None = None
    with_flow_head: bool = True
    head_init_scale: float = 0.01
    base_channels: tuple = BASE_CHANNELS
    base_depths: tuple = BASE_DEPTHS
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi < 0:
            raise ValueError("phi must be >= 0")
        if self.trunk not in TRUNK_KINDS:
            raise ValueError(f"unknown trunk kind {self.trunk!r}")
        self.input_hw = tuple(int(v) for v in self.input_hw)
        if self.trunk_dims is None:
            if self.phi in TRUNK_DIMS:
                self.trunk_dims = TRUNK_DIMS[self.phi]
            else:
                first = TRUNK_DIMS[3][0] * 1.1 ** (self.phi - 3)
                self.trunk_dims = (_round_half_up(first / 8) * 8, 256, 128)
        self.trunk_dims = tuple(int(v) for v in self.trunk_dims)
        if len(self.trunk_dims) != 3:
            raise ValueError("trunk needs three layer widths")

    @property
    def width_mult(self):
        return 1.1 ** self.phi

    @property
    def depth_mult(self):
        return 1.2 ** self.phi

    @property
    def channels(self):
        return tuple(max(8, _round_half_up(c * self.width_mult)) for c in self.base_channels)

    @property
    def depths(self):
        return tuple(int(math.ceil(d * self.depth_mult - 1e-9)) for d in self.base_depths)

    def stage_hw(self, stage):
        h, w = self.input_hw
        for _ in range(stage + 1):
            h, w = gc.conv_out_size(h, 3, 2, 1), gc.conv_out_size(w, 3, 2, 1)
        return h, w

    @property
    def final_hw(self):
        return self.stage_hw(len(self.base_channels) - 1)

    @property
    def flat_dim(self):
        h, w = self.final_hw
        return h * w * self.channels[-1]

    def to_dict(self):
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["trunk_dims"] = list(self.trunk_dims)
        d["base_channels"] = list(self.base_channels)
        d["base_depths"] = list(self.base_depths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("input_hw", "trunk_dims", "base_channels", "base_depths"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _conv_param(cin, cout, k, gen):
    w = nn.Parameter(torch.empty(cout, cin, k, k))
    b = nn.Parameter(torch.empty(cout))
    gc.uniform_fan_in_(w, cin * k * k, gen)
    gc.uniform_fan_in_(b, cin * k * k, gen)
    return w, b


class Conv(nn.Module):
    def __init__(self, cin, cout, k=3, stride=1, gen=None):
        super().__init__()
        self.weight, self.bias = _conv_param(cin, cout, k, gen)
        self.stride, self.pad = stride, k // 2

    def forward(self, x):
        return gc.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Deconv(nn.Module):
    """4×4 stride-2 transposed convolution (exact ×2 upsampling)."""

    def __init__(self, cin, cout, gen=None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cin, cout, 4, 4))
        self.bias = nn.Parameter(torch.empty(cout))
        gc.uniform_fan_in_(self.weight, cin * 4, gen)
        gc.uniform_fan_in_(self.bias, cin * 4, gen)

    def forward(self, x):
        return gc.transposed_conv2d(x, self.weight, self.bias, stride=2, pad=1)


class Backbone(nn.Module):
    """Five stride-2 stages of conv+ReLU; returns maps at strides 4, 8, 16, 32."""

    def __init__(self, cfg: ScaleConfig, gen=None):
        super().__init__()
        self.cfg = cfg
        stages = []
        cin = 6
        for cout, depth in zip(cfg.channels, cfg.depths):
            layers = [Conv(cin, cout, 3, 2, gen)] + [Conv(cout, cout, 3, 1, gen) for _ in range(depth - 1)]
            stages.append(nn.ModuleList(layers))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 6:
            raise gc.ShapeError(f"backbone expects N×6×H×W input, got {tuple(x.shape)}")
        pyramid = []
        for layers in self.stages:
            for conv in layers:
                x = gc.relu(conv(x))
            pyramid.append(x)
        return pyramid[1:]


class LSTMLayer(nn.Module):
    def __init__(self, din, dout, gen=None):
        super().__init__()
        self.w_ih = nn.Parameter(gc.uniform_fan_in_(torch.empty(4 * dout, din), din, gen))
        self.w_hh = nn.Parameter(gc.uniform_fan_in_(torch.empty(4 * dout, dout), dout, gen))
        b = torch.zeros(4 * dout)
        b[dout:2 * dout] = 1.0  # forget gate
        self.b = nn.Parameter(b)
        self.dout = dout

    def zero_state(self, n, dtype):
        z = torch.zeros(n, self.dout, dtype=dtype)
        return (z, z.clone())

    def forward(self, x, state):
        h, c = gc.lstm_cell(x, state[0], state[1], self.w_ih, self.w_hh, self.b)
        return h, (h, c)


class GRULayer(nn.Module):
    def __init__(self, din, dout, gen=None):
        super().__init__()
        self.w_ih = nn.Parameter(gc.uniform_fan_in_(torch.empty(3 * dout, din), din, gen))
        self.w_hh = nn.Parameter(gc.uniform_fan_in_(torch.empty(3 * dout, dout), dout, gen))
        self.b_ih = nn.Parameter(torch.zeros(3 * dout))
        self.b_hh = nn.Parameter(torch.zeros(3 * dout))
        self.dout = dout

    def zero_state(self, n, dtype):
        return (torch.zeros(n, self.dout, dtype=dtype),)

    def forward(self, x, state):
        h = gc.gru_cell(x, state[0], self.w_ih, self.w_hh, self.b_ih, self.b_hh)
        return h, (h,)


class MLPLayer(nn.Module):
    """Dense layer with the activation an LSTM cell reduces to when its gates
    are fixed (input/output open, forget closed, no recurrence):
    h = tanh(tanh(W x + b))."""

    def __init__(self, din, dout, gen=None):
        super().__init__()
        self.w = nn.Parameter(gc.uniform_fan_in_(torch.empty(dout, din), din, gen))
        self.b = nn.Parameter(torch.zeros(dout))
        self.dout = dout

    def zero_state(self, n, dtype):
        return ()

    def forward(self, x, state):
        return torch.tanh(torch.tanh(gc.dense(x, self.w, self.b))), ()


_LAYERS = {"lstm": LSTMLayer, "gru": GRULayer, "mlp": MLPLayer}


class Trunk(nn.Module):
    def __init__(self, din, dims, kind, gen=None):
        super().__init__()
        self.kind = kind
        layers = []
        for d in dims:
            layers.append(_LAYERS[kind](din, d, gen))
            din = d
        self.layers = nn.ModuleList(layers)

    def zero_state(self, n, dtype=torch.float32):
        return [layer.zero_state(n, dtype) for layer in self.layers]

    def forward(self, x, state):
        if state is None:
            state = self.zero_state(x.shape[0], x.dtype)
        if len(state) != len(self.layers):
            raise gc.ShapeError(f"state has {len(state)} layers, trunk has {len(self.layers)}")
        new_state = []
        for layer, s in zip(self.layers, state):
            for t in s:
                if t.shape != (x.shape[0], layer.dout):
                    raise gc.ShapeError(f"state {tuple(t.shape)} does not match layer width {layer.dout}")
            x, s = layer(x, s)
            new_state.append(s)
        return x, new_state


class Heads(nn.Module):
    def __init__(self, din, init_scale=0.01, gen=None):
        super().__init__()
        self.w_t = nn.Parameter(gc.uniform_fan_in_(torch.empty(3, din), din, gen))
        self.b_t = nn.Parameter(torch.zeros(3))
        self.w_r = nn.Parameter(gc.uniform_fan_in_(torch.empty(4, din), din, gen))
        self.b_r = nn.Parameter(torch.tensor([1.0, 0.0, 0.0, 0.0]))
        with torch.no_grad():
            self.w_t.mul_(init_scale)
            self.w_r.mul_(init_scale)

    def forward(self, emb):
        """Returns (translation B×3, unit quaternion B×4, fallback flags B)."""
        trans = gc.dense(emb, self.w_t, self.b_t)
        raw = gc.dense(emb, self.w_r, self.b_r)
        norm = gc.l2_norm(raw, dim=1)
        bad = norm < QUAT_EPS
        ident = torch.zeros_like(raw)
        ident[:, 0] = 1.0
        q = torch.where(bad[:, None], ident, raw / torch.where(bad, torch.ones_like(norm), norm)[:, None])
        return trans, q, bad


class FlowHead(nn.Module):
    """FlowNetS-style refinement decoder with widths taken from the backbone."""

    def __init__(self, channels, gen=None):
        super().__init__()
        c2, c3, c4, c5 = channels
        self.channels = tuple(channels)
        self.predict5 = Conv(c5, 2, 3, 1, gen)
        self.deconv5 = Deconv(c5, c4 // 2, gen)
        self.up5 = Deconv(2, 2, gen)
        self.predict4 = Conv(c4 + c4 // 2 + 2, 2, 3, 1, gen)
        self.deconv4 = Deconv(c4 + c4 // 2 + 2, c3 // 2, gen)
        self.up4 = Deconv(2, 2, gen)
        self.predict3 = Conv(c3 + c3 // 2 + 2, 2, 3, 1, gen)
        self.deconv3 = Deconv(c3 + c3 // 2 + 2, c2 // 2, gen)
        self.up3 = Deconv(2, 2, gen)
        self.predict2 = Conv(c2 + c2 // 2 + 2, 2, 3, 1, gen)

    @staticmethod
    def _fit(x, ref):
        return x[:, :, :ref.shape[2], :ref.shape[3]]

    def forward(self, pyramid):
        if len(pyramid) != 4 or tuple(p.shape[1] for p in pyramid) != self.channels:
            raise gc.ShapeError(f"pyramid channels {[tuple(p.shape) for p in pyramid]} vs {self.channels}")
        f2, f3, f4, f5 = pyramid
        flow5 = self.predict5(f5)
        x = gc.concat([f4, self._fit(gc.relu(self.deconv5(f5)), f4), self._fit(self.up5(flow5), f4)])
        flow4 = self.predict4(x)
        x = gc.concat([f3, self._fit(gc.relu(self.deconv4(x)), f3), self._fit(self.up4(flow4), f3)])
        flow3 = self.predict3(x)
        x = gc.concat([f2, self._fit(gc.relu(self.deconv3(x)), f2), self._fit(self.up3(flow3), f2)])
        flow2 = self.predict2(x)
        return [flow2, flow3, flow4, flow5]


@dataclass
class NetOutput:
    translation: torch.Tensor  # B×3: crop-normalised (x, y) shift and v_z
    quaternion: torch.Tensor  # B×4 unit
    fallback: torch.Tensor  # B bool, quaternion norm collapsed
    flows: list | None
    state: list


class DeepRMNet(nn.Module):
    def __init__(self, cfg: ScaleConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.backbone = Backbone(cfg, gen)
        self.trunk = Trunk(cfg.flat_dim, cfg.trunk_dims, cfg.trunk, gen)
        self.heads = Heads(cfg.trunk_dims[-1], cfg.head_init_scale, gen)
        self.flow_head = FlowHead(cfg.channels[1:], gen) if cfg.with_flow_head else None

    def zero_state(self, n, dtype=None):
        return self.trunk.zero_state(n, dtype or next(self.parameters()).dtype)

    def forward(self, x, state=None, with_flow=True) -> NetOutput:
        pyramid = self.backbone(x)
        emb, state = self.trunk(pyramid[-1].flatten(1), state)
        trans, q, bad = self.heads(emb)
        flows = self.flow_head(pyramid) if (with_flow and self.flow_head is not None) else None
        return NetOutput(trans, q, bad, flows, state)

    def for_inference(self):
        """Copy of the model without the flow decoder."""
        cfg = ScaleConfig.from_dict({**self.cfg.to_dict(), "with_flow_head": False})
        net = DeepRMNet(cfg)
        own = dict(self.named_parameters())
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(own[name])
        return net.to(next(self.parameters()).dtype)

    def save(self, path, extra=None):
        return gc.save_checkpoint(path, dict(self.named_parameters()),
                                  {"scale_config": self.cfg.to_dict(), **(extra or {})})

    @classmethod
    def load(cls, path):
        tensors, extra = gc.load_checkpoint(path)
        if "scale_config" not in extra:
            raise ValueError(f"{path}: checkpoint has no scale_config")
        net = cls(ScaleConfig.from_dict(extra["scale_config"]))
        net.load_tensors(tensors)
        return net

    def load_tensors(self, tensors):
        params = dict(self.named_parameters())
        missing = set(params) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in params.items():
                if tuple(tensors[name].shape) != tuple(p.shape):
                    raise gc.ShapeError(f"{name}: checkpoint {tuple(tensors[name].shape)} vs model {tuple(p.shape)}")
                p.copy_(tensors[name].to(p.dtype))


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
