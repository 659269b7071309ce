"""AMFlow: siamese feature pyramid + coarse-to-fine decoder with FMM/CMM."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cmm import CostVolumeModulation
from .flowio import upsample_flow
from .fmm import FlowModulation
from .ops import bilinear_warp, correlation, image_pyramid

MANIFEST = "manifest.txt"
BLOB = "params.bin"


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 4
    channels: tuple[int, ...] = (16, 32, 48, 64)
    radius: int = 4
    fmm: bool = True
    cmm: bool = True
    context: bool = True
    finest_level: int = 2
    estimator_channels: tuple[int, ...] = (128, 96, 64, 32)
    context_channels: tuple[int, ...] = (128, 128, 128, 96, 64, 32)
    context_dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 1)
    cmm_kernel: int = 3

    def __post_init__(self):
        if self.levels < 3:
            raise ValueError("levels must be >= 3")
        if len(self.channels) != self.levels:
            raise ValueError("need one channel count per pyramid level")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError("feature channels must strictly increase with depth")
        if not 1 <= self.finest_level <= self.levels:
            raise ValueError("finest_level must lie in [1, levels]")
        if len(self.context_channels) != len(self.context_dilations):
            raise ValueError("context_channels and context_dilations differ in length")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "PyramidConfig":
        """Small configuration sized for 64x64 inputs on one CPU core."""
        base = dict(estimator_channels=(48, 32, 24, 16), context_channels=(32, 32, 24, 16),
                    context_dilations=(1, 2, 4, 1))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides) -> "PyramidConfig":
        base = dict(levels=6, channels=(16, 32, 64, 96, 128, 196))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MultiScaleFlow:
    flows: list[torch.Tensor]   # coarsest -> finest decoded level
    final: torch.Tensor         # input resolution


def _conv(c_in, c_out, stride=1, dilation=1):
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=dilation, dilation=dilation)


class FeaturePyramid(nn.Module):
    def __init__(self, channels, in_channels=3):
        super().__init__()
        blocks = []
        c_prev = in_channels
        for c in channels:
            blocks.append(nn.ModuleList([_conv(c_prev, c, stride=2), _conv(c, c)]))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        # per-image standardisation: low-contrast inputs otherwise give a cost
        # volume dominated by its mean and the decoder barely learns
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        std = x.std(dim=(1, 2, 3), keepdim=True)
        x = (x - mean) / (std + 1e-3)
        feats = []
        for down, conv in self.blocks:
            x = F.leaky_relu(down(x), 0.1)
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        return feats


class FlowEstimator(nn.Module):
    """Densely connected conv stack ending in a 2-channel residual."""

    def __init__(self, c_in, channels):
        super().__init__()
        self.convs = nn.ModuleList()
        c = c_in
        for ch in channels:
            self.convs.append(_conv(c, ch))
            c += ch
        self.predict = _conv(c, 2)
        self.out_channels = c

    def forward(self, x):
        for conv in self.convs:
            x = torch.cat([F.leaky_relu(conv(x), 0.1), x], 1)
        return self.predict(x)


class ContextNetwork(nn.Module):
    def __init__(self, c_in, channels, dilations):
        super().__init__()
        layers = []
        c = c_in
        for ch, d in zip(channels, dilations):
            layers.append(_conv(c, ch, dilation=d))
            c = ch
        self.convs = nn.ModuleList(layers)
        self.predict = _conv(c, 2)

    def forward(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
        return self.predict(x)


class LevelDecoder(nn.Module):
    def __init__(self, feat_channels: int, cfg: PyramidConfig):
        super().__init__()
        self.fmm = FlowModulation(cfg.radius) if cfg.fmm else None
        self.cmm = CostVolumeModulation(cfg.radius, cfg.cmm_kernel) if cfg.cmm else None
        self.radius = cfg.radius
        self.estimator = FlowEstimator((2 * cfg.radius + 1) ** 2 + feat_channels + 2, cfg.estimator_channels)


class AMFlow(nn.Module):
    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        self.cfg = cfg
        self.features = FeaturePyramid(cfg.channels)
        # decoders[str(l)] for decoded levels l = levels .. finest_level
        self.decoders = nn.ModuleDict({
            str(lvl): LevelDecoder(cfg.channels[lvl - 1], cfg)
            for lvl in range(cfg.levels, cfg.finest_level - 1, -1)
        })
        self.context = (ContextNetwork(cfg.channels[cfg.finest_level - 1] + 2, cfg.context_channels,
                                       cfg.context_dilations) if cfg.context else None)

    def forward(self, i1, i2) -> MultiScaleFlow:
        return amflow_forward(i1, i2, self)


# --------------------------------------------------------------------------
# construction


def _zero_init_modules(model: AMFlow) -> set[int]:
    keep = set()
    for dec in model.decoders.values():
        if dec.fmm is not None:
            keep |= {id(dec.fmm.conv3.weight), id(dec.fmm.conv3.bias)}
        if dec.cmm is not None:
            keep |= {id(dec.cmm.head.weight), id(dec.cmm.head.bias), id(dec.cmm.weights)}
    return keep


def init_params(seed: int, cfg: PyramidConfig | None = None) -> AMFlow:
    """Deterministic weights for ``seed``: He-scaled convs, zero biases,
    down-scaled flow predictors, zero FMM displacement and CMM offset heads."""
    cfg = cfg or PyramidConfig()
    model = AMFlow(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    keep = _zero_init_modules(model)
    predictors = set()
    for mod in model.modules():
        if isinstance(mod, (FlowEstimator, ContextNetwork)):
            predictors.add(id(mod.predict))
    with torch.no_grad():
        for mod in model.modules():
            if not isinstance(mod, nn.Conv2d) or id(mod.weight) in keep:
                continue
            fan_in = mod.weight[0].numel()
            if id(mod) in predictors:
                std = 0.1 / np.sqrt(fan_in)
            else:
                std = np.sqrt(2.0 / ((1 + 0.1 ** 2) * fan_in))
            mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
            mod.bias.zero_()
    return model


# --------------------------------------------------------------------------
# forward pieces


def _check_divisible(img: torch.Tensor, levels: int) -> None:
    h, w = img.shape[-2:]
    s = 2 ** levels
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} must be divisible by {s}")


def extract_features(img: torch.Tensor, params: AMFlow) -> list[torch.Tensor]:
    """Feature maps for levels 1..L (list index ``l - 1``), level l at H/2^l."""
    _check_divisible(img, params.cfg.levels)
    return params.features(img)


def decode_level(x1, x2, f_up, i1, i2, params: LevelDecoder, cfg: PyramidConfig | None = None,
                 return_parts: bool = False):
    """One decoder step: FMM -> warp -> correlation -> CMM -> residual estimate."""
    f_hat = params.fmm(f_up, x1, i1, i2) if params.fmm is not None else f_up
    warped, _ = bilinear_warp(x2, f_hat)
    cost = correlation(x1, warped, params.radius)
    if params.cmm is not None:
        cost = params.cmm(cost)
    residual = params.estimator(torch.cat([cost, x1, f_hat], 1))
    flow = f_hat + residual
    if return_parts:
        return flow, {"f_hat": f_hat, "residual": residual, "cost": cost}
    return flow


def amflow_forward(i1: torch.Tensor, i2: torch.Tensor, params: AMFlow, cfg: PyramidConfig | None = None) -> MultiScaleFlow:
    cfg = cfg or params.cfg
    if i1.shape != i2.shape:
        raise ValueError(f"image shapes differ: {tuple(i1.shape)} vs {tuple(i2.shape)}")
    _check_divisible(i1, cfg.levels)
    b = i1.shape[0]
    feats = params.features(torch.cat([i1, i2], 0))
    pyr1 = image_pyramid(i1, cfg.levels + 1)
    pyr2 = image_pyramid(i2, cfg.levels + 1)
    flows = []
    flow = None
    for lvl in range(cfg.levels, cfg.finest_level - 1, -1):
        x = feats[lvl - 1]
        x1, x2 = x[:b], x[b:]
        if flow is None:
            f_up = x1.new_zeros(b, 2, x1.shape[2], x1.shape[3])
        else:
            f_up = upsample_flow(flow, 2)
        flow = decode_level(x1, x2, f_up, pyr1[lvl], pyr2[lvl], params.decoders[str(lvl)], cfg)
        flows.append(flow)
    if params.context is not None:
        x1 = feats[cfg.finest_level - 1][:b]
        flow = flow + params.context(torch.cat([x1, flow], 1))
        flows[-1] = flow
    final = upsample_flow(flow, 2 ** cfg.finest_level)
    return MultiScaleFlow(flows, final)


# --------------------------------------------------------------------------
# checkpoints: text manifest + one little-endian float32 blob


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_cfg(items: dict[str, str]) -> PyramidConfig:
    kwargs = {}
    for f in dataclasses.fields(PyramidConfig):
        if f.name not in items:
            continue
        raw = items[f.name]
        default = f.default
        if isinstance(default, bool):
            kwargs[f.name] = raw == "true"
        elif isinstance(default, tuple):
            kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
        else:
            kwargs[f.name] = int(raw)
    return PyramidConfig(**kwargs)


def save_checkpoint(model: AMFlow, path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["# cotamflow checkpoint v1", "# name\tshape\toffset"]
    lines += [f"#cfg {k}={_fmt_value(v)}" for k, v in model.cfg.to_dict().items()]
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, t in model.state_dict().items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            fh.write(arr.tobytes())
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += arr.nbytes
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> AMFlow:
    path = Path(path)
    cfg_items: dict[str, str] = {}
    entries = []
    for line in (path / MANIFEST).read_text().splitlines():
        if line.startswith("#cfg "):
            k, v = line[5:].split("=", 1)
            cfg_items[k] = v
        elif line and not line.startswith("#"):
            name, shape, offset = line.split("\t")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            entries.append((name, dims, int(offset)))
    model = AMFlow(_parse_cfg(cfg_items))
    blob = (path / BLOB).read_bytes()
    state = {}
    for name, dims, offset in entries:
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    return model
