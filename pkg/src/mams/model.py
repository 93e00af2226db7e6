"""Dual-path network: backbone, expansion block, EMA copy, multi-scale fusion, head.

Data flow for a batch ``x`` of shape [N, C_in, H, W]::

    x1    = backbone(x)                       [N, c_pre, H', W']
    h     = expansion(x1)                     [N, c_out, H'', W'']
    z_ema = momentum(x1)                      same shape as h
    z_att = proj(conv1(h) + conv3(h) + conv5(h))
    z     = z_att + z_ema
    logits = head(global_avg_pool(z))         [N, K]

Ablation switches: without fusion the multi-scale module is the identity
(``z_att = h``); without momentum no EMA copy exists and ``z_ema = h``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .tensor import Tensor, add

GROUPS = ("backbone", "expansion", "momentum", "fusion", "head")
ACTIVATIONS = {"silu": F.silu, "relu": F.relu}


@dataclass
class ModelConfig:
    input_channels: int = 3
    input_size: Tuple[int, int] = (32, 32)
    # output channels of each stride-2 conv-BN-act stage; the last one is c_pre
    backbone_stage_widths: Tuple[int, ...] = (16, 32)
    backbone_strides: Optional[Tuple[int, ...]] = None
    c_out: int = 64
    expansion_kernel: int = 1
    fusion_reduction: int = 8
    fusion_post_norm: bool = True
    head_hidden: int = 512
    dropout_rate: float = 0.3
    num_classes: int = 14
    activation: str = "silu"
    use_fusion: bool = True
    use_momentum: bool = True
    stop_gradient_momentum: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.backbone_stage_widths = tuple(int(v) for v in self.backbone_stage_widths)
        if self.backbone_strides is not None:
            self.backbone_strides = tuple(int(v) for v in self.backbone_strides)

    @property
    def c_pre(self) -> int:
        return self.backbone_stage_widths[-1]

    @property
    def strides(self) -> Tuple[int, ...]:
        if self.backbone_strides is None:
            return (2,) * len(self.backbone_stage_widths)
        return self.backbone_strides

    @property
    def branch_channels(self) -> int:
        return self.c_out // self.fusion_reduction

    def validate(self) -> None:
        if not self.backbone_stage_widths:
            raise ConfigError("backbone needs at least one stage")
        if len(self.strides) != len(self.backbone_stage_widths):
            raise ConfigError("backbone_strides must have one entry per stage")
        if self.fusion_reduction < 1 or self.c_out % self.fusion_reduction:
            raise ConfigError(f"c_out={self.c_out} is not divisible by fusion_reduction={self.fusion_reduction}")
        if self.expansion_kernel % 2 == 0:
            raise ConfigError("expansion_kernel must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        if min(self.input_channels, self.c_out, self.head_hidden, self.num_classes) < 1:
            raise ConfigError("channel and class counts must be positive")
        for hw in self.feature_sizes():
            if min(hw) < 1:
                raise ConfigError(f"input size {self.input_size} collapses to {hw} in the backbone")

    def feature_sizes(self) -> List[Tuple[int, int]]:
        """Spatial size after each backbone stage (3x3 convs, padding 1)."""
        h, w = self.input_size
        sizes = []
        for s in self.strides:
            h, w = F.conv_output_size(h, 3, s, 1), F.conv_output_size(w, 3, s, 1)
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        return asdict(self)


def full_width_config(**overrides) -> ModelConfig:
    """Channel widths of the published network (256 -> 1280, 224x224, 14 classes).

    The backbone here is still the conv-BN-SiLU stand-in, so only the
    expansion, momentum, fusion and head groups have the published sizes.
    """
    cfg = dict(
        input_size=(224, 224),
        backbone_stage_widths=(24, 48, 64, 128, 256),
        c_out=1280,
        fusion_reduction=8,
        num_classes=14,
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=True, rng=None, name=""):
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.cin, self.cout = cin, cout
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, kernel, kernel), cin * kernel * kernel),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias") if bias else None

    def params(self) -> List[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_size(self, hw):
        return tuple(F.conv_output_size(v, self.kernel, self.stride, self.padding) for v in hw)

    def macs(self, hw) -> int:
        ho, wo = self.output_size(hw)
        return self.cin * self.cout * self.kernel * self.kernel * ho * wo


class BatchNorm:
    def __init__(self, channels, eps=1e-5, momentum=0.1, name=""):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.state = F.BatchNormState(channels)
        self.eps, self.momentum = eps, momentum

    def params(self) -> List[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> List[np.ndarray]:
        return [self.state.running_mean, self.state.running_var]

    def __call__(self, x: Tensor, mode: str, update_stats: bool = True) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.state, mode, self.eps, self.momentum, update_stats)


class ConvBNAct:
    """conv (no bias) -> batch norm -> activation."""

    def __init__(self, cin, cout, kernel, stride, activation, cfg: ModelConfig, rng, name=""):
        self.conv = Conv(cin, cout, kernel, stride, kernel // 2, bias=False, rng=rng, name=f"{name}.conv")
        self.bn = BatchNorm(cout, cfg.bn_eps, cfg.bn_momentum, name=f"{name}.bn")
        self.act = ACTIVATIONS[activation]

    def params(self) -> List[Tensor]:
        return self.conv.params() + self.bn.params()

    def buffers(self) -> List[np.ndarray]:
        return self.bn.buffers()

    def __call__(self, x: Tensor, mode: str, update_stats: bool = True) -> Tensor:
        return self.act(self.bn(self.conv(x), mode, update_stats))


class Fusion:
    """Parallel 1x1/3x3/5x5 convs (c_out -> c_out/r, with bias, no activation),
    summed elementwise and projected back to c_out by a 1x1 conv."""

    def __init__(self, cfg: ModelConfig, rng):
        c, b = cfg.c_out, cfg.branch_channels
        self.branches = [Conv(c, b, k, 1, k // 2, bias=True, rng=rng, name=f"fusion.conv{k}") for k in (1, 3, 5)]
        self.proj = Conv(b, c, 1, 1, 0, bias=False, rng=rng, name="fusion.proj")
        self.bn = BatchNorm(c, cfg.bn_eps, cfg.bn_momentum, name="fusion.bn") if cfg.fusion_post_norm else None
        self.act = ACTIVATIONS[cfg.activation]

    def params(self) -> List[Tensor]:
        out = [p for br in self.branches for p in br.params()] + self.proj.params()
        return out + (self.bn.params() if self.bn else [])

    def buffers(self) -> List[np.ndarray]:
        return self.bn.buffers() if self.bn else []

    def __call__(self, h: Tensor, mode: str) -> Tensor:
        a, b, c = (br(h) for br in self.branches)
        z = self.proj(add(add(a, b), c))
        if self.bn is not None:
            z = self.act(self.bn(z, mode))
        return z


class Head:
    """BN on pooled features -> linear(hidden) -> ReLU -> dropout -> linear(K)."""

    def __init__(self, cfg: ModelConfig, rng):
        self.bn = BatchNorm(cfg.c_out, cfg.bn_eps, cfg.bn_momentum, name="head.bn")
        fin, hid, k = cfg.c_out, cfg.head_hidden, cfg.num_classes
        self.w1 = Tensor(_kaiming_uniform(rng, (hid, fin), fin), requires_grad=True, name="head.fc1.weight")
        self.b1 = Tensor(np.zeros(hid), requires_grad=True, name="head.fc1.bias")
        self.w2 = Tensor(_kaiming_uniform(rng, (k, hid), hid), requires_grad=True, name="head.fc2.weight")
        self.b2 = Tensor(np.zeros(k), requires_grad=True, name="head.fc2.bias")
        self.rate = cfg.dropout_rate

    def params(self) -> List[Tensor]:
        return self.bn.params() + [self.w1, self.b1, self.w2, self.b2]

    def buffers(self) -> List[np.ndarray]:
        return self.bn.buffers()

    def __call__(self, z: Tensor, mode: str, rng) -> Tensor:
        z = self.bn(z, mode)
        z = F.relu(F.linear(z, self.w1, self.b1))
        z = F.dropout(z, self.rate, mode, rng)
        return F.linear(z, self.w2, self.b2)


@dataclass
class ParamGroup:
    name: str
    params: List[Tensor] = field(default_factory=list)
    buffers: List[np.ndarray] = field(default_factory=list)

    def count(self) -> int:
        return int(sum(p.size for p in self.params))


class ModelGraph:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        cfg = config
        self.backbone: List[ConvBNAct] = []
        cin = cfg.input_channels
        for i, (width, stride) in enumerate(zip(cfg.backbone_stage_widths, cfg.strides)):
            self.backbone.append(ConvBNAct(cin, width, 3, stride, cfg.activation, cfg, rng, name=f"backbone.{i}"))
            cin = width
        self.expansion = ConvBNAct(cfg.c_pre, cfg.c_out, cfg.expansion_kernel, 1, cfg.activation, cfg, rng,
                                   name="expansion")
        self.fusion = Fusion(cfg, rng) if cfg.use_fusion else None
        self.head = Head(cfg, rng)
        self.momentum: Optional[ConvBNAct] = None
        self.ema_state = None  # set by the training loop
        if cfg.use_momentum:
            self.momentum = _frozen_copy(self.expansion)

    def groups(self) -> Dict[str, ParamGroup]:
        out = {
            "backbone": ParamGroup("backbone", [p for s in self.backbone for p in s.params()],
                                   [b for s in self.backbone for b in s.buffers()]),
            "expansion": ParamGroup("expansion", self.expansion.params(), self.expansion.buffers()),
        }
        if self.momentum is not None:
            out["momentum"] = ParamGroup("momentum", self.momentum.params(), self.momentum.buffers())
        if self.fusion is not None:
            out["fusion"] = ParamGroup("fusion", self.fusion.params(), self.fusion.buffers())
        out["head"] = ParamGroup("head", self.head.params(), self.head.buffers())
        return out

    def trainable_params(self) -> List[Tensor]:
        """Everything except the momentum group, which only ``ema_update`` may change."""
        return [p for name, g in self.groups().items() if name != "momentum" for p in g.params]

    def zero_grad(self) -> None:
        for g in self.groups().values():
            for p in g.params:
                p.grad = None


def _frozen_copy(block: ConvBNAct) -> ConvBNAct:
    twin = copy.copy(block)
    twin.conv = copy.copy(block.conv)
    twin.conv.weight = Tensor(block.conv.weight.data.copy(), name="momentum.conv.weight")
    twin.bn = copy.copy(block.bn)
    twin.bn.gamma = Tensor(block.bn.gamma.data.copy(), name="momentum.bn.gamma")
    twin.bn.beta = Tensor(block.bn.beta.data.copy(), name="momentum.bn.beta")
    twin.bn.state = block.bn.state.copy()
    return twin


def build_model(config: ModelConfig, rng: np.random.Generator) -> ModelGraph:
    """Initialize a network; the momentum block (if any) starts as an exact copy of the expansion block."""
    return ModelGraph(config, rng)


def _check_input(model: ModelGraph, x: Tensor) -> None:
    cfg = model.config
    want = (cfg.input_channels, *cfg.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise DimensionError(f"expected input [N, {want[0]}, {want[1]}, {want[2]}], got {list(x.shape)}")


def forward_backbone(model: ModelGraph, x: Tensor, mode: str = F.EVAL) -> Tensor:
    _check_input(model, x)
    for stage in model.backbone:
        x = stage(x, mode)
    return x


def _check_x1(model: ModelGraph, x1: Tensor) -> None:
    if x1.ndim != 4 or x1.shape[1] != model.config.c_pre:
        raise DimensionError(f"expected [N, {model.config.c_pre}, H', W'] features, got {list(x1.shape)}")


def forward_expansion(model: ModelGraph, x1: Tensor, mode: str = F.EVAL) -> Tensor:
    _check_x1(model, x1)
    return model.expansion(x1, mode)


def forward_momentum(model: ModelGraph, x1: Tensor, mode: str = F.EVAL) -> Tensor:
    """EMA branch forward. Its running statistics are never updated here; they follow the EMA rule."""
    _check_x1(model, x1)
    if model.momentum is None:
        return forward_expansion(model, x1, mode)
    if model.config.stop_gradient_momentum:
        x1 = F.stop_gradient(x1)
    return model.momentum(x1, mode, update_stats=False)


def forward_fusion(model: ModelGraph, h: Tensor, mode: str = F.EVAL) -> Tensor:
    if h.ndim != 4 or h.shape[1] != model.config.c_out:
        raise DimensionError(f"expected [N, {model.config.c_out}, H'', W''] features, got {list(h.shape)}")
    if model.fusion is None:
        return h
    return model.fusion(h, mode)


def forward_features(model: ModelGraph, x: Tensor, mode: str = F.EVAL) -> Dict[str, Tensor]:
    """All intermediate maps of one forward pass, keyed by name."""
    x1 = forward_backbone(model, x, mode)
    h = forward_expansion(model, x1, mode)
    z_ema = forward_momentum(model, x1, mode) if model.momentum is not None else h
    z_att = forward_fusion(model, h, mode)
    z = add(z_att, z_ema)
    pooled = F.global_avg_pool(z)
    return {"x1": x1, "h": h, "z_ema": z_ema, "z_att": z_att, "z": z, "pooled": pooled}


def forward_full(model: ModelGraph, x: Tensor, mode: str = F.EVAL, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Raw (pre-sigmoid) logits of shape [N, K]."""
    pooled = forward_features(model, x, mode)["pooled"]
    return model.head(pooled, mode, rng)


def count_params(model: ModelGraph) -> Dict[str, int]:
    """Per-group parameter counts plus ``total``; BN running buffers are not parameters."""
    counts = {name: g.count() for name, g in model.groups().items()}
    counts["total"] = sum(counts.values())
    return counts


def estimate_flops(model: ModelGraph, input_size: Optional[Sequence[int]] = None) -> Dict[str, int]:
    """FLOPs per image as 2 x multiply-accumulates of every conv and linear layer.

    Activations, batch norm, additions and pooling are not counted.
    """
    cfg = model.config
    hw = tuple(input_size) if input_size is not None else cfg.input_size
    flops = {}
    total = 0
    for stage in model.backbone:
        total += stage.conv.macs(hw)
        hw = stage.conv.output_size(hw)
    flops["backbone"] = 2 * total
    flops["expansion"] = 2 * model.expansion.conv.macs(hw)
    hw_out = model.expansion.conv.output_size(hw)
    flops["momentum"] = 2 * model.momentum.conv.macs(hw) if model.momentum is not None else 0
    if model.fusion is not None:
        macs = sum(br.macs(hw_out) for br in model.fusion.branches) + model.fusion.proj.macs(hw_out)
        flops["fusion"] = 2 * macs
    else:
        flops["fusion"] = 0
    flops["head"] = 2 * (cfg.c_out * cfg.head_hidden + cfg.head_hidden * cfg.num_classes)
    flops["total"] = sum(flops.values())
    return flops


def shape_chain(model: ModelGraph, batch: int = 2) -> Dict[str, tuple]:
    """Expected tensor shapes through the network, from config arithmetic alone."""
    cfg = model.config
    hp, wp = cfg.feature_sizes()[-1]
    ho, wo = (F.conv_output_size(v, cfg.expansion_kernel, 1, cfg.expansion_kernel // 2) for v in (hp, wp))
    feat = (batch, cfg.c_out, ho, wo)
    return {
        "x": (batch, cfg.input_channels, *cfg.input_size),
        "x1": (batch, cfg.c_pre, hp, wp),
        "h": feat,
        "z_ema": feat,
        "z_att": feat,
        "z": feat,
        "pooled": (batch, cfg.c_out),
        "logits": (batch, cfg.num_classes),
    }
