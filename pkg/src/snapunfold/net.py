"""The mask-guided U-net prior and the per-stage parameter set.

Each stage owns a three-scale U-net built from mixer-style convolution
blocks (depthwise spatial mixer plus 1x1 channel mixer, each with a scaled
residual) and a Mask Guided Module that turns the padded mask and the
constant ratio plane into one attention map per scale.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np

from . import functional as F
from .tensor import DimensionError, Parameter, Tensor, concat, slice_axis
from .unfold import GammaParam, PAD_MODES

BLOCK_TYPES = ("mixer", "resnet", "resnext")
ATTN_SITES = ("dw_output", "block_input")


class ParameterMismatchError(ValueError):
    """A stored parameter set does not fit the model; ``name`` is the first offender."""

    def __init__(self, name: str, message: str):
        super().__init__(f"parameter {name!r}: {message}")
        self.name = name


@dataclass(frozen=True)
class SpaDunConfig:
    """Architecture and ablation switches of the unfolded model."""

    stages: int = 10
    width: int = 48
    blocks: tuple[int, int, int] = (4, 6, 4)
    pad_length: int = 24
    expansion: int = 2
    kernel: int = 5
    block_type: str = "mixer"
    use_ybar: bool = True
    use_mgm: bool = True
    attn_site: str = "dw_output"
    residual: bool = False
    share_weights: bool = False
    padding: str = "reflective"
    zero_head: bool = False
    fidelity: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.blocks) != 3 or min(self.blocks) < 0:
            raise ValueError("blocks must be three non-negative counts")
        if self.stages < 1 or self.width < 1 or self.pad_length < 1:
            raise ValueError("stages, width and pad_length must be >= 1")
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"block_type must be one of {BLOCK_TYPES}")
        if self.attn_site not in ATTN_SITES:
            raise ValueError(f"attn_site must be one of {ATTN_SITES}")
        if self.padding not in PAD_MODES:
            raise ValueError(f"padding must be one of {PAD_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SpaDunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        """Hash of the architecture-defining fields (dtype excluded)."""
        d = self.to_dict()
        d.pop("dtype")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# parameter containers -------------------------------------------------------

@dataclass
class Conv:
    weight: Parameter
    bias: Parameter | None
    stride: int = 1
    padding: int = 0
    depthwise: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        fn = F.dwconv2d if self.depthwise else F.conv2d
        return fn(x, self.weight, self.bias, self.stride, self.padding)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k = self.weight.shape[2]
        return ((h + 2 * self.padding - k) // self.stride + 1,
                (w + 2 * self.padding - k) // self.stride + 1)

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.out_size(h, w)
        return self.weight.size * ho * wo


@dataclass
class ConvBlockParams:
    ln1_g: Parameter
    ln1_b: Parameter
    dw: Conv
    s1: Parameter
    ln2_g: Parameter
    ln2_b: Parameter
    pw1: Conv
    pw2: Conv
    s2: Parameter

    def macs(self, h, w):
        return self.dw.macs(h, w) + self.pw1.macs(h, w) + self.pw2.macs(h, w)


@dataclass
class ResNetBlockParams:
    conv1: Conv
    conv2: Conv

    def macs(self, h, w):
        return self.conv1.macs(h, w) + self.conv2.macs(h, w)


@dataclass
class ResNeXtBlockParams:
    pw1: Conv
    dw: Conv
    pw2: Conv

    def macs(self, h, w):
        return self.pw1.macs(h, w) + self.dw.macs(h, w) + self.pw2.macs(h, w)


@dataclass
class MgmParams:
    entry: Conv
    dw: Conv
    exit: Conv
    downs: list[Conv]

    def macs(self, h, w):
        total = self.entry.macs(h, w) + self.dw.macs(h, w) + self.exit.macs(h, w)
        for k, d in enumerate(self.downs, start=1):
            total += d.macs(h >> k, w >> k)
        return total


@dataclass
class UNetParams:
    stem: Conv
    enc0: list
    down0: Conv
    enc1: list
    down1: Conv
    mid: list
    up1: Conv
    fuse1: Conv
    dec1: list
    up0: Conv
    fuse0: Conv
    dec0: list
    head: Conv
    mgm: MgmParams | None = None

    def macs(self, h: int, w: int) -> int:
        """Multiply-accumulates of one forward pass on an (L+1, h, w) input."""
        h1, w1, h2, w2 = h // 2, w // 2, h // 4, w // 4
        total = self.stem.macs(h, w) + self.head.macs(h, w)
        total += sum(b.macs(h, w) for b in self.enc0 + self.dec0)
        total += sum(b.macs(h1, w1) for b in self.enc1 + self.dec1)
        total += sum(b.macs(h2, w2) for b in self.mid)
        total += self.down0.macs(h, w) + self.down1.macs(h1, w1)
        total += self.up1.macs(h1, w1) + self.fuse1.macs(h1, w1)
        total += self.up0.macs(h, w) + self.fuse0.macs(h, w)
        if self.mgm is not None:
            total += self.mgm.macs(h, w)
        return total


def named_parameters(obj, prefix: str = "") -> list[tuple[str, Parameter]]:
    """All parameters under ``obj`` with dotted path names, shared ones listed once."""
    out: list[tuple[str, Parameter]] = []
    seen: set[int] = set()

    def walk(o, path):
        if isinstance(o, Parameter):
            if id(o) not in seen:
                seen.add(id(o))
                out.append((path, o))
        elif isinstance(o, GammaParam):
            walk(o.raw, path)
        elif is_dataclass(o) and not isinstance(o, type):
            for f in fields(o):
                walk(getattr(o, f.name), f"{path}.{f.name}" if path else f.name)
        elif isinstance(o, (list, tuple)):
            for i, v in enumerate(o):
                walk(v, f"{path}.{i}" if path else str(i))

    walk(obj, prefix)
    return out


# initialization -------------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = np.dtype(dtype)

    def conv(self, cin, cout, k, stride=1, padding=None, bias=True, scale=1.0):
        bound = scale / math.sqrt(cin * k * k)
        wt = self.rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(self.dtype)
        b = Parameter(np.zeros(cout, dtype=self.dtype)) if bias else None
        return Conv(Parameter(wt), b, stride, k // 2 if padding is None else padding)

    def dw(self, c, k, bias=True):
        bound = 1.0 / k
        wt = self.rng.uniform(-bound, bound, size=(c, 1, k, k)).astype(self.dtype)
        b = Parameter(np.zeros(c, dtype=self.dtype)) if bias else None
        return Conv(Parameter(wt), b, 1, k // 2, depthwise=True)

    def const(self, shape, value):
        return Parameter(np.full(shape, value, dtype=self.dtype))


def init_block(init: _Init, cfg: SpaDunConfig, c: int):
    if cfg.block_type == "mixer":
        return ConvBlockParams(
            ln1_g=init.const(c, 1.0), ln1_b=init.const(c, 0.0), dw=init.dw(c, cfg.kernel),
            s1=init.const(1, 1e-2),
            ln2_g=init.const(c, 1.0), ln2_b=init.const(c, 0.0),
            pw1=init.conv(c, cfg.expansion * c, 1), pw2=init.conv(cfg.expansion * c, c, 1),
            s2=init.const(1, 1e-2),
        )
    if cfg.block_type == "resnet":
        return ResNetBlockParams(init.conv(c, c, 3), init.conv(c, c, 3))
    e = cfg.expansion * c
    return ResNeXtBlockParams(init.conv(c, e, 1), init.dw(e, 3), init.conv(e, c, 1))


def init_mgm(init: _Init, cfg: SpaDunConfig) -> MgmParams:
    w0 = cfg.width
    return MgmParams(
        entry=init.conv(cfg.pad_length + 1, w0, 1),
        dw=init.dw(w0, 5),
        exit=init.conv(w0, w0, 1),
        downs=[init.conv(w0, 2 * w0, 1), init.conv(2 * w0, 4 * w0, 1)],
    )


def init_unet(init: _Init, cfg: SpaDunConfig) -> UNetParams:
    w0, w1, w2 = cfg.width, 2 * cfg.width, 4 * cfg.width
    b0, b1, b2 = cfg.blocks
    cin = cfg.pad_length + 1 if cfg.use_ybar else cfg.pad_length
    head = init.conv(w0, cfg.pad_length, 3, scale=0.1)
    if cfg.zero_head:
        head.weight.data[...] = 0
    return UNetParams(
        stem=init.conv(cin, w0, 3),
        enc0=[init_block(init, cfg, w0) for _ in range(b0)],
        down0=init.conv(w0, w1, 3, stride=2, padding=1),
        enc1=[init_block(init, cfg, w1) for _ in range(b1)],
        down1=init.conv(w1, w2, 3, stride=2, padding=1),
        mid=[init_block(init, cfg, w2) for _ in range(b2)],
        up1=init.conv(w2, w1, 1),
        fuse1=init.conv(2 * w1, w1, 1),
        dec1=[init_block(init, cfg, w1) for _ in range(b1)],
        up0=init.conv(w1, w0, 1),
        fuse0=init.conv(2 * w0, w0, 1),
        dec0=[init_block(init, cfg, w0) for _ in range(b0)],
        head=head,
        mgm=init_mgm(init, cfg) if cfg.use_mgm else None,
    )


# forward passes -------------------------------------------------------------

def conv_block_forward(x: Tensor, p: ConvBlockParams, attn: Tensor | None = None,
                       attn_site: str = "dw_output") -> Tensor:
    """``u = x + s1 * (attn * dw(LN(x)))``; ``out = u + s2 * pw2(GELU(pw1(LN(u))))``."""
    if attn is not None and attn.shape != x.shape:
        raise DimensionError("conv_block", f"attention {attn.shape} does not match features {x.shape}")
    h = F.layer_norm(x, p.ln1_g, p.ln1_b)
    if attn is not None and attn_site == "block_input":
        h = h * attn
    h = p.dw(h)
    if attn is not None and attn_site == "dw_output":
        h = h * attn
    u = x + p.s1 * h
    h = p.pw2(F.gelu(p.pw1(F.layer_norm(u, p.ln2_g, p.ln2_b))))
    return u + p.s2 * h


def block_forward(x: Tensor, p, attn: Tensor | None, attn_site: str) -> Tensor:
    if isinstance(p, ConvBlockParams):
        return conv_block_forward(x, p, attn, attn_site)
    if isinstance(p, ResNetBlockParams):
        branch = p.conv2(F.relu(p.conv1(x)))
    else:
        branch = p.pw2(F.relu(p.dw(F.relu(p.pw1(x)))))
    if attn is not None:
        branch = branch * attn
    return x + branch


def mgm_forward(mbar: Tensor, p: MgmParams) -> list[Tensor]:
    """Attention maps in (0, 1), one per U-net scale."""
    f = p.exit(p.dw(F.gelu(p.entry(mbar))))
    maps = [F.sigmoid(f)]
    for down in p.downs:
        f = down(F.avgpool2(f))
        maps.append(F.sigmoid(f))
    return maps


def _stack(x, blocks, attn, site):
    for bp in blocks:
        x = block_forward(x, bp, attn, site)
    return x


def unet_forward(vbar: Tensor, mbar: Tensor | None, p: UNetParams, attn_site: str = "dw_output") -> Tensor:
    """Map (b', L+1, h, w) prior inputs to a (b', L, h, w) frame estimate."""
    h, w = vbar.shape[2], vbar.shape[3]
    if h % 4 or w % 4:
        raise DimensionError("unet", f"spatial size {h}x{w} must be divisible by 4; pad the input spatially")
    cin = p.stem.weight.shape[1]
    x = vbar if vbar.shape[1] == cin else slice_axis(vbar, 1, 0, cin)
    if p.mgm is not None and mbar is not None:
        a0, a1, a2 = mgm_forward(mbar, p.mgm)
    else:
        a0 = a1 = a2 = None
    s0 = _stack(p.stem(x), p.enc0, a0, attn_site)
    s1 = _stack(p.down0(s0), p.enc1, a1, attn_site)
    m = _stack(p.down1(s1), p.mid, a2, attn_site)
    u1 = p.fuse1(concat([p.up1(F.upsample2(m)), s1], axis=1))
    u1 = _stack(u1, p.dec1, a1, attn_site)
    u0 = p.fuse0(concat([p.up0(F.upsample2(u1)), s0], axis=1))
    u0 = _stack(u0, p.dec0, a0, attn_site)
    return p.head(u0)


@dataclass
class SpaDunParams:
    """All learnable state: one U-net and one penalty per stage."""

    config: SpaDunConfig
    stages: list[UNetParams]
    gammas: list[GammaParam] = field(default_factory=list)

    # prior-module interface used by unfold.run_dun
    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def pad_length(self) -> int:
        return self.config.pad_length

    @property
    def padding(self) -> str:
        return self.config.padding

    @property
    def fidelity(self) -> bool:
        return self.config.fidelity

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def gamma(self, k: int) -> GammaParam:
        return self.gammas[k]

    def forward(self, k: int, vbar: Tensor, mbar: Tensor) -> Tensor:
        out = unet_forward(vbar, mbar, self.stages[k], self.config.attn_site)
        if self.config.residual:
            out = slice_axis(vbar, 1, 0, self.config.pad_length) + out
        return out

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return named_parameters(self.stages, "stages") + named_parameters(self.gammas, "gammas")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into parameters; mismatches name the offending parameter."""
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing:
                raise ParameterMismatchError(missing[0], f"missing from stored state ({len(missing)} missing)")
            if extra:
                raise ParameterMismatchError(extra[0], f"not present in model ({len(extra)} unexpected)")
        for name, arr in state.items():
            if name in own and own[name].shape != arr.shape:
                raise ParameterMismatchError(name, f"expected shape {own[name].shape}, got {arr.shape}")
        for name, arr in state.items():
            if name in own:
                own[name].data = np.array(arr, dtype=own[name].dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def build_spadun(cfg: SpaDunConfig, seed: int = 0) -> SpaDunParams:
    """Initialize a model; stage U-nets are independent unless ``share_weights``."""
    init = _Init(np.random.default_rng(seed), cfg.dtype)
    if cfg.share_weights:
        unet = init_unet(init, cfg)
        stages = [unet] * cfg.stages
    else:
        stages = [init_unet(init, cfg) for _ in range(cfg.stages)]
    # without the fidelity step there is no penalty to learn
    gammas = [GammaParam(1.0, dtype=cfg.dtype) for _ in range(cfg.stages)] if cfg.fidelity else []
    model = SpaDunParams(cfg, stages, gammas)
    for name, p in model.named_parameters():
        p.name = name
    return model


def count_params(p: SpaDunParams | UNetParams) -> int:
    """Number of learnable scalars (shared weights counted once)."""
    params = p.parameters() if isinstance(p, SpaDunParams) else [q for _, q in named_parameters(p)]
    return int(sum(q.size for q in params))


def count_flops(p: SpaDunParams, h: int, w: int, c: int) -> int:
    """Convolution multiply-accumulates for reconstructing one (c, h, w) snapshot."""
    if h % 4 or w % 4:
        raise DimensionError("count_flops", f"spatial size {h}x{w} must be divisible by 4")
    chunks = -(-c // p.pad_length) if c >= p.pad_length else 1
    return int(sum(u.macs(h, w) for u in p.stages) * chunks)
