"""ADMM unfolded into a fixed number of stages with a pluggable prior.

Each stage runs the closed-form data-fidelity update, feeds the padded
``V - B`` (plus sampling priors) to a prior module, and updates the scaled
multiplier. Everything is written on :class:`~snapunfold.tensor.Tensor` so
the whole reconstruction is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import functional as F
from .sampling import NORMALIZE_EPS, MaskStack, Measurement, psi
from .tensor import DimensionError, Parameter, Tensor, concat, reshape, slice_axis, take

PAD_MODES = ("reflective", "repetitive")


@dataclass
class StageState:
    """The ADMM triple, each (b, c, h, w)."""

    x: Tensor
    v: Tensor
    b: Tensor

    def __post_init__(self):
        if not (self.x.shape == self.v.shape == self.b.shape):
            raise DimensionError("StageState", f"x {self.x.shape}, v {self.v.shape}, b {self.b.shape} differ")


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class GammaParam:
    """Learnable fidelity penalty, ``softplus(raw) > 0``."""

    def __init__(self, init: float = 1.0, name: str = "gamma", dtype=np.float64):
        self.raw = Parameter(np.array([_inverse_softplus(init)], dtype=dtype), name=name)

    def value(self) -> Tensor:
        return F.softplus(self.raw)


class FixedGamma:
    """Constant penalty for training-free priors."""

    def __init__(self, value: float, dtype=np.float64):
        if value <= 0:
            raise ValueError("gamma must be positive")
        self._value = Tensor(np.array([value], dtype=dtype))

    def value(self) -> Tensor:
        return self._value


class PriorModule(Protocol):
    """What :func:`run_dun` needs from a prior.

    ``forward(k, vbar, mbar)`` maps the stage-``k`` prior inputs of shape
    (b', L + 1, h, w) to a (b', L, h, w) estimate.
    """

    num_stages: int
    pad_length: int
    padding: str

    def gamma(self, k: int): ...

    def forward(self, k: int, vbar: Tensor, mbar: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class DunConfig:
    stages: int = 10
    pad_length: int = 24
    prior: str = "learned"

    def __post_init__(self):
        if self.stages < 1 or self.pad_length < 1:
            raise ValueError("stages and pad_length must be >= 1")
        if self.prior not in ("learned", "tv"):
            raise ValueError(f"unknown prior kind {self.prior!r}")


@dataclass(frozen=True)
class PadPlan:
    """How a (b, c) frame stack was laid out as (b * chunks, L)."""

    batch: int
    frames: int
    length: int
    chunks: int
    gather: np.ndarray  # (chunks * length,) source frame per padded slot
    scatter: np.ndarray  # (frames,) padded slot owning each output frame


def pad_indices(c: int, L: int, mode: str = "reflective") -> np.ndarray:
    """Source frame index for every padded slot, shape (chunks, L)."""
    if c < 1 or L < 1:
        raise ValueError("c and L must be >= 1")
    if mode not in PAD_MODES:
        raise ValueError(f"unknown padding mode {mode!r}")
    if c < L:
        j = np.arange(L)
        if mode == "repetitive":
            return (j % c)[None, :]
        r = j % (2 * c)
        return np.where(r < c, r, 2 * c - 1 - r)[None, :]
    chunks = -(-c // L)
    starts = [k * L for k in range(chunks - 1)] + [c - L]
    return np.array([np.arange(s, s + L) for s in starts])


def make_plan(b: int, c: int, L: int, mode: str = "reflective") -> PadPlan:
    idx = pad_indices(c, L, mode)
    chunks = idx.shape[0]
    if c < L:
        scatter = np.arange(c)
    else:
        t = np.arange(c)
        last = (chunks - 1) * L
        scatter = np.where(t < last, t, last + t - (c - L))
    return PadPlan(b, c, L, chunks, idx.reshape(-1), scatter)


def reflective_pad(seq: Tensor, L: int, mode: str = "reflective") -> tuple[Tensor, PadPlan]:
    """Lay a (b, c, h, w) stack out as (b', L, h, w).

    Short stacks are extended with their reversed sequence (or repeated, in
    ``"repetitive"`` mode) and truncated to ``L`` frames. Long stacks are cut
    into consecutive ``L``-frame chunks along the batch axis, the last chunk
    being backfilled to end at frame ``c``.
    """
    b, c, h, w = seq.shape
    plan = make_plan(b, c, L, mode)
    out = take(seq, plan.gather, axis=1)
    return reshape(out, (b * plan.chunks, L, h, w)), plan


def unpad_merge(padded: Tensor, plan: PadPlan) -> Tensor:
    """Invert :func:`reflective_pad`; earlier chunks own overlapping frames."""
    bk, L, h, w = padded.shape
    if bk != plan.batch * plan.chunks or L != plan.length:
        raise DimensionError("unpad_merge", f"shape {padded.shape} does not match plan "
                             f"(batch {plan.batch}, chunks {plan.chunks}, L {plan.length})")
    flat = reshape(padded, (plan.batch, plan.chunks * L, h, w))
    return take(flat, plan.scatter, axis=1)


def _meas_array(meas: Measurement | np.ndarray) -> np.ndarray:
    y = meas.values if isinstance(meas, Measurement) else np.asarray(meas)
    return y[None] if y.ndim == 2 else y


def _mask_tensor(mask: MaskStack, dtype) -> Tensor:
    return Tensor(np.asarray(mask.values, dtype=dtype))


def init_state(meas: Measurement | np.ndarray, mask: MaskStack, dtype=None) -> StageState:
    """``x = Phi^T y``, ``v = x``, ``b = 0``; batched as (b, c, h, w)."""
    y = _meas_array(meas)
    if y.shape[-2:] != mask.shape[1:]:
        raise DimensionError("init_state", f"measurement {y.shape} does not match mask {mask.shape}")
    dtype = dtype or (y.dtype if y.dtype in (np.float32, np.float64) else np.float64)
    x = Tensor((mask.values[None] * y[:, None]).astype(dtype))
    return StageState(x=x, v=x, b=Tensor(np.zeros(x.shape, dtype=dtype)))


def fidelity_update(state: StageState, meas: Measurement | np.ndarray | Tensor, mask: MaskStack,
                    gamma) -> Tensor:
    """One-shot solve of the quadratic fidelity sub-problem.

    ``v = z + Phi^T[(y - Phi z) / (gamma + psi)]`` with ``z = x + b``, using
    only per-pixel arithmetic because ``Phi Phi^T = diag(psi)``.
    """
    dtype = state.x.dtype
    y = meas if isinstance(meas, Tensor) else Tensor(_meas_array(meas).astype(dtype))
    m = _mask_tensor(mask, dtype)
    ps = Tensor(psi(mask).astype(dtype))
    g = gamma.value() if hasattr(gamma, "value") else Tensor(np.array([gamma], dtype=dtype))
    z = state.x + state.b
    resid = y - (z * m).sum(axis=1)
    scaled = resid / (ps + reshape(g, (1, 1)))
    b, c, h, w = z.shape
    return z + m * reshape(scaled, (b, 1, h, w))


def multiplier_update(state: StageState, x_new: Tensor) -> Tensor:
    """``b - (v - x_new)``."""
    if x_new.shape != state.v.shape:
        raise DimensionError("multiplier_update", f"x {x_new.shape} vs v {state.v.shape}")
    return state.b - (state.v - x_new)


def normalized_measurement(meas: Measurement | np.ndarray, mask: MaskStack, dtype) -> np.ndarray:
    y = _meas_array(meas)
    return (y / np.maximum(mask.values.sum(axis=0), NORMALIZE_EPS)).astype(dtype)


def mask_prior_input(mask: MaskStack, batch: int, c_prime: int, L: int, mode: str, dtype) -> np.ndarray:
    """``cat[RP(M), c'/L]`` for a mask shared by ``batch`` items: (b', L + 1, h, w)."""
    c, h, w = mask.shape
    plan = make_plan(batch, c, L, mode)
    padded = np.asarray(mask.values, dtype=dtype)[plan.gather].reshape(plan.chunks, L, h, w)
    padded = np.concatenate([padded, np.full((plan.chunks, 1, h, w), c_prime / L, dtype=dtype)], axis=1)
    return np.tile(padded, (batch, 1, 1, 1))


def build_prior_inputs(state: StageState, meas: Measurement | np.ndarray, mask: MaskStack, c_prime: int,
                       L: int, mode: str = "reflective", ybar: np.ndarray | None = None,
                       mbar: np.ndarray | None = None) -> tuple[Tensor, Tensor, PadPlan]:
    """Assemble ``V-bar = cat[RP(V - B), Y-bar]`` and ``M-bar = cat[RP(M), c'/L]``.

    ``ybar`` / ``mbar`` may be passed in when already computed for this
    reconstruction; they depend only on the measurement and mask.
    """
    if state.v.shape[1:] != mask.shape:
        raise DimensionError("build_prior_inputs", f"state {state.v.shape} does not match mask {mask.shape}")
    dtype = state.v.dtype
    padded, plan = reflective_pad(state.v - state.b, L, mode)
    if ybar is None:
        ybar = normalized_measurement(meas, mask, dtype)
    yb = np.repeat(ybar[:, None], plan.chunks, axis=0)
    vbar = concat([padded, Tensor(yb)], axis=1)
    if mbar is None:
        mbar = mask_prior_input(mask, plan.batch, c_prime, L, mode, dtype)
    return vbar, Tensor(mbar), plan


class IdentityPrior:
    """Returns the padded ``V - B`` unchanged; used to check the stage plumbing."""

    def __init__(self, stages: int = 1, pad_length: int = 4, padding: str = "reflective", gamma: float = 1.0):
        self.num_stages = stages
        self.pad_length = pad_length
        self.padding = padding
        self._gamma = FixedGamma(gamma)

    def gamma(self, k: int):
        return self._gamma

    def forward(self, k: int, vbar: Tensor, mbar: Tensor) -> Tensor:
        return slice_axis(vbar, 1, 0, self.pad_length)


def _resolve_prior(params, cfg: DunConfig | None):
    from .classic import TvConfig, TvPrior

    if isinstance(params, TvConfig):
        prior = TvPrior(params, pad_length=cfg.pad_length if cfg else None)
    else:
        prior = params
    stages = cfg.stages if cfg else prior.num_stages
    L = cfg.pad_length if cfg else prior.pad_length
    return prior, stages, L


def run_dun(meas: Measurement | np.ndarray, mask: MaskStack, params, cfg: DunConfig | None = None,
            dtype=None, trace: list | None = None) -> list[Tensor]:
    """Run the unfolded stages and return every stage output.

    ``params`` is a prior module (e.g. the learned network) or a
    :class:`~snapunfold.classic.TvConfig`. Outputs are (b, c, h, w), or
    (c, h, w) when ``meas`` is a single snapshot. When ``trace`` is a list,
    one dict per stage with the measurement residual ``||y - Phi x^k||`` is
    appended to it. A prior whose ``fidelity`` attribute is false skips the
    data-fidelity update, so the network alone maps ``Phi^T y`` to frames.
    """
    prior, stages, L = _resolve_prior(params, cfg)
    y = _meas_array(meas)
    single = (meas.values if isinstance(meas, Measurement) else np.asarray(meas)).ndim == 2
    if isinstance(meas, Measurement) and meas.cs_ratio != mask.cs_ratio:
        raise DimensionError("run_dun", f"measurement ratio {meas.cs_ratio} != mask frames {mask.cs_ratio}")
    if dtype is None:
        dtype = getattr(prior, "dtype", None) or np.float64
    y = y.astype(dtype)
    state = init_state(y, mask, dtype)
    yt = Tensor(y)
    c = mask.cs_ratio
    ybar = normalized_measurement(y, mask, dtype)
    mbar = mask_prior_input(mask, y.shape[0], c, L, prior.padding, dtype)
    outputs = []
    for k in range(stages):
        if getattr(prior, "fidelity", True):
            v = fidelity_update(state, yt, mask, prior.gamma(k))
        else:
            v = state.x + state.b
        state = StageState(x=state.x, v=v, b=state.b)
        vbar, mbar_t, plan = build_prior_inputs(state, y, mask, c, L, prior.padding, ybar, mbar)
        x_new = unpad_merge(prior.forward(k, vbar, mbar_t), plan)
        b_new = multiplier_update(state, x_new)
        state = StageState(x=x_new, v=v, b=b_new)
        outputs.append(x_new)
        if trace is not None:
            r = y - (x_new.data * mask.values).sum(axis=1)
            trace.append({"stage": k + 1, "residual": float(np.linalg.norm(r))})
    if single:
        outputs = [reshape(o, o.shape[1:]) for o in outputs]
    return outputs
