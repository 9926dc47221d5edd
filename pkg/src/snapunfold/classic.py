"""Training-free plug-and-play baseline with a total-variation denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .sampling import MaskStack, Measurement, VideoCube
from .tensor import Tensor, slice_axis
from .unfold import DunConfig, FixedGamma, run_dun

TV_STEP = 0.125  # 1 / ||D||^2 for 2-D forward differences


@dataclass(frozen=True)
class TvConfig:
    """TV strength, inner dual iterations, outer stages and fidelity penalty."""

    tv_weight: float = 0.08
    inner_iters: int = 20
    stages: int = 10
    gamma: float = 3.0

    def __post_init__(self):
        if self.tv_weight <= 0:
            raise ValueError("tv_weight must be > 0")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


def tv_norm(img: np.ndarray) -> float:
    """Anisotropic TV of an (h, w) image (or the sum over a stack)."""
    img = np.asarray(img)
    return float(np.abs(np.diff(img, axis=-1)).sum() + np.abs(np.diff(img, axis=-2)).sum())


def tv_denoise(img: np.ndarray, weight: float, iters: int = 20) -> np.ndarray:
    """Approximate ``argmin_u 0.5||u - img||^2 + weight * TV(u)``.

    Works on one (h, w) image or a stack (n, h, w), frame by frame. The
    result is clipped to each frame's input range, which contains the exact
    minimizer and cannot raise TV.
    """
    if weight <= 0:
        raise ValueError("weight must be > 0")
    img = np.asarray(img)
    if img.dtype not in (np.float32, np.float64):
        img = img.astype(np.float64)
    stack = img[None] if img.ndim == 2 else img.reshape(-1, *img.shape[-2:])
    u = kernels.tv_dual(stack, weight, iters, TV_STEP)
    lo = stack.min(axis=(1, 2), keepdims=True)
    hi = stack.max(axis=(1, 2), keepdims=True)
    return np.clip(u, lo, hi).reshape(img.shape)


class TvPrior:
    """Per-frame TV denoising used as the prior step of the unfolded loop."""

    def __init__(self, cfg: TvConfig, pad_length: int | None = None):
        self.cfg = cfg
        self.num_stages = cfg.stages
        self.pad_length = pad_length
        self.padding = "reflective"
        self._gamma = FixedGamma(cfg.gamma)

    def gamma(self, k: int):
        return self._gamma

    def forward(self, k: int, vbar: Tensor, mbar: Tensor) -> Tensor:
        frames = slice_axis(vbar, 1, 0, vbar.shape[1] - 1).data
        return Tensor(tv_denoise(frames, self.cfg.tv_weight, self.cfg.inner_iters))


def pnp_reconstruct(meas: Measurement, mask: MaskStack, cfg: TvConfig,
                    trace: list | None = None) -> VideoCube:
    """Reconstruct with the TV prior; no learned parameters."""
    outputs = run_dun(meas, mask, cfg, DunConfig(cfg.stages, mask.cs_ratio, "tv"), trace=trace)
    return VideoCube(outputs[-1].data)
