"""Modulation masks and the single-exposure capture model.

A capture sums ``c`` mask-modulated frames into one image,
``Y = sum_t M_t * X_t + Z``. The linear operator ``Phi`` is never built;
forward and adjoint are per-pixel products and sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORMALIZE_EPS = 1e-6

PATTERNS = ("dmd", "cacti", "external")


@dataclass(frozen=True)
class MaskStack:
    """Per-frame modulation, ``values`` of shape (c, h, w) in [0, 1]."""

    values: np.ndarray
    pattern: str = "external"
    seed: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"mask must be (c, h, w), got shape {v.shape}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown mask pattern {self.pattern!r}")
        if not np.all(np.isfinite(v)) or v.min(initial=0) < 0 or v.max(initial=0) > 1:
            raise ValueError("mask values must lie in [0, 1]")
        v = np.array(v, dtype=v.dtype if v.dtype in (np.float32, np.float64) else np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def cs_ratio(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class VideoCube:
    """Ground-truth frames (c, h, w), pixel values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 3 or f.shape[0] < 1:
            raise ValueError(f"video must be (c, h, w) with c >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("video contains non-finite values")
        object.__setattr__(self, "frames", f)


@dataclass(frozen=True)
class Measurement:
    """Snapshot ``values`` of shape (h, w), or (b, h, w) for a batch."""

    values: np.ndarray
    cs_ratio: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim not in (2, 3):
            raise ValueError(f"measurement must be (h, w) or (b, h, w), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("measurement contains non-finite values")
        if self.cs_ratio < 1:
            raise ValueError("cs_ratio must be >= 1")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SamplingConfig:
    """Ratio set, crop size and noise level used by sampling augmentation."""

    ratio_set: tuple[int, ...] = (8, 14, 18, 24)
    patch_h: int = 128
    patch_w: int = 128
    noise_sigma: float = 0.0

    def __post_init__(self):
        rs = tuple(sorted(int(r) for r in self.ratio_set))
        if not rs or rs[0] < 1:
            raise ValueError("ratio_set must be non-empty with all ratios >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "ratio_set", rs)


def gen_mask_dmd(c: int, h: int, w: int, seed: int | None = 0, density: float = 0.5) -> MaskStack:
    """Fully random binary mask, i.i.d. Bernoulli(``density``) per entry."""
    if min(c, h, w) < 1:
        raise ValueError("mask dimensions must be >= 1")
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    values = (rng.random((c, h, w)) < density).astype(np.float64)
    return MaskStack(values, "dmd", seed)


def gen_mask_cacti(c: int, h: int, w: int, seed: int | None = 0) -> MaskStack:
    """Shifting mask: frame t is the base mask rolled t pixels to the right."""
    base = gen_mask_dmd(1, h, w, seed).values[0]
    values = np.stack([np.roll(base, t, axis=1) for t in range(c)])
    return MaskStack(values, "cacti", seed)


def gen_mask(pattern: str, c: int, h: int, w: int, seed: int | None = 0) -> MaskStack:
    if pattern == "dmd":
        return gen_mask_dmd(c, h, w, seed)
    if pattern == "cacti":
        return gen_mask_cacti(c, h, w, seed)
    raise ValueError(f"cannot generate a mask of pattern {pattern!r}")


def _check_video_mask(frames: np.ndarray, mask: MaskStack) -> None:
    if frames.shape[-3:] != mask.shape:
        raise ValueError(f"video shape {frames.shape} does not match mask shape {mask.shape}")


def forward_op(frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``Phi x``: sum over the frame axis of ``mask * frames`` (any leading batch dims)."""
    return (frames * mask).sum(axis=-3)


def adjoint_op(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``Phi^T y``: frame t is ``mask[t] * y``."""
    return mask * y[..., None, :, :]


def sample_forward(video: VideoCube | np.ndarray, mask: MaskStack, noise_sigma: float = 0.0,
                   seed: int | None = 0) -> Measurement:
    """Simulate one exposure with additive Gaussian noise of std ``noise_sigma``."""
    frames = video.frames if isinstance(video, VideoCube) else np.asarray(video)
    _check_video_mask(frames, mask)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    y = forward_op(frames, mask.values)
    if noise_sigma > 0:
        y = y + np.random.default_rng(seed).normal(0.0, noise_sigma, size=y.shape)
    return Measurement(y, mask.cs_ratio)


def sample_adjoint(meas: Measurement, mask: MaskStack) -> VideoCube | np.ndarray:
    """Back-project a measurement; returns a VideoCube for a single snapshot."""
    y = np.asarray(meas.values)
    if y.shape[-2:] != mask.shape[1:]:
        raise ValueError(f"measurement shape {y.shape} does not match mask shape {mask.shape}")
    x = adjoint_op(y, mask.values)
    return VideoCube(x) if y.ndim == 2 else x


def psi(mask: MaskStack | np.ndarray) -> np.ndarray:
    """Diagonal of ``Phi Phi^T`` as an (h, w) map: ``sum_t M_t**2``."""
    m = mask.values if isinstance(mask, MaskStack) else np.asarray(mask)
    return (m * m).sum(axis=0)


def normalize_measurement(meas: Measurement | np.ndarray, mask: MaskStack) -> np.ndarray:
    """``Y / sum_t M_t`` with the denominator floored at ``NORMALIZE_EPS``."""
    y = meas.values if isinstance(meas, Measurement) else np.asarray(meas)
    return y / np.maximum(mask.values.sum(axis=0), NORMALIZE_EPS)


@dataclass(frozen=True)
class CropOffsets:
    t: int
    i: int
    j: int


def sample_augment(master_mask: MaskStack, cfg: SamplingConfig,
                   rng: np.random.Generator) -> tuple[MaskStack, CropOffsets]:
    """Random sub-block of the master mask: ratio from ``cfg.ratio_set``, random offsets."""
    cs, hs, ws = master_mask.shape
    if cs < max(cfg.ratio_set) or hs < cfg.patch_h or ws < cfg.patch_w:
        raise ValueError(
            f"master mask {master_mask.shape} too small for ratios {cfg.ratio_set} "
            f"and {cfg.patch_h}x{cfg.patch_w} patches"
        )
    c = int(cfg.ratio_set[rng.integers(len(cfg.ratio_set))])
    t0 = int(rng.integers(cs - c + 1))
    i0 = int(rng.integers(hs - cfg.patch_h + 1))
    j0 = int(rng.integers(ws - cfg.patch_w + 1))
    sub = master_mask.values[t0:t0 + c, i0:i0 + cfg.patch_h, j0:j0 + cfg.patch_w].copy()
    return MaskStack(sub, master_mask.pattern, master_mask.seed), CropOffsets(t0, i0, j0)


def dense_phi(mask: MaskStack | np.ndarray) -> np.ndarray:
    """Explicit (hw, c*hw) matrix ``[D_1, ..., D_c]``; only for tiny test cases."""
    m = mask.values if isinstance(mask, MaskStack) else np.asarray(mask)
    return np.concatenate([np.diag(frame.reshape(-1)) for frame in m], axis=1)
