"""Deterministic piecewise-rigid synthetic videos for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import VideoCube

KINDS = ("moving_squares", "moving_bars")


@dataclass(frozen=True)
class MovingObject:
    """A rigid object translating by ``velocity`` pixels per frame (wrapping)."""

    kind: str  # "square", "vbar" or "hbar"
    size: int
    intensity: float
    position: tuple[int, int]
    velocity: tuple[int, int]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.25)
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    ii, jj = np.mgrid[0:h, 0:w]
    return np.clip(base + gy * ii / h + gx * jj / w, 0.0, 1.0)


def _velocity(rng: np.random.Generator, vmax: int) -> tuple[int, int]:
    while True:
        v = tuple(int(a) for a in rng.integers(-vmax, vmax + 1, size=2))
        if v != (0, 0):
            return v


def random_objects(rng: np.random.Generator, kind: str, h: int, w: int, vmax: int = 2) -> list[MovingObject]:
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    objs = []
    for _ in range(int(rng.integers(2, 4))):
        intensity = float(rng.uniform(0.5, 1.0))
        pos = (int(rng.integers(h)), int(rng.integers(w)))
        if kind == "moving_squares":
            size = int(rng.integers(max(2, h // 8), max(3, h // 3) + 1))
            objs.append(MovingObject("square", size, intensity, pos, _velocity(rng, vmax)))
        else:
            size = int(rng.integers(max(1, w // 16), max(2, w // 6) + 1))
            if rng.random() < 0.5:
                objs.append(MovingObject("vbar", size, intensity, pos, (0, int(rng.choice([-2, -1, 1, 2])))))
            else:
                objs.append(MovingObject("hbar", size, intensity, pos, (int(rng.choice([-2, -1, 1, 2])), 0)))
    return objs


def render(objects: list[MovingObject], frames: int, h: int, w: int,
           background: np.ndarray | None = None) -> np.ndarray:
    """Draw ``objects`` over ``background`` for ``frames`` frames, later objects on top."""
    bg = np.zeros((h, w)) if background is None else background
    out = np.repeat(bg[None], frames, axis=0).astype(np.float64)
    for t in range(frames):
        for ob in objects:
            i0 = (ob.position[0] + t * ob.velocity[0]) % h
            j0 = (ob.position[1] + t * ob.velocity[1]) % w
            if ob.kind == "square":
                rows = (i0 + np.arange(ob.size)) % h
                cols = (j0 + np.arange(ob.size)) % w
            elif ob.kind == "vbar":
                rows = np.arange(h)
                cols = (j0 + np.arange(ob.size)) % w
            else:
                rows = (i0 + np.arange(ob.size)) % h
                cols = np.arange(w)
            out[t][np.ix_(rows, cols)] = ob.intensity
    return out


def synth_clip(kind: str, frames: int, h: int, w: int, rng: np.random.Generator) -> tuple[VideoCube, list[MovingObject]]:
    bg = _background(rng, h, w)
    objs = random_objects(rng, kind, h, w)
    return VideoCube(render(objs, frames, h, w, bg)), objs


def synth_dataset(kind: str = "moving_squares", clips: int = 8, frames: int = 8, h: int = 32, w: int = 32,
                  seed: int = 0) -> list[VideoCube]:
    """``clips`` videos of shape (frames, h, w) with values in [0, 1]."""
    rng = np.random.default_rng(seed)
    return [synth_clip(kind, frames, h, w, rng)[0] for _ in range(clips)]


def phantom(frames: int = 8, h: int = 32, w: int = 32, seed: int = 0) -> VideoCube:
    """A fixed moving-squares clip used as the reference test scene."""
    return synth_dataset("moving_squares", 1, frames, h, w, seed)[0]
