"""Synthetic moving-dot clips.

Each clip is a single-channel video of a bright square translating at
constant velocity over a noisy background; the class label is the motion
direction. A single frame carries no class information, so any accuracy
above chance must come from temporal reasoning.

The ``stride`` field subsamples an underlying raw video: sampled frame t
shows raw time t*stride, so a larger stride means faster apparent motion
while the frame count stays fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..tensor import Rng

__all__ = ["DIRECTIONS", "MovingDotSpec", "gen_moving_dot", "make_dataset"]

DIRECTIONS = ("up", "down", "left", "right")
_DIR_VECTORS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


@dataclass(frozen=True)
class MovingDotSpec:
    frames: int = 8
    height: int = 16
    width: int = 16
    dot_size: int = 3
    direction: str = "right"
    speed: int = 1  # pixels per raw frame
    stride: int = 1  # raw frames per sampled frame
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.frames < 1 or self.stride < 1 or self.dot_size < 1:
            raise ValueError("frames, stride and dot_size must be positive")

    @property
    def label(self) -> int:
        return DIRECTIONS.index(self.direction)


def _start_bounds(spec: MovingDotSpec) -> tuple[range, range]:
    """Valid (row, col) start positions keeping the dot in frame throughout."""
    disp = spec.speed * spec.stride * (spec.frames - 1)
    dr, dc = _DIR_VECTORS[spec.direction]
    lo_r, hi_r = 0, spec.height - spec.dot_size
    lo_c, hi_c = 0, spec.width - spec.dot_size
    if dr < 0:
        lo_r += disp
    elif dr > 0:
        hi_r -= disp
    if dc < 0:
        lo_c += disp
    elif dc > 0:
        hi_c -= disp
    if lo_r > hi_r or lo_c > hi_c:
        raise ValueError(
            f"dot leaves the {spec.height}x{spec.width} grid: size {spec.dot_size} moving "
            f"{disp} px over {spec.frames} frames (speed {spec.speed}, stride {spec.stride})"
        )
    return range(lo_r, hi_r + 1), range(lo_c, hi_c + 1)


def gen_moving_dot(spec: MovingDotSpec, rng: Rng | None = None) -> tuple[np.ndarray, int]:
    """One clip [frames, 1, H, W] and its direction label.

    Identical spec and rng state give an identical clip. A zero speed is
    rejected: the frames would be i.i.d. noise around a static dot and the
    direction label would be meaningless.
    """
    if spec.speed <= 0:
        raise ValueError("degenerate spec: speed must be positive, the label encodes motion")
    if rng is None:
        rng = Rng(spec.seed)
    rows, cols = _start_bounds(spec)
    r0 = rows[rng.integers(0, len(rows))]
    c0 = cols[rng.integers(0, len(cols))]
    dr, dc = _DIR_VECTORS[spec.direction]
    clip = np.zeros((spec.frames, 1, spec.height, spec.width))
    if spec.noise_std > 0:
        clip += rng.normal(clip.shape, std=spec.noise_std)
    k = spec.dot_size
    for t in range(spec.frames):
        step = spec.speed * spec.stride * t
        r = r0 + dr * step
        c = c0 + dc * step
        clip[t, 0, r : r + k, c : c + k] = 1.0
    return clip, spec.label


def make_dataset(spec: MovingDotSpec, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """``n`` clips with round-robin direction labels (exact class balance
    whenever n is a multiple of 4); one shared rng consumed in sample order."""
    clips = np.empty((n, spec.frames, 1, spec.height, spec.width))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        sample_spec = replace(spec, direction=DIRECTIONS[i % len(DIRECTIONS)])
        clips[i], labels[i] = gen_moving_dot(sample_spec, rng)
    return clips, labels
