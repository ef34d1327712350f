"""Exact attention kernels for video token grids.

A clip's tokens are kept flat in frame-major order: token i = t*S + s holds
spatial location s of frame t, so each frame is a contiguous block of S rows.
Three attention patterns operate on such grids:

* joint space-time attention: every token attends to every token;
* divided attention: within one frame (space) or one spatial index (time);
* trajectory attention: a two-stage scheme that first runs spatial attention
  from every token against every frame, producing one pooled token per
  (reference token, frame) pair, then pools that per-token time series with
  1D attention driven by the reference frame's entry.

Kernels are single-head over the trailing [tokens, width] axes and broadcast
over any leading batch axes (the model stacks batch and heads there). The
``scale`` argument is applied once inside the softmax; the convention is
1/sqrt(head width). All kernels accept plain arrays or tape ``Var`` nodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import IO, Optional

import numpy as np

from .probe import ATTN_MATRIX, AllocProbe
from .tensor import (
    matmul,
    mean_axis,
    reshape,
    softmax_rows,
    time_diagonal,
    transpose,
    value_of,
)

__all__ = [
    "NormMode",
    "TemporalMode",
    "AttentionConfig",
    "TokenGrid",
    "QkvProjections",
    "TrajectoryIntermediate",
    "joint_attention",
    "divided_space_attention",
    "divided_time_attention",
    "trajectory_stage1",
    "trajectory_stage2",
    "trajectory_temporal_pool",
    "trajectory_attention",
    "cls_attention",
    "write_attention_csv",
    "default_scale",
]


class NormMode(str, Enum):
    """Stage-1 softmax normalization: per frame, or once over all frames."""

    SPATIAL_PER_FRAME = "spatial_per_frame"
    SPACE_TIME = "space_time"


class TemporalMode(str, Enum):
    """Stage-2 pooling: 1D attention over frames, or a plain average."""

    ATTENTION = "temporal_attention"
    AVERAGE = "temporal_average"


def default_scale(head_dim: int) -> float:
    return 1.0 / float(np.sqrt(head_dim))


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 1
    scale: Optional[float] = None  # None -> 1/sqrt(D/heads)
    norm_mode: NormMode = NormMode.SPATIAL_PER_FRAME
    temporal_mode: TemporalMode = TemporalMode.ATTENTION

    def resolve_scale(self, embed_dim: int) -> float:
        if self.scale is not None:
            return self.scale
        if embed_dim % self.heads != 0:
            raise ValueError(f"width {embed_dim} not divisible by {self.heads} heads")
        return default_scale(embed_dim // self.heads)


@dataclass
class TokenGrid:
    """S*T tokens in frame-major order plus an optional cls token."""

    tokens: np.ndarray  # [S*T, D]
    s_count: int
    t_count: int
    cls: Optional[np.ndarray] = None  # [D]

    def __post_init__(self):
        n = value_of(self.tokens).shape[-2]
        if self.s_count * self.t_count != n:
            raise ValueError(
                f"token count {n} != s_count*t_count = {self.s_count}*{self.t_count}"
            )

    @property
    def embed_dim(self) -> int:
        return value_of(self.tokens).shape[-1]

    def frame(self, t: int):
        return self.tokens[..., t * self.s_count : (t + 1) * self.s_count, :]


@dataclass
class QkvProjections:
    """First-stage and second-stage projection matrices, all [D, D].

    Projections apply on the right of row vectors: q = x @ wq.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wq2: Optional[np.ndarray] = None
    wk2: Optional[np.ndarray] = None
    wv2: Optional[np.ndarray] = None

    def __post_init__(self):
        d = value_of(self.wq).shape[0]
        for name in ("wq", "wk", "wv", "wq2", "wk2", "wv2"):
            m = getattr(self, name)
            if m is None:
                continue
            if value_of(m).shape != (d, d):
                raise ValueError(f"{name} must be [{d}, {d}], got {value_of(m).shape}")


@dataclass
class TrajectoryIntermediate:
    """Stage-1 output: per-frame pooled tokens and (optionally) the maps.

    ``tokens`` is [..., S*T, T, D]: entry (i, t') pools frame t' as seen
    from reference token i. ``maps`` is [..., S*T, T, S] when materialized;
    under per-frame normalization every maps[..., i, t', :] row sums to 1.
    """

    tokens: object
    s_count: int
    t_count: int
    maps: object = None

    def time_diag(self):
        """The [..., S*T, D] rows where a token looks at its own frame."""
        return time_diagonal(self.tokens, self.s_count)


def _swap_last(x):
    nd = value_of(x).ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return transpose(x, axes)


def _swap_axes(x, i: int, j: int):
    nd = value_of(x).ndim
    perm = list(range(nd))
    perm[i], perm[j] = perm[j], perm[i]
    return transpose(x, perm)


def _lead(x) -> tuple:
    return value_of(x).shape[:-2]


def _lead_size(x) -> int:
    return int(np.prod(_lead(x), dtype=np.int64)) if _lead(x) else 1


def _check_qkv(q, k, v) -> None:
    qs, ks, vs = value_of(q).shape, value_of(k).shape, value_of(v).shape
    if len(qs) < 2 or len(ks) < 2 or len(vs) < 2:
        raise ValueError(f"attention expects rank >= 2 q/k/v, got {qs}, {ks}, {vs}")
    if ks != vs:
        raise ValueError(f"key/value shape mismatch: {ks} vs {vs}")
    if qs[-1] != ks[-1] or qs[:-2] != ks[:-2]:
        raise ValueError(f"query/key shape mismatch: {qs} vs {ks}")


def _check_grid(q, s_count: int, t_count: int) -> None:
    if s_count < 1 or t_count < 1:
        raise ValueError(f"grid sizes must be positive, got S={s_count}, T={t_count}")
    n = value_of(q).shape[-2]
    if n != s_count * t_count:
        raise ValueError(f"token count {n} != S*T = {s_count}*{t_count}")


def joint_attention(q, k, v, scale: float, probe: AllocProbe | None = None):
    """Full attention of every query over every key: softmax(q k^T) v."""
    _check_qkv(q, k, v)
    if probe is not None:
        probe.add(ATTN_MATRIX, _lead_size(q) * 2 * value_of(q).shape[-2] * value_of(k).shape[-2])
    weights = softmax_rows(matmul(q, _swap_last(k)), scale)
    return matmul(weights, v)


def divided_space_attention(q, k, v, s_count: int, t_count: int, scale: float,
                            probe: AllocProbe | None = None):
    """Attention restricted to each token's own frame."""
    _check_grid(q, s_count, t_count)
    _check_qkv(q, k, v)
    lead = _lead(q)
    d = value_of(q).shape[-1]
    if probe is not None:
        probe.add(ATTN_MATRIX, _lead_size(q) * 2 * t_count * s_count * s_count)
    q3 = reshape(q, lead + (t_count, s_count, d))
    k3 = reshape(k, lead + (t_count, s_count, d))
    v3 = reshape(v, lead + (t_count, s_count, d))
    weights = softmax_rows(matmul(q3, _swap_last(k3)), scale)  # [..., T, S, S]
    return reshape(matmul(weights, v3), lead + (t_count * s_count, d))


def divided_time_attention(q, k, v, s_count: int, t_count: int, scale: float,
                           probe: AllocProbe | None = None):
    """Attention restricted to each token's own spatial index across frames."""
    _check_grid(q, s_count, t_count)
    _check_qkv(q, k, v)
    lead = _lead(q)
    d = value_of(q).shape[-1]
    if probe is not None:
        probe.add(ATTN_MATRIX, _lead_size(q) * 2 * s_count * t_count * t_count)
    def to_time_major(x):
        return _swap_axes(reshape(x, lead + (t_count, s_count, d)), -3, -2)  # [..., S, T, D]
    q3, k3, v3 = to_time_major(q), to_time_major(k), to_time_major(v)
    weights = softmax_rows(matmul(q3, _swap_last(k3)), scale)  # [..., S, T, T]
    out = _swap_axes(matmul(weights, v3), -3, -2)  # [..., T, S, D]
    return reshape(out, lead + (t_count * s_count, d))


def trajectory_stage1(q, k, v, s_count: int, t_count: int, scale: float,
                      norm_mode: NormMode = NormMode.SPATIAL_PER_FRAME,
                      probe: AllocProbe | None = None,
                      want_maps: bool = True) -> TrajectoryIntermediate:
    """Spatial attention of every query against every frame.

    Per-frame normalization computes, for each reference token i and frame
    t', a softmax over that frame's S keys; the pooled values form the
    trajectory token stack [..., S*T, T, D]. Space-time normalization
    instead runs one softmax over all S*T keys and regroups the result per
    frame, so per-frame rows then sum to the frame's total mass, not 1.
    """
    _check_grid(q, s_count, t_count)
    _check_qkv(q, k, v)
    lead = _lead(q)
    n = s_count * t_count
    d = value_of(q).shape[-1]
    if probe is not None:
        probe.add(ATTN_MATRIX, _lead_size(q) * 2 * n * n)
    scores = matmul(q, _swap_last(k))  # [..., N, N], key axis frame-major
    if norm_mode is NormMode.SPATIAL_PER_FRAME:
        weights = softmax_rows(reshape(scores, lead + (n, t_count, s_count)), scale)
    elif norm_mode is NormMode.SPACE_TIME:
        weights = reshape(softmax_rows(scores, scale), lead + (n, t_count, s_count))
    else:
        raise ValueError(f"unknown norm mode {norm_mode}")
    v3 = reshape(v, lead + (t_count, s_count, d))
    pooled = matmul(_swap_axes(weights, -3, -2), v3)  # [..., T, N, D]
    tokens = _swap_axes(pooled, -3, -2)  # [..., N, T, D]
    return TrajectoryIntermediate(
        tokens=tokens,
        s_count=s_count,
        t_count=t_count,
        maps=weights if want_maps else None,
    )


def trajectory_temporal_pool(query, keys, values, scale: float):
    """1D attention of per-token queries over their per-frame stacks.

    ``query`` is [..., N, D]; ``keys``/``values`` are [..., N, T, D]. Each
    token's single query attends over its own T entries.
    """
    shape = value_of(keys).shape
    lead, (n, t_count, d) = shape[:-3], shape[-3:]
    if value_of(query).shape != lead + (n, d):
        raise ValueError(f"query shape {value_of(query).shape} does not match keys {shape}")
    scores = reshape(matmul(keys, reshape(query, lead + (n, d, 1))), lead + (n, t_count))
    weights = softmax_rows(scores, scale)  # [..., N, T]
    out = matmul(reshape(weights, lead + (n, 1, t_count)), values)  # [..., N, 1, D]
    return reshape(out, lead + (n, d))


def trajectory_stage2(inter: TrajectoryIntermediate, proj: QkvProjections, scale: float,
                      temporal_mode: TemporalMode = TemporalMode.ATTENTION):
    """Pool each token's per-frame stack across time.

    With attention pooling, the query comes from the token's own-frame entry
    re-projected by wq2, keys/values from wk2/wv2 over the whole stack.
    Average pooling needs no second projections and returns the plain mean
    over frames.
    """
    tokens = inter.tokens
    shape = value_of(tokens).shape
    lead, (n, t_count, d) = shape[:-3], shape[-3:]
    if temporal_mode is TemporalMode.AVERAGE:
        return mean_axis(tokens, len(shape) - 2)
    if temporal_mode is not TemporalMode.ATTENTION:
        raise ValueError(f"unknown temporal mode {temporal_mode}")
    if proj.wq2 is None or proj.wk2 is None or proj.wv2 is None:
        raise ValueError("temporal attention pooling needs wq2/wk2/wv2")
    flat = reshape(tokens, lead + (n * t_count, d))
    keys = reshape(matmul(flat, proj.wk2), lead + (n, t_count, d))
    values = reshape(matmul(flat, proj.wv2), lead + (n, t_count, d))
    query = matmul(inter.time_diag(), proj.wq2)  # [..., N, D]
    return trajectory_temporal_pool(query, keys, values, scale)


def trajectory_attention(grid: TokenGrid, proj: QkvProjections,
                         config: AttentionConfig = AttentionConfig(),
                         probe: AllocProbe | None = None):
    """Both trajectory stages from raw grid tokens, single head."""
    scale = config.resolve_scale(grid.embed_dim)
    q = matmul(grid.tokens, proj.wq)
    k = matmul(grid.tokens, proj.wk)
    v = matmul(grid.tokens, proj.wv)
    inter = trajectory_stage1(
        q, k, v, grid.s_count, grid.t_count, scale,
        norm_mode=config.norm_mode, probe=probe, want_maps=False,
    )
    return trajectory_stage2(inter, proj, scale, temporal_mode=config.temporal_mode)


def cls_attention(q_cls, k, v, scale: float, probe: AllocProbe | None = None):
    """Plain attention of a single [..., 1, D] query over all rows of k/v.

    The classification token is pooled this way (its query sees every token
    plus itself) while grid tokens never attend to it, keeping the grid
    kernels free of the extra row.
    """
    qs = value_of(q_cls).shape
    if qs[-2] != 1:
        raise ValueError(f"cls query must be [..., 1, D], got {qs}")
    return joint_attention(q_cls, k, v, scale, probe=probe)


def write_attention_csv(inter: TrajectoryIntermediate, out: IO[str] | str) -> None:
    """Dump stage-1 maps as rows (s, t, t_prime, s_prime, weight)."""
    if inter.maps is None:
        raise ValueError("intermediate was built without maps")
    maps = value_of(inter.maps)
    if maps.ndim != 3:
        raise ValueError(f"csv dump expects unbatched [N, T, S] maps, got {maps.shape}")
    close = False
    if isinstance(out, str):
        out = open(out, "w", newline="")
        close = True
    try:
        writer = csv.writer(out)
        writer.writerow(["s", "t", "t_prime", "s_prime", "weight"])
        s_count = inter.s_count
        for i in range(maps.shape[0]):
            t, s = divmod(i, s_count)
            for t_prime in range(maps.shape[1]):
                for s_prime in range(maps.shape[2]):
                    writer.writerow([s, t, t_prime, s_prime, repr(maps[i, t_prime, s_prime])])
    finally:
        if close:
            out.close()
