"""Toy video transformer assembled from the attention kernels.

Pipeline: cuboid/patch tokenization -> positional encoding -> a prepended
classification token -> pre-norm residual blocks (attention + MLP) -> final
layer norm -> linear head on the classification token.

Blocks follow y = MHA(LN(z)) + z; z' = MLP(LN(y)) + y. The divided variant
runs two such attention sublayers per block (time first, then space), each
with its own projections, before the MLP. Multi-head attention splits the
embedding into head slices, runs the configured kernel batched over heads,
and re-projects the concatenated result; for trajectory attention the
second-stage projections act on the full concatenated width between the two
stages, so MAC totals do not depend on the head count.

The classification token is pooled by plain attention of its query over all
tokens (itself included); grid tokens never attend to it.

Everything here works on plain arrays or tape ``Var`` parameters, single
clips [T0, C, H, W] or batches [B, T0, C, H, W].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .approx import PrototypeSpec, SelectionStrategy, approx_trajectory_stage1
from .exact import (
    AttentionConfig,
    NormMode,
    TemporalMode,
    TokenGrid,
    cls_attention,
    default_scale,
    divided_space_attention,
    divided_time_attention,
    joint_attention,
    trajectory_stage1,
    trajectory_temporal_pool,
)
from .probe import AllocProbe
from .tensor import (
    Rng,
    Tape,
    Var,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mean_axis,
    reshape,
    time_diagonal,
    transpose,
    value_of,
)

__all__ = [
    "PosMode",
    "AttentionKind",
    "VideoClip",
    "ModelConfig",
    "AttnParams",
    "BlockParams",
    "ModelParams",
    "init_params",
    "named_arrays",
    "map_arrays",
    "params_to_vars",
    "tokenize",
    "add_positional",
    "multi_head_attention",
    "block_forward",
    "forward",
    "config_to_json",
    "config_from_json",
]


class PosMode(str, Enum):
    SEPARATE = "separate_space_time"
    JOINT = "joint_space_time"


class AttentionKind(str, Enum):
    JOINT = "joint"
    DIVIDED = "divided"
    TRAJECTORY = "trajectory"
    TRAJECTORY_APPROX = "trajectory_approx"


@dataclass
class VideoClip:
    """Raw input video: [T0, C, H0, W0] float frames."""

    frames: np.ndarray
    fps: Optional[float] = None

    def __post_init__(self):
        if value_of(self.frames).ndim != 4:
            raise ValueError(f"clip frames must be [T0, C, H0, W0], got {value_of(self.frames).shape}")


@dataclass(frozen=True)
class ModelConfig:
    patch: tuple  # (t_p, h_p, w_p)
    embed_dim: int
    layers: int
    heads: int
    classes: int
    input_frames: int
    input_height: int
    input_width: int
    input_channels: int = 3
    pos_mode: PosMode = PosMode.SEPARATE
    attention: AttentionKind = AttentionKind.TRAJECTORY
    norm_mode: NormMode = NormMode.SPATIAL_PER_FRAME
    temporal_mode: TemporalMode = TemporalMode.ATTENTION
    approx: Optional[PrototypeSpec] = None
    dtype: str = "f64"

    def __post_init__(self):
        t_p, h_p, w_p = self.patch
        for size, p, axis in (
            (self.input_frames, t_p, "frames"),
            (self.input_height, h_p, "height"),
            (self.input_width, w_p, "width"),
        ):
            if size % p != 0:
                raise ValueError(f"input {axis} {size} not divisible by patch size {p}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.attention is AttentionKind.TRAJECTORY_APPROX and self.approx is None:
            raise ValueError("trajectory_approx needs an approx prototype spec")
        if self.dtype not in ("f64", "f32"):
            raise ValueError(f"dtype must be 'f64' or 'f32', got {self.dtype}")

    @property
    def t_count(self) -> int:
        return self.input_frames // self.patch[0]

    @property
    def s_count(self) -> int:
        return (self.input_height // self.patch[1]) * (self.input_width // self.patch[2])

    @property
    def token_count(self) -> int:
        return self.s_count * self.t_count

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_volume(self) -> int:
        t_p, h_p, w_p = self.patch
        return t_p * h_p * w_p * self.input_channels

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def scale(self) -> float:
        return default_scale(self.head_dim)


@dataclass
class AttnParams:
    """One attention sublayer: pre-norm, projections, output projection."""

    ln_g: np.ndarray
    ln_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    wq2: Optional[np.ndarray] = None  # trajectory second stage only
    wk2: Optional[np.ndarray] = None
    wv2: Optional[np.ndarray] = None


@dataclass
class BlockParams:
    attns: list  # one AttnParams, or two (time, space) for divided blocks
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray


@dataclass
class ModelParams:
    patch_w: np.ndarray  # [patch_volume, D]
    patch_b: np.ndarray  # [D]
    cls: np.ndarray  # [D]
    blocks: list
    ln_f_g: np.ndarray
    ln_f_b: np.ndarray
    head_w: np.ndarray  # [D, classes]
    head_b: np.ndarray  # [classes]
    e_s: Optional[np.ndarray] = None  # [S, D] separate mode
    e_t: Optional[np.ndarray] = None  # [T, D] separate mode
    e_st: Optional[np.ndarray] = None  # [S*T, D] joint mode


def block_patterns(cfg: ModelConfig) -> list[str]:
    """Attention sublayer patterns per block for the configured kind."""
    if cfg.attention is AttentionKind.JOINT:
        return ["joint"]
    if cfg.attention is AttentionKind.DIVIDED:
        return ["time", "space"]
    if cfg.attention is AttentionKind.TRAJECTORY:
        return ["trajectory"]
    if cfg.attention is AttentionKind.TRAJECTORY_APPROX:
        return ["trajectory_approx"]
    raise ValueError(f"unknown attention kind {cfg.attention}")


def _trunc_normal(rng: Rng, shape, std: float, dtype) -> np.ndarray:
    x = rng.normal(shape, std=std)
    return np.clip(x, -2.0 * std, 2.0 * std).astype(dtype)


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """Truncated-normal (std 0.02) projections, zero biases and cls token."""
    d = cfg.embed_dim
    dt = cfg.np_dtype
    std = 0.02

    def w(*shape):
        return _trunc_normal(rng, shape, std, dt)

    def zeros(*shape):
        return np.zeros(shape, dtype=dt)

    def ones(*shape):
        return np.ones(shape, dtype=dt)

    needs_stage2 = (
        cfg.attention in (AttentionKind.TRAJECTORY, AttentionKind.TRAJECTORY_APPROX)
        and cfg.temporal_mode is TemporalMode.ATTENTION
    )

    def attn_params():
        return AttnParams(
            ln_g=ones(d), ln_b=zeros(d),
            wq=w(d, d), wk=w(d, d), wv=w(d, d),
            wo=w(d, d), bo=zeros(d),
            wq2=w(d, d) if needs_stage2 else None,
            wk2=w(d, d) if needs_stage2 else None,
            wv2=w(d, d) if needs_stage2 else None,
        )

    blocks = []
    for _ in range(cfg.layers):
        blocks.append(
            BlockParams(
                attns=[attn_params() for _ in block_patterns(cfg)],
                ln2_g=ones(d), ln2_b=zeros(d),
                mlp_w1=w(d, 4 * d), mlp_b1=zeros(4 * d),
                mlp_w2=w(4 * d, d), mlp_b2=zeros(d),
            )
        )
    params = ModelParams(
        patch_w=w(cfg.patch_volume, d),
        patch_b=zeros(d),
        cls=zeros(d),
        blocks=blocks,
        ln_f_g=ones(d),
        ln_f_b=zeros(d),
        head_w=w(d, cfg.classes),
        head_b=zeros(cfg.classes),
    )
    if cfg.pos_mode is PosMode.SEPARATE:
        params.e_s = w(cfg.s_count, d)
        params.e_t = w(cfg.t_count, d)
    else:
        params.e_st = w(cfg.token_count, d)
    return params


def named_arrays(obj, prefix: str = ""):
    """Yield (dotted-path, leaf) pairs over a params tree, depth first."""
    if obj is None:
        return
    if is_dataclass(obj):
        for f in fields(obj):
            yield from named_arrays(getattr(obj, f.name), f"{prefix}{f.name}.")
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}{i}.")
    else:
        yield prefix[:-1], obj


def map_arrays(obj, fn):
    """Rebuild a params tree with ``fn`` applied to every leaf."""
    if obj is None:
        return None
    if is_dataclass(obj):
        return type(obj)(**{f.name: map_arrays(getattr(obj, f.name), fn) for f in fields(obj)})
    if isinstance(obj, list):
        return [map_arrays(item, fn) for item in obj]
    return fn(obj)


def params_to_vars(params: ModelParams, tape: Tape) -> ModelParams:
    return map_arrays(params, tape.var)


# ---------------------------------------------------------------------------
# forward pieces


def tokenize(clip, cfg: ModelConfig, patch_w, patch_b):
    """Linear embedding of disjoint t_p x h_p x w_p blocks, frame-major.

    Each block is flattened in (t_p, C, h_p, w_p) order before projection,
    so with an identity projection the token equals the flattened block.
    Accepts [T0, C, H, W] or [B, T0, C, H, W]; returns [.., S*T, D].
    """
    frames = value_of(clip.frames) if isinstance(clip, VideoClip) else np.asarray(clip)
    if frames.ndim == 4:
        lead = ()
    elif frames.ndim == 5:
        lead = frames.shape[:1]
    else:
        raise ValueError(f"expected [T0, C, H, W] or batched clips, got {frames.shape}")
    t0, c, h0, w0 = frames.shape[-4:]
    t_p, h_p, w_p = cfg.patch
    for size, p, axis in ((t0, t_p, "frames"), (h0, h_p, "height"), (w0, w_p, "width")):
        if size % p != 0:
            raise ValueError(f"input {axis} {size} not divisible by patch size {p}")
    if c != cfg.input_channels:
        raise ValueError(f"expected {cfg.input_channels} channels, got {c}")
    t, hh, ww = t0 // t_p, h0 // h_p, w0 // w_p
    nb = len(lead)
    blocks = frames.reshape(lead + (t, t_p, c, hh, h_p, ww, w_p))
    order = tuple(range(nb)) + tuple(np.array([0, 3, 5, 1, 2, 4, 6]) + nb)
    blocks = blocks.transpose(order)  # [.., T, Hh, Ww, t_p, C, h_p, w_p]
    blocks = np.ascontiguousarray(blocks).reshape(lead + (t * hh * ww, t_p * c * h_p * w_p))
    return add(matmul(blocks.astype(value_of(patch_w).dtype), patch_w), patch_b)


def add_positional(tokens, params: ModelParams, cfg: ModelConfig):
    """Add learned positions: separate per-space + per-time terms, or one
    table indexed by the flat space-time location."""
    s, t, d = cfg.s_count, cfg.t_count, cfg.embed_dim
    if cfg.pos_mode is PosMode.SEPARATE:
        if params.e_s is None or params.e_t is None:
            raise ValueError("separate positional mode needs e_s and e_t")
        pos = add(reshape(params.e_t, (t, 1, d)), reshape(params.e_s, (1, s, d)))
        return add(tokens, reshape(pos, (s * t, d)))
    if params.e_st is None:
        raise ValueError("joint positional mode needs e_st")
    return add(tokens, params.e_st)


def _split_heads(x, heads: int):
    """[.., M, D] -> [.., H, M, D/H]"""
    shape = value_of(x).shape
    lead, (m, dm) = shape[:-2], shape[-2:]
    nb = len(lead)
    x4 = reshape(x, lead + (m, heads, dm // heads))
    perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    return transpose(x4, perm)


def _merge_heads(x):
    """[.., H, M, d] -> [.., M, H*d]"""
    shape = value_of(x).shape
    lead, (h, m, dh) = shape[:-3], shape[-3:]
    nb = len(lead)
    perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    return reshape(transpose(x, perm), lead + (m, h * dh))


def _split_heads_time(x, heads: int):
    """[.., N, T, D] -> [.., H, N, T, D/H]"""
    shape = value_of(x).shape
    lead, (n, t, dm) = shape[:-3], shape[-3:]
    nb = len(lead)
    x5 = reshape(x, lead + (n, t, heads, dm // heads))
    perm = tuple(range(nb)) + (nb + 2, nb, nb + 1, nb + 3)
    return transpose(x5, perm)


def _merge_heads_time(x):
    """[.., H, N, T, d] -> [.., N, T, H*d]"""
    shape = value_of(x).shape
    lead, (h, n, t, dh) = shape[:-4], shape[-4:]
    nb = len(lead)
    perm = tuple(range(nb)) + (nb + 1, nb + 2, nb, nb + 3)
    return reshape(transpose(x, perm), lead + (n, t, h * dh))


def _trajectory_body(q_h, k_h, v_h, ap: AttnParams, cfg: ModelConfig, layer_index: int,
                     probe: AllocProbe | None):
    """Trajectory attention over body tokens: per-head stage 1, full-width
    second-stage projections, per-head temporal pooling. Returns [.., N, D]."""
    s, t = cfg.s_count, cfg.t_count
    scale = cfg.scale
    if cfg.attention is AttentionKind.TRAJECTORY_APPROX:
        stacked = _approx_stage1_instances(q_h, k_h, v_h, cfg, layer_index, probe)
    else:
        inter = trajectory_stage1(q_h, k_h, v_h, s, t, scale,
                                  norm_mode=cfg.norm_mode, probe=probe, want_maps=False)
        stacked = inter.tokens  # [.., H, N, T, d]
    merged = _merge_heads_time(stacked)  # [.., N, T, D]
    if cfg.temporal_mode is TemporalMode.AVERAGE:
        return mean_axis(merged, value_of(merged).ndim - 2)
    shape = value_of(merged).shape
    lead, (n, t_count, d) = shape[:-3], shape[-3:]
    flat = reshape(merged, lead + (n * t_count, d))
    keys = reshape(matmul(flat, ap.wk2), lead + (n, t_count, d))
    values = reshape(matmul(flat, ap.wv2), lead + (n, t_count, d))
    query = matmul(time_diagonal(merged, s), ap.wq2)  # [.., N, D]
    pooled = trajectory_temporal_pool(
        _split_heads(query, cfg.heads),
        _split_heads_time(keys, cfg.heads),
        _split_heads_time(values, cfg.heads),
        scale,
    )  # [.., H, N, d]
    return _merge_heads(pooled)


def _approx_stage1_instances(q_h, k_h, v_h, cfg: ModelConfig, layer_index: int,
                             probe: AllocProbe | None):
    """Per-instance prototype stage 1 over every (batch, head) slice.

    Prototype selection draws are deterministic per (approx seed, layer,
    instance), so a forward pass is reproducible for fixed params and input.
    """
    s, t = cfg.s_count, cfg.t_count
    shape = value_of(q_h).shape
    lead = shape[:-2]
    spec = cfg.approx
    outs = []
    for i, idx in enumerate(np.ndindex(*lead)):
        sel = idx + (slice(None), slice(None))
        rng = Rng(spec.seed).derive(layer_index * 1_000_003 + i)
        inter = approx_trajectory_stage1(
            q_h[sel], k_h[sel], v_h[sel], s, t, spec, cfg.scale, rng=rng, probe=probe,
        )
        outs.append(reshape(inter.tokens, (1, s * t, t, shape[-1])))
    stacked = concat(outs, axis=0)
    return reshape(stacked, lead + (s * t, t, shape[-1]))


def multi_head_attention(x, ap: AttnParams, cfg: ModelConfig, pattern: str,
                         layer_index: int = 0, probe: AllocProbe | None = None):
    """One attention sublayer over [.., 1+S*T, D] tokens (cls at row 0)."""
    s, t = cfg.s_count, cfg.t_count
    scale = cfg.scale
    q = matmul(x, ap.wq)
    k = matmul(x, ap.wk)
    v = matmul(x, ap.wv)
    q_h, k_h, v_h = (_split_heads(a, cfg.heads) for a in (q, k, v))  # [.., H, 1+N, d]
    body = (Ellipsis, slice(1, None), slice(None))
    head = (Ellipsis, slice(0, 1), slice(None))
    qb, kb, vb = q_h[body], k_h[body], v_h[body]

    if pattern == "joint":
        body_out = _merge_heads(joint_attention(qb, kb, vb, scale, probe=probe))
    elif pattern == "space":
        body_out = _merge_heads(divided_space_attention(qb, kb, vb, s, t, scale, probe=probe))
    elif pattern == "time":
        body_out = _merge_heads(divided_time_attention(qb, kb, vb, s, t, scale, probe=probe))
    elif pattern in ("trajectory", "trajectory_approx"):
        body_out = _trajectory_body(qb, kb, vb, ap, cfg, layer_index, probe)
    else:
        raise ValueError(f"unknown attention pattern {pattern}")

    cls_out = _merge_heads(cls_attention(q_h[head], k_h, v_h, scale))  # [.., 1, D]
    merged = concat([cls_out, body_out], axis=-2)
    return add(matmul(merged, ap.wo), ap.bo)


def _mlp(x, bp: BlockParams):
    hidden = gelu(add(matmul(x, bp.mlp_w1), bp.mlp_b1))
    return add(matmul(hidden, bp.mlp_w2), bp.mlp_b2)


def block_forward(z, bp: BlockParams, cfg: ModelConfig, layer_index: int = 0,
                  probe: AllocProbe | None = None):
    """Residual block: attention sublayer(s) then MLP, all pre-norm."""
    patterns = block_patterns(cfg)
    if len(patterns) != len(bp.attns):
        raise ValueError(f"block has {len(bp.attns)} attention params, config wants {patterns}")
    for pattern, ap in zip(patterns, bp.attns):
        attended = multi_head_attention(
            layer_norm(z, ap.ln_g, ap.ln_b), ap, cfg, pattern, layer_index, probe
        )
        z = add(attended, z)
    y = _mlp(layer_norm(z, bp.ln2_g, bp.ln2_b), bp)
    return add(y, z)


def forward(clip, params: ModelParams, cfg: ModelConfig, probe: AllocProbe | None = None):
    """Logits for one clip [T0, C, H, W] or a batch [B, T0, C, H, W]."""
    x = tokenize(clip, cfg, params.patch_w, params.patch_b)
    x = add_positional(x, params, cfg)
    lead = value_of(x).shape[:-2]
    d = cfg.embed_dim
    cls_row = add(np.zeros(lead + (1, d), dtype=value_of(x).dtype), reshape(params.cls, (1, d)))
    z = concat([cls_row, x], axis=-2)
    for i, bp in enumerate(params.blocks):
        z = block_forward(z, bp, cfg, layer_index=i, probe=probe)
    z = layer_norm(z, params.ln_f_g, params.ln_f_b)
    cls_final = z[(Ellipsis, slice(0, 1), slice(None))]  # [.., 1, D]
    logits = add(matmul(cls_final, params.head_w), params.head_b)
    return reshape(logits, lead + (cfg.classes,))


# ---------------------------------------------------------------------------
# config (de)serialization


def config_to_json(cfg: ModelConfig) -> str:
    doc = {
        "patch": list(cfg.patch),
        "embed_dim": cfg.embed_dim,
        "layers": cfg.layers,
        "heads": cfg.heads,
        "pos_mode": cfg.pos_mode.value,
        "attention": cfg.attention.value,
        "classes": cfg.classes,
        "input": {
            "frames": cfg.input_frames,
            "height": cfg.input_height,
            "width": cfg.input_width,
            "channels": cfg.input_channels,
        },
        "norm_mode": cfg.norm_mode.value,
        "temporal_mode": cfg.temporal_mode.value,
        "dtype": cfg.dtype,
    }
    if cfg.approx is not None:
        doc["approx"] = {
            "strategy": cfg.approx.strategy.value,
            "R": cfg.approx.r,
            "c": cfg.approx.c,
            "shared": cfg.approx.shared_across_time,
            "seed": cfg.approx.seed,
        }
    return json.dumps(doc, indent=2)


def config_from_json(text: str) -> ModelConfig:
    doc = json.loads(text)
    approx = None
    if doc.get("approx"):
        a = doc["approx"]
        approx = PrototypeSpec(
            r=a["R"],
            c=a.get("c", 4),
            strategy=SelectionStrategy(a.get("strategy", "most_orthogonal")),
            shared_across_time=a.get("shared", True),
            seed=a.get("seed", 0),
        )
    inp = doc["input"]
    return ModelConfig(
        patch=tuple(doc["patch"]),
        embed_dim=doc["embed_dim"],
        layers=doc["layers"],
        heads=doc["heads"],
        classes=doc["classes"],
        input_frames=inp["frames"],
        input_height=inp["height"],
        input_width=inp["width"],
        input_channels=inp.get("channels", 3),
        pos_mode=PosMode(doc.get("pos_mode", "separate_space_time")),
        attention=AttentionKind(doc.get("attention", "trajectory")),
        norm_mode=NormMode(doc.get("norm_mode", "spatial_per_frame")),
        temporal_mode=TemporalMode(doc.get("temporal_mode", "temporal_attention")),
        approx=approx,
        dtype=doc.get("dtype", "f64"),
    )
