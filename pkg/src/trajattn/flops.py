"""Analytic multiply-accumulate counts for the model configurations.

Convention: 1 FLOP = 1 multiply-accumulate, and only linear/matmul work is
counted (softmax, layer norm, GELU, residual adds and pooling divides are
excluded). Under this convention the per-clip totals of the usual ViT-B
video configurations land within a fraction of a percent of the commonly
quoted GFLOP figures; the trajectory/joint ratio is the robust check.

Per layer, for N = S*T body tokens plus one cls token (N1 = N + 1):

    qkv projections   3 * N1 * D^2        (per attention sublayer)
    output projection N1 * D^2            (per attention sublayer)
    MLP               8 * N1 * D^2
    attention         N_q * N_k * D for scores and again for values,
                      with N_k = all tokens (joint), the frame (space),
                      the tube (time), or every frame in turn (trajectory
                      stage 1, which totals N^2 * D); the cls token always
                      contributes one full-width row.

Trajectory's temporal stage re-projects the [N, T, D] stack with two full
D x D maps plus one for the per-token query, i.e. (2T+1) * N * D^2, then
pools with N * T * D scores/values. Divided attention uses two sublayers
per block (time then space), each with its own projections.

Multi-clip/multi-crop view counts are report metadata only; totals are per
clip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .exact import NormMode, TemporalMode
from .model import AttentionKind, ModelConfig, PosMode, block_patterns

__all__ = ["FlopReport", "flops_estimate", "preset_config", "PRESETS"]

COMPONENTS = (
    "patch_embed",
    "qkv_proj",
    "attn_scores",
    "attn_values",
    "stage2_proj",
    "out_proj",
    "mlp",
    "head",
)


@dataclass
class FlopReport:
    config_name: str
    per_layer: list  # one dict per transformer layer, component -> MACs
    components: dict  # component -> total MACs (incl. embed/head)
    views: tuple | None = None  # (crops, clips) metadata, never multiplied in

    @property
    def total_macs(self) -> int:
        return sum(self.components.values())

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config_name,
                "components": self.components,
                "per_layer": self.per_layer,
                "total_macs": self.total_macs,
                "gflops": self.gflops,
                "views": list(self.views) if self.views else None,
            },
            indent=2,
        )

    def to_csv_rows(self) -> list:
        rows = [["layer", "component", "macs"]]
        for i, layer in enumerate(self.per_layer):
            for comp, macs in layer.items():
                rows.append([i, comp, macs])
        for comp in ("patch_embed", "head"):
            rows.append(["-", comp, self.components.get(comp, 0)])
        rows.append(["-", "total", self.total_macs])
        return rows


def _attention_macs(cfg: ModelConfig, pattern: str) -> dict:
    """Scores/values/stage2 MACs for one attention sublayer."""
    d = cfg.embed_dim
    s, t = cfg.s_count, cfg.t_count
    n = s * t
    n1 = n + 1
    cls_row = n1 * d  # the cls query attends over every token incl. itself
    out = {"attn_scores": 0, "attn_values": 0, "stage2_proj": 0}
    if pattern == "joint":
        out["attn_scores"] = n * n * d + cls_row
        out["attn_values"] = n * n * d + cls_row
    elif pattern == "time":
        out["attn_scores"] = n * t * d + cls_row
        out["attn_values"] = n * t * d + cls_row
    elif pattern == "space":
        out["attn_scores"] = n * s * d + cls_row
        out["attn_values"] = n * s * d + cls_row
    elif pattern == "trajectory":
        out["attn_scores"] = n * n * d + cls_row
        out["attn_values"] = n * n * d + cls_row
        if cfg.temporal_mode is TemporalMode.ATTENTION:
            out["stage2_proj"] = (2 * t + 1) * n * d * d
            out["attn_scores"] += n * t * d
            out["attn_values"] += n * t * d
    elif pattern == "trajectory_approx":
        r = cfg.approx.r
        if cfg.approx.shared_across_time:
            omega1 = n * r * d
        else:
            omega1 = t * n * r * d
        out["attn_scores"] = omega1 + t * r * s * d + cls_row
        out["attn_values"] = t * r * s * d + t * n * r * d + cls_row
        if cfg.temporal_mode is TemporalMode.ATTENTION:
            out["stage2_proj"] = (2 * t + 1) * n * d * d
            out["attn_scores"] += n * t * d
            out["attn_values"] += n * t * d
    else:
        raise ValueError(f"unknown attention pattern {pattern}")
    return out


def flops_estimate(cfg: ModelConfig, config_name: str = "",
                   views: tuple | None = None) -> FlopReport:
    d = cfg.embed_dim
    n1 = cfg.token_count + 1
    patterns = block_patterns(cfg)
    layer = {c: 0 for c in COMPONENTS if c not in ("patch_embed", "head")}
    layer["qkv_proj"] = len(patterns) * 3 * n1 * d * d
    layer["out_proj"] = len(patterns) * n1 * d * d
    layer["mlp"] = 8 * n1 * d * d
    for pattern in patterns:
        for comp, macs in _attention_macs(cfg, pattern).items():
            layer[comp] += macs
    per_layer = [dict(layer) for _ in range(cfg.layers)]
    components = {c: 0 for c in COMPONENTS}
    components["patch_embed"] = cfg.token_count * cfg.patch_volume * d
    components["head"] = cfg.classes * d
    for comp, macs in layer.items():
        components[comp] = macs * cfg.layers
    return FlopReport(
        config_name=config_name, per_layer=per_layer, components=components, views=views
    )


def _vit_base(attention: AttentionKind, patch, frames, side, **kwargs) -> ModelConfig:
    return ModelConfig(
        patch=patch,
        embed_dim=768,
        layers=12,
        heads=12,
        classes=400,
        input_frames=frames,
        input_height=side,
        input_width=side,
        input_channels=3,
        pos_mode=PosMode.SEPARATE,
        attention=attention,
        **kwargs,
    )


PRESETS = {
    # ViT-B backbones at 224px with cuboid (2x16x16) tokenization
    "joint-cubic-base": lambda: _vit_base(AttentionKind.JOINT, (2, 16, 16), 16, 224),
    "divided-cubic-base": lambda: _vit_base(AttentionKind.DIVIDED, (2, 16, 16), 16, 224),
    "trajectory-cubic-base": lambda: _vit_base(AttentionKind.TRAJECTORY, (2, 16, 16), 16, 224),
    # square (1x16x16) tokenization over 8 frames: same token count
    "joint-square-base": lambda: _vit_base(AttentionKind.JOINT, (1, 16, 16), 8, 224),
    "trajectory-square-base": lambda: _vit_base(AttentionKind.TRAJECTORY, (1, 16, 16), 8, 224),
    # trajectory ablations: averaging instead of temporal attention, and
    # one softmax over all frames instead of per-frame normalization
    "trajectory-avg-base": lambda: _vit_base(
        AttentionKind.TRAJECTORY, (2, 16, 16), 16, 224, temporal_mode=TemporalMode.AVERAGE
    ),
    "trajectory-normst-base": lambda: _vit_base(
        AttentionKind.TRAJECTORY, (2, 16, 16), 16, 224, norm_mode=NormMode.SPACE_TIME
    ),
    # long temporal range and high spatial resolution variants
    "trajectory-long": lambda: _vit_base(AttentionKind.TRAJECTORY, (2, 16, 16), 32, 224),
    "trajectory-hr": lambda: _vit_base(AttentionKind.TRAJECTORY, (2, 16, 16), 16, 336),
}


def preset_config(name: str) -> ModelConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
