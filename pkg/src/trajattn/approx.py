"""Prototype-based attention approximation.

The quadratic attention map softmax(q k^T) is factored through R prototype
vectors: softmax(q P^T) softmax(P k^T) v, computed right-to-left so nothing
bigger than max(N, S) x R is ever formed. Prototypes come from the queries
and keys themselves:

* most-orthogonal: greedy subset that minimizes pairwise |cosine|, after an
  optional uniform subsample of c*R candidates;
* random: uniform subset of the query/key pool;
* segment-means: contiguous-block averages (the Nystromformer construction,
  which pairs them with an iterative pseudoinverse correction).

For trajectory stage 1 the per-frame spatial attentions can either share one
prototype set built from all frames (cheaper, one build) or build one per
frame.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .exact import TrajectoryIntermediate
from .probe import ATTN_MATRIX, PROTO_BUILD, AllocProbe
from .tensor import (
    Rng,
    concat,
    matmul,
    reshape,
    scale as scale_op,
    softmax_rows,
    sub,
    transpose,
    value_of,
)

__all__ = [
    "SelectionStrategy",
    "PrototypeSpec",
    "PrototypeSet",
    "NystromConfig",
    "ApproxAttentionResult",
    "most_orthogonal_subset",
    "random_prototypes",
    "segment_means",
    "build_prototypes",
    "orthoformer_attention",
    "iterative_pinv",
    "nystromformer_attention",
    "approx_trajectory_stage1",
]


class SelectionStrategy(str, Enum):
    MOST_ORTHOGONAL = "most_orthogonal"
    RANDOM = "random"
    SEGMENT_MEANS = "segment_means"


@dataclass(frozen=True)
class PrototypeSpec:
    """How to build a prototype set: count, candidate pool factor, strategy."""

    r: int
    c: int = 4
    strategy: SelectionStrategy = SelectionStrategy.MOST_ORTHOGONAL
    shared_across_time: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"prototype count must be >= 1, got {self.r}")
        if self.c < 1:
            raise ValueError(f"subsample factor must be >= 1, got {self.c}")


@dataclass
class PrototypeSet:
    vectors: np.ndarray  # [R', D], R' <= requested R only when clamped
    spec: PrototypeSpec
    clamped: bool = False

    @property
    def r(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class NystromConfig:
    r: int
    n_iter: int = 6

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")


@dataclass
class ApproxAttentionResult:
    output: object  # [N, D]
    omega1: object  # [N, R] row-stochastic
    omega2: object = None  # [R, Nk] row-stochastic (prototype factorization)
    omega2_inv: object = None  # [R, R] (Nystromformer)
    omega3: object = None  # [R, Nk] row-stochastic (Nystromformer)


def _candidate_pool(q, k) -> np.ndarray:
    qv, kv = value_of(q), value_of(k)
    if qv.ndim != 2 or kv.ndim != 2 or qv.shape[1] != kv.shape[1]:
        raise ValueError(f"query/key pools must be [N, D] of equal width: {qv.shape}, {kv.shape}")
    return np.concatenate([qv, kv], axis=0)


def most_orthogonal_subset(q, k, r: int, c: int = 4, rng: Rng | None = None,
                           probe: AllocProbe | None = None) -> PrototypeSet:
    """Greedy maximally-orthogonal prototype selection from queries and keys.

    A pool of min(c*r, Nq+Nk) candidates is subsampled uniformly (kept in
    original order so tie-breaks are stable), the first prototype is drawn
    uniformly from it, and each further pick minimizes the worst |cosine|
    against everything already selected, breaking ties toward the lowest
    candidate index. Scoring happens on unit-normalized copies; the returned
    rows are the original vectors. Zero-norm candidates score as fully
    parallel so they are only ever picked once nothing else is left.
    """
    if rng is None:
        rng = Rng(0)
    pool = _candidate_pool(q, k)
    n_pool = pool.shape[0]
    m = min(c * r, n_pool)
    if m < n_pool:
        indices = np.sort(rng.choice(n_pool, m))
        cand = pool[indices]
    else:
        cand = pool
    clamped = False
    r_eff = r
    if r > cand.shape[0]:
        warnings.warn(
            f"prototype count {r} exceeds candidate pool {cand.shape[0]}; clamping",
            stacklevel=2,
        )
        r_eff = cand.shape[0]
        clamped = True
    spec = PrototypeSpec(r=r, c=c, strategy=SelectionStrategy.MOST_ORTHOGONAL, seed=rng.seed)
    if probe is not None:
        probe.add(PROTO_BUILD, cand.shape[0] * cand.shape[1] + cand.shape[0] * r_eff
                  + r_eff * cand.shape[1])

    norms = np.linalg.norm(cand, axis=1)
    nonzero = norms > 0.0
    unit = np.zeros_like(cand)
    unit[nonzero] = cand[nonzero] / norms[nonzero, None]

    start = rng.integers(0, cand.shape[0])
    selected = [start]
    # worst |cos| of each candidate against the current selection
    score = np.abs(unit @ unit[start])
    score[~nonzero] = np.maximum(score[~nonzero], 1.0)
    score[start] = np.inf
    while len(selected) < r_eff:
        pick = int(np.argmin(score))
        selected.append(pick)
        score = np.maximum(score, np.abs(unit @ unit[pick]))
        score[~nonzero] = np.maximum(score[~nonzero], 1.0)
        score[pick] = np.inf
    return PrototypeSet(vectors=cand[selected].copy(), spec=spec, clamped=clamped)


def random_prototypes(q, k, r: int, rng: Rng | None = None,
                      probe: AllocProbe | None = None) -> PrototypeSet:
    """Uniform without-replacement subset of the query/key pool."""
    if rng is None:
        rng = Rng(0)
    pool = _candidate_pool(q, k)
    clamped = False
    r_eff = r
    if r > pool.shape[0]:
        warnings.warn(f"prototype count {r} exceeds pool {pool.shape[0]}; clamping", stacklevel=2)
        r_eff = pool.shape[0]
        clamped = True
    if probe is not None:
        probe.add(PROTO_BUILD, r_eff * pool.shape[1])
    indices = rng.choice(pool.shape[0], r_eff)
    spec = PrototypeSpec(r=r, strategy=SelectionStrategy.RANDOM, seed=rng.seed)
    return PrototypeSet(vectors=pool[indices].copy(), spec=spec, clamped=clamped)


def segment_means(q, k, r: int):
    """Per-segment means of q and k over r contiguous, near-equal segments.

    The first (N mod r) segments take the extra row. Unlike the subset
    strategies this yields a (Pq, Pk) pair, one from the queries and one
    from the keys.
    """
    qv, kv = value_of(q), value_of(k)
    if r > qv.shape[0] or r > kv.shape[0]:
        raise ValueError(f"segment count {r} exceeds rows: q {qv.shape[0]}, k {kv.shape[0]}")
    return _segment_mean_rows(qv, r), _segment_mean_rows(kv, r)


def _segment_mean_rows(x: np.ndarray, r: int) -> np.ndarray:
    n = x.shape[0]
    base, extra = divmod(n, r)
    out = np.empty((r, x.shape[1]), dtype=x.dtype)
    start = 0
    for i in range(r):
        size = base + (1 if i < extra else 0)
        out[i] = x[start : start + size].mean(axis=0)
        start += size
    return out


def build_prototypes(q, k, spec: PrototypeSpec, rng: Rng | None = None,
                     probe: AllocProbe | None = None) -> PrototypeSet:
    """Single prototype set per ``spec.strategy`` from a query/key pool.

    Segment-means here averages the concatenated pool into r blocks; the
    paired (Pq, Pk) form used by the Nystromformer path comes from
    :func:`segment_means` directly.
    """
    if spec.strategy is SelectionStrategy.MOST_ORTHOGONAL:
        return most_orthogonal_subset(q, k, spec.r, spec.c, rng, probe)
    if spec.strategy is SelectionStrategy.RANDOM:
        return random_prototypes(q, k, spec.r, rng, probe)
    if spec.strategy is SelectionStrategy.SEGMENT_MEANS:
        pool = _candidate_pool(q, k)
        if spec.r > pool.shape[0]:
            raise ValueError(f"segment count {spec.r} exceeds pool {pool.shape[0]}")
        if probe is not None:
            probe.add(PROTO_BUILD, spec.r * pool.shape[1])
        return PrototypeSet(vectors=_segment_mean_rows(pool, spec.r), spec=spec)
    raise ValueError(f"unknown strategy {spec.strategy}")


def orthoformer_attention(q, k, v, prototypes, scale: float,
                          probe: AllocProbe | None = None) -> ApproxAttentionResult:
    """Factored attention softmax(q P^T) (softmax(P k^T) v).

    The value product is taken first, so the largest intermediates are the
    two prototype maps: N x R and R x Nk instead of N x Nk.
    """
    p = prototypes.vectors if isinstance(prototypes, PrototypeSet) else prototypes
    qv, kv = value_of(q), value_of(k)
    pv = value_of(p)
    if pv.ndim != 2 or pv.shape[1] != qv.shape[1]:
        raise ValueError(f"prototypes must be [R, {qv.shape[1]}], got {pv.shape}")
    if probe is not None:
        probe.add(ATTN_MATRIX, 2 * qv.shape[0] * pv.shape[0] + 2 * pv.shape[0] * kv.shape[0])
    omega1 = softmax_rows(matmul(q, transpose(p, (1, 0))), scale)  # [N, R]
    omega2 = softmax_rows(matmul(p, transpose(k, (1, 0))), scale)  # [R, Nk]
    output = matmul(omega1, matmul(omega2, v))
    return ApproxAttentionResult(output=output, omega1=omega1, omega2=omega2)


def iterative_pinv(a, n_iter: int = 6):
    """Newton-Schulz-style iterative pseudoinverse of a square matrix.

    z_{j+1} = z_j (13 I - a z_j (15 I - a z_j (7 I - a z_j))) / 4, starting
    from a^T scaled by the product of the largest absolute row and column
    sums, which guarantees contraction for the row-stochastic softmax
    matrices this is applied to.
    """
    av = value_of(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ValueError(f"iterative_pinv needs a square matrix, got {av.shape}")
    abs_a = np.abs(av)
    denom = abs_a.sum(axis=1).max() * abs_a.sum(axis=0).max()
    eye = np.eye(av.shape[0], dtype=av.dtype)
    z = scale_op(transpose(a, (1, 0)), 1.0 / denom)
    for _ in range(n_iter):
        az = matmul(a, z)
        inner = sub(eye * 7.0, az)
        inner = sub(eye * 15.0, matmul(az, inner))
        inner = sub(eye * 13.0, matmul(az, inner))
        z = scale_op(matmul(z, inner), 0.25)
    return z


def nystromformer_attention(q, k, v, config: NystromConfig, scale: float,
                            probe: AllocProbe | None = None) -> ApproxAttentionResult:
    """Nystromformer attention with segment-mean prototypes.

    y = softmax(q Pk^T) (pinv(softmax(Pq Pk^T)) (softmax(Pq k^T) v)), with
    the pseudoinverse from :func:`iterative_pinv` and the products grouped
    right-to-left.
    """
    qv, kv = value_of(q), value_of(k)
    pq, pk = segment_means(qv, kv, config.r)
    if probe is not None:
        probe.add(ATTN_MATRIX, 2 * qv.shape[0] * config.r  # omega1
                  + 2 * config.r * config.r  # omega2
                  + 2 * config.r * kv.shape[0])  # omega3
        probe.add(PROTO_BUILD, 2 * config.r * qv.shape[1])
    omega1 = softmax_rows(matmul(q, pk.T), scale)
    omega2 = softmax_rows(matmul(pq, pk.T), scale)
    omega3 = softmax_rows(matmul(pq, transpose(k, (1, 0))), scale)
    omega2_inv = iterative_pinv(omega2, config.n_iter)
    output = matmul(omega1, matmul(omega2_inv, matmul(omega3, v)))
    return ApproxAttentionResult(
        output=output, omega1=omega1, omega2=omega2, omega2_inv=omega2_inv, omega3=omega3
    )


def approx_trajectory_stage1(q, k, v, s_count: int, t_count: int, spec: PrototypeSpec,
                             scale: float, rng: Rng | None = None,
                             probe: AllocProbe | None = None,
                             want_maps: bool = False) -> TrajectoryIntermediate:
    """Trajectory stage 1 with each frame's spatial attention factored
    through prototypes.

    With ``spec.shared_across_time`` one prototype set is built from all
    queries and all keys and reused by every frame (the query-prototype map
    is then also computed once); otherwise each frame builds its own set
    from all queries plus that frame's keys, consuming the rng in frame
    order so a single-frame clip matches the shared path draw for draw.
    """
    n = s_count * t_count
    qv = value_of(q)
    if qv.ndim != 2:
        raise ValueError(f"approx stage 1 works on single [N, D] instances, got {qv.shape}")
    if qv.shape[0] != n or value_of(k).shape[0] != n or value_of(v).shape[0] != n:
        raise ValueError(f"expected {n} = S*T rows, got {qv.shape[0]}")
    if rng is None:
        rng = Rng(spec.seed)
    d = qv.shape[1]

    frame_tokens = []
    frame_maps = [] if want_maps else None
    if spec.shared_across_time:
        protos = build_prototypes(q, k, spec, rng, probe)
        pvecs = protos.vectors
        if probe is not None:
            probe.add(ATTN_MATRIX, 2 * n * protos.r)
        omega1 = softmax_rows(matmul(q, pvecs.T), scale)  # [N, R] once
        for t in range(t_count):
            sl = slice(t * s_count, (t + 1) * s_count)
            k_t, v_t = k[sl], v[sl]
            if probe is not None:
                probe.add(ATTN_MATRIX, 2 * protos.r * s_count)
            omega2 = softmax_rows(matmul(pvecs, transpose(k_t, (1, 0))), scale)
            frame_tokens.append(matmul(omega1, matmul(omega2, v_t)))
            if want_maps:
                frame_maps.append(matmul(omega1, omega2))
    else:
        for t in range(t_count):
            sl = slice(t * s_count, (t + 1) * s_count)
            k_t, v_t = k[sl], v[sl]
            protos = build_prototypes(q, k_t, spec, rng, probe)
            res = orthoformer_attention(q, k_t, v_t, protos, scale, probe)
            frame_tokens.append(res.output)
            if want_maps:
                frame_maps.append(matmul(res.omega1, res.omega2))

    stacked = concat([reshape(ft, (n, 1, d)) for ft in frame_tokens], axis=1)
    maps = None
    if want_maps:
        maps = concat([reshape(fm, (n, 1, s_count)) for fm in frame_maps], axis=1)
    return TrajectoryIntermediate(tokens=stacked, s_count=s_count, t_count=t_count, maps=maps)


def exact_vs_approx_error(exact_out, approx_out) -> float:
    """Relative Frobenius error of an approximation against the exact output."""
    e = value_of(exact_out)
    a = value_of(approx_out)
    denom = np.linalg.norm(e)
    if denom == 0.0:
        return float(np.linalg.norm(a - e))
    return float(np.linalg.norm(a - e) / denom)
