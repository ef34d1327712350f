"""Toy training on the moving-dot task.

Plain mini-batch gradient descent, everything seeded: same seeds, same
accuracy curves. Training runs in float32 by default for speed; evaluation
is a forward pass on plain arrays, no tape.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..exact import NormMode, TemporalMode
from ..model import (
    AttentionKind,
    ModelConfig,
    PosMode,
    forward,
    init_params,
    named_arrays,
    params_to_vars,
)
from ..tensor import Rng, Tape, cross_entropy_logits, value_of
from .reports import ExperimentReport
from .synth import MovingDotSpec, make_dataset

__all__ = ["TrainConfig", "toy_model_config", "train_classifier", "evaluate",
           "run_toy_experiment", "single_frame_dataset", "DEFAULT_TASK"]

# Small enough to train in seconds per epoch on a couple of CPU cores while
# motion stays the only class signal (one frame never identifies the label).
DEFAULT_TASK = MovingDotSpec(frames=8, height=16, width=16, dot_size=3, speed=1,
                             stride=1, noise_std=0.1)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0
    train_samples: int = 1024
    test_samples: int = 512


def toy_model_config(task: MovingDotSpec = DEFAULT_TASK,
                     attention: AttentionKind = AttentionKind.TRAJECTORY,
                     frames: int | None = None,
                     embed_dim: int = 32,
                     layers: int = 2,
                     heads: int = 4,
                     patch: tuple = (1, 4, 4),
                     dtype: str = "f32",
                     **kwargs) -> ModelConfig:
    return ModelConfig(
        patch=patch,
        embed_dim=embed_dim,
        layers=layers,
        heads=heads,
        classes=len(set(range(4))),
        input_frames=task.frames if frames is None else frames,
        input_height=task.height,
        input_width=task.width,
        input_channels=1,
        pos_mode=PosMode.SEPARATE,
        attention=attention,
        dtype=dtype,
        **kwargs,
    )


def single_frame_dataset(clips: np.ndarray, rng: Rng) -> np.ndarray:
    """One random frame per clip (frames axis kept, length 1)."""
    n, t = clips.shape[:2]
    picks = np.array([rng.integers(0, t) for _ in range(n)])
    return clips[np.arange(n), picks][:, None]


def evaluate(params, cfg: ModelConfig, clips: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> float:
    correct = 0
    for start in range(0, len(clips), batch_size):
        chunk = clips[start : start + batch_size].astype(cfg.np_dtype)
        logits = value_of(forward(chunk, params, cfg))
        correct += int((logits.argmax(axis=-1) == labels[start : start + batch_size]).sum())
    return correct / len(clips)


def train_classifier(cfg: ModelConfig, train_clips, train_labels, test_clips, test_labels,
                     tcfg: TrainConfig, experiment_id: str = "train-toy") -> tuple:
    """Train from scratch; returns (params, report with one row per epoch)."""
    rng = Rng(tcfg.seed)
    params = init_params(cfg, rng)
    train_clips = train_clips.astype(cfg.np_dtype)
    n = len(train_clips)
    report = ExperimentReport(
        experiment_id=experiment_id,
        config={
            "attention": cfg.attention.value,
            "frames": cfg.input_frames,
            "embed_dim": cfg.embed_dim,
            "layers": cfg.layers,
            "heads": cfg.heads,
            "epochs": tcfg.epochs,
            "batch_size": tcfg.batch_size,
            "lr": tcfg.lr,
            "seed": tcfg.seed,
            "train_samples": n,
            "test_samples": len(test_clips),
        },
    )
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            tape = Tape()
            pvars = params_to_vars(params, tape)
            logits = forward(train_clips[idx], pvars, cfg)
            loss = cross_entropy_logits(logits, train_labels[idx])
            loss_val = float(value_of(loss))
            if not np.isfinite(loss_val):
                report.add_row(epoch=epoch, train_loss=loss_val, diverged=True)
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}: loss={loss_val}\n{report.to_json()}"
                )
            tape.backward(loss)
            for _, v in named_arrays(pvars):
                if v.grad is not None:
                    v.value -= tcfg.lr * v.grad
            total_loss += loss_val * len(idx)
            correct += int((value_of(logits).argmax(axis=-1) == train_labels[idx]).sum())
        test_acc = evaluate(params, cfg, test_clips, test_labels)
        report.add_row(
            epoch=epoch,
            train_loss=total_loss / n,
            train_acc=correct / n,
            test_acc=test_acc,
        )
    return params, report


def run_toy_experiment(task: MovingDotSpec = DEFAULT_TASK,
                       attention: AttentionKind = AttentionKind.TRAJECTORY,
                       frames: int | None = None,
                       tcfg: TrainConfig = TrainConfig(),
                       **model_kwargs) -> tuple:
    """Dataset generation + training for one model variant.

    ``frames=1`` trains the single-frame ablation: same clips, one random
    frame each, so every motion cue is gone by construction.
    """
    data_rng = Rng(tcfg.seed).derive(1)
    train_clips, train_labels = make_dataset(task, tcfg.train_samples, data_rng)
    test_clips, test_labels = make_dataset(task, tcfg.test_samples, data_rng)
    if frames == 1:
        train_clips = single_frame_dataset(train_clips, data_rng)
        test_clips = single_frame_dataset(test_clips, data_rng)
    cfg = toy_model_config(task, attention=attention, frames=frames, **model_kwargs)
    params, report = train_classifier(
        cfg, train_clips, train_labels, test_clips, test_labels, tcfg,
        experiment_id=f"train-toy-{attention.value}-f{cfg.input_frames}",
    )
    return params, cfg, report
