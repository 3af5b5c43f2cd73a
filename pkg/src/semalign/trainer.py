"""Training: joint objective, synthetic pretraining and alternating phases.

Training alternates between an *align* phase (updates encoder + alignment +
uncertainty parameters) and a *detect* phase (updates encoder + detector
parameters); each phase weighs the three loss terms differently. Before
that, both task heads are pretrained on synthetic pairs whose ground-truth
warp supplies anchors (aligner) and an equivariance target (detector).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .aligner import AlignmentOutput, alignment_prob_loss, anchor_loss
from .datagen import StreamConfig, pair_at_index
from .detector import LandmarkMaps, detection_loss, equivariance_loss
from .exceptions import CheckpointError, ConfigError, TrainingError, UndefinedLossError
from .geometry import backward_warp, eval_warp, make_grid
from .model import GROUP_NAMES, JointModel, ModelConfig, forward_pair

MAX_ALTERNATIONS = 4
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PhaseConfig:
    """Loss weights plus the parameter groups a phase may update."""

    name: str
    lambda_d: float
    lambda_a: float
    lambda_j: float
    trainable_groups: Sequence[str]


ALIGN_PHASE = PhaseConfig("align", 1.0, 10.0, 10.0, ("encoder", "align", "uncertainty"))
DETECT_PHASE = PhaseConfig("detect", 10.0, 1.0, 100.0, ("encoder", "detector"))
PRETRAIN_PHASE = PhaseConfig("pretrain", 1.0, 1.0, 0.0, ("encoder", "detector", "align"))


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_betas: Sequence[float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs_per_phase: int = 2
    steps_per_epoch: int = 25
    anchor_grid: int = 5
    # Pretraining weight on the equivariance term. The concentration and
    # separation losses are content-free (a detector can satisfy them with
    # input-independent peaks via padding artifacts); upweighting
    # equivariance anchors the landmarks to image structure before the
    # channel softmax saturates.
    equivariance_weight: float = 10.0


@dataclass
class TrainState:
    """All mutable training state; everything a checkpoint must capture."""

    model: JointModel
    optimizer: torch.optim.Adam
    seed: int
    alternation: int = 0
    epoch: int = 0
    sample_index: int = 0
    loss_history: list = field(default_factory=list)


def init_state(model_config: ModelConfig, train_config: TrainConfig, seed: int) -> TrainState:
    torch.set_num_threads(1)  # bitwise-reproducible loss histories
    torch.manual_seed(seed)
    model = JointModel(model_config)
    optimizer = _make_optimizer(model, train_config)
    return TrainState(model=model, optimizer=optimizer, seed=seed)


def _make_optimizer(model: JointModel, cfg: TrainConfig) -> torch.optim.Adam:
    groups = [
        {"params": list(model.group_parameters(name)), "name": name}
        for name in GROUP_NAMES
    ]
    return torch.optim.Adam(
        groups, lr=cfg.learning_rate, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps
    )


def set_learning_rate(state: TrainState, lr: float) -> None:
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def learning_rate_for_alternation(alternation: int) -> float:
    """Staged 1e-3 -> 1e-4 -> 1e-5 schedule (decays at alternations 2 and 4)."""
    if alternation < 2:
        return 1e-3
    if alternation < 4:
        return 1e-4
    return 1e-5


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def joint_loss(
    maps_s: LandmarkMaps,
    maps_t: LandmarkMaps,
    out: AlignmentOutput,
    *,
    detach_sigma: bool = False,
) -> Tensor:
    """Uncertainty-weighted consistency between warped target landmark maps
    and source landmark maps; summed over landmarks, mean over cells."""
    prob_t = maps_t.prob[1:]
    warped = backward_warp(prob_t, out.flow.to(prob_t.dtype))
    u = out.logvar.detach() if detach_sigma else out.logvar
    weight = torch.exp(-u).to(prob_t.dtype)
    sq = (maps_s.prob[1:] - warped).pow(2).sum(dim=0)  # (H, W)
    return (weight * sq).mean()


def total_loss(parts: dict, phase: PhaseConfig) -> Tensor:
    """Weighted sum lambda_D * L_D + lambda_A * L_A + lambda_J * L_J."""
    return (
        phase.lambda_d * parts["detection"]
        + phase.lambda_a * parts["alignment"]
        + phase.lambda_j * parts["joint"]
    )


def _check_finite(parts: dict) -> None:
    for name, value in parts.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise TrainingError(f"non-finite value in loss term {name!r}")


def compute_joint_parts(model: JointModel, pair, phase: PhaseConfig) -> dict:
    """The three joint-objective terms for one pair under a phase."""
    out = forward_pair(model, pair.image_s, pair.image_t)
    det = 0.5 * (
        detection_loss(out.maps_s, model.detector_spec)
        + detection_loss(out.maps_t, model.detector_spec)
    )
    ali = alignment_prob_loss(
        out.features_s,
        out.features_t,
        out.alignment,
        model.config.window_radius,
        model.config.temperature,
    )
    # In the detect phase sigma acts as a fixed per-cell weight.
    joint = joint_loss(
        out.maps_s, out.maps_t, out.alignment, detach_sigma=(phase.name == "detect")
    )
    parts = {"detection": det, "alignment": ali, "joint": joint}
    _check_finite(parts)
    return parts


def pretrain_anchors(gt, grid_points: int, device=None):
    """Uniform grid anchors mapped through the ground-truth warp.

    Returns (src, dst) keeping only anchors whose target stays in bounds.
    """
    src = make_grid(grid_points, grid_points, device=device).reshape(-1, 2)
    dst = eval_warp(gt.warp, src)
    valid = (dst.abs() <= 1.0).all(dim=-1)
    return src[valid], dst[valid]


def compute_pretrain_parts(
    model: JointModel, pair, anchor_grid: int, equivariance_weight: float = 10.0
) -> dict:
    """Independent pretraining terms: detector (concentration + separation +
    equivariance under the known warp) and aligner (anchor loss)."""
    out = forward_pair(model, pair.image_s, pair.image_t)
    det = 0.5 * (
        detection_loss(out.maps_s, model.detector_spec)
        + detection_loss(out.maps_t, model.detector_spec)
    ) + equivariance_weight * equivariance_loss(out.maps_s, out.maps_t, pair.gt)
    src, dst = pretrain_anchors(pair.gt, anchor_grid)
    ali = anchor_loss(out.alignment, src, dst)
    parts = {"detection": det, "alignment": ali, "joint": torch.zeros(())}
    _check_finite(parts)
    return parts


# ---------------------------------------------------------------------------
# Optimization machinery
# ---------------------------------------------------------------------------

def _set_trainable(model: JointModel, groups: Sequence[str]) -> None:
    for name in GROUP_NAMES:
        flag = name in groups
        for p in model.group_parameters(name):
            p.requires_grad_(flag)


def optimizer_step(state: TrainState) -> None:
    """Apply one Adam step; frozen groups have no gradients and keep both
    their values and their optimizer moments untouched."""
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise TrainingError(f"non-finite gradient in group {group['name']!r}")
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)


def _run_phase(
    state: TrainState,
    stream: StreamConfig,
    phase: PhaseConfig,
    steps: int,
    cfg: TrainConfig,
) -> None:
    _set_trainable(state.model, phase.trainable_groups)
    state.optimizer.zero_grad(set_to_none=True)
    for _ in range(steps):
        batch_parts = {"detection": 0.0, "alignment": 0.0, "joint": 0.0}
        used = 0
        total = torch.zeros(())
        for _ in range(cfg.batch_size):
            pair = pair_at_index(stream, state.seed, state.sample_index)
            state.sample_index += 1
            try:
                if phase.name == "pretrain":
                    parts = compute_pretrain_parts(
                        state.model, pair, cfg.anchor_grid, cfg.equivariance_weight
                    )
                else:
                    parts = compute_joint_parts(state.model, pair, phase)
            except UndefinedLossError:
                continue
            total = total + total_loss(parts, phase)
            for k in batch_parts:
                batch_parts[k] += float(parts[k].detach())
            used += 1
        if used == 0:
            raise TrainingError("every pair in the batch had undefined losses")
        (total / used).backward()
        optimizer_step(state)
        state.loss_history.append(
            {
                "phase": phase.name,
                "alternation": state.alternation,
                "step": len(state.loss_history),
                "total": float(total.detach()) / used,
                **{k: v / used for k, v in batch_parts.items()},
            }
        )
    _set_trainable(state.model, GROUP_NAMES)


def pretrain(
    state: TrainState,
    stream: StreamConfig,
    steps: int,
    cfg: Optional[TrainConfig] = None,
) -> TrainState:
    """Pretrain detector and aligner on synthetic pairs with known warps."""
    if steps <= 0:
        return state
    cfg = cfg or TrainConfig()
    torch.set_num_threads(1)
    set_learning_rate(state, cfg.learning_rate)
    _run_phase(state, stream, PRETRAIN_PHASE, steps, cfg)
    return state


def train_joint(
    state: TrainState,
    stream: StreamConfig,
    alternations: int,
    cfg: Optional[TrainConfig] = None,
    checkpoint_dir=None,
) -> TrainState:
    """Alternate align and detect phases over the pair stream.

    Raises ConfigError past 4 total alternations (overfitting guard).
    """
    if alternations == 0:
        return state
    if alternations < 0 or state.alternation + alternations > MAX_ALTERNATIONS:
        raise ConfigError(
            f"alternation budget exceeded: {state.alternation} done, "
            f"{alternations} requested, max {MAX_ALTERNATIONS}"
        )
    cfg = cfg or TrainConfig()
    torch.set_num_threads(1)
    for _ in range(alternations):
        state.alternation += 1
        set_learning_rate(state, learning_rate_for_alternation(state.alternation))
        for phase in (ALIGN_PHASE, DETECT_PHASE):
            for _ in range(cfg.epochs_per_phase):
                state.epoch += 1
                _run_phase(state, stream, phase, cfg.steps_per_epoch, cfg)
            if checkpoint_dir is not None:
                from pathlib import Path

                path = Path(checkpoint_dir) / f"alt{state.alternation}_{phase.name}.pt"
                save_checkpoint(state, path)
    return state


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(state.model.config),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "seed": state.seed,
        "alternation": state.alternation,
        "epoch": state.epoch,
        "sample_index": state.sample_index,
        "loss_history": state.loss_history,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path, train_config: Optional[TrainConfig] = None) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (want {CHECKPOINT_VERSION})"
        )
    torch.set_num_threads(1)
    cfg = train_config or TrainConfig()
    model = JointModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    optimizer = _make_optimizer(model, cfg)
    optimizer.load_state_dict(payload["optimizer_state"])
    torch.set_rng_state(payload["torch_rng"])
    return TrainState(
        model=model,
        optimizer=optimizer,
        seed=payload["seed"],
        alternation=payload["alternation"],
        epoch=payload["epoch"],
        sample_index=payload["sample_index"],
        loss_history=list(payload["loss_history"]),
    )
