"""Self-contained actor-critic PPO: numpy forward/backward, GAE, Adam."""

from .network import PolicyParams, forward, forward_batch, load_checkpoint, save_checkpoint
from .ppo import (
    AdvantageEstimates,
    Adam,
    PpoHyper,
    RolloutWorker,
    Trajectory,
    backward,
    build_batch,
    clipped_surrogate,
    compute_gae,
    ppo_iteration,
    sample_action,
    total_loss,
    update_from_trajectories,
)

__all__ = [
    "Adam",
    "AdvantageEstimates",
    "PolicyParams",
    "PpoHyper",
    "RolloutWorker",
    "Trajectory",
    "build_batch",
    "update_from_trajectories",
    "backward",
    "clipped_surrogate",
    "compute_gae",
    "forward",
    "forward_batch",
    "load_checkpoint",
    "ppo_iteration",
    "sample_action",
    "save_checkpoint",
    "total_loss",
]
