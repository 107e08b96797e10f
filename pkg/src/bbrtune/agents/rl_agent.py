"""RL-agent-side cooperation: value consensus and periodic sharing.

Cooperating agents exchange three things on the sharing period: flow-stat
summaries (shared sensation), trajectories (shared episodes, pooled into
the next PPO batch), and policy parameters (averaged elementwise).  Between
exchanges, each agent's critic is pulled toward its neighbors' value
estimates on a fixed probe-state batch through a squared-difference
penalty added to the critic loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rl_core import PolicyParams, Trajectory, forward_batch


def consensus_penalty(v_self, v_neighbors, kappa: float) -> float:
    """kappa * mean over neighbors of mean squared value difference."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if not v_neighbors or kappa == 0.0:
        return 0.0
    v_self = np.asarray(v_self, dtype=np.float64)
    total = 0.0
    for v_j in v_neighbors:
        v_j = np.asarray(v_j, dtype=np.float64)
        if v_j.shape != v_self.shape:
            raise ValueError(
                f"value vector length mismatch: {v_j.shape} vs {v_self.shape}")
        total += float(((v_self - v_j) ** 2).mean())
    return kappa * total / len(v_neighbors)


def make_probe_states(state_dim: int, n: int = 512, seed: int = 0) -> np.ndarray:
    """The agreed probe-state batch, sampled once per run from a fixed seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    return rng.uniform(0.0, 1.0, size=(n, state_dim))


def probe_values(params: PolicyParams, probe_states: np.ndarray) -> np.ndarray:
    return forward_batch(params, probe_states)[2]


def ring_topology(n: int) -> dict[int, list[int]]:
    if n <= 1:
        return {0: []} if n == 1 else {}
    return {i: sorted({(i - 1) % n, (i + 1) % n} - {i}) for i in range(n)}


def mesh_topology(n: int) -> dict[int, list[int]]:
    return {i: [j for j in range(n) if j != i] for i in range(n)}


def build_topology(kind: str, n: int) -> dict[int, list[int]]:
    if kind == "ring":
        return ring_topology(n)
    if kind == "mesh":
        return mesh_topology(n)
    raise ValueError(f"unknown topology {kind!r} (use 'ring' or 'mesh')")


def average_params(params_list: list[PolicyParams]) -> PolicyParams:
    """Elementwise equal-weight average; shapes must agree."""
    if not params_list:
        raise ValueError("nothing to average")
    base = params_list[0]
    for other in params_list[1:]:
        if not base.same_shape(other):
            raise ValueError("incompatible model shapes")
    out = base.zeros_like()
    k = float(len(params_list))
    for i, acc in enumerate(out.flat_arrays()):
        for p in params_list:
            acc += p.flat_arrays()[i]
        acc /= k
    return out


@dataclass
class AgentShareState:
    """What one agent contributes to and receives from its neighbors."""

    agent_id: int
    params: PolicyParams
    trajectories: list[Trajectory] = field(default_factory=list)
    stats_context: list = field(default_factory=list)
    pooled_trajectories: list[Trajectory] = field(default_factory=list)


@dataclass(frozen=True)
class ShareSnapshot:
    agent_id: int
    params: PolicyParams
    trajectories: tuple
    stats_summary: object


def snapshot(state: AgentShareState, stats_summary=None) -> ShareSnapshot:
    return ShareSnapshot(
        agent_id=state.agent_id,
        params=state.params.copy(),
        trajectories=tuple(state.trajectories),
        stats_summary=stats_summary,
    )


def share_merge(state: AgentShareState, neighbor_snapshots: list[ShareSnapshot]) -> AgentShareState:
    """Fold neighbor snapshots into one agent's state.

    Appends neighbor stat summaries to the local context, pools neighbor
    trajectories into the next PPO batch, and replaces the parameters with
    the equal-weight average across self and neighbors.  A single agent
    with no neighbors is untouched.
    """
    if not neighbor_snapshots:
        return state
    for snap in neighbor_snapshots:
        if snap.stats_summary is not None:
            state.stats_context.append((snap.agent_id, snap.stats_summary))
        state.pooled_trajectories.extend(snap.trajectories)
    averaged = average_params(
        [state.params] + [snap.params for snap in neighbor_snapshots])
    # copy in place so optimizer state keeps pointing at the live arrays
    for dst, src in zip(state.params.flat_arrays(), averaged.flat_arrays()):
        dst[...] = src
    return state
