"""PPO with GAE and analytic gradients.

The training objective per update is the clipped surrogate combined with a
squared-error critic term and an entropy bonus,

    maximize  E[ L1 - c1 * L2 + c2 * S ],

where ``L1 = E[min(R*A, clip(R, 1-eps, 1+eps)*A)]`` with the probability
ratio ``R`` taken against the rollout policy, ``L2`` is the critic's squared
error against GAE-derived value targets (optionally extended by a
value-consensus penalty between cooperating agents), and ``S`` is the policy
entropy scaled by ``beta_entropy``.  Gradients are accumulated by hand in
reverse through the tanh trunk, the two softmax heads and the value head;
updates use adaptive-moment gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import PolicyParams, forward_batch


@dataclass
class PpoHyper:
    """Hyperparameters; defaults follow standard small-scale PPO practice."""

    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    beta_entropy: float = 1.0
    learning_rate: float = 3e-3
    epochs: int = 4
    minibatch_size: int = 64
    n_actors: int = 4
    horizon: int = 128

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip epsilon must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.minibatch_size < 1 or self.n_actors < 1 or self.horizon < 1:
            raise ValueError("epochs, minibatch size, actors and horizon must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Trajectory:
    """One rollout of T steps collected under the behaviour policy."""

    states: np.ndarray      # (T, D)
    actions: np.ndarray     # (T, 2) int
    rewards: np.ndarray     # (T,)
    values: np.ndarray      # (T,)
    log_probs: np.ndarray   # (T,)
    dones: np.ndarray       # (T,) float 0/1
    bootstrap_value: float  # V(s_T), 0 when the last step ended an episode

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class AdvantageEstimates:
    advantages: np.ndarray
    v_targets: np.ndarray


def compute_gae(traj: Trajectory, gamma: float, lam: float) -> AdvantageEstimates:
    """Reverse recursion A_t = delta_t + gamma*lam*A_{t+1}, A_T = 0.

    ``delta_t = r_t + gamma * V(s_{t+1}) - V(s_t)`` with the value of the
    state after a terminal step treated as zero.
    """
    T = len(traj)
    adv = np.empty(T)
    last = 0.0
    values = traj.values
    rewards = traj.rewards
    dones = traj.dones
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        v_next = traj.bootstrap_value if t == T - 1 else values[t + 1]
        delta = rewards[t] + gamma * v_next * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return AdvantageEstimates(advantages=adv, v_targets=adv + values)


def clipped_surrogate(ratio, advantage, eps: float):
    """min(R*A, clip(R, 1-eps, 1+eps)*A), elementwise."""
    r = np.asarray(ratio, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    return np.minimum(r * a, np.clip(r, 1.0 - eps, 1.0 + eps) * a)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    lsm = log_softmax(logits)
    p = np.exp(lsm)
    return -(p * lsm).sum(axis=-1)


def sample_action(logits_rt: np.ndarray, logits_bw: np.ndarray, rng: np.random.Generator):
    """Sample one index per head; returns (i1, i2, log_prob, entropy)."""
    lsm_rt = log_softmax(np.asarray(logits_rt, dtype=np.float64))
    lsm_bw = log_softmax(np.asarray(logits_bw, dtype=np.float64))
    p_rt, p_bw = np.exp(lsm_rt), np.exp(lsm_bw)
    i1 = min(int(np.searchsorted(np.cumsum(p_rt), rng.random())), len(p_rt) - 1)
    i2 = min(int(np.searchsorted(np.cumsum(p_bw), rng.random())), len(p_bw) - 1)
    log_prob = float(lsm_rt[i1] + lsm_bw[i2])
    entropy = float(-(p_rt * lsm_rt).sum() - (p_bw * lsm_bw).sum())
    return i1, i2, log_prob, entropy


# ---------------------------------------------------------------------------
# loss and gradients


def _loss_and_grads(params: PolicyParams, batch: dict, hyper: PpoHyper,
                    consensus=None, want_grads: bool = True):
    states = batch["states"]
    B = states.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    actions = batch["actions"]
    old_logp = batch["old_log_probs"]
    adv = batch["advantages"]
    v_target = batch["v_targets"]
    eps = hyper.clip_eps

    logits_rt, logits_bw, values, acts = forward_batch(params, states, want_cache=True)
    lsm_rt = log_softmax(logits_rt)
    lsm_bw = log_softmax(logits_bw)
    p_rt, p_bw = np.exp(lsm_rt), np.exp(lsm_bw)
    idx = np.arange(B)
    i1, i2 = actions[:, 0], actions[:, 1]
    logp = lsm_rt[idx, i1] + lsm_bw[idx, i2]

    ratio = np.exp(logp - old_logp)
    surr_unclipped = ratio * adv
    surr_clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    take_unclipped = surr_unclipped <= surr_clipped
    policy_term = float(np.minimum(surr_unclipped, surr_clipped).mean())

    value_err = values - v_target
    value_term = float((value_err ** 2).mean())

    h_rt = -(p_rt * lsm_rt).sum(axis=1)
    h_bw = -(p_bw * lsm_bw).sum(axis=1)
    entropy_mean = float((h_rt + h_bw).mean())
    entropy_term = hyper.beta_entropy * entropy_mean

    consensus_term = 0.0
    probe_states = neighbor_values = None
    kappa = 0.0
    if consensus is not None:
        probe_states, neighbor_values, kappa = consensus
        if kappa != 0.0 and len(neighbor_values) > 0:
            _, _, v_probe, probe_acts = forward_batch(params, probe_states, want_cache=True)
            diffs = [v_probe - np.asarray(v_j, dtype=np.float64) for v_j in neighbor_values]
            for d in diffs:
                if d.shape != v_probe.shape:
                    raise ValueError("neighbor value vector length mismatch")
            consensus_term = kappa * float(
                np.mean([float((d ** 2).mean()) for d in diffs]))

    critic_term = value_term + consensus_term
    objective = policy_term - hyper.c1 * critic_term + hyper.c2 * entropy_term
    loss = -objective
    parts = {
        "policy": policy_term,
        "value": value_term,
        "entropy": entropy_term,
        "entropy_raw": entropy_mean,
        "consensus": consensus_term,
        "objective": objective,
        "loss": loss,
        "clip_fraction": float((np.abs(ratio - 1.0) > eps).mean()),
        "approx_kl": float((old_logp - logp).mean()),
    }
    if not want_grads:
        return loss, parts, None

    grads = params.zeros_like()
    # d(loss)/d(logp): surrogate contributes only on the unclipped branch
    g_lp = np.where(take_unclipped, ratio * adv, 0.0) * (-1.0 / B)
    one_rt = np.zeros_like(p_rt)
    one_rt[idx, i1] = 1.0
    one_bw = np.zeros_like(p_bw)
    one_bw[idx, i2] = 1.0
    d_logits_rt = g_lp[:, None] * (one_rt - p_rt)
    d_logits_bw = g_lp[:, None] * (one_bw - p_bw)
    # entropy bonus: loss includes -c2*beta*H, dH/dz = -p*(log p + H)
    coef = hyper.c2 * hyper.beta_entropy / B
    d_logits_rt += coef * p_rt * (lsm_rt + h_rt[:, None])
    d_logits_bw += coef * p_bw * (lsm_bw + h_bw[:, None])
    d_values = (2.0 * hyper.c1 / B) * value_err

    _backprop_heads(params, grads, acts, d_logits_rt, d_logits_bw, d_values)

    if consensus_term != 0.0:
        P = probe_states.shape[0]
        J = len(neighbor_values)
        d_vp = np.zeros(P)
        for v_j in neighbor_values:
            d_vp += v_probe - np.asarray(v_j, dtype=np.float64)
        d_vp *= 2.0 * hyper.c1 * kappa / (J * P)
        zeros_rt = np.zeros((P, params.k1))
        zeros_bw = np.zeros((P, params.k2))
        _backprop_heads(params, grads, probe_acts, zeros_rt, zeros_bw, d_vp)

    return loss, parts, grads


def _backprop_heads(params, grads, acts, d_logits_rt, d_logits_bw, d_values):
    """Accumulate gradients for heads and trunk given head-input deltas."""
    h_last = acts[-1]
    grads.head_rt[0][...] += h_last.T @ d_logits_rt
    grads.head_rt[1][...] += d_logits_rt.sum(axis=0)
    grads.head_bw[0][...] += h_last.T @ d_logits_bw
    grads.head_bw[1][...] += d_logits_bw.sum(axis=0)
    grads.value_head[0][...] += h_last.T @ d_values[:, None]
    grads.value_head[1][...] += d_values.sum(keepdims=True)

    dh = (d_logits_rt @ params.head_rt[0].T
          + d_logits_bw @ params.head_bw[0].T
          + d_values[:, None] @ params.value_head[0].T)
    for layer in range(len(params.trunk) - 1, -1, -1):
        h = acts[layer + 1]
        dz = dh * (1.0 - h * h)
        grads.trunk[layer][0][...] += acts[layer].T @ dz
        grads.trunk[layer][1][...] += dz.sum(axis=0)
        if layer > 0:
            dh = dz @ params.trunk[layer][0].T


def total_loss(batch: dict, params: PolicyParams, hyper: PpoHyper, consensus=None):
    """Negated Eq.-style objective (to minimize) plus per-term breakdown."""
    loss, parts, _ = _loss_and_grads(params, batch, hyper, consensus, want_grads=False)
    return loss, parts


def backward(params: PolicyParams, batch: dict, hyper: PpoHyper, consensus=None) -> PolicyParams:
    """Exact analytic gradient of ``total_loss`` w.r.t. every parameter."""
    _, _, grads = _loss_and_grads(params, batch, hyper, consensus, want_grads=True)
    return grads


class Adam:
    """Adaptive-moment gradient descent on a PolicyParams pytree."""

    def __init__(self, params: PolicyParams, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(a) for a in params.flat_arrays()]
        self._v = [np.zeros_like(a) for a in params.flat_arrays()]

    def step(self, params: PolicyParams, grads: PolicyParams) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for arr, g, m, v in zip(params.flat_arrays(), grads.flat_arrays(), self._m, self._v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            arr -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


class RolloutWorker:
    """Wraps an environment, keeping its current observation across calls."""

    def __init__(self, env):
        self.env = env
        self.obs = None

    def collect(self, params: PolicyParams, horizon: int, rng: np.random.Generator) -> Trajectory:
        if self.obs is None:
            self.obs = self.env.reset()
        D = len(self.obs)
        states = np.empty((horizon, D))
        actions = np.empty((horizon, 2), dtype=np.int64)
        rewards = np.empty(horizon)
        values = np.empty(horizon)
        log_probs = np.empty(horizon)
        dones = np.zeros(horizon)
        done = False
        for t in range(horizon):
            state = np.asarray(self.obs, dtype=np.float64)
            lr, lb, v = forward_batch(params, state[None, :])
            i1, i2, logp, _ = sample_action(lr[0], lb[0], rng)
            obs, reward, done, _info = self.env.step((i1, i2))
            states[t] = state
            actions[t] = (i1, i2)
            rewards[t] = reward
            values[t] = v[0]
            log_probs[t] = logp
            dones[t] = 1.0 if done else 0.0
            self.obs = self.env.reset() if done else obs
        if done:
            bootstrap = 0.0
        else:
            _, _, v = forward_batch(params, np.asarray(self.obs, dtype=np.float64)[None, :])
            bootstrap = float(v[0])
        return Trajectory(states, actions, rewards, values, log_probs, dones, bootstrap)


def update_from_trajectories(params: PolicyParams, trajectories: list[Trajectory],
                             hyper: PpoHyper, rng: np.random.Generator, opt: Adam,
                             consensus=None) -> dict:
    """Run the epochs-of-minibatches update on collected trajectories."""
    batch = build_batch(trajectories, hyper)
    n = batch["states"].shape[0]
    stats_clip = []
    first_clip = None
    last_parts = None
    for _epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.minibatch_size):
            take = order[start:start + hyper.minibatch_size]
            mini = {k: v[take] for k, v in batch.items()}
            _loss, parts, grads = _loss_and_grads(params, mini, hyper, consensus)
            opt.step(params, grads)
            stats_clip.append(parts["clip_fraction"])
            if first_clip is None:
                first_clip = parts["clip_fraction"]
            last_parts = parts

    return {
        "mean_reward": float(np.mean([t.rewards.mean() for t in trajectories])),
        "entropy": float(np.mean([
            entropy_from_logits(forward_batch(params, t.states)[0]).mean()
            + entropy_from_logits(forward_batch(params, t.states)[1]).mean()
            for t in trajectories])),
        "value_loss": last_parts["value"],
        "approx_kl": last_parts["approx_kl"],
        "clip_fraction": float(np.mean(stats_clip)),
        "clip_fraction_first": float(first_clip),
        "batch_size": n,
    }


def ppo_iteration(envs, params: PolicyParams, hyper: PpoHyper,
                  rng: np.random.Generator, opt: Adam | None = None,
                  consensus=None, extra_trajectories=None):
    """One PPO iteration: collect N x T steps, estimate advantages, update.

    ``envs`` may be raw environments or :class:`RolloutWorker` instances
    (the latter preserve episode state across iterations).  Returns
    ``(params, stats)``; the update happens in place on ``params``.
    """
    workers = [e if isinstance(e, RolloutWorker) else RolloutWorker(e) for e in envs]
    if opt is None:
        opt = Adam(params, hyper.learning_rate)

    trajectories = [w.collect(params, hyper.horizon, rng) for w in workers]
    if extra_trajectories:
        trajectories = trajectories + list(extra_trajectories)
    stats = update_from_trajectories(params, trajectories, hyper, rng, opt, consensus)
    return params, stats


def build_batch(trajectories: list[Trajectory], hyper: PpoHyper) -> dict:
    """Concatenate trajectories, compute GAE and normalize advantages."""
    advs, targets = [], []
    for traj in trajectories:
        est = compute_gae(traj, hyper.gamma, hyper.lam)
        advs.append(est.advantages)
        targets.append(est.v_targets)
    adv = np.concatenate(advs)
    adv = (adv - adv.mean()) / max(float(adv.std()), 1e-8)
    return {
        "states": np.concatenate([t.states for t in trajectories]),
        "actions": np.concatenate([t.actions for t in trajectories]),
        "old_log_probs": np.concatenate([t.log_probs for t in trajectories]),
        "advantages": adv,
        "v_targets": np.concatenate(targets),
    }
