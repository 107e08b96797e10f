"""PPO core tests: GAE oracles, analytic-vs-numeric gradients, sampling stats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbrtune.rl_core import (
    Adam,
    PolicyParams,
    PpoHyper,
    Trajectory,
    backward,
    clipped_surrogate,
    compute_gae,
    forward,
    forward_batch,
    load_checkpoint,
    ppo_iteration,
    sample_action,
    save_checkpoint,
    total_loss,
)
from bbrtune.rl_core.ppo import build_batch, log_softmax


def make_traj(rewards, values, bootstrap=0.0, dones=None):
    T = len(rewards)
    return Trajectory(
        states=np.zeros((T, 2)),
        actions=np.zeros((T, 2), dtype=np.int64),
        rewards=np.asarray(rewards, dtype=float),
        values=np.asarray(values, dtype=float),
        log_probs=np.zeros(T),
        dones=np.asarray(dones if dones is not None else np.zeros(T), dtype=float),
        bootstrap_value=bootstrap,
    )


def gae_closed_form(rewards, values, bootstrap, gamma, lam):
    """Oracle: A_t = sum_k (gamma*lam)^k * delta_{t+k} (no terminals)."""
    T = len(rewards)
    v_next = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * v_next - values
    adv = np.zeros(T)
    for t in range(T):
        acc = 0.0
        for k in range(T - t):
            acc += (gamma * lam) ** k * deltas[t + k]
        adv[t] = acc
    return adv


class TestGae:
    def test_gamma_zero_collapses_to_rewards(self):
        traj = make_traj([1.0, -2.0, 3.0], [0.0, 0.0, 0.0])
        est = compute_gae(traj, gamma=0.0, lam=0.7)
        assert np.allclose(est.advantages, traj.rewards)

    def test_lambda_one_zero_values_telescopes(self):
        rewards = [1.0, 2.0, 3.0]
        traj = make_traj(rewards, [0.0] * 3)
        est = compute_gae(traj, gamma=0.9, lam=1.0)
        expected = [1 + 0.9 * 2 + 0.81 * 3, 2 + 0.9 * 3, 3.0]
        assert np.allclose(est.advantages, expected)

    def test_hand_unrolled_example(self):
        # r=[1,2], V=[0.5,1.0], bootstrap V=0, gamma=.9, lambda=.5
        traj = make_traj([1.0, 2.0], [0.5, 1.0], bootstrap=0.0)
        est = compute_gae(traj, gamma=0.9, lam=0.5)
        assert est.advantages[1] == pytest.approx(1.0)     # delta1 = 2+0-1
        assert est.advantages[0] == pytest.approx(1.85)    # 1.4 + .45*1.0
        assert np.allclose(est.v_targets, est.advantages + traj.values)

    def test_terminal_masks_bootstrap(self):
        traj = make_traj([1.0, 1.0], [0.5, 0.5], bootstrap=9.9, dones=[0, 1])
        est = compute_gae(traj, gamma=0.9, lam=0.9)
        assert est.advantages[1] == pytest.approx(1.0 - 0.5)

    @given(st.integers(1, 16), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31 - 1))
    @settings(max_examples=300, deadline=None)
    def test_matches_closed_form(self, T, gamma, lam, seed):
        rng = np.random.default_rng(seed)
        rewards = rng.normal(size=T)
        values = rng.normal(size=T)
        bootstrap = float(rng.normal())
        traj = make_traj(rewards, values, bootstrap=bootstrap)
        est = compute_gae(traj, gamma, lam)
        oracle = gae_closed_form(rewards, values, bootstrap, gamma, lam)
        assert np.max(np.abs(est.advantages - oracle)) < 1e-9


class TestClippedSurrogate:
    def test_identity_ratio(self):
        for adv in (-3.0, 0.0, 2.5):
            for eps in (0.1, 0.2, 0.5):
                assert clipped_surrogate(1.0, adv, eps) == pytest.approx(adv)

    def test_positive_advantage_clips_above(self):
        assert clipped_surrogate(1.5, 2.0, 0.2) == pytest.approx(2.4)

    def test_negative_advantage_clips_below(self):
        assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)

    def test_eps_limits(self):
        # tiny eps pins the policy term to the advantage; huge eps frees it
        r, a = 1.7, 1.3
        assert clipped_surrogate(r, a, 1e-9) == pytest.approx(a, rel=1e-6)
        assert clipped_surrogate(r, a, 0.999) == pytest.approx(r * a)


def make_params(rng, d=6, k1=3, k2=4, hidden=(8,)):
    return PolicyParams.init(d, k1, k2, hidden=hidden, rng=rng)


def make_batch(rng, params, params_old, B=8):
    states = rng.normal(size=(B, params.state_dim))
    lr, lb, _ = forward_batch(params_old, states)
    actions = np.stack([
        [sample_action(lr[i], lb[i], rng)[0] for i in range(B)],
        [sample_action(lr[i], lb[i], rng)[1] for i in range(B)],
    ], axis=1).astype(np.int64)
    lsm_rt, lsm_bw = log_softmax(lr), log_softmax(lb)
    idx = np.arange(B)
    old_logp = lsm_rt[idx, actions[:, 0]] + lsm_bw[idx, actions[:, 1]]
    return {
        "states": states,
        "actions": actions,
        "old_log_probs": old_logp,
        "advantages": rng.normal(size=B),
        "v_targets": rng.normal(size=B),
    }


class TestForward:
    def test_zero_weights_uniform_heads_zero_value(self):
        p = make_params(np.random.default_rng(0))
        for arr in p.flat_arrays():
            arr[...] = 0.0
        lr, lb, v = forward(p, np.ones(6))
        assert np.allclose(lr, 0.0) and np.allclose(lb, 0.0)
        assert np.allclose(np.exp(log_softmax(lr)), 1 / 3)
        assert v == 0.0

    def test_purity_bit_identical(self):
        rng = np.random.default_rng(1)
        p = make_params(rng)
        s = rng.normal(size=6)
        out1 = forward(p, s)
        out2 = forward(p, s)
        assert np.array_equal(out1[0], out2[0]) and out1[2] == out2[2]

    def test_value_bounded_by_weight_norms(self):
        """Interval oracle: |v| <= ||w_v||_1 * 1 + |b_v| since tanh in [-1,1]."""
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = make_params(rng)
            s = rng.normal(size=6) * 10
            _, _, v = forward(p, s)
            bound = np.abs(p.value_head[0]).sum() + np.abs(p.value_head[1]).sum()
            assert abs(v) <= bound + 1e-12
            assert np.isfinite(v)

    def test_dimension_mismatch_raises(self):
        p = make_params(np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(p, np.zeros(7))


class TestSampleAction:
    def test_uniform_five_by_five_entropy(self):
        rng = np.random.default_rng(0)
        _, _, _, ent = sample_action(np.zeros(5), np.zeros(5), rng)
        assert ent == pytest.approx(2 * np.log(5), abs=1e-12)

    def test_one_hot_logits_deterministic(self):
        rng = np.random.default_rng(0)
        logits = np.array([1e6, -1e6, -1e6])
        for _ in range(10):
            i1, i2, logp, ent = sample_action(logits, logits, rng)
            assert (i1, i2) == (0, 0)
        assert ent == pytest.approx(0.0, abs=1e-6)
        assert logp == pytest.approx(0.0, abs=1e-6)

    def test_empirical_frequencies_match_softmax(self):
        """10^5 draws per head match softmax within 3 sigma (multinomial)."""
        rng = np.random.default_rng(3)
        logits_rt = np.array([0.3, -0.5, 1.1, 0.0])
        logits_bw = np.array([-1.0, 0.7])
        n = 100_000
        counts_rt = np.zeros(4)
        counts_bw = np.zeros(2)
        for _ in range(n):
            i1, i2, _, _ = sample_action(logits_rt, logits_bw, rng)
            counts_rt[i1] += 1
            counts_bw[i2] += 1
        for counts, logits in ((counts_rt, logits_rt), (counts_bw, logits_bw)):
            p = np.exp(log_softmax(logits))
            sigma = np.sqrt(n * p * (1 - p))
            assert np.all(np.abs(counts - n * p) <= 3 * sigma)

    def test_log_prob_is_sum_of_head_log_probs(self):
        rng = np.random.default_rng(4)
        lr = np.array([0.2, -0.3, 0.5])
        lb = np.array([1.0, 0.0])
        i1, i2, logp, _ = sample_action(lr, lb, rng)
        assert logp == pytest.approx(log_softmax(lr)[i1] + log_softmax(lb)[i2])
        assert logp <= 0.0


class TestTotalLoss:
    def test_ratio_one_policy_term_is_mean_advantage(self):
        rng = np.random.default_rng(5)
        p = make_params(rng)
        batch = make_batch(rng, p, p)  # old == new -> all ratios 1
        _, parts = total_loss(batch, p, PpoHyper())
        assert parts["policy"] == pytest.approx(batch["advantages"].mean())
        assert parts["clip_fraction"] == 0.0

    def test_perfect_value_zero_critic_loss(self):
        rng = np.random.default_rng(6)
        p = make_params(rng)
        batch = make_batch(rng, p, p)
        _, _, v = forward_batch(p, batch["states"])
        batch["v_targets"] = v.copy()
        _, parts = total_loss(batch, p, PpoHyper())
        assert parts["value"] == pytest.approx(0.0, abs=1e-18)

    def test_uniform_heads_entropy_two_ln_five(self):
        rng = np.random.default_rng(7)
        p = PolicyParams.init(6, 5, 5, hidden=(8,), rng=rng)
        for head in (p.head_rt, p.head_bw):
            head[0][...] = 0.0
            head[1][...] = 0.0
        batch = make_batch(rng, p, p)
        batch["actions"][...] = 0
        lsm = log_softmax(forward_batch(p, batch["states"])[0])
        batch["old_log_probs"] = 2 * lsm[:, 0]
        _, parts = total_loss(batch, p, PpoHyper(beta_entropy=1.0))
        assert parts["entropy_raw"] == pytest.approx(2 * np.log(5), abs=1e-12)

    def test_empty_batch_errors(self):
        p = make_params(np.random.default_rng(0))
        batch = {k: np.zeros((0,) + v.shape[1:]) for k, v in
                 make_batch(np.random.default_rng(1), p, p).items()}
        with pytest.raises(ValueError):
            total_loss(batch, p, PpoHyper())


def fd_gradient(params, batch, hyper, consensus=None, h=1e-4):
    grads = params.zeros_like()
    for arr, garr in zip(params.flat_arrays(), grads.flat_arrays()):
        flat = arr.reshape(-1)
        gflat = garr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = total_loss(batch, params, hyper, consensus)
            flat[i] = orig - h
            lm, _ = total_loss(batch, params, hyper, consensus)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
    return grads


def rel_error(ga, gf):
    a = np.concatenate([x.ravel() for x in ga.flat_arrays()])
    f = np.concatenate([x.ravel() for x in gf.flat_arrays()])
    denom = max(np.linalg.norm(a), np.linalg.norm(f), 1e-12)
    return np.linalg.norm(a - f) / denom


class TestBackward:
    def test_zero_value_gradient_at_optimum(self):
        rng = np.random.default_rng(8)
        p = make_params(rng)
        batch = make_batch(rng, p, p)
        _, _, v = forward_batch(p, batch["states"])
        batch["v_targets"] = v.copy()
        batch["advantages"][...] = 0.0  # isolate the critic term
        hyper = PpoHyper(c2=0.0)
        grads = backward(p, batch, hyper)
        assert np.allclose(grads.value_head[0], 0.0, atol=1e-15)
        assert np.allclose(grads.value_head[1], 0.0, atol=1e-15)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        for k in range(5):
            p_old = make_params(rng)
            p = p_old.copy()
            for arr in p.flat_arrays():
                arr += rng.normal(0, 0.05, size=arr.shape)
            batch = make_batch(rng, p, p_old)
            hyper = PpoHyper()
            ga = backward(p, batch, hyper)
            gf = fd_gradient(p, batch, hyper)
            assert rel_error(ga, gf) < 1e-4, f"instance {k}"

    def test_matches_finite_differences_with_consensus(self):
        rng = np.random.default_rng(10)
        p = make_params(rng)
        batch = make_batch(rng, p, p)
        probes = rng.normal(size=(6, p.state_dim))
        neighbors = [rng.normal(size=6), rng.normal(size=6)]
        consensus = (probes, neighbors, 0.5)
        hyper = PpoHyper()
        ga = backward(p, batch, hyper, consensus)
        gf = fd_gradient(p, batch, hyper, consensus)
        assert rel_error(ga, gf) < 1e-4

    def test_policy_gradient_linear_in_advantage_when_unclipped(self):
        rng = np.random.default_rng(11)
        p = make_params(rng)
        batch = make_batch(rng, p, p)  # ratios 1 -> no clip active
        hyper = PpoHyper(c1=0.0, c2=0.0)
        g1 = backward(p, batch, hyper)
        batch2 = dict(batch)
        batch2["advantages"] = 2.0 * batch["advantages"]
        g2 = backward(p, batch2, hyper)
        for a, b in zip(g1.flat_arrays(), g2.flat_arrays()):
            assert np.allclose(2.0 * a, b, atol=1e-12)


class TwoArmedBandit:
    """Arm 0 pays 1.0, arm 1 pays 0.0; every step ends the episode."""

    def __init__(self):
        self._obs = np.zeros(4)

    def reset(self):
        return self._obs

    def step(self, action):
        reward = 1.0 if action[0] == 0 else 0.0
        return self._obs, reward, True, {}


def bandit_hyper():
    return PpoHyper(gamma=0.99, lam=0.95, clip_eps=0.2, c1=0.5, c2=0.01,
                    learning_rate=3e-3, epochs=4, minibatch_size=16,
                    n_actors=2, horizon=16)


class TestPpoIteration:
    def test_bandit_learns_quickly(self):
        rng = np.random.default_rng(12)
        hyper = bandit_hyper()
        params = PolicyParams.init(4, 2, 2, hidden=(16,), rng=rng)
        envs = [TwoArmedBandit() for _ in range(hyper.n_actors)]
        opt = Adam(params, hyper.learning_rate)
        rewards = []
        for _ in range(60):
            params, stats = ppo_iteration(envs, params, hyper, rng, opt)
            rewards.append(stats["mean_reward"])
        assert max(rewards[-10:]) >= 0.85

    def test_first_iteration_first_minibatch_clip_fraction_zero(self):
        rng = np.random.default_rng(13)
        hyper = bandit_hyper()
        params = PolicyParams.init(4, 2, 2, hidden=(16,), rng=rng)
        envs = [TwoArmedBandit() for _ in range(hyper.n_actors)]
        _, stats = ppo_iteration(envs, params, hyper, rng)
        assert stats["clip_fraction_first"] == 0.0
        assert 0.0 <= stats["clip_fraction"] <= 1.0

    def test_fixed_seed_bit_identical_params(self):
        def run():
            rng = np.random.default_rng(14)
            hyper = bandit_hyper()
            params = PolicyParams.init(4, 2, 2, hidden=(16,), rng=rng)
            envs = [TwoArmedBandit() for _ in range(hyper.n_actors)]
            opt = Adam(params, hyper.learning_rate)
            for _ in range(10):
                params, _ = ppo_iteration(envs, params, hyper, rng, opt)
            return params

        a, b = run(), run()
        assert a.allclose(b, atol=0.0)  # bit-identical

    def test_softmax_heads_are_distributions(self):
        rng = np.random.default_rng(15)
        p = make_params(rng)
        states = rng.normal(size=(32, 6))
        lr, lb, _ = forward_batch(p, states)
        for logits in (lr, lb):
            probs = np.exp(log_softmax(logits))
            assert np.all(probs >= 0)
            assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
            ent = -(probs * np.log(np.maximum(probs, 1e-300))).sum(axis=1)
            assert np.all(ent >= 0) and np.all(ent <= np.log(logits.shape[1]) + 1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(16)
        p = make_params(rng)
        path = tmp_path / "model.npz"
        save_checkpoint(path, p, {"learning_rate": 3e-3}, seed=42)
        loaded, meta = load_checkpoint(path)
        assert loaded.allclose(p, atol=0.0)
        assert meta["seed"] == 42
        s = rng.normal(size=6)
        a, b = forward(p, s), forward(loaded, s)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]

    def test_corrupt_file_raises_checkpoint_error(self, tmp_path):
        from bbrtune.errors import CheckpointError
        path = tmp_path / "bad.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
