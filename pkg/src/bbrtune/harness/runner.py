"""Training, evaluation and comparison runners behind the CLI and service.

Every run writes a manifest (resolved config hash, seeds, package version)
sufficient to reproduce its artifacts byte-for-byte.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import __version__
from ..agents import (
    AgentShareState,
    AgentSystem,
    build_topology,
    make_probe_states,
    probe_values,
    snapshot,
    share_merge,
)
from ..cc_env import CcEnv, EnvStepRecord
from ..errors import CheckpointError, ConfigError
from ..netsim import EventKind
from ..rl_core import (
    Adam,
    PolicyParams,
    PpoHyper,
    RolloutWorker,
    forward,
    load_checkpoint,
    ppo_iteration,
    sample_action,
    save_checkpoint,
)
from ..rl_core.ppo import Trajectory, update_from_trajectories
from .metrics import (
    MetricsReport,
    convergence_times,
    estimation_accuracy,
    peak_rtt,
    rtt_sqerr_cdf,
    throughput_cdf,
)
from .scenario import ScenarioSpec, load_scenario

log = logging.getLogger(__name__)

TRAIN_STATS_HEADER = ("iteration,mean_reward,entropy,value_loss,approx_kl,"
                      "clip_fraction,clip_fraction_first,batch_size")
DEFAULT_ACCURACY_THRESHOLD_MS = 5.0


def _resolve_scenario(scenario) -> ScenarioSpec:
    if isinstance(scenario, ScenarioSpec):
        return scenario
    return load_scenario(scenario)


def resolve_hyper(spec: ScenarioSpec, overrides: Optional[dict] = None) -> PpoHyper:
    merged = {**spec.hyper_overrides, **(overrides or {})}
    base = PpoHyper()
    fields = set(base.__dict__)
    unknown = set(merged) - fields
    if unknown:
        raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
    for int_field in ("epochs", "minibatch_size", "n_actors", "horizon"):
        if int_field in merged:
            merged[int_field] = int(merged[int_field])
    try:
        return PpoHyper(**{**base.to_dict(), **merged})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _manifest(spec: ScenarioSpec, seed: int, kind: str, extra: dict) -> dict:
    return {
        "kind": kind,
        "package_version": __version__,
        "scenario_name": spec.name,
        "scenario_hash": spec.config_hash(),
        "scenario": spec.raw,
        "seed": seed,
        **extra,
    }


@dataclass
class TrainResult:
    checkpoint_path: str
    stats_path: str
    manifest_path: str
    iterations: int
    final_mean_reward: float
    mean_reward_curve: list


def train(scenario, out_dir, seed: Optional[int] = None, iters: Optional[int] = None,
          n_agents: Optional[int] = None, transport: str = "mem",
          hyper_overrides: Optional[dict] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a policy on a scenario; writes checkpoint, stats CSV, manifest."""
    spec = _resolve_scenario(scenario)
    if seed is not None:
        spec = spec.with_seed(seed)
    seed = spec.seed
    iters = spec.train_iters if iters is None else iters
    n_agents = spec.agents.n_rl_agents if n_agents is None else n_agents
    hyper = resolve_hyper(spec, hyper_overrides)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "checkpoint.npz"
    stats_path = out / "training_stats.csv"
    manifest_path = out / "manifest.json"

    grid = spec.env.grid
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    params = PolicyParams.init(spec.env.state_dim, grid.k1, grid.k2, rng=init_rng)

    if n_agents <= 1:
        curve = _train_single(spec, hyper, params, seed, iters, transport,
                              stats_path, progress)
    else:
        curve = _train_multi(spec, hyper, params, seed, iters, n_agents, transport,
                             stats_path, progress)

    save_checkpoint(checkpoint_path, params, hyper.to_dict(), seed,
                    extra={"iterations": iters, "scenario_hash": spec.config_hash()})
    manifest = _manifest(spec, seed, "train", {
        "iterations": iters,
        "n_agents": n_agents,
        "transport": transport,
        "hyper": hyper.to_dict(),
    })
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return TrainResult(
        checkpoint_path=str(checkpoint_path), stats_path=str(stats_path),
        manifest_path=str(manifest_path), iterations=iters,
        final_mean_reward=curve[-1] if curve else 0.0, mean_reward_curve=curve)


def _train_single(spec, hyper, params, seed, iters, transport, stats_path, progress):
    if transport == "mem":
        envs = [CcEnv(spec.world_factory(actor), spec.env,
                      seed=int(np.random.SeedSequence((seed, 303, actor)).generate_state(1)[0]))
                for actor in range(hyper.n_actors)]
    else:
        # exercise the wire protocol during training when asked to
        envs = [
            _wire_env(spec, seed, actor, transport)
            for actor in range(hyper.n_actors)
        ]
    workers = [RolloutWorker(env) for env in envs]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 202)))
    opt = Adam(params, hyper.learning_rate)
    curve = []
    with open(stats_path, "w") as fh:
        fh.write(TRAIN_STATS_HEADER + "\n")
        for it in range(iters):
            _, stats = ppo_iteration(workers, params, hyper, rng, opt)
            curve.append(stats["mean_reward"])
            fh.write(_stats_row(it, stats))
            if progress is not None:
                progress({"iteration": it + 1, "total": iters,
                          "mean_reward": stats["mean_reward"]})
    return curve


def _wire_env(spec, seed, actor, transport):
    from ..agents import SingleAgentEnv
    system = AgentSystem(
        spec.world_factory(actor), spec.env, n_agents=1,
        seed=int(np.random.SeedSequence((seed, 303, actor)).generate_state(1)[0]),
        transport=transport)
    return SingleAgentEnv(system)


def _train_multi(spec, hyper, params, seed, iters, n_agents, transport,
                 stats_path, progress):
    """Cooperative training: shared world, consensus critics, periodic sharing."""
    system = AgentSystem(spec.world_factory(0), spec.env, n_agents=n_agents,
                         seed=int(np.random.SeedSequence((seed, 303, 0)).generate_state(1)[0]),
                         transport=transport)
    topology = build_topology(spec.agents.topology, n_agents)
    probe = make_probe_states(spec.env.state_dim, n=spec.agents.probe_states, seed=seed)
    kappa = spec.agents.kappa
    # sharing period quantized to iteration boundaries
    iter_span_s = hyper.horizon * spec.env.t2_us / 1e6
    share_every = max(1, round(spec.agents.t_share_s / iter_span_s))

    states = []
    opts = []
    rngs = []
    for a in range(n_agents):
        agent_params = params.copy() if a else params
        states.append(AgentShareState(agent_id=a, params=agent_params))
        opts.append(Adam(agent_params, hyper.learning_rate))
        rngs.append(np.random.default_rng(np.random.SeedSequence((seed, 202, a))))

    obs = system.reset_all()
    curve = []
    with open(stats_path, "w") as fh:
        fh.write(TRAIN_STATS_HEADER + "\n")
        for it in range(iters):
            # joint rollout: every agent acts each world step
            T = hyper.horizon
            buf = [{k: [] for k in ("s", "a", "r", "v", "lp", "d")} for _ in range(n_agents)]
            for _t in range(T):
                actions = []
                for a, st_ in enumerate(states):
                    lr, lb, v = forward(st_.params, obs[a])
                    i1, i2, lp, _ = sample_action(lr, lb, rngs[a])
                    actions.append((i1, i2))
                    buf[a]["s"].append(np.asarray(obs[a], dtype=np.float64))
                    buf[a]["v"].append(v)
                    buf[a]["lp"].append(lp)
                    buf[a]["a"].append((i1, i2))
                results = system.step_all(actions)
                done = results[0][2]
                for a, (ob, r, d, _info) in enumerate(results):
                    buf[a]["r"].append(r)
                    buf[a]["d"].append(1.0 if d else 0.0)
                obs = [r[0] for r in results]
                if done:
                    obs = system.reset_all()
            trajs = []
            for a, st_ in enumerate(states):
                if buf[a]["d"][-1]:
                    bootstrap = 0.0
                else:
                    bootstrap = forward(st_.params, obs[a])[2]
                traj = Trajectory(
                    states=np.asarray(buf[a]["s"]),
                    actions=np.asarray(buf[a]["a"], dtype=np.int64),
                    rewards=np.asarray(buf[a]["r"]),
                    values=np.asarray(buf[a]["v"]),
                    log_probs=np.asarray(buf[a]["lp"]),
                    dones=np.asarray(buf[a]["d"]),
                    bootstrap_value=bootstrap)
                st_.trajectories = [traj]
                trajs.append(traj)

            share_event = (it + 1) % share_every == 0 and n_agents > 1
            if share_event:
                snaps = [snapshot(s, stats_summary=None) for s in states]
                for s in states:
                    share_merge(s, [snaps[j] for j in topology[s.agent_id]])

            neighbor_vals = {
                a: [probe_values(states[j].params, probe) for j in topology[a]]
                for a in range(n_agents)
            }
            agent_stats = []
            for a, st_ in enumerate(states):
                consensus = (probe, neighbor_vals[a], kappa) if topology[a] else None
                batch_trajs = st_.trajectories + st_.pooled_trajectories
                st_.pooled_trajectories = []
                stats = update_from_trajectories(
                    st_.params, batch_trajs, hyper, rngs[a], opts[a], consensus)
                agent_stats.append(stats)
            mean_stats = {k: float(np.mean([s[k] for s in agent_stats]))
                          for k in agent_stats[0]}
            curve.append(mean_stats["mean_reward"])
            fh.write(_stats_row(it, mean_stats))
            if progress is not None:
                progress({"iteration": it + 1, "total": iters,
                          "mean_reward": mean_stats["mean_reward"]})
    # the shipped checkpoint is agent 0's policy (post-averaging they agree
    # up to the last unshared updates)
    return curve


def _stats_row(it: int, stats: dict) -> str:
    return (f"{it},{stats['mean_reward']!r},{stats['entropy']!r},"
            f"{stats['value_loss']!r},{stats['approx_kl']!r},"
            f"{stats['clip_fraction']!r},{stats['clip_fraction_first']!r},"
            f"{stats['batch_size']}\n")


@dataclass
class EvalResult:
    report: MetricsReport
    trace_path: str
    steps_path: str
    report_path: str
    manifest_path: str


def evaluate(scenario, out_dir, checkpoint: Optional[str] = None,
             baseline: Optional[str] = None, seed: Optional[int] = None,
             accuracy_threshold_ms: float = DEFAULT_ACCURACY_THRESHOLD_MS,
             online: Optional[bool] = None) -> EvalResult:
    """Run one scenario under a checkpoint policy or the vanilla baseline."""
    spec = _resolve_scenario(scenario)
    if seed is not None:
        spec = spec.with_seed(seed)
    seed = spec.seed
    if (checkpoint is None) == (baseline is None):
        raise ConfigError("pass exactly one of checkpoint or baseline='vanilla'")
    if baseline is not None and baseline != "vanilla":
        raise ConfigError(f"unknown baseline {baseline!r}")
    mode = "vanilla" if baseline else "ppo"

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / f"trace_{mode}.csv"
    steps_path = out / f"steps_{mode}.csv"
    report_path = out / f"report_{mode}.csv"
    manifest_path = out / f"manifest_{mode}.json"

    world = spec.build_world(actor=0, episode=0)
    records: list[EnvStepRecord] = []
    if mode == "vanilla":
        # static windows: never touch the tuner at all
        world.sim.run_until(world.duration_us)
    else:
        params, meta = load_checkpoint(checkpoint)
        grid = spec.env.grid
        if params.k1 != grid.k1 or params.k2 != grid.k2 or \
                params.state_dim != spec.env.state_dim:
            raise CheckpointError(
                f"checkpoint heads ({params.state_dim},{params.k1},{params.k2}) do not "
                f"match scenario ({spec.env.state_dim},{grid.k1},{grid.k2})")
        records = _run_policy(world, spec, params, meta, seed, online)

    trace = world.sim.trace
    trace.to_csv(trace_path)
    with open(steps_path, "w") as fh:
        fh.write(EnvStepRecord.CSV_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")

    controlled = set(spec.controlled_flow_ids())
    rows = trace.rows
    join_leave_times = _flow_event_times(spec)
    report = MetricsReport(
        scenario_name=spec.name,
        scenario_hash=spec.config_hash(),
        seed=seed,
        mode=mode,
        estimation_accuracy=estimation_accuracy(rows, accuracy_threshold_ms, controlled),
        accuracy_threshold_ms=accuracy_threshold_ms,
        peak_rtt_ms=peak_rtt(rows, controlled),
        mean_throughput_bps=float(np.mean([r[2] for r in rows if r[1] in controlled])),
        mean_reward=float(np.mean([r.reward for r in records])) if records else 0.0,
        rtt_sqerr_cdf=rtt_sqerr_cdf(rows, controlled),
        throughput_cdf=throughput_cdf(rows, controlled),
        convergence_events_s=join_leave_times,
        convergence_times_s=convergence_times(rows, join_leave_times, flow_ids=controlled),
    )
    report.to_csv(report_path)
    manifest = _manifest(spec, seed, "eval", {
        "mode": mode,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "accuracy_threshold_ms": accuracy_threshold_ms,
    })
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EvalResult(report=report, trace_path=str(trace_path),
                      steps_path=str(steps_path), report_path=str(report_path),
                      manifest_path=str(manifest_path))


def _flow_event_times(spec: ScenarioSpec) -> list[float]:
    times = []
    for flow in spec.flows:
        if flow.start_s > 0:
            times.append(flow.start_s)
        if flow.stop_s is not None:
            times.append(flow.stop_s)
    for ev in spec.fixed_events:
        if ev.kind in (EventKind.FLOW_JOIN, EventKind.FLOW_LEAVE):
            times.append(ev.at_us / 1e6)
    return sorted(times)


def _run_policy(world, spec: ScenarioSpec, params: PolicyParams, meta: dict,
                seed: int, online: Optional[bool]) -> list[EnvStepRecord]:
    """Greedy per-flow control: every controlled flow gets its own agent view.

    Action selection is the argmax of each head, so evaluation is
    deterministic; optional online updates continue training against the
    evaluation stream at the configured online learning rate.
    """
    from ..cc_env import build_flow_summaries, build_state, compute_reward

    cfg = spec.env
    sim = world.sim
    online = spec.online_updates if online is None else online
    controlled = sorted(world.controlled)
    rngs = {fid: np.random.default_rng(np.random.SeedSequence((seed, 404, fid)))
            for fid in controlled}
    obs = {fid: np.zeros(cfg.state_dim) for fid in controlled}
    records: list[EnvStepRecord] = []
    online_state = None
    if online:
        hyper = resolve_hyper(spec)
        hyper.learning_rate = spec.online_learning_rate
        online_state = {"hyper": hyper, "opt": Adam(params, spec.online_learning_rate),
                        "rng": np.random.default_rng(np.random.SeedSequence((seed, 505))),
                        "buf": []}

    step = 0
    while sim.now_us < world.duration_us:
        actions = {}
        for fid in controlled:
            lr, lb, _v = forward(params, obs[fid])
            actions[fid] = (int(np.argmax(lr)), int(np.argmax(lb)))
        t0 = sim.now_us
        t1 = min(t0 + cfg.t2_us, world.duration_us)
        for fid in controlled:
            flow = sim.flows.get(fid)
            if flow is not None and flow.active:
                w_rt, w_bw = cfg.grid.decode(*actions[fid])
                flow.bbr.set_windows(w_rt, w_bw)
        sim.run_until(t1)
        expected = (t1 - t0) // cfg.t1_us
        reward_acc = []
        for fid in controlled:
            rows = sim.trace.rows_between(t0, t1, {fid})
            ids, feats = build_flow_summaries(rows, expected)
            reward, no_data = compute_reward(feats, cfg.reward)
            prev_obs = obs[fid]
            obs[fid] = build_state(ids, feats, cfg.f_max, rngs[fid],
                                   cfg.scales).reshape(-1)
            reward_acc.append(reward)
            w_rt, w_bw = cfg.grid.decode(*actions[fid])
            with_samples = feats[feats[:, 12] > 0] if len(feats) else feats
            records.append(EnvStepRecord(
                step=step, t_start_us=t0, t_end_us=t1, action=actions[fid],
                w_rt_seconds=w_rt, w_bw_rounds=w_bw, reward=reward,
                mean_throughput_bps=float(feats[:, 9].sum()) if len(feats) else 0.0,
                mean_abs_err_ms=float(with_samples[:, 10].mean()) / 1000.0
                if len(with_samples) else 0.0,
                no_data=no_data, terminal=t1 >= world.duration_us,
                truncated=False, state=obs[fid]))
            if online_state is not None:
                online_state["buf"].append(
                    (prev_obs, actions[fid], reward, obs[fid]))
        if online_state is not None:
            _maybe_online_update(params, online_state)
        step += 1
    return records


def _maybe_online_update(params, state) -> None:
    hyper = state["hyper"]
    buf = state["buf"]
    if len(buf) < hyper.horizon:
        return
    take = buf[:hyper.horizon]
    del buf[:hyper.horizon]
    from ..rl_core import forward_batch
    from ..rl_core.ppo import log_softmax
    states = np.asarray([b[0] for b in take])
    actions = np.asarray([b[1] for b in take], dtype=np.int64)
    rewards = np.asarray([b[2] for b in take])
    lr, lb, values = forward_batch(params, states)
    lsm_rt, lsm_bw = log_softmax(lr), log_softmax(lb)
    idx = np.arange(len(take))
    logps = lsm_rt[idx, actions[:, 0]] + lsm_bw[idx, actions[:, 1]]
    _, _, v_last = forward_batch(params, np.asarray(take[-1][3])[None, :])
    traj = Trajectory(states=states, actions=actions, rewards=rewards,
                      values=values, log_probs=logps, dones=np.zeros(len(take)),
                      bootstrap_value=float(v_last[0]))
    update_from_trajectories(params, [traj], hyper, state["rng"], state["opt"])


@dataclass
class Comparison:
    rows: list
    text: str


def compare_reports(report_a, report_b) -> Comparison:
    """Side-by-side metrics with ratios; both runs must share scenario+seed."""
    a = report_a if isinstance(report_a, MetricsReport) else MetricsReport.from_csv(report_a)
    b = report_b if isinstance(report_b, MetricsReport) else MetricsReport.from_csv(report_b)
    if a.scenario_hash != b.scenario_hash or a.seed != b.seed:
        raise ConfigError(
            "reports come from different scenarios or seeds: "
            f"{a.scenario_name}/{a.seed} vs {b.scenario_name}/{b.seed}")

    def ratio(x, y):
        if x == y:
            return 1.0
        if y == 0:
            return math.inf
        return x / y

    conv_a = _median(a.convergence_times_s)
    conv_b = _median(b.convergence_times_s)
    rows = [
        # B relative to A: accuracy gained, peak RTT shaved, convergence sped up
        ("estimation_accuracy_delta", a.estimation_accuracy, b.estimation_accuracy,
         b.estimation_accuracy - a.estimation_accuracy),
        ("peak_rtt_reduction", a.peak_rtt_ms, b.peak_rtt_ms,
         1.0 - ratio(b.peak_rtt_ms, a.peak_rtt_ms)),
        ("convergence_speedup", conv_a, conv_b, ratio(conv_a, conv_b)),
        ("throughput_ratio", a.mean_throughput_bps, b.mean_throughput_bps,
         ratio(b.mean_throughput_bps, a.mean_throughput_bps)),
    ]
    lines = [f"{'metric':<24}{'A (' + a.mode + ')':>16}{'B (' + b.mode + ')':>16}{'delta/ratio':>14}"]
    for name, va, vb, d in rows:
        lines.append(f"{name:<24}{va:>16.4f}{vb:>16.4f}{d:>14.4f}")
    return Comparison(rows=rows, text="\n".join(lines))


def write_comparison_csv(comparison: Comparison, path) -> None:
    with open(path, "w") as fh:
        fh.write("metric,a,b,delta_or_ratio\n")
        for name, va, vb, d in comparison.rows:
            fh.write(f"{name},{va!r},{vb!r},{d!r}\n")


def _median(values) -> float:
    if not values:
        return 0.0
    s = sorted(values)  # inf sorts last
    n = len(s)
    mid = n // 2
    if n % 2:
        return s[mid]
    lo, hi = s[mid - 1], s[mid]
    return math.inf if math.isinf(hi) else 0.5 * (lo + hi)
