"""RL environment: state table, action grid, reward, and the T2 step loop.

Each controller step decodes a discrete action pair into the two BBR filter
windows, applies them to every controlled flow, advances the simulator by
one tuning interval (T2) while the monitor stream samples flow stats every
T1, and folds the sampled interval into the next state and the reward.

The per-flow interval summary (:func:`build_flow_summaries`) is the single
aggregation path shared by this module and the host-agent pipeline, so a
one-agent deployment reduces bit-exactly to driving this environment
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .netsim import Simulator

STATE_FEATURES = (
    "delivery_rate_bps",
    "srtt_us",
    "loss_rate",
    "cwnd_bytes",
    "pacing_rate_bps",
    "btlbw_bps",
    "rtprop_us",
    "pacing_gain",
    "cwnd_gain",
)
SUMMARY_FEATURES = STATE_FEATURES + (
    "interval_mean_delivery_rate_bps",
    "interval_mean_abs_rtprop_err_us",
    "interval_true_min_rtt_us",
    "interval_sample_count",
)
N_STATE_FEATURES = len(STATE_FEATURES)
N_SUMMARY_FEATURES = len(SUMMARY_FEATURES)


@dataclass(frozen=True)
class ActionGrid:
    """Discrete options for the two filter windows.

    Defaults span the static values (10 s, 8 rounds) so the controller can
    always fall back to stock behaviour.
    """

    rt_seconds: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0, 10.0)
    bw_rounds: tuple[int, ...] = (2, 4, 8, 16, 32)

    def __post_init__(self):
        for opts in (self.rt_seconds, self.bw_rounds):
            if any(b <= a for a, b in zip(opts, opts[1:])):
                raise ValueError("grid options must be strictly increasing")

    @property
    def k1(self) -> int:
        return len(self.rt_seconds)

    @property
    def k2(self) -> int:
        return len(self.bw_rounds)

    def decode(self, i1: int, i2: int) -> tuple[float, int]:
        if not (0 <= i1 < self.k1 and 0 <= i2 < self.k2):
            raise IndexError(f"action ({i1}, {i2}) outside grid {self.k1}x{self.k2}")
        return self.rt_seconds[i1], self.bw_rounds[i2]

    def index_of(self, w_rt: float, w_bw: int) -> tuple[int, int]:
        return self.rt_seconds.index(w_rt), self.bw_rounds.index(w_bw)

    def default_index(self) -> tuple[int, int]:
        return self.index_of(10.0, 8)

    def contains_values(self, w_rt: float, w_bw: float) -> bool:
        return (self.rt_seconds[0] <= w_rt <= self.rt_seconds[-1]
                and self.bw_rounds[0] <= w_bw <= self.bw_rounds[-1])


def decode_action(i1: int, i2: int, grid: ActionGrid) -> tuple[float, int]:
    return grid.decode(i1, i2)


@dataclass
class PidConfig:
    k_p: float = 0.0
    k_d: float = 0.0
    k_i: float = 0.0


@dataclass
class RewardConfig:
    alpha: float = 0.5
    normalizer_bps: float = 10e6
    # sigmoid steepness per millisecond of estimation error; 0.05/ms roughly
    # halves the latency term at 20 ms of error
    sigmoid_scale_per_ms: float = 0.05
    # the latency term peaks at 0.5 (sigmoid at zero); this factor can lift
    # it to 1.0 but defaults to the formula as written
    zero_error_gain: float = 1.0
    pid: Optional[PidConfig] = None

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.normalizer_bps <= 0:
            raise ValueError("normalizer must be positive")


@dataclass
class NormScales:
    rate_bps: float = 20e6
    time_us: float = 1e6
    cwnd_bytes: float = 1e6
    gain: float = 4.0


@dataclass
class EnvConfig:
    f_max: int = 8
    t1_us: int = 100_000
    t2_us: int = 2_000_000
    grid: ActionGrid = field(default_factory=ActionGrid)
    reward: RewardConfig = field(default_factory=RewardConfig)
    scales: NormScales = field(default_factory=NormScales)

    def __post_init__(self):
        if self.t1_us <= 0 or self.t2_us <= 0 or self.t1_us >= self.t2_us:
            raise ValueError("need 0 < T1 < T2")

    @property
    def state_dim(self) -> int:
        return self.f_max * N_STATE_FEATURES

    @property
    def samples_per_step(self) -> int:
        return self.t2_us // self.t1_us


def build_flow_summaries(rows: Sequence[tuple], expected_samples: int):
    """Fold one interval of trace rows into per-flow 13-feature summaries.

    Rows are netsim trace tuples.  Returns ``(flow_ids, features)`` with
    rows sorted by flow id.  Interval means are taken over the full sample
    grid (missing samples count as zero delivery), so summing the per-flow
    interval rates reproduces the aggregate interval throughput.
    """
    per_flow: dict[int, list[tuple]] = {}
    for row in rows:
        per_flow.setdefault(row[1], []).append(row)
    flow_ids = sorted(per_flow)
    feats = np.zeros((len(flow_ids), N_SUMMARY_FEATURES))
    denom = max(expected_samples, 1)
    for k, fid in enumerate(flow_ids):
        frows = per_flow[fid]
        last = frows[-1]
        feats[k, 0:9] = (last[2], last[3], last[4], last[5], last[6],
                         last[8], last[9], last[10], last[11])
        feats[k, 9] = math.fsum(r[2] for r in frows) / denom
        errs = [abs(r[9] - r[13]) for r in frows if r[9] > 0.0]
        feats[k, 10] = math.fsum(errs) / len(errs) if errs else 0.0
        feats[k, 11] = min(r[13] for r in frows)
        feats[k, 12] = float(len(frows))
    return flow_ids, feats


def build_state(flow_ids: Sequence[int], features: np.ndarray, f_max: int,
                rng: np.random.Generator, scales: NormScales) -> np.ndarray:
    """Normalized (F_max, 9) state table, zero-padded or down-sampled.

    More flows than rows: a seeded uniform sample without replacement picks
    which flows appear; row order stays sorted by flow id either way.
    """
    n = len(flow_ids)
    if n > f_max:
        pick = np.sort(rng.choice(n, size=f_max, replace=False))
        features = features[pick]
        n = f_max
    table = np.zeros((f_max, N_STATE_FEATURES))
    if n:
        raw = features[:n, :N_STATE_FEATURES]
        table[:n, 0] = raw[:, 0] / scales.rate_bps
        table[:n, 1] = raw[:, 1] / scales.time_us
        table[:n, 2] = raw[:, 2]
        table[:n, 3] = raw[:, 3] / scales.cwnd_bytes
        table[:n, 4] = raw[:, 4] / scales.rate_bps
        table[:n, 5] = raw[:, 5] / scales.rate_bps
        table[:n, 6] = raw[:, 6] / scales.time_us
        table[:n, 7] = raw[:, 7] / scales.gain
        table[:n, 8] = raw[:, 8] / scales.gain
    return np.clip(table, 0.0, 1.0)


def compute_reward(features: np.ndarray, cfg: RewardConfig) -> tuple[float, bool]:
    """alpha * throughput/normalizer + (1-alpha) * sigmoid(|estimate error|).

    Returns ``(reward, no_data)``; an interval without a single sample
    scores zero with the flag set.
    """
    with_samples = features[features[:, 12] > 0] if len(features) else features
    if len(with_samples) == 0:
        return 0.0, True
    throughput = float(features[:, 9].sum())
    err_ms = float(with_samples[:, 10].mean()) / 1000.0
    x = min(cfg.sigmoid_scale_per_ms * err_ms, 700.0)  # exp overflow guard
    latency_term = cfg.zero_error_gain / (1.0 + math.exp(x))
    return cfg.alpha * throughput / cfg.normalizer_bps + (1.0 - cfg.alpha) * latency_term, False


def pid_terms(series: Sequence[tuple], cfg: PidConfig) -> tuple[float, float, float]:
    """P/D/I components from an interval series of
    ``(t_seconds, throughput_bps, latency_s, latency_estimate_s)``.

    D uses the least-squares slope of latency over time; I integrates the
    signed estimate error.  Zero mean latency makes P undefined.
    """
    if not series:
        raise ValueError("empty series")
    t = np.array([row[0] for row in series])
    thr = np.array([row[1] for row in series])
    lat = np.array([row[2] for row in series])
    est = np.array([row[3] for row in series])
    mean_lat = float(lat.mean())
    if mean_lat == 0.0:
        raise ValueError("latency is zero; proportional term undefined")
    p = cfg.k_p * float(thr.mean()) / mean_lat
    if len(series) >= 2:
        t_c = t - t.mean()
        denom = float((t_c ** 2).sum())
        slope = float((t_c * lat).sum()) / denom if denom > 0 else 0.0
    else:
        slope = 0.0
    d = cfg.k_d * slope
    integral = float(((est[1:] - lat[1:]) * np.diff(t)).sum())
    i = cfg.k_i * integral
    return p, d, i


@dataclass
class EnvStepRecord:
    """One tuning step: state, decoded action, reward, interval aggregates."""

    step: int
    t_start_us: int
    t_end_us: int
    action: tuple[int, int]
    w_rt_seconds: float
    w_bw_rounds: int
    reward: float
    mean_throughput_bps: float
    mean_abs_err_ms: float
    no_data: bool
    terminal: bool
    truncated: bool
    state: np.ndarray = None

    CSV_HEADER = ("step,t_start_us,t_end_us,action_rt,action_bw,w_rt_seconds,"
                  "w_bw_rounds,reward,mean_throughput_bps,mean_abs_err_ms,"
                  "no_data,terminal,truncated")

    def csv_row(self) -> str:
        return ",".join(str(v) for v in (
            self.step, self.t_start_us, self.t_end_us, self.action[0], self.action[1],
            self.w_rt_seconds, self.w_bw_rounds, repr(self.reward),
            repr(self.mean_throughput_bps), repr(self.mean_abs_err_ms),
            int(self.no_data), int(self.terminal), int(self.truncated)))


@dataclass
class SimWorld:
    """One episode's simulation: the simulator, who we control, how long."""

    sim: Simulator
    controlled: list[int]
    duration_us: int


class CcEnv:
    """Gym-style environment over a factory of seeded simulation worlds."""

    def __init__(self, world_factory: Callable[[int], SimWorld], config: EnvConfig,
                 seed: int = 0):
        self.factory = world_factory
        self.config = config
        self.seed = seed
        self.episode = -1
        self.world: SimWorld | None = None
        self.rng: np.random.Generator | None = None
        self._step_count = 0
        self.last_record: EnvStepRecord | None = None

    def reset(self) -> np.ndarray:
        self.episode += 1
        self.world = self.factory(self.episode)
        self.rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, self.episode)))
        self._step_count = 0
        return np.zeros(self.config.state_dim)

    def step(self, action: tuple[int, int]):
        if self.world is None:
            raise RuntimeError("step before reset")
        cfg = self.config
        sim = self.world.sim
        w_rt, w_bw = cfg.grid.decode(*action)
        controlled = set(self.world.controlled)
        for fid in sorted(controlled):
            flow = sim.flows.get(fid)
            if flow is not None and flow.active:
                flow.bbr.set_windows(w_rt, w_bw)

        t0 = sim.now_us
        t1 = min(t0 + cfg.t2_us, self.world.duration_us)
        sim.run_until(t1)
        rows = sim.trace.rows_between(t0, t1, controlled)
        expected = (t1 - t0) // cfg.t1_us
        flow_ids, feats = build_flow_summaries(rows, expected)
        reward, no_data = compute_reward(feats, cfg.reward)
        if cfg.reward.pid is not None and rows:
            series = _pid_series(rows, cfg.t1_us)
            try:
                p, d, i = pid_terms(series, cfg.reward.pid)
                reward += p + d + i
            except ValueError:
                pass
        obs = build_state(flow_ids, feats, cfg.f_max, self.rng, cfg.scales).reshape(-1)
        terminal = t1 >= self.world.duration_us
        truncated = terminal and (t1 - t0) < cfg.t2_us
        with_samples = feats[feats[:, 12] > 0] if len(feats) else feats
        record = EnvStepRecord(
            step=self._step_count,
            t_start_us=t0,
            t_end_us=t1,
            action=tuple(action),
            w_rt_seconds=w_rt,
            w_bw_rounds=w_bw,
            reward=reward,
            mean_throughput_bps=float(feats[:, 9].sum()) if len(feats) else 0.0,
            mean_abs_err_ms=float(with_samples[:, 10].mean()) / 1000.0 if len(with_samples) else 0.0,
            no_data=no_data,
            terminal=terminal,
            truncated=truncated,
            state=obs,
        )
        self.last_record = record
        self._step_count += 1
        return obs, reward, terminal, {"record": record}


def _pid_series(rows: Sequence[tuple], t1_us: int) -> list[tuple]:
    """Aggregate trace rows into (t_s, throughput, latency_s, estimate_s)."""
    by_time: dict[int, list[tuple]] = {}
    for r in rows:
        by_time.setdefault(r[0], []).append(r)
    series = []
    for t in sorted(by_time):
        group = by_time[t]
        thr = math.fsum(g[2] for g in group)
        lat = math.fsum(g[3] for g in group) / len(group) / 1e6
        est = math.fsum(g[9] for g in group) / len(group) / 1e6
        series.append((t / 1e6, thr, lat, est))
    return series
