"""Host-side agent: monitor with robustness filters, and the tuner.

The monitor consumes the simulator's T1-sampled trace stream for its
assigned flows, smooths the measurement columns with a low-pass EMA,
discards samples that fail the sanity rules, and summarises each tuning
interval for the RL side.  The tuner writes the two filter windows into
every assigned flow's congestion control state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..cc_env import ActionGrid, build_flow_summaries
from ..netsim import Simulator

log = logging.getLogger(__name__)


@dataclass
class RobustnessConfig:
    ema_alpha: float = 1.0          # 1.0 = filter off
    window: int = 1                 # moving-average width for derived series
    rtt_min_us: float = 1.0
    rtt_max_us: float = 10_000_000.0
    rate_margin: float = 1.5        # accept rates up to margin * capacity
    reward_min: float = -10.0
    reward_max: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.ema_alpha <= 1.0):
            raise ValueError("ema_alpha must lie in (0, 1]")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not (self.rtt_min_us < self.rtt_max_us and self.reward_min < self.reward_max):
            raise ValueError("bounds must be well ordered")


def ema_filter(series: Sequence[float], alpha: float) -> list[float]:
    """Low-pass: y_0 = x_0, y_t = alpha*x_t + (1-alpha)*y_{t-1}."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    out = []
    prev = None
    for x in series:
        prev = x if prev is None else alpha * x + (1.0 - alpha) * prev
        out.append(prev)
    return out


def moving_average(series: Sequence[float], w: int) -> list[float]:
    """y_t = mean(x_{max(0, t-w+1)} .. x_t)."""
    if w < 1:
        raise ValueError("window must be >= 1")
    out = []
    for t in range(len(series)):
        lo = max(0, t - w + 1)
        out.append(math.fsum(series[lo:t + 1]) / (t - lo + 1))
    return out


@dataclass(frozen=True)
class Accept:
    pass


@dataclass(frozen=True)
class Reject:
    rule: str


ACCEPT = Accept()


def sanity_check(measurement=None, action=None, reward=None, *,
                 cfg: RobustnessConfig, grid: Optional[ActionGrid] = None,
                 capacity_bps: Optional[float] = None):
    """Fuzzy-rule gate over a (measurement, action, reward) tuple.

    ``measurement`` is ``(rtt_us, rate_bps)``; any element may be None to
    skip its rules.  Returns :data:`ACCEPT` or ``Reject(rule)``.
    """
    if measurement is not None:
        rtt_us, rate_bps = measurement
        if not (cfg.rtt_min_us <= rtt_us <= cfg.rtt_max_us) or math.isnan(rtt_us):
            return Reject("rtt")
        if math.isnan(rate_bps) or rate_bps < 0:
            return Reject("rate")
        if capacity_bps is not None and rate_bps > capacity_bps * cfg.rate_margin:
            return Reject("rate")
    if action is not None:
        if grid is None:
            raise ValueError("action check needs the grid")
        w_rt, w_bw = action
        if not grid.contains_values(w_rt, w_bw):
            return Reject("action")
    if reward is not None:
        if math.isnan(reward) or not (cfg.reward_min <= reward <= cfg.reward_max):
            return Reject("reward")
    return ACCEPT


@dataclass
class HostAgentConfig:
    agent_id: int
    t1_us: int
    t2_us: int
    flow_ids: tuple[int, ...]

    def __post_init__(self):
        if not (0 < self.t1_us < self.t2_us):
            raise ValueError("need 0 < T1 < T2")


# trace columns smoothed by the monitor's low-pass filter
_EMA_COLUMNS = (2, 3, 4)  # delivery rate, srtt, loss


class HostAgent:
    """Monitor + tuner for one host's set of flows."""

    def __init__(self, config: HostAgentConfig, sim: Simulator,
                 robustness: RobustnessConfig | None = None,
                 grid: ActionGrid | None = None):
        self.config = config
        self.sim = sim
        self.robustness = robustness or RobustnessConfig()
        self.grid = grid or ActionGrid()
        self.rejected_samples = 0
        self.applied_log: list[tuple[int, float, int]] = []
        self._cursor_us = sim.now_us
        self._buffer: list[tuple] = []
        self._ema_state: dict[tuple[int, int], float] = {}

    # -- monitor ---------------------------------------------------------------

    def monitor_tick(self, now_us: int) -> list[tuple]:
        """Pull trace samples up to ``now_us`` through the robustness stack."""
        flows = set(self.config.flow_ids)
        rows = self.sim.trace.rows_between(self._cursor_us, now_us, flows)
        self._cursor_us = now_us
        alpha = self.robustness.ema_alpha
        accepted = []
        for row in rows:
            if row[3] > 0.0:  # srtt == 0 means no measurement yet, nothing to judge
                verdict = sanity_check(measurement=(row[3], row[2]),
                                       cfg=self.robustness, capacity_bps=row[14])
                if isinstance(verdict, Reject):
                    self.rejected_samples += 1
                    continue
            if alpha < 1.0:
                row = self._smooth(row, alpha)
            accepted.append(row)
        self._buffer.extend(accepted)
        return accepted

    def _smooth(self, row: tuple, alpha: float) -> tuple:
        out = list(row)
        for col in _EMA_COLUMNS:
            key = (row[1], col)
            prev = self._ema_state.get(key)
            val = row[col] if prev is None else alpha * row[col] + (1.0 - alpha) * prev
            self._ema_state[key] = val
            out[col] = val
        return tuple(out)

    def interval_summary(self, t0_us: int, t1_us: int):
        """(flow_ids, 13-col features) for the samples in (t0, t1]."""
        if self._cursor_us < t1_us:
            self.monitor_tick(t1_us)
        rows = [r for r in self._buffer if t0_us < r[0] <= t1_us]
        self._buffer = [r for r in self._buffer if r[0] > t1_us]
        expected = (t1_us - t0_us) // self.config.t1_us
        return build_flow_summaries(rows, expected)

    # -- tuner -----------------------------------------------------------------

    def tuner_apply(self, params: tuple[float, int]) -> None:
        """Write both windows into every assigned flow; all-or-nothing."""
        w_rt, w_bw = params
        verdict = sanity_check(action=params, cfg=self.robustness, grid=self.grid)
        if isinstance(verdict, Reject):
            raise ValueError(f"window values {params} outside the action grid")
        for fid in self.config.flow_ids:
            flow = self.sim.flows.get(fid)
            if flow is not None and flow.active:
                flow.bbr.set_windows(w_rt, int(w_bw))
        self.applied_log.append((self.sim.now_us, w_rt, int(w_bw)))
