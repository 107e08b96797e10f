"""Per-flow BBR congestion control with runtime-adjustable filter windows.

BBR models the path through two running estimates: the bottleneck bandwidth
(windowed maximum of delivery-rate samples, window measured in packet-timed
rounds) and the round-trip propagation delay (windowed minimum of RTT
samples, window measured in wall-clock time).  Both window sizes are plain
attributes that a controller may rewrite at any point; everything else
(phases, gains, round accounting) is fixed so that changing the windows is
the only external degree of freedom.

Times are integer microseconds, rates are bits per second, windows follow
the unit of their filter (seconds for the RTT window, rounds for the
bandwidth window).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

MSS = 1500
"""Fixed segment size in bytes; all simulated packets are MSS-sized."""

HIGH_GAIN = 2.0 / math.log(2.0)  # ~2.885, startup pacing/cwnd gain
DRAIN_GAIN = 1.0 / HIGH_GAIN
GAIN_CYCLE = (1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
PROBE_BW_CWND_GAIN = 2.0
STARTUP_GROWTH_TARGET = 1.25  # <25% growth over 3 rounds ends startup
STARTUP_FULL_BW_ROUNDS = 3
PROBE_RTT_DURATION_US = 200_000
MIN_CWND = 4 * MSS
INITIAL_CWND = 10 * MSS
# Conservative pre-sample pacing: one initial window per 100 ms.
INITIAL_PACING_BPS = INITIAL_CWND * 8 * 10.0
# ProbeBW entry points; index 1 (the 0.75 drain slot) is skipped so a flow
# never starts its cycle by backing off, mirroring the reference design.
CYCLE_START_CHOICES = (0, 2, 3, 4, 5, 6, 7)


class Phase(Enum):
    STARTUP = "Startup"
    DRAIN = "Drain"
    PROBE_BW = "ProbeBW"
    PROBE_RTT = "ProbeRTT"


class WindowedMaxFilter:
    """Running maximum over samples whose round stamp is within the window.

    Entries are kept on a monotonic deque (values strictly decreasing from
    front to back), which returns exactly the same maximum as a brute-force
    scan over every sample inserted with a stamp inside the window: a newer
    sample with an equal-or-greater value dominates an older one under every
    possible window, so dominated entries can be discarded eagerly.

    Shrinking the window takes effect on the next query; growing it cannot
    resurrect entries that were already evicted.
    """

    __slots__ = ("window", "_entries")

    def __init__(self, window: int):
        if window < 1:
            raise ValueError("window must be >= 1 round")
        self.window = int(window)
        self._entries: deque[tuple[int, float]] = deque()

    def insert(self, stamp: int, value: float) -> None:
        entries = self._entries
        while entries and entries[-1][1] <= value:
            entries.pop()
        entries.append((stamp, value))
        self._evict(stamp)

    def query(self, current_stamp: int) -> Optional[float]:
        self._evict(current_stamp)
        return self._entries[0][1] if self._entries else None

    def _evict(self, current_stamp: int) -> None:
        entries = self._entries
        limit = current_stamp - self.window
        while entries and entries[0][0] <= limit:
            entries.popleft()

    def __len__(self) -> int:
        return len(self._entries)


class WindowedMinFilter:
    """Running minimum over samples whose time stamp is within the window.

    Mirror image of :class:`WindowedMaxFilter`.  A sample equal to the
    current minimum replaces it, refreshing the front entry's stamp.

    ``last_min_refresh_us`` records the last time a sample became (or
    re-confirmed) the minimum.  Eviction does not touch it: when the true
    minimum keeps rising, the surviving entries are newer but were never
    minima themselves, and the staleness clock must keep running from the
    old minimum's observation time.  This is what arms the ProbeRTT probe.
    """

    __slots__ = ("window_us", "_entries", "last_min_refresh_us")

    def __init__(self, window_us: int):
        if window_us <= 0:
            raise ValueError("window must be positive")
        self.window_us = int(window_us)
        self._entries: deque[tuple[int, float]] = deque()
        self.last_min_refresh_us: Optional[int] = None

    def insert(self, stamp_us: int, value: float) -> None:
        entries = self._entries
        while entries and entries[-1][1] >= value:
            entries.pop()
        if not entries:
            self.last_min_refresh_us = stamp_us
        entries.append((stamp_us, value))
        self._evict(stamp_us)

    def query(self, now_us: int) -> Optional[float]:
        self._evict(now_us)
        return self._entries[0][1] if self._entries else None

    def mark_refreshed(self, now_us: int) -> None:
        """Restart the staleness clock (the minimum was just verified)."""
        self.last_min_refresh_us = now_us

    def _evict(self, now_us: int) -> None:
        entries = self._entries
        limit = now_us - self.window_us
        while entries and entries[0][0] <= limit:
            entries.popleft()

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(frozen=True)
class ControlOutputs:
    pacing_rate_bps: float
    cwnd_bytes: int


class BbrModel:
    """BBR state machine for one flow.

    The caller feeds per-ACK measurements through :meth:`on_rtt_sample`,
    :meth:`on_delivery_sample` and :meth:`tick_state_machine`, then reads
    :meth:`control_outputs`.  ``set_windows`` is the single tuning surface.
    """

    def __init__(
        self,
        mss: int = MSS,
        w_rt_seconds: float = 10.0,
        w_bw_rounds: int = 8,
        cycle_rand: Optional[Callable[[], int]] = None,
    ):
        self.mss = mss
        self.rtprop_filter = WindowedMinFilter(int(round(w_rt_seconds * 1e6)))
        self.btlbw_filter = WindowedMaxFilter(w_bw_rounds)
        self._cycle_rand = cycle_rand or (lambda: 0)

        self.phase = Phase.STARTUP
        self.pacing_gain = HIGH_GAIN
        self.cwnd_gain = HIGH_GAIN
        self.round_count = 0
        self.cycle_index = 0
        self._cycle_stamp_us = 0

        self._full_bw = 0.0
        self._full_bw_count = 0
        self.full_bw_reached = False

        self._probe_rtt_done_at: Optional[int] = None
        self._probe_rtt_min: Optional[float] = None
        self._min_rtt_expired = False
        self.latest_rtt_us = 0

    # -- measurement intake ------------------------------------------------

    def on_rtt_sample(self, rtt_us: int, now_us: int) -> None:
        if rtt_us <= 0:
            raise ValueError(f"non-positive rtt sample: {rtt_us}")
        self.latest_rtt_us = rtt_us
        # Staleness must be judged before the insert: expiry of the old
        # minimum promotes some recent (possibly queue-inflated) sample to
        # "minimum", and that promotion is exactly the situation ProbeRTT
        # exists to verify by draining the pipe.
        stamp = self.rtprop_filter.last_min_refresh_us
        if stamp is not None and now_us - stamp > self.rtprop_filter.window_us:
            self._min_rtt_expired = True
        self.rtprop_filter.insert(now_us, float(rtt_us))
        if self.phase is Phase.PROBE_RTT:
            if self._probe_rtt_min is None or rtt_us < self._probe_rtt_min:
                self._probe_rtt_min = float(rtt_us)

    def on_delivery_sample(self, rate_bps: float, round_count: int) -> None:
        if rate_bps < 0:
            raise ValueError(f"negative delivery rate: {rate_bps}")
        self.btlbw_filter.insert(round_count, rate_bps)

    # -- estimates ----------------------------------------------------------

    @property
    def btlbw_bps(self) -> Optional[float]:
        return self.btlbw_filter.query(self.round_count)

    def rtprop_us(self, now_us: int) -> Optional[float]:
        return self.rtprop_filter.query(now_us)

    def bdp_bytes(self, now_us: int, gain: float = 1.0) -> Optional[float]:
        bw = self.btlbw_bps
        rt = self.rtprop_us(now_us)
        if bw is None or rt is None:
            return None
        return gain * bw * rt / 8e6

    # -- tuning surface ------------------------------------------------------

    def set_windows(self, w_rt_seconds: float, w_bw_rounds: int) -> None:
        """Update both filter windows; rejects out-of-range values whole.

        Existing entries are re-evaluated against the new windows on the
        next query; nothing is re-inserted retroactively.
        """
        if not (w_rt_seconds > 0):
            raise ValueError(f"w_rt must be positive, got {w_rt_seconds}")
        if not (w_bw_rounds >= 1):
            raise ValueError(f"w_bw must be >= 1 round, got {w_bw_rounds}")
        self.rtprop_filter.window_us = int(round(w_rt_seconds * 1e6))
        self.btlbw_filter.window = int(w_bw_rounds)

    @property
    def windows(self) -> tuple[float, int]:
        return (self.rtprop_filter.window_us / 1e6, self.btlbw_filter.window)

    # -- control outputs -----------------------------------------------------

    def control_outputs(self, now_us: int) -> ControlOutputs:
        bw = self.btlbw_bps
        rt = self.rtprop_us(now_us)
        if bw is None or rt is None:
            return ControlOutputs(INITIAL_PACING_BPS, INITIAL_CWND)
        if self.phase is Phase.PROBE_RTT:
            return ControlOutputs(bw, MIN_CWND)
        cwnd = max(int(self.cwnd_gain * bw * rt / 8e6), MIN_CWND)
        return ControlOutputs(self.pacing_gain * bw, cwnd)

    # -- state machine --------------------------------------------------------

    def tick_state_machine(self, now_us: int, inflight_bytes: int, round_start: bool) -> Phase:
        """Advance the phase machine; call once per ACK-processing step."""
        if self.phase is Phase.STARTUP:
            if round_start:
                self._check_full_bw()
            if self.full_bw_reached:
                self.phase = Phase.DRAIN
                self.pacing_gain = DRAIN_GAIN
                self.cwnd_gain = HIGH_GAIN
        if self.phase is Phase.DRAIN:
            bdp = self.bdp_bytes(now_us)
            if bdp is not None and inflight_bytes <= bdp:
                self._enter_probe_bw(now_us)
        if self.phase is Phase.PROBE_BW:
            self._advance_cycle(now_us, inflight_bytes)
        self._update_probe_rtt(now_us, inflight_bytes)
        return self.phase

    def _check_full_bw(self) -> None:
        bw = self.btlbw_bps
        if bw is None:
            return
        if bw >= self._full_bw * STARTUP_GROWTH_TARGET:
            self._full_bw = bw
            self._full_bw_count = 0
            return
        self._full_bw_count += 1
        if self._full_bw_count >= STARTUP_FULL_BW_ROUNDS:
            self.full_bw_reached = True

    def _enter_probe_bw(self, now_us: int) -> None:
        self.phase = Phase.PROBE_BW
        self.cwnd_gain = PROBE_BW_CWND_GAIN
        self.cycle_index = CYCLE_START_CHOICES[self._cycle_rand() % len(CYCLE_START_CHOICES)]
        self._cycle_stamp_us = now_us
        self.pacing_gain = GAIN_CYCLE[self.cycle_index]

    def _advance_cycle(self, now_us: int, inflight_bytes: int) -> None:
        rt = self.rtprop_us(now_us)
        if rt is None:
            return
        elapsed = (now_us - self._cycle_stamp_us) > rt
        gain = GAIN_CYCLE[self.cycle_index]
        if gain > 1.0:
            target = self.bdp_bytes(now_us, gain)
            advance = elapsed and target is not None and inflight_bytes >= target
        elif gain < 1.0:
            target = self.bdp_bytes(now_us)
            advance = elapsed or (target is not None and inflight_bytes <= target)
        else:
            advance = elapsed
        if advance:
            self.cycle_index = (self.cycle_index + 1) % len(GAIN_CYCLE)
            self._cycle_stamp_us = now_us
            self.pacing_gain = GAIN_CYCLE[self.cycle_index]

    def _update_probe_rtt(self, now_us: int, inflight_bytes: int) -> None:
        if self.phase is not Phase.PROBE_RTT:
            stamp = self.rtprop_filter.last_min_refresh_us
            if stamp is None:
                return
            if self._min_rtt_expired or now_us - stamp > self.rtprop_filter.window_us:
                self._min_rtt_expired = False
                self.phase = Phase.PROBE_RTT
                self.pacing_gain = 1.0
                self.cwnd_gain = 1.0
                self._probe_rtt_done_at = None
                self._probe_rtt_min = None
            return
        # Inside ProbeRTT: wait for inflight to drain, hold, then leave.
        if self._probe_rtt_done_at is None:
            if inflight_bytes <= MIN_CWND:
                hold = max(PROBE_RTT_DURATION_US, self.latest_rtt_us)
                self._probe_rtt_done_at = now_us + hold
        elif now_us >= self._probe_rtt_done_at:
            self._exit_probe_rtt(now_us)

    def _exit_probe_rtt(self, now_us: int) -> None:
        # The drained-pipe minimum observed during the probe is a genuine
        # fresh measurement; reinsert it so its stamp reflects the probe.
        fresh = self._probe_rtt_min
        if fresh is None:
            fresh = self.rtprop_filter.query(now_us)
        if fresh is not None:
            self.rtprop_filter.insert(now_us, fresh)
        self.rtprop_filter.mark_refreshed(now_us)
        self._min_rtt_expired = False
        self._probe_rtt_done_at = None
        self._probe_rtt_min = None
        if self.full_bw_reached:
            self._enter_probe_bw(now_us)
        else:
            self.phase = Phase.STARTUP
            self.pacing_gain = HIGH_GAIN
            self.cwnd_gain = HIGH_GAIN
