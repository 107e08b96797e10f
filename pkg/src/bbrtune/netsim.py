"""Deterministic packet-level simulator of a single-bottleneck dumbbell.

One FIFO drop-tail queue sits in front of the bottleneck link; senders are
BBR flows that pace MSS-sized packets subject to their congestion window.
The ACK path is delay-only.  All state advances through a single event heap
keyed by integer microseconds, with ties broken by insertion order, so a
``(seed, scenario)`` pair fully determines every trace byte.

Modelling choices that matter to consumers:

* Packet service times are computed at admission from the capacity in
  effect at that moment (``departure = max(now, head_departure) + size*8/C``).
* Latency changes apply to packets transmitted after the event; packets
  already in flight keep the propagation delay they were sent with.
* A sender learns about a queue drop one round trip after sending (there is
  no retransmission and BBR takes no loss action, but in-flight accounting
  must close).
"""

from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from random import Random
from typing import Optional

from .bbr import MSS, BbrModel, ControlOutputs, Phase

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "time_us",
    "flow_id",
    "delivery_rate_bps",
    "srtt_us",
    "loss_rate",
    "cwnd_bytes",
    "pacing_rate_bps",
    "queue_backlog_bytes",
    "btlbw_bps",
    "rtprop_us",
    "pacing_gain",
    "cwnd_gain",
    "phase",
    "true_min_rtt_us",
    "true_capacity_bps",
)

SRTT_ALPHA = 0.125  # standard smoothed-RTT weight

# event codes, dispatched by integer compare in the hot loop
_EV_SCENARIO = 0
_EV_SEND = 1
_EV_ACK = 2
_EV_DROP = 3
_EV_TRACE = 4


class EventKind(Enum):
    SET_BANDWIDTH = "set_bandwidth"
    SET_LATENCY = "set_latency"
    FLOW_JOIN = "flow_join"
    FLOW_LEAVE = "flow_leave"


@dataclass(frozen=True)
class NetworkEvent:
    at_us: int
    kind: EventKind
    value: float  # bps for bandwidth, one-way prop µs for latency, flow id otherwise


@dataclass
class LinkSpec:
    capacity_bps: float
    prop_delay_us: int
    buffer_bytes: int

    def __post_init__(self):
        if self.capacity_bps <= 0:
            raise ValueError("capacity must be positive")
        if self.prop_delay_us < 0:
            raise ValueError("propagation delay must be non-negative")
        if self.buffer_bytes < MSS:
            raise ValueError("buffer must hold at least one maximum-size packet")


@dataclass
class QueueState:
    backlog: int = 0
    drops: int = 0
    head_departure: int = 0
    pending: deque = field(default_factory=deque)  # (departure_us, size)
    service_residual: float = 0.0  # sub-microsecond carry, keeps rates unbiased

    def drain(self, now_us: int) -> None:
        pending = self.pending
        while pending and pending[0][0] <= now_us:
            self.backlog -= pending.popleft()[1]


def service_time_us(size_bytes: int, capacity_bps: float) -> int:
    return max(1, round(size_bytes * 8e6 / capacity_bps))


def bottleneck_transit(now_us: int, size: int, queue: QueueState, link: LinkSpec) -> Optional[int]:
    """Admit one packet to the bottleneck; returns departure time or None on drop."""
    queue.drain(now_us)
    if queue.backlog + size > link.buffer_bytes:
        queue.drops += 1
        return None
    # Integer departure times with error diffusion: truncating every service
    # to whole microseconds would bias the served rate by up to 0.1%, which
    # a windowed-max rate filter happily latches onto.
    exact = size * 8e6 / link.capacity_bps + queue.service_residual
    service = max(1, int(exact))
    queue.service_residual = exact - service
    departure = max(now_us, queue.head_departure) + service
    queue.head_departure = departure
    queue.backlog += size
    queue.pending.append((departure, size))
    return departure


@dataclass(frozen=True)
class FlowStats:
    flow_id: int
    delivery_rate_bps: float
    srtt_us: float
    min_rtt_observed_us: float
    loss_rate: float
    cwnd_bytes: int
    pacing_rate_bps: float
    sample_window_us: int
    no_data: bool = False


class _Packet:
    __slots__ = ("flow_id", "seq", "size", "sent_at", "prop_us",
                 "delivered_snapshot", "delivered_time_snapshot")

    def __init__(self, flow_id, seq, size, sent_at, prop_us,
                 delivered_snapshot, delivered_time_snapshot):
        self.flow_id = flow_id
        self.seq = seq
        self.size = size
        self.sent_at = sent_at
        self.prop_us = prop_us
        self.delivered_snapshot = delivered_snapshot
        self.delivered_time_snapshot = delivered_time_snapshot


class _Flow:
    __slots__ = (
        "flow_id", "bbr", "active", "joined_at", "sent_bytes", "delivered_bytes",
        "dropped_bytes", "inflight_bytes", "next_seq", "srtt_us", "min_rtt_observed_us",
        "last_delivery_us",
        "next_pace_at", "send_scheduled", "cwnd_bytes", "pacing_rate_bps",
        "next_round_delivered", "ack_log", "send_log", "drop_log",
    )

    def __init__(self, flow_id: int, bbr: BbrModel, now_us: int):
        self.flow_id = flow_id
        self.bbr = bbr
        self.active = True
        self.joined_at = now_us
        self.sent_bytes = 0
        self.delivered_bytes = 0
        self.dropped_bytes = 0
        self.inflight_bytes = 0
        self.next_seq = 0
        self.srtt_us = 0.0
        self.min_rtt_observed_us = float("inf")
        self.last_delivery_us = now_us
        self.next_pace_at = now_us
        self.send_scheduled = False
        out = bbr.control_outputs(now_us)
        self.cwnd_bytes = out.cwnd_bytes
        self.pacing_rate_bps = out.pacing_rate_bps
        self.next_round_delivered = 0
        self.ack_log: deque = deque()   # (time_us, bytes)
        self.send_log: deque = deque()  # time_us
        self.drop_log: deque = deque()  # time_us


class TraceLog:
    """Per-flow time series sampled on a fixed grid, exportable as CSV."""

    columns = TRACE_COLUMNS

    def __init__(self):
        self.rows: list[tuple] = []

    def append(self, row: tuple) -> None:
        self.rows.append(row)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(_format_cell(v) for v in row) + "\n")

    def rows_between(self, t0_us: int, t1_us: int, flow_ids=None) -> list[tuple]:
        sel = []
        for row in reversed(self.rows):
            t = row[0]
            if t <= t0_us:
                break
            if t <= t1_us and (flow_ids is None or row[1] in flow_ids):
                sel.append(row)
        sel.reverse()
        return sel


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Simulator:
    """Event-driven dumbbell simulator; one instance per rollout actor."""

    def __init__(
        self,
        link: LinkSpec,
        seed: int = 0,
        trace_interval_us: int = 100_000,
        mss: int = MSS,
        bbr_windows: tuple[float, int] = (10.0, 8),
        stats_retention_us: int = 2_000_000,
    ):
        self.link = link
        self.mss = mss
        self.rng = Random(seed)
        self.now_us = 0
        self.queue = QueueState()
        self.flows: dict[int, _Flow] = {}
        self.trace = TraceLog()
        self.trace_interval_us = int(trace_interval_us)
        # measurement logs are pruned to this horizon; stats windows larger
        # than it would silently undercount
        self.stats_retention_us = max(int(stats_retention_us), 2 * self.trace_interval_us)
        self._bbr_windows = bbr_windows
        self._heap: list = []
        self._seq = 0
        self._trace_scheduled = False

    # -- scheduling -----------------------------------------------------------

    def _push(self, at_us: int, code: int, payload=None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at_us, self._seq, code, payload))

    def schedule(self, event: NetworkEvent) -> None:
        """Queue a scenario event; it fires exactly once at ``event.at_us``."""
        if event.at_us < self.now_us:
            raise ValueError(f"event at {event.at_us} is in the past (now={self.now_us})")
        self._push(event.at_us, _EV_SCENARIO, event)

    # -- flow management --------------------------------------------------------

    def add_flow(self, flow_id: int) -> None:
        if flow_id in self.flows and self.flows[flow_id].active:
            log.warning("flow %d already active; join ignored", flow_id)
            return
        w_rt, w_bw = self._bbr_windows
        bbr = BbrModel(
            mss=self.mss,
            w_rt_seconds=w_rt,
            w_bw_rounds=w_bw,
            cycle_rand=lambda: self.rng.randrange(7),
        )
        flow = _Flow(flow_id, bbr, self.now_us)
        self.flows[flow_id] = flow
        self._schedule_send(flow)

    def remove_flow(self, flow_id: int) -> None:
        flow = self.flows.get(flow_id)
        if flow is None or not flow.active:
            log.warning("flow %d not active; leave is a no-op", flow_id)
            return
        flow.active = False

    def active_flow_ids(self) -> list[int]:
        return sorted(f.flow_id for f in self.flows.values() if f.active)

    # -- ground truth -------------------------------------------------------------

    def true_min_rtt_us(self) -> int:
        return 2 * self.link.prop_delay_us

    # -- main loop -----------------------------------------------------------------

    def run_until(self, t_end_us: int) -> TraceLog:
        """Process all events up to ``t_end_us``; clock lands exactly there."""
        if t_end_us < self.now_us:
            raise ValueError("cannot run backwards")
        if not self._trace_scheduled and self.trace_interval_us > 0:
            first = self.now_us + self.trace_interval_us
            self._push(first, _EV_TRACE, None)
            self._trace_scheduled = True
        heap = self._heap
        while heap and heap[0][0] <= t_end_us:
            at, _, code, payload = heapq.heappop(heap)
            self.now_us = at
            if code == _EV_SEND:
                self._on_send(payload)
            elif code == _EV_ACK:
                self._on_ack(payload)
            elif code == _EV_TRACE:
                self._on_trace()
            elif code == _EV_SCENARIO:
                self._apply_event(payload)
            elif code == _EV_DROP:
                self._on_drop_notify(payload)
        self.now_us = t_end_us
        return self.trace

    # -- event handlers ----------------------------------------------------------

    def _apply_event(self, ev: NetworkEvent) -> None:
        kind = ev.kind
        if kind is EventKind.SET_BANDWIDTH:
            self.link.capacity_bps = float(ev.value)
        elif kind is EventKind.SET_LATENCY:
            self.link.prop_delay_us = int(ev.value)
        elif kind is EventKind.FLOW_JOIN:
            self.add_flow(int(ev.value))
        elif kind is EventKind.FLOW_LEAVE:
            self.remove_flow(int(ev.value))

    def _schedule_send(self, flow: _Flow) -> None:
        if flow.send_scheduled or not flow.active:
            return
        flow.send_scheduled = True
        self._push(max(self.now_us, flow.next_pace_at), _EV_SEND, flow)

    def _on_send(self, flow: _Flow) -> None:
        flow.send_scheduled = False
        if not flow.active:
            return
        if flow.inflight_bytes + self.mss > flow.cwnd_bytes:
            return  # cwnd-blocked; the next ACK reschedules us
        now = self.now_us
        size = self.mss
        pkt = _Packet(flow.flow_id, flow.next_seq, size, now,
                      self.link.prop_delay_us, flow.delivered_bytes,
                      flow.last_delivery_us)
        flow.next_seq += size
        flow.sent_bytes += size
        flow.inflight_bytes += size
        flow.send_log.append(now)
        departure = bottleneck_transit(now, size, self.queue, self.link)
        if departure is None:
            self._push(now + 2 * pkt.prop_us, _EV_DROP, pkt)
        else:
            self._push(departure + 2 * pkt.prop_us, _EV_ACK, pkt)
        # pacing gate for the next packet
        rate = flow.pacing_rate_bps
        interval = max(1, round(size * 8e6 / rate)) if rate > 0 else 1
        base = flow.next_pace_at if flow.next_pace_at > now else now
        flow.next_pace_at = base + interval
        self._schedule_send(flow)

    def _on_ack(self, pkt: _Packet) -> None:
        flow = self.flows[pkt.flow_id]
        now = self.now_us
        size = pkt.size
        flow.inflight_bytes -= size
        flow.delivered_bytes += size
        flow.ack_log.append((now, size))

        rtt = now - pkt.sent_at
        flow.srtt_us = rtt if flow.srtt_us == 0.0 else (
            (1.0 - SRTT_ALPHA) * flow.srtt_us + SRTT_ALPHA * rtt)
        if rtt < flow.min_rtt_observed_us:
            flow.min_rtt_observed_us = rtt

        bbr = flow.bbr
        bbr.on_rtt_sample(rtt, now)
        # Delivery rate over this packet's round trip: bytes delivered since
        # the packet left, over the time since the last delivery seen before
        # it left.  Anchoring the interval at the previous delivery makes the
        # sample an exact inter-delivery average (k packets over k gaps), so
        # boundary quantisation cannot bias it above the served rate.
        delivered_delta = flow.delivered_bytes - pkt.delivered_snapshot
        rate_bps = delivered_delta * 8e6 / (now - pkt.delivered_time_snapshot)
        flow.last_delivery_us = now
        round_start = False
        if pkt.delivered_snapshot >= flow.next_round_delivered:
            bbr.round_count += 1
            flow.next_round_delivered = flow.delivered_bytes
            round_start = True
        bbr.on_delivery_sample(rate_bps, bbr.round_count)
        bbr.tick_state_machine(now, flow.inflight_bytes, round_start)
        out = bbr.control_outputs(now)
        flow.cwnd_bytes = out.cwnd_bytes
        flow.pacing_rate_bps = out.pacing_rate_bps
        if flow.active:
            self._schedule_send(flow)

    def _on_drop_notify(self, pkt: _Packet) -> None:
        flow = self.flows[pkt.flow_id]
        flow.inflight_bytes -= pkt.size
        flow.dropped_bytes += pkt.size
        flow.drop_log.append(self.now_us)
        if flow.active:
            self._schedule_send(flow)

    def _on_trace(self) -> None:
        now = self.now_us
        self.queue.drain(now)
        backlog = self.queue.backlog
        truth = self.true_min_rtt_us()
        cap = self.link.capacity_bps
        window = self.trace_interval_us
        for flow_id in self.active_flow_ids():
            flow = self.flows[flow_id]
            stats = self._sample(flow, window)
            bbr = flow.bbr
            bw = bbr.btlbw_bps
            rt = bbr.rtprop_us(now)
            # srtt is flow state, not a windowed measurement: it must not
            # blank out during intervals that happen to deliver nothing
            self.trace.append((
                now, flow_id, stats.delivery_rate_bps, flow.srtt_us, stats.loss_rate,
                flow.cwnd_bytes, flow.pacing_rate_bps, backlog,
                bw if bw is not None else 0.0,
                rt if rt is not None else 0.0,
                bbr.pacing_gain, bbr.cwnd_gain, bbr.phase.value,
                truth, cap,
            ))
        self._push(now + self.trace_interval_us, _EV_TRACE, None)

    # -- sampling ---------------------------------------------------------------

    def sample_flow_stats(self, flow_id: int, window_us: int) -> FlowStats:
        """Windowed stats for one flow; zeroed with a flag when idle."""
        flow = self.flows.get(flow_id)
        if flow is None:
            raise KeyError(f"unknown flow id {flow_id}")
        return self._sample(flow, window_us)

    def _sample(self, flow: _Flow, window_us: int) -> FlowStats:
        now = self.now_us
        keep = now - self.stats_retention_us
        log_ = flow.ack_log
        while log_ and log_[0][0] <= keep:
            log_.popleft()
        sends = flow.send_log
        while sends and sends[0] <= keep:
            sends.popleft()
        drops = flow.drop_log
        while drops and drops[0] <= keep:
            drops.popleft()

        horizon = now - window_us
        delivered = 0
        for t, b in reversed(log_):
            if t <= horizon:
                break
            delivered += b
        if delivered == 0:
            return FlowStats(flow.flow_id, 0.0, 0.0, 0.0, 0.0, 0, 0.0,
                             window_us, no_data=True)
        n_sends = 0
        for t in reversed(sends):
            if t <= horizon:
                break
            n_sends += 1
        n_drops = 0
        for t in reversed(drops):
            if t <= horizon:
                break
            n_drops += 1
        loss = n_drops / n_sends if n_sends else 0.0
        return FlowStats(
            flow_id=flow.flow_id,
            delivery_rate_bps=delivered * 8e6 / window_us,
            srtt_us=flow.srtt_us,
            min_rtt_observed_us=flow.min_rtt_observed_us,
            loss_rate=loss,
            cwnd_bytes=flow.cwnd_bytes,
            pacing_rate_bps=flow.pacing_rate_bps,
            sample_window_us=window_us,
        )

    # -- invariant helper (used by tests) ------------------------------------------

    def conservation_ok(self) -> bool:
        return all(
            f.sent_bytes == f.delivered_bytes + f.dropped_bytes + f.inflight_bytes
            for f in self.flows.values()
        )
