"""Run metrics: estimation accuracy, error/throughput CDFs, convergence.

All functions are pure over trace rows (the netsim CSV tuple layout), so a
given trace always yields the same report.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence


def cdf(samples: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF points (x sorted ascending, y in (0, 1])."""
    xs = sorted(samples)
    n = len(xs)
    return [(x, (i + 1) / n) for i, x in enumerate(xs)]


def _controlled_rows(rows, flow_ids=None):
    if flow_ids is None:
        return list(rows)
    wanted = set(flow_ids)
    return [r for r in rows if r[1] in wanted]


def estimation_accuracy(rows: Sequence[tuple], threshold_ms: float = 5.0,
                        flow_ids=None) -> float:
    """Fraction of samples whose squared RTprop error is within threshold.

    Error is the gap between the flow's RTprop estimate and the true
    propagation RTT recorded by the simulator at the same instant.
    """
    rows = _controlled_rows(rows, flow_ids)
    if not rows:
        raise ValueError("empty trace")
    thr_sq = threshold_ms ** 2
    good = 0
    for r in rows:
        err_ms = (r[9] - r[13]) / 1000.0
        if err_ms * err_ms <= thr_sq:
            good += 1
    return good / len(rows)


def rtt_sqerr_cdf(rows: Sequence[tuple], flow_ids=None) -> list[tuple[float, float]]:
    rows = _controlled_rows(rows, flow_ids)
    errors = [((r[9] - r[13]) / 1000.0) ** 2 for r in rows]
    return cdf(errors) if errors else []


def throughput_cdf(rows: Sequence[tuple], flow_ids=None) -> list[tuple[float, float]]:
    """CDF of per-sample aggregate delivery rate (bps) over controlled flows."""
    rows = _controlled_rows(rows, flow_ids)
    by_time: dict[int, float] = {}
    for r in rows:
        by_time[r[0]] = by_time.get(r[0], 0.0) + r[2]
    return cdf(list(by_time.values())) if by_time else []


def peak_rtt(rows: Sequence[tuple], flow_ids=None) -> float:
    """Largest smoothed RTT (ms) seen by any controlled flow."""
    rows = _controlled_rows(rows, flow_ids)
    vals = [r[3] for r in rows if r[3] > 0]
    return max(vals) / 1000.0 if vals else 0.0


def _smooth_series(points: list[tuple[int, float]], window_us: int) -> list[tuple[int, float]]:
    out = []
    lo = 0
    acc = 0.0
    for hi, (t, v) in enumerate(points):
        acc += v
        while points[lo][0] <= t - window_us:
            acc -= points[lo][1]
            lo += 1
        out.append((t, acc / (hi - lo + 1)))
    return out


def convergence_times(rows: Sequence[tuple], event_times_s: Sequence[float],
                      tolerance: float = 0.1, hold_s: float = 2.0,
                      smooth_s: float = 1.0, flow_ids=None) -> list[float]:
    """Seconds from each join/leave until all active flows hold fair share.

    For every event time, finds the first instant after which every active
    flow's smoothed throughput stays within ``tolerance`` of capacity/n for
    at least ``hold_s``; never converging yields ``inf``.
    """
    rows = _controlled_rows(rows, flow_ids)
    per_flow: dict[int, list[tuple[int, float]]] = {}
    capacity_at: dict[int, float] = {}
    for r in rows:
        per_flow.setdefault(r[1], []).append((r[0], r[2]))
        capacity_at[r[0]] = r[14]
    smooth_us = int(smooth_s * 1e6)
    smoothed = {fid: dict(_smooth_series(pts, smooth_us))
                for fid, pts in per_flow.items()}
    times = sorted(capacity_at)
    hold_us = int(hold_s * 1e6)

    def ok_at(t: int) -> bool:
        active = [fid for fid, series in smoothed.items() if t in series]
        if not active:
            return False
        fair = capacity_at[t] / len(active)
        band = tolerance * fair
        return all(abs(smoothed[fid][t] - fair) <= band for fid in active)

    results = []
    for ev_s in event_times_s:
        ev_us = int(round(ev_s * 1e6))
        conv: Optional[float] = None
        candidates = [t for t in times if t > ev_us]
        for i, t in enumerate(candidates):
            if not ok_at(t):
                continue
            end = t + hold_us
            window = [u for u in candidates[i:] if u <= end]
            if all(ok_at(u) for u in window) and window and window[-1] + smooth_us >= end:
                conv = (t - ev_us) / 1e6
                break
        results.append(conv if conv is not None else math.inf)
    return results


@dataclass
class MetricsReport:
    """Everything one evaluation run reports, round-trippable through CSV."""

    scenario_name: str
    scenario_hash: str
    seed: int
    mode: str  # "vanilla" or "ppo"
    estimation_accuracy: float = 0.0
    accuracy_threshold_ms: float = 5.0
    peak_rtt_ms: float = 0.0
    mean_throughput_bps: float = 0.0
    mean_reward: float = 0.0
    rtt_sqerr_cdf: list = field(default_factory=list)
    throughput_cdf: list = field(default_factory=list)
    convergence_events_s: list = field(default_factory=list)
    convergence_times_s: list = field(default_factory=list)
    mean_reward_curve: list = field(default_factory=list)

    def validate(self) -> None:
        for pts in (self.rtt_sqerr_cdf, self.throughput_cdf):
            ys = [y for _, y in pts]
            if ys and (ys != sorted(ys) or min(ys) < 0 or max(ys) > 1.0 + 1e-12):
                raise ValueError("CDF must be monotone within [0, 1]")
        if any(t < 0 for t in self.convergence_times_s):
            raise ValueError("convergence times must be non-negative")

    def to_csv(self, path) -> None:
        self.validate()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["section", "key", "value"])
            for key in ("scenario_name", "scenario_hash", "seed", "mode",
                        "estimation_accuracy", "accuracy_threshold_ms",
                        "peak_rtt_ms", "mean_throughput_bps", "mean_reward"):
                w.writerow(["scalar", key, getattr(self, key)])
            for x, y in self.rtt_sqerr_cdf:
                w.writerow(["rtt_sqerr_cdf", repr(x), repr(y)])
            for x, y in self.throughput_cdf:
                w.writerow(["throughput_cdf", repr(x), repr(y)])
            for ev, t in zip(self.convergence_events_s, self.convergence_times_s):
                w.writerow(["convergence", repr(ev), repr(t)])
            for i, r in enumerate(self.mean_reward_curve):
                w.writerow(["reward_curve", i, repr(r)])

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        report = cls(scenario_name="", scenario_hash="", seed=0, mode="")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["section", "key", "value"]:
                raise ValueError(f"not a metrics report: {path}")
            for section, key, value in reader:
                if section == "scalar":
                    if key in ("scenario_name", "scenario_hash", "mode"):
                        setattr(report, key, value)
                    elif key == "seed":
                        report.seed = int(value)
                    else:
                        setattr(report, key, float(value))
                elif section == "rtt_sqerr_cdf":
                    report.rtt_sqerr_cdf.append((float(key), float(value)))
                elif section == "throughput_cdf":
                    report.throughput_cdf.append((float(key), float(value)))
                elif section == "convergence":
                    report.convergence_events_s.append(float(key))
                    report.convergence_times_s.append(float(value))
                elif section == "reward_curve":
                    report.mean_reward_curve.append(float(value))
        return report
