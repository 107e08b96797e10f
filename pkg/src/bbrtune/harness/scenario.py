"""Scenario files: schema, validation, and seeded world construction.

A scenario is a YAML document describing the link, the flows, a list of
timed network events and/or a seeded random-event generator, the
environment configuration (periods, action grid, reward), training
hyperparameters and the agent layout.  Everything downstream of the seed is
deterministic: the same file plus the same seed rebuilds the same worlds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import yaml

from ..bbr import MSS
from ..cc_env import ActionGrid, EnvConfig, NormScales, PidConfig, RewardConfig, SimWorld
from ..errors import ScenarioError
from ..netsim import EventKind, LinkSpec, NetworkEvent, Simulator

BACKGROUND_FLOW_BASE = 1000

_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "seed", "duration_s", "link"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "link": {
            "type": "object",
            "required": ["capacity_mbps", "rtt_ms"],
            "additionalProperties": False,
            "properties": {
                "capacity_mbps": {"type": "number", "exclusiveMinimum": 0},
                "rtt_ms": {"type": "number", "minimum": 0},
                "buffer_bytes": {"type": "integer", "minimum": 1500},
            },
        },
        "flows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "start_s": {"type": "number", "minimum": 0},
                    "stop_s": {"type": ["number", "null"]},
                    "controlled": {"type": "boolean"},
                },
            },
        },
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["at_s", "kind"],
                "additionalProperties": False,
                "properties": {
                    "at_s": {"type": "number", "minimum": 0},
                    "kind": {"enum": ["set_bandwidth", "set_latency",
                                      "flow_join", "flow_leave"]},
                    "capacity_mbps": {"type": "number", "exclusiveMinimum": 0},
                    "rtt_ms": {"type": "number", "minimum": 0},
                    "flow_id": {"type": "integer", "minimum": 0},
                },
            },
        },
        "random_events": {
            "type": "object",
            "required": ["interval_s"],
            "additionalProperties": False,
            "properties": {
                "interval_s": _RANGE,
                "capacity_mbps": _RANGE,
                "rtt_ms": _RANGE,
                "kinds": {"type": "array",
                          "items": {"enum": ["set_bandwidth", "set_latency",
                                             "flow_join", "flow_leave"]}},
                "max_background_flows": {"type": "integer", "minimum": 0},
                "start_s": {"type": "number", "minimum": 0},
            },
        },
        "env": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "f_max": {"type": "integer", "minimum": 1},
                "t1_ms": {"type": "number", "exclusiveMinimum": 0},
                "t2_s": {"type": "number", "exclusiveMinimum": 0},
                "action_grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "rt_seconds": {"type": "array", "items": {"type": "number"}},
                        "bw_rounds": {"type": "array", "items": {"type": "integer"}},
                    },
                },
                "reward": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                        "normalizer_mbps": {"type": "number", "exclusiveMinimum": 0},
                        "sigmoid_scale_per_ms": {"type": "number", "exclusiveMinimum": 0},
                        "zero_error_gain": {"type": "number", "minimum": 1},
                        "pid": {
                            "type": ["object", "null"],
                            "additionalProperties": False,
                            "properties": {
                                "k_p": {"type": "number"},
                                "k_d": {"type": "number"},
                                "k_i": {"type": "number"},
                            },
                        },
                    },
                },
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iters": {"type": "integer", "minimum": 0},
                "hyper": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: {"type": "number"} for k in (
                        "gamma", "lam", "clip_eps", "c1", "c2", "beta_entropy",
                        "learning_rate")} | {
                        k: {"type": "integer", "minimum": 1} for k in (
                            "epochs", "minibatch_size", "n_actors", "horizon")},
                },
                "online_learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "online_updates": {"type": "boolean"},
            },
        },
        "agents": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_rl_agents": {"type": "integer", "minimum": 1},
                "topology": {"enum": ["ring", "mesh"]},
                "kappa": {"type": "number", "minimum": 0},
                "t_share_s": {"type": "number", "exclusiveMinimum": 0},
                "probe_states": {"type": "integer", "minimum": 1},
            },
        },
    },
}


@dataclass
class FlowSpec:
    id: int
    start_s: float = 0.0
    stop_s: Optional[float] = None
    controlled: bool = True


@dataclass
class RandomEventConfig:
    interval_s: tuple[float, float]
    capacity_mbps: tuple[float, float] = (1.0, 10.0)
    rtt_ms: tuple[float, float] = (10.0, 50.0)
    kinds: tuple[str, ...] = ("set_bandwidth", "set_latency")
    max_background_flows: int = 0
    start_s: float = 0.0


@dataclass
class AgentLayout:
    n_rl_agents: int = 1
    topology: str = "ring"
    kappa: float = 0.1
    t_share_s: float = 10.0
    probe_states: int = 512


@dataclass
class ScenarioSpec:
    """Fully resolved scenario; the single source for reproducible runs."""

    name: str
    seed: int
    duration_s: float
    link: LinkSpec
    flows: list[FlowSpec]
    fixed_events: list[NetworkEvent]
    random_events: Optional[RandomEventConfig]
    env: EnvConfig
    agents: AgentLayout
    train_iters: int = 500
    hyper_overrides: dict = field(default_factory=dict)
    online_learning_rate: float = 1e-4
    online_updates: bool = False
    raw: dict = field(default_factory=dict)

    @property
    def duration_us(self) -> int:
        return int(round(self.duration_s * 1e6))

    def controlled_flow_ids(self) -> list[int]:
        return sorted(f.id for f in self.flows if f.controlled)

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ScenarioSpec":
        import copy
        out = copy.copy(self)
        out.seed = seed
        return out

    # -- world construction ------------------------------------------------

    def world_factory(self, actor: int = 0):
        """Factory of per-episode simulation worlds for one rollout actor."""

        def factory(episode: int) -> SimWorld:
            return self.build_world(actor, episode)

        return factory

    def build_world(self, actor: int, episode: int) -> SimWorld:
        sim_seed_seq = np.random.SeedSequence((self.seed, actor, episode))
        sim = Simulator(
            LinkSpec(self.link.capacity_bps, self.link.prop_delay_us,
                     self.link.buffer_bytes),
            seed=int(sim_seed_seq.generate_state(1)[0]),
            trace_interval_us=self.env.t1_us,
        )
        for flow in self.flows:
            if flow.start_s == 0.0:
                sim.add_flow(flow.id)
            else:
                sim.schedule(NetworkEvent(int(round(flow.start_s * 1e6)),
                                          EventKind.FLOW_JOIN, flow.id))
            if flow.stop_s is not None:
                sim.schedule(NetworkEvent(int(round(flow.stop_s * 1e6)),
                                          EventKind.FLOW_LEAVE, flow.id))
        for ev in self.fixed_events:
            sim.schedule(ev)
        if self.random_events is not None:
            for ev in generate_random_events(
                    self.random_events, self.duration_s,
                    np.random.default_rng(
                        np.random.SeedSequence((self.seed, 0xE7, actor, episode)))):
                sim.schedule(ev)
        return SimWorld(sim=sim, controlled=self.controlled_flow_ids(),
                        duration_us=self.duration_us)


def generate_random_events(cfg: RandomEventConfig, duration_s: float,
                           rng: np.random.Generator) -> list[NetworkEvent]:
    """Expand the generator into a concrete, seed-determined event list."""
    events: list[NetworkEvent] = []
    t = cfg.start_s
    active_bg: list[int] = []
    next_bg = BACKGROUND_FLOW_BASE
    while True:
        t += float(rng.uniform(*cfg.interval_s))
        if t >= duration_s:
            break
        at_us = int(round(t * 1e6))
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        if kind == "set_bandwidth":
            mbps = float(rng.uniform(*cfg.capacity_mbps))
            events.append(NetworkEvent(at_us, EventKind.SET_BANDWIDTH, mbps * 1e6))
        elif kind == "set_latency":
            rtt_ms = float(rng.uniform(*cfg.rtt_ms))
            events.append(NetworkEvent(at_us, EventKind.SET_LATENCY,
                                       int(round(rtt_ms * 1000 / 2))))
        elif kind == "flow_join":
            if len(active_bg) < cfg.max_background_flows:
                events.append(NetworkEvent(at_us, EventKind.FLOW_JOIN, next_bg))
                active_bg.append(next_bg)
                next_bg += 1
        elif kind == "flow_leave":
            if active_bg:
                idx = int(rng.integers(len(active_bg)))
                events.append(NetworkEvent(at_us, EventKind.FLOW_LEAVE,
                                           active_bg.pop(idx)))
    return events


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse {path}: {exc}") from exc
    return validate_scenario(raw)


def validate_scenario(raw: dict) -> ScenarioSpec:
    """Schema-check and resolve a scenario document."""
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    try:
        jsonschema.validate(raw, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"scenario invalid at {where}: {exc.message}") from exc

    link_raw = raw["link"]
    capacity_bps = link_raw["capacity_mbps"] * 1e6
    prop_us = int(round(link_raw["rtt_ms"] * 1000 / 2))
    # default buffer: twice the initial BDP, floored for tiny-BDP links
    bdp = int(capacity_bps * (2 * prop_us) / 8e6)
    buffer_bytes = link_raw.get("buffer_bytes", max(2 * bdp, 8 * MSS))
    link = LinkSpec(capacity_bps, prop_us, buffer_bytes)

    flows = [FlowSpec(id=f["id"], start_s=f.get("start_s", 0.0),
                      stop_s=f.get("stop_s"), controlled=f.get("controlled", True))
             for f in raw.get("flows", [{"id": 0}])]
    if len({f.id for f in flows}) != len(flows):
        raise ScenarioError("duplicate flow ids")
    if not any(f.controlled for f in flows):
        raise ScenarioError("at least one flow must be controlled")

    fixed_events = []
    for ev in raw.get("events", []):
        at_us = int(round(ev["at_s"] * 1e6))
        kind = ev["kind"]
        if kind == "set_bandwidth":
            if "capacity_mbps" not in ev:
                raise ScenarioError("set_bandwidth event needs capacity_mbps")
            fixed_events.append(NetworkEvent(at_us, EventKind.SET_BANDWIDTH,
                                             ev["capacity_mbps"] * 1e6))
        elif kind == "set_latency":
            if "rtt_ms" not in ev:
                raise ScenarioError("set_latency event needs rtt_ms")
            fixed_events.append(NetworkEvent(at_us, EventKind.SET_LATENCY,
                                             int(round(ev["rtt_ms"] * 1000 / 2))))
        else:
            if "flow_id" not in ev:
                raise ScenarioError(f"{kind} event needs flow_id")
            ev_kind = EventKind.FLOW_JOIN if kind == "flow_join" else EventKind.FLOW_LEAVE
            fixed_events.append(NetworkEvent(at_us, ev_kind, ev["flow_id"]))

    rnd = None
    if "random_events" in raw:
        r = raw["random_events"]
        rnd = RandomEventConfig(
            interval_s=tuple(r["interval_s"]),
            capacity_mbps=tuple(r.get("capacity_mbps", (1.0, 10.0))),
            rtt_ms=tuple(r.get("rtt_ms", (10.0, 50.0))),
            kinds=tuple(r.get("kinds", ("set_bandwidth", "set_latency"))),
            max_background_flows=r.get("max_background_flows", 0),
            start_s=r.get("start_s", 0.0),
        )
        for lo, hi in (rnd.interval_s, rnd.capacity_mbps, rnd.rtt_ms):
            if lo > hi:
                raise ScenarioError("random_events ranges must be (low, high)")

    env_raw = raw.get("env", {})
    grid_raw = env_raw.get("action_grid", {})
    grid = ActionGrid(
        rt_seconds=tuple(grid_raw.get("rt_seconds", (0.5, 1.0, 2.0, 5.0, 10.0))),
        bw_rounds=tuple(grid_raw.get("bw_rounds", (2, 4, 8, 16, 32))),
    )
    reward_raw = env_raw.get("reward", {})
    normalizer_bps = reward_raw.get("normalizer_mbps", link_raw["capacity_mbps"]) * 1e6
    pid_raw = reward_raw.get("pid")
    reward = RewardConfig(
        alpha=reward_raw.get("alpha", 0.5),
        normalizer_bps=normalizer_bps,
        sigmoid_scale_per_ms=reward_raw.get("sigmoid_scale_per_ms", 0.05),
        zero_error_gain=reward_raw.get("zero_error_gain", 1.0),
        pid=PidConfig(**pid_raw) if pid_raw else None,
    )
    try:
        env = EnvConfig(
            f_max=env_raw.get("f_max", 8),
            t1_us=int(round(env_raw.get("t1_ms", 100) * 1000)),
            t2_us=int(round(env_raw.get("t2_s", 2.0) * 1e6)),
            grid=grid,
            reward=reward,
            scales=NormScales(rate_bps=normalizer_bps),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc

    agents_raw = raw.get("agents", {})
    layout = AgentLayout(
        n_rl_agents=agents_raw.get("n_rl_agents", 1),
        topology=agents_raw.get("topology", "ring"),
        kappa=agents_raw.get("kappa", 0.1),
        t_share_s=agents_raw.get("t_share_s", 10.0),
        probe_states=agents_raw.get("probe_states", 512),
    )

    training = raw.get("training", {})
    return ScenarioSpec(
        name=raw["name"],
        seed=raw["seed"],
        duration_s=raw["duration_s"],
        link=link,
        flows=flows,
        fixed_events=sorted(fixed_events, key=lambda e: e.at_us),
        random_events=rnd,
        env=env,
        agents=layout,
        train_iters=training.get("iters", 500),
        hyper_overrides=dict(training.get("hyper", {})),
        online_learning_rate=training.get("online_learning_rate", 1e-4),
        online_updates=training.get("online_updates", False),
        raw=raw,
    )
