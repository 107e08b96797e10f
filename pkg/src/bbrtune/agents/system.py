"""In-simulation deployment of host agents and RL agents over the codec.

Both sides live in one process but talk exclusively through encoded wire
frames (in-memory queues by default, a loopback TCP socket on request), so
every training step exercises the real protocol.  With one RL agent and no
consensus the pipeline is bit-identical to driving :class:`~bbrtune.cc_env.CcEnv`
directly: the host forwards the same interval summaries the environment
would compute itself, and the float64 wire encoding is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..cc_env import (
    EnvConfig,
    EnvStepRecord,
    SimWorld,
    build_state,
    compute_reward,
)
from .host import HostAgent, HostAgentConfig, RobustnessConfig
from .wire import (
    Ack,
    Error,
    Hello,
    MsgKind,
    Params,
    Stats,
    WireMessage,
    decode_msg,
    encode_msg,
    make_channel,
)


def partition_flows(flow_ids: list[int], n_agents: int) -> list[tuple[int, ...]]:
    """Round-robin split of controlled flows across agents, id-sorted."""
    buckets: list[list[int]] = [[] for _ in range(n_agents)]
    for k, fid in enumerate(sorted(flow_ids)):
        buckets[k % n_agents].append(fid)
    return [tuple(b) for b in buckets]


class _HostDriver:
    """Serves one host agent: decodes PARAMS, applies, replies ACK/ERROR,
    and emits STATS summaries on request."""

    def __init__(self, host: HostAgent, endpoint, agent_id: int):
        self.host = host
        self.endpoint = endpoint
        self.agent_id = agent_id

    def announce(self, epoch: int) -> None:
        cfg = self.host.config
        hello = WireMessage(MsgKind.HELLO, self.agent_id, epoch, Hello(
            t1_ms=cfg.t1_us // 1000, t2_ms=cfg.t2_us // 1000,
            flow_ids=tuple(cfg.flow_ids)))
        self.endpoint.send(encode_msg(hello))

    def serve_one(self) -> None:
        msg = decode_msg(self.endpoint.recv())
        if msg.kind is MsgKind.PARAMS:
            w_rt = msg.body.w_rt_ms / 1000.0
            w_bw = int(msg.body.w_bw_rounds)
            try:
                self.host.tuner_apply((w_rt, w_bw))
            except ValueError as exc:
                reply = WireMessage(MsgKind.ERROR, self.agent_id, msg.epoch,
                                    Error(code=1, message=str(exc)))
            else:
                reply = WireMessage(MsgKind.ACK, self.agent_id, msg.epoch, Ack())
            self.endpoint.send(encode_msg(reply))
        else:
            self.endpoint.send(encode_msg(WireMessage(
                MsgKind.ERROR, self.agent_id, msg.epoch,
                Error(code=2, message=f"unexpected {msg.kind.name}"))))

    def send_stats(self, t0_us: int, t1_us: int, epoch: int) -> None:
        flow_ids, feats = self.host.interval_summary(t0_us, t1_us)
        stats = WireMessage(MsgKind.STATS, self.agent_id, epoch,
                            Stats(tuple(flow_ids), feats))
        self.endpoint.send(encode_msg(stats))


@dataclass
class _AgentView:
    agent_id: int
    endpoint: object
    host_driver: _HostDriver
    rng: np.random.Generator = None
    last_record: EnvStepRecord = None


class AgentSystem:
    """N cooperating RL agents attached to one simulated world.

    ``step_all`` moves the whole system by one tuning interval: every agent
    ships PARAMS to its host, the world advances T2, and every host ships
    STATS back.  Agents are always processed in id order, so runs are
    deterministic.
    """

    def __init__(self, world_factory: Callable[[int], SimWorld], config: EnvConfig,
                 n_agents: int = 1, seed: int = 0, transport: str = "mem",
                 robustness: RobustnessConfig | None = None):
        if n_agents < 1:
            raise ValueError("need at least one agent")
        self.factory = world_factory
        self.config = config
        self.n_agents = n_agents
        self.seed = seed
        self.transport = transport
        self.robustness = robustness or RobustnessConfig()
        self.episode = -1
        self.world: SimWorld | None = None
        self.views: list[_AgentView] = []
        self.epoch = 0

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    def reset_all(self) -> list[np.ndarray]:
        self.episode += 1
        self.world = self.factory(self.episode)
        self.epoch = 0
        buckets = partition_flows(self.world.controlled, self.n_agents)
        self.views = []
        for agent_id in range(self.n_agents):
            channel = make_channel(self.transport)
            host = HostAgent(
                HostAgentConfig(agent_id=agent_id, t1_us=self.config.t1_us,
                                t2_us=self.config.t2_us, flow_ids=buckets[agent_id]),
                self.world.sim, robustness=self.robustness, grid=self.config.grid)
            driver = _HostDriver(host, channel.b, agent_id)
            entropy = (self.seed, self.episode) if agent_id == 0 else (
                self.seed, self.episode, agent_id)
            view = _AgentView(
                agent_id=agent_id, endpoint=channel.a, host_driver=driver,
                rng=np.random.default_rng(np.random.SeedSequence(entropy)))
            driver.announce(self.epoch)
            hello = decode_msg(view.endpoint.recv())
            assert hello.kind is MsgKind.HELLO
            self.views.append(view)
        return [np.zeros(self.config.state_dim) for _ in self.views]

    def step_all(self, actions: list[tuple[int, int]]):
        if self.world is None:
            raise RuntimeError("step before reset")
        if len(actions) != self.n_agents:
            raise ValueError("one action per agent required")
        cfg = self.config
        sim = self.world.sim
        self.epoch += 1

        for view, action in zip(self.views, actions):
            w_rt, w_bw = cfg.grid.decode(*action)
            msg = WireMessage(MsgKind.PARAMS, view.agent_id, self.epoch,
                              Params(w_rt_ms=int(round(w_rt * 1000)), w_bw_rounds=w_bw))
            view.endpoint.send(encode_msg(msg))
            view.host_driver.serve_one()
            reply = decode_msg(view.endpoint.recv())
            if reply.kind is MsgKind.ERROR:
                raise ValueError(f"tuner rejected parameters: {reply.body.message}")

        t0 = sim.now_us
        t1 = min(t0 + cfg.t2_us, self.world.duration_us)
        sim.run_until(t1)
        terminal = t1 >= self.world.duration_us

        results = []
        for view, action in zip(self.views, actions):
            view.host_driver.send_stats(t0, t1, self.epoch)
            stats_msg = decode_msg(view.endpoint.recv())
            assert stats_msg.kind is MsgKind.STATS
            flow_ids = list(stats_msg.body.flow_ids)
            feats = stats_msg.body.features
            reward, no_data = compute_reward(feats, cfg.reward)
            obs = build_state(flow_ids, feats, cfg.f_max, view.rng,
                              cfg.scales).reshape(-1)
            w_rt, w_bw = cfg.grid.decode(*action)
            with_samples = feats[feats[:, 12] > 0] if len(feats) else feats
            record = EnvStepRecord(
                step=self.epoch - 1, t_start_us=t0, t_end_us=t1,
                action=tuple(action), w_rt_seconds=w_rt, w_bw_rounds=w_bw,
                reward=reward,
                mean_throughput_bps=float(feats[:, 9].sum()) if len(feats) else 0.0,
                mean_abs_err_ms=float(with_samples[:, 10].mean()) / 1000.0
                if len(with_samples) else 0.0,
                no_data=no_data, terminal=terminal,
                truncated=terminal and (t1 - t0) < cfg.t2_us, state=obs)
            view.last_record = record
            results.append((obs, reward, terminal, {"record": record}))
        return results


class SingleAgentEnv:
    """Adapter exposing a one-agent :class:`AgentSystem` as a plain env."""

    def __init__(self, system: AgentSystem):
        if system.n_agents != 1:
            raise ValueError("SingleAgentEnv wraps exactly one agent")
        self.system = system

    def reset(self):
        return self.system.reset_all()[0]

    def step(self, action):
        return self.system.step_all([action])[0]
