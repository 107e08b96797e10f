"""Host agents, RL agents, the wire protocol, and multi-agent cooperation."""

from .host import (
    ACCEPT,
    Accept,
    HostAgent,
    HostAgentConfig,
    Reject,
    RobustnessConfig,
    ema_filter,
    moving_average,
    sanity_check,
)
from .rl_agent import (
    AgentShareState,
    ShareSnapshot,
    average_params,
    build_topology,
    consensus_penalty,
    make_probe_states,
    mesh_topology,
    probe_values,
    ring_topology,
    share_merge,
    snapshot,
)
from .system import AgentSystem, SingleAgentEnv, partition_flows
from .wire import (
    Ack,
    Error,
    Hello,
    LengthMismatchError,
    MemChannel,
    MsgKind,
    Params,
    PayloadError,
    Stats,
    TcpChannel,
    TruncatedFrameError,
    UnknownKindError,
    UnsupportedVersionError,
    WireCodecError,
    WireMessage,
    decode_msg,
    encode_msg,
    make_channel,
)

__all__ = [
    "ACCEPT", "Accept", "Ack", "AgentShareState", "AgentSystem", "Error", "Hello",
    "HostAgent", "HostAgentConfig", "LengthMismatchError", "MemChannel", "MsgKind",
    "Params", "PayloadError", "Reject", "RobustnessConfig", "ShareSnapshot",
    "SingleAgentEnv", "Stats", "TcpChannel", "TruncatedFrameError",
    "UnknownKindError", "UnsupportedVersionError", "WireCodecError", "WireMessage",
    "average_params", "build_topology", "consensus_penalty", "decode_msg",
    "ema_filter", "encode_msg", "make_channel", "make_probe_states",
    "mesh_topology", "moving_average", "partition_flows", "probe_values",
    "ring_topology", "sanity_check", "share_merge", "snapshot",
]
