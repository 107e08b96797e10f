"""Closed-loop BBR parameter tuning on a simulated bottleneck network.

The package is organised around six building blocks:

* ``netsim``   -- deterministic packet-level simulator of a dumbbell topology
* ``bbr``      -- per-flow BBR state machine with externally tunable filter windows
* ``rl_core``  -- self-contained actor-critic PPO (numpy, analytic gradients)
* ``cc_env``   -- the RL environment gluing the simulator to the controller
* ``agents``   -- host/RL agents, wire protocol, multi-agent cooperation
* ``harness``  -- scenarios, training/eval runners, metrics, plots

``service`` exposes the harness over HTTP (FastAPI) and ``cli`` is a thin
client for it.
"""

__version__ = "0.1.0"
