"""Actor-critic network: tanh trunk, two categorical heads, scalar value.

Parameters live in plain float64 numpy arrays so that forward passes are
bit-reproducible and checkpoints round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError

CHECKPOINT_VERSION = 1


@dataclass
class PolicyParams:
    """All weights of the policy/value network."""

    trunk: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    head_rt: tuple[np.ndarray, np.ndarray] = None
    head_bw: tuple[np.ndarray, np.ndarray] = None
    value_head: tuple[np.ndarray, np.ndarray] = None

    @classmethod
    def init(cls, state_dim: int, k1: int, k2: int,
             hidden: tuple[int, ...] = (64, 64),
             rng: np.random.Generator | None = None) -> "PolicyParams":
        rng = rng or np.random.default_rng(0)
        trunk = []
        fan_in = state_dim
        for width in hidden:
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, width))
            trunk.append((w, np.zeros(width)))
            fan_in = width
        # near-uniform initial policy: tiny head weights
        head_rt = (rng.normal(0.0, 0.01, size=(fan_in, k1)), np.zeros(k1))
        head_bw = (rng.normal(0.0, 0.01, size=(fan_in, k2)), np.zeros(k2))
        value_head = (rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, 1)), np.zeros(1))
        return cls(trunk=trunk, head_rt=head_rt, head_bw=head_bw, value_head=value_head)

    # -- structure helpers ----------------------------------------------------

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [*self.trunk, self.head_rt, self.head_bw, self.value_head]

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            trunk=[(w.copy(), b.copy()) for w, b in self.trunk],
            head_rt=(self.head_rt[0].copy(), self.head_rt[1].copy()),
            head_bw=(self.head_bw[0].copy(), self.head_bw[1].copy()),
            value_head=(self.value_head[0].copy(), self.value_head[1].copy()),
        )

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(
            trunk=[(np.zeros_like(w), np.zeros_like(b)) for w, b in self.trunk],
            head_rt=(np.zeros_like(self.head_rt[0]), np.zeros_like(self.head_rt[1])),
            head_bw=(np.zeros_like(self.head_bw[0]), np.zeros_like(self.head_bw[1])),
            value_head=(np.zeros_like(self.value_head[0]), np.zeros_like(self.value_head[1])),
        )

    def flat_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers():
            out.append(w)
            out.append(b)
        return out

    def same_shape(self, other: "PolicyParams") -> bool:
        a, b = self.flat_arrays(), other.flat_arrays()
        return len(a) == len(b) and all(x.shape == y.shape for x, y in zip(a, b))

    def allclose(self, other: "PolicyParams", atol: float = 0.0) -> bool:
        return self.same_shape(other) and all(
            np.array_equal(x, y) if atol == 0.0 else np.allclose(x, y, atol=atol)
            for x, y in zip(self.flat_arrays(), other.flat_arrays())
        )

    def finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.flat_arrays())

    @property
    def state_dim(self) -> int:
        return self.trunk[0][0].shape[0]

    @property
    def k1(self) -> int:
        return self.head_rt[0].shape[1]

    @property
    def k2(self) -> int:
        return self.head_bw[0].shape[1]


def forward_batch(params: PolicyParams, states: np.ndarray, want_cache: bool = False):
    """Evaluate the network on a (B, D) batch.

    Returns ``(logits_rt, logits_bw, values)`` plus the activation cache
    when requested by the backward pass.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.state_dim:
        raise ValueError(
            f"state batch has shape {x.shape}, expected (*, {params.state_dim})")
    activations = [x]
    h = x
    for w, b in params.trunk:
        h = np.tanh(h @ w + b)
        activations.append(h)
    logits_rt = h @ params.head_rt[0] + params.head_rt[1]
    logits_bw = h @ params.head_bw[0] + params.head_bw[1]
    values = (h @ params.value_head[0] + params.value_head[1])[:, 0]
    if want_cache:
        return logits_rt, logits_bw, values, activations
    return logits_rt, logits_bw, values


def forward(params: PolicyParams, state: np.ndarray):
    """Single-state evaluation: (logits_rt, logits_bw, value)."""
    lr, lb, v = forward_batch(params, np.asarray(state, dtype=np.float64)[None, :])
    return lr[0], lb[0], float(v[0])


def save_checkpoint(path, params: PolicyParams, hyper: dict, seed: int,
                    extra: dict | None = None) -> None:
    """Versioned binary dump; loading reproduces forward() bit-exactly."""
    arrays = {}
    for i, (w, b) in enumerate(params.trunk):
        arrays[f"trunk_w_{i}"] = w
        arrays[f"trunk_b_{i}"] = b
    arrays["head_rt_w"], arrays["head_rt_b"] = params.head_rt
    arrays["head_bw_w"], arrays["head_bw_b"] = params.head_bw
    arrays["value_w"], arrays["value_b"] = params.value_head
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_trunk": len(params.trunk),
        "hyper": hyper,
        "seed": seed,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta['version']}")
        trunk = [(data[f"trunk_w_{i}"], data[f"trunk_b_{i}"]) for i in range(meta["n_trunk"])]
        params = PolicyParams(
            trunk=trunk,
            head_rt=(data["head_rt_w"], data["head_rt_b"]),
            head_bw=(data["head_bw_w"], data["head_bw_b"]),
            value_head=(data["value_w"], data["value_b"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing field {exc}") from exc
    return params, meta
