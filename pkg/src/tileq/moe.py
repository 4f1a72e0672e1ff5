"""MoE layer description, top-k routing, the dense reference forward and planted fixtures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExpertIndexError, ParameterError, ShapeError
from .linalg import as_dense, gaussian, make_rng


@dataclass(frozen=True)
class MoELayerSpec:
    num_experts: int
    top_k: int
    in_dim: int
    out_dim: int
    num_shared: int = 0

    def __post_init__(self):
        if self.num_experts < 1 or self.in_dim < 1 or self.out_dim < 1 or self.num_shared < 0:
            raise ParameterError(f"invalid layer dimensions {self}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ParameterError(f"top_k={self.top_k} must lie in [1, num_experts={self.num_experts}]")


@dataclass(frozen=True)
class ExpertSet:
    spec: MoELayerSpec
    routed: np.ndarray  # (K, o, i)
    shared: np.ndarray  # (S, o, i)

    def __post_init__(self):
        s = self.spec
        if self.routed.shape != (s.num_experts, s.out_dim, s.in_dim):
            raise ShapeError(f"routed experts have shape {self.routed.shape}, layer spec wants "
                             f"{(s.num_experts, s.out_dim, s.in_dim)}")
        if self.shared.shape != (s.num_shared, s.out_dim, s.in_dim):
            raise ShapeError(f"shared experts have shape {self.shared.shape}, layer spec wants "
                             f"{(s.num_shared, s.out_dim, s.in_dim)}")


@dataclass(frozen=True)
class RoutingDecision:
    expert_ids: np.ndarray  # (B, top_k) int64
    gates: np.ndarray  # (B, top_k) float64

    @property
    def batch(self) -> int:
        return int(self.expert_ids.shape[0])

    def scaled(self, factor: float) -> "RoutingDecision":
        return RoutingDecision(self.expert_ids, self.gates * factor)


def route(x, gate_weights, top_k: int) -> RoutingDecision:
    """Softmax over all expert scores, keep the top_k (ties favour lower ids), renormalize."""
    xs = as_dense(x, "x")
    g = as_dense(gate_weights, "gate_weights")
    if xs.shape[1] != g.shape[1]:
        raise ShapeError(f"x has shape {xs.shape} but gate_weights has shape {g.shape}")
    k = g.shape[0]
    if not 1 <= top_k <= k:
        raise ParameterError(f"top_k={top_k} exceeds the number of experts {k}")
    scores = xs @ g.T
    scores -= scores.max(axis=1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=1, keepdims=True)
    ids = np.argsort(-probs, axis=1, kind="stable")[:, :top_k]
    picked = np.take_along_axis(probs, ids, axis=1)
    gates = picked / picked.sum(axis=1, keepdims=True)
    return RoutingDecision(expert_ids=ids.astype(np.int64), gates=gates)


def check_routing(routing: RoutingDecision, num_experts: int, batch: int) -> None:
    ids = routing.expert_ids
    if ids.ndim != 2 or ids.shape != routing.gates.shape or ids.shape[0] != batch:
        raise ShapeError(f"routing shapes {ids.shape}/{routing.gates.shape} do not match batch {batch}")
    if ids.size and (ids.min() < 0 or ids.max() >= num_experts):
        raise ExpertIndexError(f"expert index out of range [0, {num_experts})")


def apply_experts(x: np.ndarray, weights: np.ndarray, routing: RoutingDecision) -> np.ndarray:
    """Sum of gate-weighted routed expert outputs in float64, accumulated in ascending slot order."""
    out = np.zeros((x.shape[0], weights.shape[1]))
    for t in range(routing.expert_ids.shape[1]):
        ids = routing.expert_ids[:, t]
        contrib = np.zeros_like(out)
        for e in np.unique(ids):
            rows = np.flatnonzero(ids == e)
            contrib[rows] = x[rows] @ weights[e].T.astype(np.float64)
        out += routing.gates[:, t, None] * contrib
    return out


def apply_shared(x: np.ndarray, shared: np.ndarray, out: np.ndarray) -> np.ndarray:
    for w in shared:
        out = out + x @ w.T.astype(np.float64)
    return out


def reference_forward(x, experts: ExpertSet, routing: RoutingDecision) -> np.ndarray:
    """Full-precision layer output: routed experts in slot order, then shared experts."""
    xs = as_dense(x, "x")
    spec = experts.spec
    if xs.shape[1] != spec.in_dim:
        raise ShapeError(f"x has {xs.shape[1]} features, experts expect {spec.in_dim}")
    check_routing(routing, spec.num_experts, xs.shape[0])
    out = apply_experts(xs, experts.routed, routing)
    return apply_shared(xs, experts.shared, out).astype(np.float32)


def _orthonormal(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(gaussian(rng, (n, k)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def synth_experts(
    spec: MoELayerSpec,
    m_rows: int,
    n_cols: int,
    rank: int,
    mix_scale: float = 0.1,
    noise_sigma: float = 0.0,
    seed: int = 0,
    return_lowrank: bool = False,
):
    """Experts with planted 2-D cluster structure.

    Expert k sits in cell (m, n) assigned round-robin over the ``m_rows x n_cols`` grid and
    equals ``B_n @ M_k @ A_m.T`` plus optional Gaussian noise. ``A_m`` (i x rank) is the
    input-side basis shared by row cluster m, ``B_n`` (o x rank) the output-side basis shared
    by column cluster n. ``M_k`` is a shared decaying diagonal core perturbed by
    ``mix_scale`` times a per-expert Gaussian matrix; the planted part is normalized so its
    entries have unit RMS. Returns ``(experts, planted)`` or, with ``return_lowrank``,
    ``(experts, planted, lowrank)`` where ``lowrank`` holds the noise-free planted parts.
    """
    k, i, o = spec.num_experts, spec.in_dim, spec.out_dim
    if m_rows < 1 or n_cols < 1 or m_rows * n_cols < k:
        raise ParameterError(f"grid {m_rows}x{n_cols} cannot hold {k} experts")
    if not 1 <= rank <= min(i, o):
        raise ParameterError(f"rank must be in [1, {min(i, o)}], got {rank}")
    rng = make_rng(seed)
    in_bases = [_orthonormal(rng, i, rank) for _ in range(m_rows)]
    out_bases = [_orthonormal(rng, o, rank) for _ in range(n_cols)]
    core = np.linspace(1.0, 1.0 / rank, rank)
    amplitude = np.sqrt(o * i) / np.linalg.norm(core)
    planted = []
    lowrank = np.empty((k, o, i))
    routed = np.empty((k, o, i), dtype=np.float32)
    for e in range(k):
        cell = e % (m_rows * n_cols)
        m, n = divmod(cell, n_cols)
        planted.append((m, n))
        mix = np.diag(core) + mix_scale * gaussian(rng, (rank, rank)) / np.sqrt(rank)
        lowrank[e] = amplitude * (out_bases[n] @ mix @ in_bases[m].T)
        noise = noise_sigma * gaussian(rng, (o, i)) if noise_sigma else 0.0
        routed[e] = lowrank[e] + noise
    shared = np.stack([gaussian(rng, (o, i)) for _ in range(spec.num_shared)]).astype(np.float32) \
        if spec.num_shared else np.zeros((0, o, i), dtype=np.float32)
    experts = ExpertSet(spec=spec, routed=routed, shared=shared)
    if return_lowrank:
        return experts, planted, lowrank
    return experts, planted
