"""Forward paths for quantized layers: dequantized MoE, fused tiled low-rank, and baselines."""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CorruptArtifactError, ShapeError
from .linalg import LowRankFactor, as_dense
from .moe import MoELayerSpec, RoutingDecision, apply_experts, apply_shared, check_routing, route
from .quantizer import QuantizedExpert, dequantize
from .tiler import TiledLowRank


@dataclass
class ForwardStats:
    """Matrix-multiply dispatches and intermediate sizes (in values) of one forward call."""

    dispatches: int = 0
    lowrank_values: int = 0
    scratch_values: int = 0


@dataclass(frozen=True, eq=False)
class TileQLayer:
    spec: MoELayerSpec
    quantized: tuple[QuantizedExpert, ...]
    tiled: TiledLowRank
    gate_weights: np.ndarray  # (K, i) float32
    shared_quantized: tuple[QuantizedExpert, ...] = ()
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.spec
        if len(self.quantized) != s.num_experts or self.tiled.num_experts != s.num_experts:
            raise ShapeError("layer parts disagree on the number of routed experts")
        if len(self.shared_quantized) != s.num_shared:
            raise ShapeError("layer has the wrong number of shared experts")
        if self.gate_weights.shape != (s.num_experts, s.in_dim):
            raise ShapeError(f"gate weights have shape {self.gate_weights.shape}")

    @cached_property
    def dequantized_routed(self) -> np.ndarray:
        return np.stack([dequantize(q) for q in self.quantized])

    @cached_property
    def dequantized_shared(self) -> np.ndarray:
        s = self.spec
        if not self.shared_quantized:
            return np.zeros((0, s.out_dim, s.in_dim), dtype=np.float32)
        return np.stack([dequantize(q) for q in self.shared_quantized])

    def route(self, x) -> RoutingDecision:
        return route(x, self.gate_weights, self.spec.top_k)


def _check_input(x, in_dim: int) -> np.ndarray:
    xs = as_dense(x, "x")
    if xs.shape[1] != in_dim:
        raise ShapeError(f"x has {xs.shape[1]} features, layer expects {in_dim}")
    return xs


def qmoe_forward(x, layer: TileQLayer, routing: RoutingDecision, use_cache: bool = True) -> np.ndarray:
    """Routed and shared experts with their dequantized residual weights."""
    xs = _check_input(x, layer.spec.in_dim)
    check_routing(routing, layer.spec.num_experts, xs.shape[0])
    if use_cache:
        routed, shared = layer.dequantized_routed, layer.dequantized_shared
    else:
        routed = np.stack([dequantize(q) for q in layer.quantized])
        shared = np.stack([dequantize(q) for q in layer.shared_quantized]) if layer.shared_quantized \
            else np.zeros((0, layer.spec.out_dim, layer.spec.in_dim), dtype=np.float32)
    out = apply_experts(xs, routed, routing)
    return apply_shared(xs, shared, out).astype(np.float32)


class _FusedPlan:
    """Per-layer constants for the fused path, derived once from the tiled factors.

    Row blocks whose placed experts all share one scaling vector fold ``diag(s)^-1`` into
    a single concatenated projection; other row blocks descale each routed token row
    before their own projection.
    """

    def __init__(self, tiled: TiledLowRank):
        tiled.validate()
        a = tiled.assignment
        self.grid_rows, self.grid_cols, self.rank = a.grid_rows, a.grid_cols, tiled.rank
        self.row_of = a.placed[:, 0].copy()
        self.col_of = a.placed[:, 1].copy()
        sigma = tiled.singulars.astype(np.float64)
        us = tiled.u_blocks.astype(np.float64) * sigma  # (M, i, r)
        inv = tiled.inverse_scaling
        self.inverse_scaling = inv
        self.row_projection = us
        self.uniform_slot = np.full(self.grid_rows, -1)
        uniform_mats = []
        for p in range(self.grid_rows):
            members = np.flatnonzero(self.row_of == p)
            if members.size and not all(np.array_equal(inv[members[0]], inv[e]) for e in members[1:]):
                continue
            descale = inv[members[0]] if members.size else np.ones(tiled.in_dim)
            self.uniform_slot[p] = len(uniform_mats)
            uniform_mats.append(descale[:, None] * us[p])
        self.nonuniform_rows = np.flatnonzero(self.uniform_slot < 0)
        self.shared_projection = np.concatenate(uniform_mats, axis=1) if uniform_mats else None
        self.output_factors = tiled.v_blocks.astype(np.float64).reshape(-1, tiled.out_dim)  # (N*r, o)


_PLANS: "weakref.WeakKeyDictionary[TiledLowRank, _FusedPlan]" = weakref.WeakKeyDictionary()


def fused_plan(tiled: TiledLowRank) -> _FusedPlan:
    plan = _PLANS.get(tiled)
    if plan is None:
        plan = _PLANS[tiled] = _FusedPlan(tiled)
    return plan


def _lotile64(xs: np.ndarray, tiled: TiledLowRank, routing: RoutingDecision,
              stats: ForwardStats) -> np.ndarray:
    plan = fused_plan(tiled)
    b, r = xs.shape[0], plan.rank
    ids, gates = routing.expert_ids, routing.gates
    topk = ids.shape[1]
    rows, cols = plan.row_of[ids], plan.col_of[ids]  # (B, topk)
    slices = np.zeros((b, topk, r))  # gathered r-slice per (token, slot)
    if plan.shared_projection is not None:
        proj = (xs @ plan.shared_projection).reshape(b, -1, r)
        stats.dispatches += 1
        stats.lowrank_values += proj.size
        slot = plan.uniform_slot[rows]
        hit = slot >= 0
        tok, kk = np.nonzero(hit)
        slices[tok, kk] = proj[tok, slot[tok, kk]]
    for p in plan.nonuniform_rows:
        tok, kk = np.nonzero(rows == p)
        descaled = xs[tok] * plan.inverse_scaling[ids[tok, kk]]
        slices[tok, kk] = descaled @ plan.row_projection[p]
        stats.dispatches += 1
        stats.scratch_values = max(stats.scratch_values, descaled.size)
    buffer = np.zeros((b, plan.grid_cols, r))
    tokens = np.arange(b)
    for t in range(topk):
        buffer[tokens, cols[:, t]] += gates[:, t, None] * slices[:, t]
    stats.lowrank_values += slices.size + buffer.size
    out = buffer.reshape(b, -1) @ plan.output_factors
    stats.dispatches += 1
    return out


def lotile_forward(x, tiled: TiledLowRank, routing: RoutingDecision,
                   stats: ForwardStats | None = None) -> np.ndarray:
    """Low-rank contribution of all routed experts through the compact column buffer.

    Token rows are projected onto the input-side blocks, each (token, expert) pair's
    r-slice at its row block is scaled by the gate and added to the pair's column slot of a
    ``B x (N*r)`` buffer, and a single product with the stacked output-side blocks gives
    the result. Slots are accumulated in ascending order.
    """
    xs = _check_input(x, tiled.in_dim)
    check_routing(routing, tiled.num_experts, xs.shape[0])
    try:
        out = _lotile64(xs, tiled, routing, stats if stats is not None else ForwardStats())
    except IndexError as exc:  # placement entries outside the stored blocks
        raise CorruptArtifactError(f"placement maps an expert outside the grid: {exc}") from exc
    return out.astype(np.float32)


def tileq_forward(x, layer: TileQLayer, routing: RoutingDecision) -> np.ndarray:
    """Dequantized residual path plus fused low-rank path."""
    return qmoe_forward(x, layer, routing) + lotile_forward(x, layer.tiled, routing)


def naive_lowrank_forward(x, tiled: TiledLowRank, routing: RoutingDecision) -> np.ndarray:
    """Reference: loop over tokens and slots applying each reconstructed low-rank expert."""
    xs = _check_input(x, tiled.in_dim)
    check_routing(routing, tiled.num_experts, xs.shape[0])
    cache: dict[int, np.ndarray] = {}
    out = np.zeros((xs.shape[0], tiled.out_dim))
    for b in range(xs.shape[0]):
        for t in range(routing.expert_ids.shape[1]):
            e = int(routing.expert_ids[b, t])
            if e not in cache:
                cache[e] = tiled.reconstruct(e)
            out[b] += routing.gates[b, t] * (cache[e] @ xs[b])
    return out.astype(np.float32)


def per_expert_factors(tiled: TiledLowRank) -> list[LowRankFactor]:
    """Independent ``o x r``, ``r``, ``r x i`` factors encoding each reconstructed expert.

    The vectors are not unit-normalized; the descaling is folded into the right factor.
    """
    sigma = tiled.singulars.astype(np.float64)
    factors = []
    for k, (p, q) in enumerate(tiled.assignment.placed):
        left = tiled.v_blocks[q].astype(np.float64).T
        right = tiled.u_blocks[p].astype(np.float64).T * tiled.inverse_scaling[k][None, :]
        factors.append(LowRankFactor(left=left, singulars=sigma.copy(), right=right))
    return factors


def baseline_elementwise_forward(x, factors: list[LowRankFactor], routing: RoutingDecision,
                                 stats: ForwardStats | None = None) -> np.ndarray:
    """Per (token, expert) pair: project with the right factor, expand with the left."""
    stats = stats if stats is not None else ForwardStats()
    xs = as_dense(x, "x")
    check_routing(routing, len(factors), xs.shape[0])
    out = np.zeros((xs.shape[0], factors[0].left.shape[0]))
    for b in range(xs.shape[0]):
        for t in range(routing.expert_ids.shape[1]):
            f = factors[int(routing.expert_ids[b, t])]
            h = f.right @ xs[b]
            out[b] += routing.gates[b, t] * ((f.left * f.singulars) @ h)
            stats.dispatches += 2
    stats.lowrank_values = max(f.rank for f in factors)
    return out.astype(np.float32)


def baseline_1d_forward(x, shared_u, per_expert_v, routing: RoutingDecision,
                        stats: ForwardStats | None = None) -> np.ndarray:
    """One shared input projection ``x @ U`` (``i x r``), then per-expert ``r x o`` products."""
    stats = stats if stats is not None else ForwardStats()
    xs = as_dense(x, "x")
    u = np.asarray(shared_u, dtype=np.float64)
    vs = np.asarray(per_expert_v, dtype=np.float64)
    check_routing(routing, vs.shape[0], xs.shape[0])
    proj = xs @ u
    stats.dispatches += 1
    out = np.zeros((xs.shape[0], vs.shape[2]))
    for t in range(routing.expert_ids.shape[1]):
        ids = routing.expert_ids[:, t]
        contrib = np.zeros_like(out)
        for e in np.unique(ids):
            sel = np.flatnonzero(ids == e)
            contrib[sel] = proj[sel] @ vs[e]
            stats.dispatches += 1
        out += routing.gates[:, t, None] * contrib
    stats.lowrank_values = proj.size + out.size
    return out.astype(np.float32)


def shared_1d_factors(tiled: TiledLowRank) -> tuple[np.ndarray, np.ndarray]:
    """1-D sharing layout with the tiled factor shapes: first row block as the shared
    projection and each expert's output-side block. Exact when the grid has one row and
    scaling is uniform; otherwise only the dispatch structure is representative."""
    u = tiled.u_blocks[0].astype(np.float64) * tiled.singulars.astype(np.float64)
    v = np.stack([tiled.v_blocks[q] for q in tiled.assignment.placed[:, 1]]).astype(np.float64)
    return u, v
