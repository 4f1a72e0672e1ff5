"""End-to-end quantization of one MoE layer, quality reports and artifact self-checks."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .accounting import BitBudget, bits_tileq
from .errors import NumericError, ParameterError, TileQError
from .infer import (TileQLayer, lotile_forward, naive_lowrank_forward, qmoe_forward,
                    tileq_forward)
from .linalg import gaussian, make_rng, sketch_lowrank
from .moe import ExpertSet, MoELayerSpec, reference_forward, route
from .quantizer import (HessianProxy, dequantize, estimate_hessian, expected_packed_length,
                        identity_hessian, proxy_loss, quantize)
from .tiler import (TiledLowRank, bicluster, build_mosaic, calibration_mean_abs, compute_residuals,
                    compute_scaling, decompose_shared, default_grid, extract_features,
                    neutral_scaling, place)

STAGES = ("scaling", "features", "cluster", "place", "mosaic", "decompose", "quantize", "pack")
MODES = ("rtn", "gptq", "vq")


@dataclass(frozen=True)
class QuantConfig:
    """Pipeline knobs. ``grid=None`` picks the default grid, ``feature_rank=None`` uses rank/2."""

    rank: int = 32
    grid: tuple[int, int] | None = None
    feature_rank: int | None = None
    bits: int = 4
    group_size: int = 128
    scale_exp: float = 0.5
    power_iters: int = 4
    damping: float = 0.01
    mode: str = "gptq"
    sub_dim: int = 2
    seed: int = 0
    factor_codec: str = "int8"
    embedding: str = "subspace"

    def resolved_grid(self, num_experts: int) -> tuple[int, int]:
        return tuple(self.grid) if self.grid is not None else default_grid(num_experts)

    def resolved_feature_rank(self) -> int:
        return self.feature_rank if self.feature_rank is not None else max(1, self.rank // 2)

    def validate(self, spec: MoELayerSpec) -> None:
        m, n = self.resolved_grid(spec.num_experts)
        if m < 1 or n < 1 or m * n < spec.num_experts:
            raise ParameterError(f"grid {m}x{n} violates M*N >= K (K={spec.num_experts})")
        if not 1 <= self.rank <= min(m * spec.in_dim, n * spec.out_dim):
            raise ParameterError(f"rank {self.rank} violates 1 <= r <= min(M*i, N*o)")
        if not 1 <= self.resolved_feature_rank() <= min(spec.in_dim, spec.out_dim):
            raise ParameterError("feature rank must satisfy 1 <= r0 <= min(i, o)")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "vq":
            if not 1 <= self.bits <= 8 or self.sub_dim < 1:
                raise ParameterError("vq needs 1 <= bits <= 8 and sub_dim >= 1")
        elif self.bits not in (2, 3, 4, 8):
            raise ParameterError(f"scalar bits must be one of (2, 3, 4, 8), got {self.bits}")
        if self.group_size < 1 or self.power_iters < 0 or self.damping < 0:
            raise ParameterError("group_size >= 1, power_iters >= 0 and damping >= 0 are required")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = list(out["grid"]) if out["grid"] is not None else None
        return out


@dataclass
class QuantizeReport:
    stage_times: dict[str, float]
    lowrank_rel_error: list[float]
    final_rel_error: list[float]
    proxy_loss: float
    budget: BitBudget

    @property
    def mean_lowrank_rel_error(self) -> float:
        return float(np.mean(self.lowrank_rel_error))

    def to_dict(self) -> dict:
        return {
            "stage_times": dict(self.stage_times),
            "mean_lowrank_rel_error": self.mean_lowrank_rel_error,
            "mean_final_rel_error": float(np.mean(self.final_rel_error)),
            "proxy_loss": self.proxy_loss,
            "budget": self.budget.as_dict(),
        }


@contextmanager
def _stage(name: str, times: dict):
    start = time.perf_counter()
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            yield
    except (FloatingPointError, np.linalg.LinAlgError, NumericError) as exc:
        raise NumericError(f"numeric failure in stage {name!r}: {exc}") from exc
    times[name] = time.perf_counter() - start


def expert_hessians(calib, routing, spec: MoELayerSpec, damping: float) -> list[HessianProxy]:
    """Per routed expert, the Hessian proxy over the calibration tokens routed to it."""
    if calib is None:
        return [identity_hessian(spec.in_dim)] * spec.num_experts
    x = np.asarray(calib, dtype=np.float64)
    out = []
    for k in range(spec.num_experts):
        rows = np.flatnonzero((routing.expert_ids == k).any(axis=1))
        out.append(estimate_hessian(x[rows], damping) if rows.size else identity_hessian(spec.in_dim))
    return out


def layer_budget(cfg: QuantConfig, spec: MoELayerSpec) -> BitBudget:
    m, n = cfg.resolved_grid(spec.num_experts)
    i, o, k = spec.in_dim, spec.out_dim, spec.num_experts
    base = bits_tileq(cfg.bits, cfg.group_size, 16, 8, cfg.rank, i, o, k, m, n)
    if cfg.mode != "vq":
        return base
    cols = -(-i // cfg.sub_dim)
    return BitBudget("tileq_2d_vq", Fraction(cols * cfg.bits, i),
                     Fraction((1 << cfg.bits) * cfg.sub_dim * 16, o * i),
                     base.lowrank_factor_bits, base.singular_bits, base.params)


def quantize_layer(experts: ExpertSet, gate_weights, calib=None,
                   cfg: QuantConfig = QuantConfig()) -> tuple[TileQLayer, QuantizeReport]:
    """Scaling, features, biclustering, placement, mosaic, shared factorization, residual
    quantization and packing. Without calibration data the scaling is neutral and the
    quantizers see an identity Hessian."""
    spec = experts.spec
    cfg.validate(spec)
    m, n = cfg.resolved_grid(spec.num_experts)
    gate = np.asarray(gate_weights, dtype=np.float32)
    times: dict[str, float] = {}

    with _stage("scaling", times):
        routing = route(calib, gate, spec.top_k) if calib is not None else None
        if routing is None:
            scaling = neutral_scaling(spec.num_experts, spec.in_dim)
        else:
            stats, counts = calibration_mean_abs(calib, routing, spec.num_experts)
            scaling = compute_scaling(stats, cfg.scale_exp, counts)
    with _stage("features", times):
        u_emb, v_emb = extract_features(experts, scaling, cfg.resolved_feature_rank(), cfg.seed,
                                        cfg.power_iters, cfg.embedding)
    with _stage("cluster", times):
        ideal = bicluster(u_emb, v_emb, min(m, spec.num_experts), min(n, spec.num_experts), cfg.seed)
    with _stage("place", times):
        assignment = place(ideal, m, n)
    with _stage("mosaic", times):
        mosaic = build_mosaic(experts, scaling, assignment)
    with _stage("decompose", times):
        tiled = decompose_shared(mosaic, cfg.rank, cfg.power_iters, cfg.seed, assignment, scaling,
                                 codec="int8" if cfg.factor_codec == "int8" else "none")
        residuals = compute_residuals(experts, tiled)
    with _stage("quantize", times):
        hessians = expert_hessians(calib, routing, spec, cfg.damping)
        routed = [quantize(r, cfg.mode, cfg.bits, cfg.group_size, h, cfg.sub_dim, cfg.seed)
                  for r, h in zip(residuals, hessians)]
        shared_h = estimate_hessian(calib, cfg.damping) if calib is not None \
            else identity_hessian(spec.in_dim)
        shared = [quantize(w, cfg.mode, cfg.bits, cfg.group_size, shared_h, cfg.sub_dim, cfg.seed)
                  for w in experts.shared]
    with _stage("pack", times):
        for q in routed + shared:
            if q.packed.size != expected_packed_length(q):
                raise NumericError(f"packed length {q.packed.size} != {expected_packed_length(q)}")
        lowrank = tiled.reconstruct_all()
        w = experts.routed.astype(np.float64)
        norms = np.maximum(np.linalg.norm(w, axis=(1, 2)), 1e-30)
        lowrank_err = np.linalg.norm(w - lowrank, axis=(1, 2)) / norms
        deq = [dequantize(q) for q in routed]
        final_err = np.array([np.linalg.norm(w[k] - lowrank[k] - deq[k]) for k in range(len(deq))]) / norms
        loss = float(sum(proxy_loss(r, d, h) for r, d, h in zip(residuals, deq, hessians)))
        config = cfg.to_dict()
        config["grid"] = [m, n]
        config["feature_rank"] = cfg.resolved_feature_rank()
        config["final_rel_error"] = [float(e) for e in final_err]
        layer = TileQLayer(spec, tuple(routed), tiled, gate, tuple(shared), config)
    report = QuantizeReport(times, [float(e) for e in lowrank_err], [float(e) for e in final_err],
                            loss, layer_budget(cfg, spec))
    return layer, report


@dataclass
class ErrorBoundReport:
    """Per-expert ``(E_TileQ - E_ind) / ||W_k||_F`` at one tile rank."""

    tileq_error: list[float]
    independent_error: list[float]
    relative_gap: list[float]

    @property
    def mean_gap(self) -> float:
        return float(np.mean(self.relative_gap))

    def to_dict(self) -> dict:
        return {"tileq_error": self.tileq_error, "independent_error": self.independent_error,
                "relative_gap": self.relative_gap, "mean_gap": self.mean_gap}


def error_bound_report(experts: ExpertSet, tiled: TiledLowRank, power_iters: int = 4,
                       seed: int = 0) -> ErrorBoundReport:
    """Compare the tiled low-rank error against an independent per-expert sketch at the same
    rank, both in the scaled domain of each expert and measured after descaling."""
    rank = tiled.rank
    e_t, e_i, gap = [], [], []
    for k in range(experts.spec.num_experts):
        w = experts.routed[k].astype(np.float64)
        s = tiled.scaling.values[k].astype(np.float64)
        norm = max(float(np.linalg.norm(w)), 1e-30)
        et = float(np.linalg.norm(w - tiled.reconstruct(k)))
        r = min(rank, *w.shape)
        f = sketch_lowrank(w * s[None, :], r, power_iters, seed)
        ei = float(np.linalg.norm(w - f.reconstruct() / s[None, :]))
        e_t.append(et)
        e_i.append(ei)
        gap.append((et - ei) / norm)
    return ErrorBoundReport(e_t, e_i, gap)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(CheckResult(name, bool(passed), detail))

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
                "failed": [c.name for c in self.checks if not c.passed]}


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    a64, b64 = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a64 - b64) / max(np.linalg.norm(b64), 1e-30))


def verify_layer(layer: TileQLayer, experts: ExpertSet | None = None, batch: int = 8, seed: int = 0,
                 report: VerifyReport | None = None) -> VerifyReport:
    """Structural and numerical self-checks; with the source experts also re-measures the
    per-expert reconstruction error recorded at quantization time."""
    report = report if report is not None else VerifyReport()
    spec = layer.spec
    try:
        layer.tiled.validate()
        report.add("placement", True)
    except TileQError as exc:
        report.add("placement", False, str(exc))
        return report
    bad = [k for k, q in enumerate(layer.quantized) if q.packed.size != expected_packed_length(q)]
    report.add("packed_lengths", not bad, f"experts {bad}" if bad else "")
    try:
        x = gaussian(make_rng(seed), (batch, spec.in_dim)).astype(np.float32)
        routing = layer.route(x)
        fused = lotile_forward(x, layer.tiled, routing)
        naive = naive_lowrank_forward(x, layer.tiled, routing)
        err = _rel(fused, naive)
        report.add("fused_vs_naive", err <= 1e-5, f"rel {err:.3e}")
        deq = ExpertSet(spec, layer.dequantized_routed, layer.dequantized_shared)
        q = qmoe_forward(x, layer, routing)
        err = _rel(q, reference_forward(x, deq, routing))
        report.add("qmoe_vs_reference", err <= 1e-6, f"rel {err:.3e}")
        uncached = qmoe_forward(x, layer, routing, use_cache=False)
        report.add("dequant_cache_bitwise", np.array_equal(q, uncached))
        total = tileq_forward(x, layer, routing)
        report.add("decomposition_identity", np.array_equal(total, q + fused))
    except TileQError as exc:
        report.add("forward", False, str(exc))
        return report
    if experts is not None:
        recorded = layer.config.get("final_rel_error")
        w = experts.routed.astype(np.float64)
        approx = layer.tiled.reconstruct_all() + layer.dequantized_routed
        now = np.linalg.norm(w - approx, axis=(1, 2)) / np.maximum(np.linalg.norm(w, axis=(1, 2)), 1e-30)
        if recorded is None or len(recorded) != len(now):
            report.add("reconstruction", False, "artifact records no per-expert reconstruction error")
        else:
            drift = np.abs(now - np.asarray(recorded))
            worst = int(np.argmax(drift))
            report.add("reconstruction", bool(np.all(drift <= 1e-12)),
                       f"max drift {drift[worst]:.3e} at expert {worst}")
    return report


__all__ = [
    "CheckResult", "ErrorBoundReport", "MODES", "QuantConfig", "QuantizeReport", "STAGES",
    "VerifyReport", "error_bound_report", "expert_hessians", "layer_budget", "quantize_layer",
    "verify_layer",
]
