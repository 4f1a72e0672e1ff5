"""Wall-clock microbenchmarks of the low-rank forward layouts."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .infer import (ForwardStats, TileQLayer, baseline_1d_forward, baseline_elementwise_forward,
                    lotile_forward, per_expert_factors, qmoe_forward, shared_1d_factors)
from .linalg import gaussian, make_rng
from .moe import RoutingDecision

LAYOUTS = ("fused_2d", "shared_1d", "element_wise", "dequant_only")
DEFAULT_LAYOUTS = ("fused_2d", "shared_1d", "element_wise")
DEFAULT_BATCHES = (1, 4, 16, 64)
CSV_HEADER = "layout,batch,median_ns,p10_ns,p90_ns,dispatch_count"


@dataclass(frozen=True)
class BenchReport:
    layout: str
    batch: int
    wall_times: tuple[int, ...]  # nanoseconds
    dispatch_count: int

    def __post_init__(self):
        if not self.wall_times:
            raise ParameterError("a bench report needs at least one measurement")
        if self.dispatch_count < 1:
            raise ParameterError("dispatch_count must be >= 1")

    @property
    def median_ns(self) -> float:
        return float(np.median(self.wall_times))

    @property
    def p10_ns(self) -> float:
        return float(np.percentile(self.wall_times, 10))

    @property
    def p90_ns(self) -> float:
        return float(np.percentile(self.wall_times, 90))

    def csv_row(self) -> str:
        return (f"{self.layout},{self.batch},{self.median_ns:.0f},{self.p10_ns:.0f},"
                f"{self.p90_ns:.0f},{self.dispatch_count}")

    def to_dict(self) -> dict:
        return {"layout": self.layout, "batch": self.batch, "median_ns": self.median_ns,
                "p10_ns": self.p10_ns, "p90_ns": self.p90_ns, "dispatch_count": self.dispatch_count,
                "wall_times": list(self.wall_times)}


def to_csv(reports: list[BenchReport]) -> str:
    return "\n".join([CSV_HEADER, *(r.csv_row() for r in reports)]) + "\n"


def _dequant_dispatches(layer: TileQLayer, routing: RoutingDecision) -> int:
    per_slot = sum(np.unique(routing.expert_ids[:, t]).size for t in range(routing.expert_ids.shape[1]))
    return per_slot + layer.spec.num_shared


def _runner(layout: str, layer: TileQLayer):
    """``fn(x, routing, stats) -> output`` for one layout, with per-layer constants prepared."""
    if layout == "fused_2d":
        return lambda x, rt, st: lotile_forward(x, layer.tiled, rt, st)
    if layout == "shared_1d":
        u, v = shared_1d_factors(layer.tiled)
        return lambda x, rt, st: baseline_1d_forward(x, u, v, rt, st)
    if layout == "element_wise":
        factors = per_expert_factors(layer.tiled)
        return lambda x, rt, st: baseline_elementwise_forward(x, factors, rt, st)
    if layout == "dequant_only":
        def run(x, rt, st):
            st.dispatches += _dequant_dispatches(layer, rt)
            return qmoe_forward(x, layer, rt)
        return run
    raise ParameterError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def _split(routing: RoutingDecision, parts: int) -> list[slice]:
    edges = np.linspace(0, routing.batch, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def bench(layer: TileQLayer, layouts=DEFAULT_LAYOUTS, batches=DEFAULT_BATCHES, repeats: int = 7,
          warmup: int = 1, seed: int = 0, threads: int = 1) -> list[BenchReport]:
    """Time each layout at each batch size on seeded Gaussian inputs routed by the layer.

    ``threads > 1`` splits the batch into contiguous row chunks run concurrently; the
    dispatch count is always taken from one single-threaded call.
    """
    if repeats < 5 or warmup < 1:
        raise ParameterError("bench needs repeats >= 5 and warmup >= 1")
    if threads < 1:
        raise ParameterError("threads must be >= 1")
    runners = {name: _runner(name, layer) for name in layouts}
    reports = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for batch in batches:
            x = gaussian(make_rng(seed + batch), (batch, layer.spec.in_dim)).astype(np.float32)
            routing = layer.route(x)
            chunks = _split(routing, threads)
            for name, fn in runners.items():
                stats = ForwardStats()
                fn(x, routing, stats)

                def once():
                    if pool is None:
                        return fn(x, routing, ForwardStats())
                    jobs = [pool.submit(fn, x[c], RoutingDecision(routing.expert_ids[c], routing.gates[c]),
                                        ForwardStats()) for c in chunks]
                    return np.concatenate([j.result() for j in jobs])

                for _ in range(warmup):
                    once()
                times = []
                for _ in range(repeats):
                    start = time.perf_counter_ns()
                    once()
                    times.append(time.perf_counter_ns() - start)
                reports.append(BenchReport(name, batch, tuple(times), max(stats.dispatches, 1)))
    finally:
        if pool is not None:
            pool.shutdown()
    return reports


__all__ = ["BenchReport", "CSV_HEADER", "DEFAULT_BATCHES", "DEFAULT_LAYOUTS", "LAYOUTS", "bench", "to_csv"]
