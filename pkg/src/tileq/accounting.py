"""Average bits-per-weight ledgers for the four storage schemes and forward FLOP counts.

All ledger arithmetic is done with exact rationals and converted to floats on output.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ParameterError

SCHEMES = ("basic", "per_expert", "shared_1d", "tileq_2d")


@dataclass(frozen=True)
class BitBudget:
    scheme: str
    base_bits: Fraction
    scale_bits: Fraction
    lowrank_factor_bits: Fraction
    singular_bits: Fraction
    params: tuple = ()

    @property
    def total_avg_bits(self) -> Fraction:
        return self.base_bits + self.scale_bits + self.lowrank_factor_bits + self.singular_bits

    @property
    def extra_bits(self) -> Fraction:
        """Low-rank overhead: factor plus singular-value bits."""
        return self.lowrank_factor_bits + self.singular_bits

    def as_dict(self) -> dict:
        out = {
            "scheme": self.scheme,
            "base_bits": float(self.base_bits),
            "scale_bits": float(self.scale_bits),
            "lowrank_factor_bits": float(self.lowrank_factor_bits),
            "singular_bits": float(self.singular_bits),
            "extra_lowrank_bits": float(self.extra_bits),
            "total_avg_bits": float(self.total_avg_bits),
        }
        out["params"] = dict(self.params)
        return out


def _q(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def _check(**values) -> None:
    for name, v in values.items():
        if v is None:
            continue
        if v < 0 or (name in ("i", "o", "K", "M", "N", "g") and v < 1):
            raise ParameterError(f"invalid accounting parameter {name}={v}")


def bits_basic(d, g, d_fp=16) -> BitBudget:
    _check(d=d, g=g, d_fp=d_fp)
    return BitBudget("basic", _q(d), _q(d_fp) / _q(g), Fraction(0), Fraction(0),
                     (("d", d), ("g", g), ("d_fp", d_fp)))


def bits_per_expert(d, g, d_fp=16, d_factor=8, r=32, i=1, o=1) -> BitBudget:
    _check(d=d, g=g, d_fp=d_fp, d_factor=d_factor, r=r, i=i, o=o)
    r, i, o = _q(r), _q(i), _q(o)
    return BitBudget(
        "per_expert", _q(d), _q(d_fp) / _q(g),
        r * _q(d_factor) * (1 / i + 1 / o), r * r * _q(d_fp) / (o * i),
        (("d", d), ("g", g), ("d_fp", d_fp), ("d_factor", d_factor), ("r", int(r)), ("i", int(i)),
         ("o", int(o))))


def bits_1d(d, g, d_fp=16, d_factor=8, r=32, i=1, o=1, K=1) -> BitBudget:
    _check(d=d, g=g, d_fp=d_fp, d_factor=d_factor, r=r, i=i, o=o, K=K)
    r, i, o, k = _q(r), _q(i), _q(o), _q(K)
    return BitBudget(
        "shared_1d", _q(d), _q(d_fp) / _q(g),
        r * _q(d_factor) * (1 / (k * i) + 1 / o), Fraction(0),
        (("d", d), ("g", g), ("d_fp", d_fp), ("d_factor", d_factor), ("r", int(r)), ("i", int(i)),
         ("o", int(o)), ("K", int(k))))


def bits_tileq(d, g, d_fp=16, d_factor=8, r=32, i=1, o=1, K=1, M=1, N=1) -> BitBudget:
    _check(d=d, g=g, d_fp=d_fp, d_factor=d_factor, r=r, i=i, o=o, K=K, M=M, N=N)
    r, i, o, k = _q(r), _q(i), _q(o), _q(K)
    return BitBudget(
        "tileq_2d", _q(d), _q(d_fp) / _q(g),
        r * _q(d_factor) * (_q(M) / (k * o) + _q(N) / (k * i)), r * r * _q(d_fp) / (k * o * i),
        (("d", d), ("g", g), ("d_fp", d_fp), ("d_factor", d_factor), ("r", int(r)), ("i", int(i)),
         ("o", int(o)), ("K", int(k)), ("M", M), ("N", N)))


def all_budgets(d, g, d_fp, d_factor, r, i, o, K, M, N) -> dict[str, BitBudget]:
    return {
        "basic": bits_basic(d, g, d_fp),
        "per_expert": bits_per_expert(d, g, d_fp, d_factor, r, i, o),
        "shared_1d": bits_1d(d, g, d_fp, d_factor, r, i, o, K),
        "tileq_2d": bits_tileq(d, g, d_fp, d_factor, r, i, o, K, M, N),
    }


def metadata_bits(d, g, i, o, K, M=1, N=1, router=True) -> Fraction:
    """Per routed weight, the stored bits the ledgers leave out.

    Counts zero points packed at ``d`` bits per group, float32 scaling vectors, the
    placement and ideal-cell tables (two u16 pairs per expert), one float32 absmax per
    factor block and, with ``router``, the float32 gate matrix. Shared experts and the
    manifest are not included.
    """
    _check(d=d, g=g, i=i, o=o, K=K, M=M, N=N)
    i, o, k = _q(i), _q(o), _q(K)
    groups = -(-int(i) // int(g))
    fixed = k * i * 32 * (2 if router else 1) + k * 4 * 16 + (_q(M) + _q(N)) * 32
    return _q(d) * groups / i + fixed / (k * o * i)


def flops_estimate(scheme: str, B: int, i: int, o: int, r: int, M: int = 1, N: int = 1,
                   K: int = 1, top_k: int = 1) -> int:
    """Multiply-add count of one forward over ``B`` tokens for the low-rank part of ``scheme``."""
    if scheme == "tileq_2d":
        return B * (i * M * r + N * r * o + top_k * r)
    if scheme in ("per_expert", "element_wise"):
        return B * top_k * (i * r + r * o)
    if scheme == "shared_1d":
        return B * (i * r + top_k * r * o)
    if scheme == "basic":
        return B * top_k * i * o
    raise ParameterError(f"unknown scheme {scheme!r}")


def budget_json(budgets: dict[str, BitBudget]) -> dict:
    out = {name: b.as_dict() for name, b in budgets.items()}
    if "tileq_2d" in budgets:
        t = budgets["tileq_2d"].extra_bits
        for other in ("per_expert", "shared_1d"):
            if other in budgets and t > 0:
                out[f"ratio_{other}_over_tileq_2d"] = float(budgets[other].extra_bits / t)
    return out


__all__ = [
    "BitBudget", "SCHEMES", "all_budgets", "bits_1d", "bits_basic", "bits_per_expert", "bits_tileq",
    "budget_json", "flops_estimate", "metadata_bits",
]
