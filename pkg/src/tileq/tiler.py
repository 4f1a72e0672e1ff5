"""Scaling, expert embeddings, biclustering, grid placement and the shared tiled factorization.

Orientation: each routed expert ``W_k`` is ``o x i``. Tiling works on the transposed scaled
expert ``(W_k diag(s_k))^T`` (``i x o``), so mosaic row blocks index the input side and
column blocks the output side. The shared factorization therefore yields ``M`` input-side
blocks ``u_p`` (``i x r``) and ``N`` output-side blocks ``v_q`` (``r x o``) and

    W~_k^T = diag(s_k)^-1 u_p diag(sigma) v_q,   (p, q) = placement of expert k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CorruptArtifactError, DataError, ParameterError, ShapeError
from .linalg import as_dense, gaussian, kmeans, make_rng, sketch_lowrank
from .moe import ExpertSet, RoutingDecision

SCALE_FLOOR = 1e-6
INT8_LEVELS = 127


@dataclass(frozen=True, eq=False)
class ScalingVectors:
    values: np.ndarray  # (K, i) float32, strictly positive

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DataError("scaling vectors must be a finite, strictly positive K x i array")

    @property
    def num_experts(self) -> int:
        return int(self.values.shape[0])


def neutral_scaling(num_experts: int, in_dim: int) -> ScalingVectors:
    return ScalingVectors(np.ones((num_experts, in_dim), dtype=np.float32))


def calibration_mean_abs(calib, routing: RoutingDecision, num_experts: int):
    """Per-expert, per-channel mean |x| over the tokens routed to that expert.

    Returns ``(stats, counts)``; rows with ``counts == 0`` are zero.
    """
    x = np.abs(as_dense(calib, "calib"))
    stats = np.zeros((num_experts, x.shape[1]))
    counts = np.zeros(num_experts, dtype=np.int64)
    for t in range(routing.expert_ids.shape[1]):
        ids = routing.expert_ids[:, t]
        np.add.at(stats, ids, x)
        np.add.at(counts, ids, 1)
    live = counts > 0
    stats[live] /= counts[live, None]
    return stats, counts


def compute_scaling(calib_mean_abs, exponent_p: float = 0.5, counts=None) -> ScalingVectors:
    """``s_k[j] = X_k[j]^p / sqrt(max_j X_k * min_j X_k)`` after flooring X at 1e-6.

    Experts whose ``counts`` entry is zero get a neutral all-ones vector.
    """
    stats = as_dense(calib_mean_abs, "calib_mean_abs")
    if np.any(stats < 0):
        raise DataError("calibration statistics must be nonnegative")
    stats = np.maximum(stats, SCALE_FLOOR)
    norm = np.sqrt(stats.max(axis=1, keepdims=True) * stats.min(axis=1, keepdims=True))
    s = stats**exponent_p / norm
    if counts is not None:
        s[np.asarray(counts) == 0] = 1.0
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise DataError("scaling produced non-positive or non-finite entries")
    return ScalingVectors(s.astype(np.float32))


def default_grid(num_experts: int) -> tuple[int, int]:
    m = max(1, int(math.floor(math.sqrt(num_experts) + 0.5)))
    return m, math.ceil(num_experts / m)


def scaled_transposed(experts: ExpertSet, scaling: ScalingVectors, k: int) -> np.ndarray:
    """``(W_k diag(s_k))^T`` as an ``i x o`` float64 block."""
    w = experts.routed[k].astype(np.float64) * scaling.values[k].astype(np.float64)[None, :]
    return w.T


def extract_features(experts: ExpertSet, scaling: ScalingVectors, feature_rank: int,
                     seed: int = 0, power_iters: int = 4, embedding: str = "subspace"):
    """Unit-norm input-side (K x i*r0) and output-side (K x r0*o) embeddings per expert.

    Each scaled, transposed expert is factored at rank ``r0`` with the sketch. With
    ``embedding="raw"`` the factors ``U`` and ``V`` are flattened directly. The default
    ``"subspace"`` flattens ``U diag(sigma) U^T G_in`` and ``G_out^T V^T diag(sigma) V``
    for fixed Gaussian probes ``G``; these have the same sizes but do not depend on the
    arbitrary sign or rotation of individual singular vectors, so experts sharing a
    subspace land close together.
    """
    spec = experts.spec
    i, o = spec.in_dim, spec.out_dim
    if feature_rank < 1 or feature_rank > min(i, o):
        raise ParameterError(f"feature rank must be in [1, {min(i, o)}]")
    if embedding not in ("subspace", "raw"):
        raise ParameterError(f"unknown embedding {embedding!r}")
    rng = make_rng(seed)
    probe_in = gaussian(rng, (i, feature_rank))
    probe_out = gaussian(rng, (o, feature_rank))
    u_emb, v_emb = [], []
    for k in range(spec.num_experts):
        f = sketch_lowrank(scaled_transposed(experts, scaling, k), feature_rank, power_iters, seed)
        if embedding == "raw":
            u, v = f.left.ravel(), f.right.ravel()
        else:
            u = ((f.left * f.singulars) @ (f.left.T @ probe_in)).ravel()
            v = ((probe_out.T @ f.right.T * f.singulars) @ f.right).ravel()
        u_emb.append(_unit_or_zero(u))
        v_emb.append(_unit_or_zero(v))
    return np.stack(u_emb), np.stack(v_emb)


def _unit_or_zero(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def bicluster(u_embeddings, v_embeddings, grid_rows: int, grid_cols: int, seed: int = 0,
              max_iters: int = 100) -> np.ndarray:
    """Ideal cell per expert: (row label from input-side kmeans, column label from output-side)."""
    rows = kmeans(u_embeddings, grid_rows, seed=seed, max_iters=max_iters).labels
    cols = kmeans(v_embeddings, grid_cols, seed=seed, max_iters=max_iters).labels
    return np.stack([rows, cols], axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class TileAssignment:
    grid_rows: int
    grid_cols: int
    ideal: np.ndarray  # (K, 2)
    placed: np.ndarray  # (K, 2)
    total_l1_displacement: int

    @property
    def num_experts(self) -> int:
        return int(self.placed.shape[0])

    def validate(self) -> None:
        placed = self.placed
        if placed.ndim != 2 or placed.shape[1] != 2:
            raise CorruptArtifactError("placement table must be K x 2")
        if placed.size and (placed.min() < 0 or np.any(placed[:, 0] >= self.grid_rows)
                            or np.any(placed[:, 1] >= self.grid_cols)):
            raise CorruptArtifactError(
                f"placement maps an expert outside the {self.grid_rows}x{self.grid_cols} grid")
        cells = placed[:, 0] * self.grid_cols + placed[:, 1]
        if np.unique(cells).size != cells.size:
            raise CorruptArtifactError("placement assigns two experts to one tile")


def place(ideal, grid_rows: int, grid_cols: int) -> TileAssignment:
    """Greedy injective placement by Chebyshev rings around each expert's anchor cell.

    Experts are handled in ascending index. Ring ``rho`` around the anchor is scanned
    row-major and the first free cell is taken.
    """
    ideal = np.asarray(ideal, dtype=np.int64).reshape(-1, 2)
    k = ideal.shape[0]
    if grid_rows < 1 or grid_cols < 1 or grid_rows * grid_cols < k:
        raise ParameterError(f"grid {grid_rows}x{grid_cols} cannot hold {k} experts")
    free = np.ones((grid_rows, grid_cols), dtype=bool)
    placed = np.empty_like(ideal)
    for e in range(k):
        a = min(max(int(ideal[e, 0]), 0), grid_rows - 1)
        b = min(max(int(ideal[e, 1]), 0), grid_cols - 1)
        cell = _first_free(free, a, b)
        free[cell] = False
        placed[e] = cell
    disp = int(np.abs(placed - ideal).sum())
    return TileAssignment(grid_rows, grid_cols, ideal.copy(), placed, disp)


def _first_free(free: np.ndarray, a: int, b: int) -> tuple[int, int]:
    rows, cols = free.shape
    for rho in range(max(rows, cols)):
        for p in range(max(0, a - rho), min(rows, a + rho + 1)):
            for q in range(max(0, b - rho), min(cols, b + rho + 1)):
                if max(abs(p - a), abs(q - b)) == rho and free[p, q]:
                    return p, q
    raise ParameterError("no free tile left")  # unreachable when rows*cols >= K


def build_mosaic(experts: ExpertSet, scaling: ScalingVectors, assignment: TileAssignment) -> np.ndarray:
    """``(M*i) x (N*o)`` matrix with each transposed scaled expert at its placed tile."""
    spec = experts.spec
    if assignment.num_experts != spec.num_experts or scaling.num_experts != spec.num_experts:
        raise ShapeError("assignment, scaling and experts disagree on the number of experts")
    assignment.validate()
    i, o = spec.in_dim, spec.out_dim
    big = np.zeros((assignment.grid_rows * i, assignment.grid_cols * o))
    for k, (p, q) in enumerate(assignment.placed):
        big[p * i : (p + 1) * i, q * o : (q + 1) * o] = scaled_transposed(experts, scaling, k)
    return big


def encode_int8(block) -> tuple[np.ndarray, np.float32]:
    """Symmetric absmax codec: int8 codes in [-127, 127] and one float32 scale per block."""
    b = np.asarray(block, dtype=np.float64)
    absmax = np.float32(np.abs(b).max()) if b.size else np.float32(0.0)
    if absmax == 0:
        return np.zeros(b.shape, dtype=np.int8), absmax
    codes = np.clip(np.rint(b / np.float64(absmax) * INT8_LEVELS), -INT8_LEVELS, INT8_LEVELS)
    return codes.astype(np.int8), absmax


def decode_int8(codes: np.ndarray, absmax) -> np.ndarray:
    return codes.astype(np.float32) * (np.float32(absmax) / np.float32(INT8_LEVELS))


def roundtrip_f16(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).astype(np.float16).astype(np.float32)


@dataclass(frozen=True, eq=False)
class TiledLowRank:
    """Shared factors of the tiled mosaic plus placement and scaling.

    ``u_codes``/``v_codes`` hold the 8-bit codec representation when present; the float
    blocks are then exactly their decoded values.
    """

    u_blocks: np.ndarray  # (M, i, r) float32
    singulars: np.ndarray  # (r,) float32, values representable in float16
    v_blocks: np.ndarray  # (N, r, o) float32
    assignment: TileAssignment
    scaling: ScalingVectors
    u_codes: np.ndarray | None = None  # (M, i, r) int8
    u_absmax: np.ndarray | None = None  # (M,) float32
    v_codes: np.ndarray | None = None  # (N, r, o) int8
    v_absmax: np.ndarray | None = None  # (N,) float32

    @property
    def rank(self) -> int:
        return int(self.singulars.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.u_blocks.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.v_blocks.shape[2])

    @property
    def num_experts(self) -> int:
        return self.assignment.num_experts

    @classmethod
    def from_codes(cls, u_codes, u_absmax, singulars, v_codes, v_absmax, assignment, scaling):
        u = np.stack([decode_int8(c, a) for c, a in zip(u_codes, u_absmax)])
        v = np.stack([decode_int8(c, a) for c, a in zip(v_codes, v_absmax)])
        return cls(u, roundtrip_f16(singulars), v, assignment, scaling,
                   np.asarray(u_codes, dtype=np.int8), np.asarray(u_absmax, dtype=np.float32),
                   np.asarray(v_codes, dtype=np.int8), np.asarray(v_absmax, dtype=np.float32))

    def validate(self) -> None:
        self.assignment.validate()
        m, n = self.assignment.grid_rows, self.assignment.grid_cols
        if self.u_blocks.shape[0] != m or self.v_blocks.shape[0] != n:
            raise CorruptArtifactError("factor block counts disagree with the grid")
        if self.scaling.values.shape != (self.num_experts, self.in_dim):
            raise CorruptArtifactError("scaling vectors disagree with the factors")

    def reconstruct(self, k: int) -> np.ndarray:
        """Low-rank approximation of expert ``k`` in the original ``o x i`` domain (float64)."""
        p, q = self.assignment.placed[k]
        u = self.u_blocks[p].astype(np.float64) * self.singulars.astype(np.float64)
        wt = (u @ self.v_blocks[q].astype(np.float64)) / self.scaling.values[k].astype(np.float64)[:, None]
        return wt.T

    def reconstruct_all(self) -> np.ndarray:
        return np.stack([self.reconstruct(k) for k in range(self.num_experts)])

    @cached_property
    def inverse_scaling(self) -> np.ndarray:
        return 1.0 / self.scaling.values.astype(np.float64)


def decompose_shared(w_big, rank: int, power_iters: int, seed: int,
                     assignment: TileAssignment, scaling: ScalingVectors,
                     codec: str = "int8") -> TiledLowRank:
    """Shared rank-``rank`` factorization of the mosaic, sliced into grid blocks.

    ``codec="int8"`` stores factor blocks through the 8-bit absmax codec and the singular
    values through float16; ``codec="none"`` keeps float32 factors and float32 singulars.
    """
    big = as_dense(w_big, "w_big")
    m, n = assignment.grid_rows, assignment.grid_cols
    if big.shape[0] % m or big.shape[1] % n:
        raise ShapeError(f"mosaic shape {big.shape} is not divisible by grid {m}x{n}")
    if not 1 <= rank <= min(big.shape):
        raise ParameterError(f"rank must be in [1, {min(big.shape)}], got {rank}")
    i, o = big.shape[0] // m, big.shape[1] // n
    f = sketch_lowrank(big, rank, power_iters, seed)
    u = f.left.reshape(m, i, rank)
    v = f.right.reshape(rank, n, o).transpose(1, 0, 2)
    if codec == "none":
        return TiledLowRank(u.astype(np.float32), f.singulars.astype(np.float32),
                            v.astype(np.float32), assignment, scaling)
    if codec != "int8":
        raise ParameterError(f"unknown factor codec {codec!r}")
    u_enc = [encode_int8(b) for b in u]
    v_enc = [encode_int8(b) for b in v]
    return TiledLowRank.from_codes(
        np.stack([c for c, _ in u_enc]), np.array([a for _, a in u_enc], dtype=np.float32),
        f.singulars,
        np.stack([c for c, _ in v_enc]), np.array([a for _, a in v_enc], dtype=np.float32),
        assignment, scaling)


def compute_residuals(experts: ExpertSet, tiled: TiledLowRank) -> np.ndarray:
    """``R_k = W_k - W~_k`` in the unscaled domain, float64, shape (K, o, i)."""
    if tiled.num_experts != experts.spec.num_experts or tiled.in_dim != experts.spec.in_dim \
            or tiled.out_dim != experts.spec.out_dim:
        raise ShapeError("tiled factors do not match the expert set")
    return experts.routed.astype(np.float64) - tiled.reconstruct_all()
