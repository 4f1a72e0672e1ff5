"""Residual quantizers: Hessian estimate, group-wise RTN, error-compensated GPTQ and codebook VQ."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, NumericError, ParameterError
from .linalg import as_dense, kmeans
from .packing import pack_codes, packed_length, unpack_codes

SCALAR_BITS = (2, 3, 4, 8)
SCALE_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class HessianProxy:
    matrix: np.ndarray  # (i, i) float64, damping included
    damping: float
    sample_count: int


def estimate_hessian(calib_inputs, damping_fraction: float = 0.01) -> HessianProxy:
    """``H = X^T X / T + lambda I`` with ``lambda = damping_fraction * mean(diag(X^T X / T))``."""
    x = np.asarray(calib_inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("Hessian estimation needs at least one calibration row")
    x = as_dense(x, "calib_inputs")
    if damping_fraction < 0:
        raise ParameterError("damping_fraction must be >= 0")
    h = x.T @ x / x.shape[0]
    h = 0.5 * (h + h.T)
    lam = damping_fraction * float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += lam
    return HessianProxy(matrix=h, damping=lam, sample_count=int(x.shape[0]))


def identity_hessian(dim: int) -> HessianProxy:
    return HessianProxy(matrix=np.eye(dim), damping=0.0, sample_count=0)


@dataclass(frozen=True, eq=False)
class QuantizedExpert:
    """Packed residual codes with per-group grids (scalar) or a codebook (vector)."""

    shape: tuple[int, int]
    bits: int
    group_size: int
    mode: str  # "scalar" or "vector"
    packed: np.ndarray  # uint8
    scales: np.ndarray | None = None  # (o, groups) float16
    zeros: np.ndarray | None = None  # (o, groups) uint8
    codebook: np.ndarray | None = None  # (2**bits, sub_dim) float16
    sub_dim: int = 1
    method: str = "rtn"

    @property
    def num_groups(self) -> int:
        return -(-self.shape[1] // self.group_size)

    @property
    def code_count(self) -> int:
        o, i = self.shape
        if self.mode == "vector":
            return o * (-(-i // self.sub_dim))
        return o * i

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.code_count, self.bits)


def _ceil_f16(x: np.ndarray) -> np.ndarray:
    """Smallest float16 value >= x (elementwise, x > 0), returned as float64."""
    h = x.astype(np.float16)
    low = h.astype(np.float64) < x
    h[low] = np.nextafter(h[low], np.float16(np.inf))
    h[h == 0] = np.nextafter(np.float16(0), np.float16(1))
    return h.astype(np.float64)


def _grid(block: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row affine grid for one group: float16-representable scale and integer zero."""
    maxq = (1 << bits) - 1
    lo = np.minimum(block.min(axis=1), 0.0)
    hi = np.maximum(block.max(axis=1), 0.0)
    scale = _ceil_f16(np.maximum((hi - lo) / maxq, SCALE_FLOOR))
    zero = np.clip(np.rint(-lo / scale), 0, maxq)
    return scale, zero


def _encode(values: np.ndarray, scale: np.ndarray, zero: np.ndarray, bits: int) -> np.ndarray:
    maxq = (1 << bits) - 1
    return np.clip(np.rint(values / scale) + zero, 0, maxq)


def _check_scalar_args(bits: int, group_size: int, in_dim: int) -> None:
    if bits not in SCALAR_BITS:
        raise ParameterError(f"bits must be one of {SCALAR_BITS}, got {bits}")
    if group_size < 1:
        raise ParameterError("group_size must be >= 1")


def _group_bounds(in_dim: int, group_size: int):
    return [(a, min(a + group_size, in_dim)) for a in range(0, in_dim, group_size)]


def _rtn_arrays(r: np.ndarray, bits: int, group_size: int):
    o, i = r.shape
    bounds = _group_bounds(i, group_size)
    codes = np.empty((o, i))
    scales = np.empty((o, len(bounds)))
    zeros = np.empty((o, len(bounds)))
    for g, (a, b) in enumerate(bounds):
        scale, zero = _grid(r[:, a:b], bits)
        codes[:, a:b] = _encode(r[:, a:b], scale[:, None], zero[:, None], bits)
        scales[:, g], zeros[:, g] = scale, zero
    return codes, scales, zeros


def _scalar_expert(codes, scales, zeros, bits, group_size, method) -> QuantizedExpert:
    return QuantizedExpert(
        shape=codes.shape, bits=bits, group_size=group_size, mode="scalar",
        packed=pack_codes(codes.astype(np.uint8), bits),
        scales=scales.astype(np.float16), zeros=zeros.astype(np.uint8), method=method)


def quantize_rtn(r, bits: int, group_size: int) -> QuantizedExpert:
    """Round-to-nearest group-wise affine quantization along the input dimension.

    Each group's range is widened to include zero so the zero point is a valid code.
    Scales are rounded up to the next float16 value, which keeps every element within
    half a step of its code.
    """
    w = as_dense(r, "residual")
    _check_scalar_args(bits, group_size, w.shape[1])
    codes, scales, zeros = _rtn_arrays(w, bits, group_size)
    return _scalar_expert(codes, scales, zeros, bits, group_size, "rtn")


def _dequant_arrays(codes, scales, zeros, group_size):
    cols = np.arange(codes.shape[1]) // group_size
    return (codes - zeros[:, cols]) * scales[:, cols]


def proxy_loss(residual, dequantized, h: HessianProxy | np.ndarray) -> float:
    """Hessian-weighted error ``tr(E H E^T)`` with ``E = residual - dequantized``."""
    hm = h.matrix if isinstance(h, HessianProxy) else np.asarray(h, dtype=np.float64)
    e = np.asarray(residual, dtype=np.float64) - np.asarray(dequantized, dtype=np.float64)
    return float(((e @ hm) * e).sum())


def _row_losses(e: np.ndarray, hm: np.ndarray) -> np.ndarray:
    return ((e @ hm) * e).sum(axis=1)


def quantize_gptq(r, h: HessianProxy, bits: int, group_size: int) -> QuantizedExpert:
    """Column-sequential quantization with inverse-Hessian error feedback.

    Columns are processed in natural order; a group's grid is fixed from the
    (already error-updated) weights when its first column is reached. After column ``j``
    is quantized its error is pushed onto the remaining columns through row ``j`` of the
    running inverse Hessian, which is then reduced by a rank-one Schur update. Rows whose
    weighted loss would exceed plain round-to-nearest fall back to the RTN result, so the
    output never loses to RTN on the proxy loss.
    """
    w = as_dense(r, "residual")
    o, i = w.shape
    _check_scalar_args(bits, group_size, i)
    hm = np.asarray(h.matrix, dtype=np.float64)
    if hm.shape != (i, i):
        raise ParameterError(f"Hessian is {hm.shape}, residual needs {(i, i)}")
    try:
        np.linalg.cholesky(hm)
        hinv = np.linalg.inv(hm)
    except np.linalg.LinAlgError as exc:
        raise NumericError("Hessian is singular after damping; increase damping_fraction") from exc
    if not np.all(np.isfinite(hinv)):
        raise NumericError("Hessian inverse is not finite; increase damping_fraction")
    bounds = _group_bounds(i, group_size)
    work = w.copy()
    codes = np.empty((o, i))
    scales = np.empty((o, len(bounds)))
    zeros = np.empty((o, len(bounds)))
    for g, (a, b) in enumerate(bounds):
        scale, zero = _grid(work[:, a:b], bits)
        scales[:, g], zeros[:, g] = scale, zero
        for j in range(a, b):
            c = _encode(work[:, j], scale, zero, bits)
            codes[:, j] = c
            err = (work[:, j] - (c - zero) * scale) / hinv[j, j]
            work[:, j + 1 :] -= np.outer(err, hinv[j, j + 1 :])
            hinv[j + 1 :, j + 1 :] -= np.outer(hinv[j + 1 :, j], hinv[j, j + 1 :]) / hinv[j, j]
    rtn_codes, rtn_scales, rtn_zeros = _rtn_arrays(w, bits, group_size)
    loss_g = _row_losses(w - _dequant_arrays(codes, scales, zeros, group_size), hm)
    loss_r = _row_losses(w - _dequant_arrays(rtn_codes, rtn_scales, rtn_zeros, group_size), hm)
    worse = loss_g > loss_r
    codes[worse], scales[worse], zeros[worse] = rtn_codes[worse], rtn_scales[worse], rtn_zeros[worse]
    return _scalar_expert(codes, scales, zeros, bits, group_size, "gptq")


def quantize_vq(r, h: HessianProxy | None = None, bits: int = 4, sub_dim: int = 2, seed: int = 0,
                max_iters: int = 50) -> QuantizedExpert:
    """Codebook quantization of ``sub_dim``-long row segments learned by k-means.

    Rows are zero-padded to a multiple of ``sub_dim``. The codebook is stored in float16
    and codes are assigned against the stored codebook. ``h`` is accepted for interface
    symmetry; the clustering is unweighted.
    """
    w = as_dense(r, "residual")
    o, i = w.shape
    if not 1 <= bits <= 8:
        raise ParameterError(f"codebook bits must be in [1, 8], got {bits}")
    if sub_dim < 1:
        raise ParameterError("sub_dim must be >= 1")
    per_row = -(-i // sub_dim)
    padded = np.zeros((o, per_row * sub_dim))
    padded[:, :i] = w
    subvecs = padded.reshape(-1, sub_dim)
    entries = 1 << bits
    if entries > subvecs.shape[0]:
        raise ParameterError(f"codebook of {entries} entries exceeds {subvecs.shape[0]} subvectors")
    km = kmeans(subvecs, entries, seed=seed, max_iters=max_iters)
    book = km.centroids.astype(np.float16)
    b64 = book.astype(np.float64)
    dist = (subvecs**2).sum(1)[:, None] - 2 * subvecs @ b64.T + (b64**2).sum(1)[None, :]
    codes = np.argmin(dist, axis=1)
    return QuantizedExpert(
        shape=(o, i), bits=bits, group_size=i, mode="vector",
        packed=pack_codes(codes.astype(np.uint8), bits), codebook=book, sub_dim=sub_dim, method="vq")


def dequantize(q: QuantizedExpert) -> np.ndarray:
    """Float32 reconstruction of a quantized residual."""
    o, i = q.shape
    codes = q.codes().astype(np.float64)
    if q.mode == "vector":
        if q.codebook is None:
            raise FormatError("vector-mode expert has no codebook")
        book = q.codebook.astype(np.float64)
        if codes.size and codes.max() >= book.shape[0]:
            raise FormatError("code exceeds codebook size")
        out = book[codes.astype(np.int64)].reshape(o, -1)[:, :i]
        return out.astype(np.float32)
    if q.mode != "scalar" or q.scales is None or q.zeros is None:
        raise FormatError(f"malformed quantized expert (mode {q.mode!r})")
    if q.scales.shape != (o, q.num_groups) or q.zeros.shape != (o, q.num_groups):
        raise FormatError("grid arrays do not match the expert shape")
    deq = _dequant_arrays(codes.reshape(o, i), q.scales.astype(np.float64),
                          q.zeros.astype(np.float64), q.group_size)
    return deq.astype(np.float32)


def quantize(r, mode: str, bits: int, group_size: int, h: HessianProxy | None = None,
             sub_dim: int = 2, seed: int = 0) -> QuantizedExpert:
    """Dispatch on ``mode`` in {"rtn", "gptq", "vq"}."""
    if mode == "rtn":
        return quantize_rtn(r, bits, group_size)
    if mode == "gptq":
        if h is None:
            raise ParameterError("gptq mode needs a Hessian")
        return quantize_gptq(r, h, bits, group_size)
    if mode == "vq":
        return quantize_vq(r, h, bits, sub_dim, seed)
    raise ParameterError(f"unknown quantization mode {mode!r}")


def expected_packed_length(q: QuantizedExpert) -> int:
    return packed_length(q.code_count, q.bits)
