"""Fixed-width bit packing: LSB-first within each byte, bytes in little-endian stream order."""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ParameterError


def packed_length(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack unsigned integer codes (each < 2**bits) into a uint8 array."""
    if not 1 <= bits <= 8:
        raise ParameterError(f"bit width must be in [1, 8], got {bits}")
    c = np.asarray(codes).ravel()
    if c.size and (c.min() < 0 or c.max() >= (1 << bits)):
        raise ParameterError(f"codes must lie in [0, {1 << bits})")
    c = c.astype(np.uint8)
    if bits == 8:
        return c.copy()
    stream = ((c[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8).ravel()
    return np.packbits(stream, bitorder="little")


def unpack_codes(packed, count: int, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; rejects wrong lengths and nonzero trailing bits."""
    if not 1 <= bits <= 8:
        raise ParameterError(f"bit width must be in [1, 8], got {bits}")
    data = np.asarray(packed, dtype=np.uint8).ravel()
    expected = packed_length(count, bits)
    if data.size != expected:
        raise FormatError(f"packed length {data.size} bytes, expected {expected} for {count} x {bits}-bit codes")
    if bits == 8:
        return data.copy()
    stream = np.unpackbits(data, bitorder="little")
    if stream[count * bits :].any():
        raise FormatError("nonzero padding bits after the last packed code")
    fields = stream[: count * bits].reshape(count, bits)
    return (fields << np.arange(bits, dtype=np.uint8)).sum(axis=1, dtype=np.uint8)
