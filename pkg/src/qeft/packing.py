"""Bit-packing of low-precision weight codes.

Row-major layout with little-endian bit order inside every byte:
  * 4-bit: two codes per byte, low nibble holds the even column
  * 3-bit: one contiguous bitstream per row, each row padded up to a byte
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def row_bytes(m: int, bits: int) -> int:
    """Packed bytes per row of m codes."""
    if bits == 4:
        return (m + 1) // 2
    if bits == 3:
        return (3 * m + 7) // 8
    raise ShapeError(f"unsupported bit width {bits}")


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack an (OC, m) array of b-bit codes into bytes."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ShapeError(f"codes must be 2-D, got {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise ShapeError(f"code out of range for {bits}-bit packing")
    oc, m = codes.shape
    codes = codes.astype(np.uint8)

    if bits == 4:
        if m % 2:
            codes = np.concatenate(
                [codes, np.zeros((oc, 1), dtype=np.uint8)], axis=1)
        even, odd = codes[:, 0::2], codes[:, 1::2]
        return (even | (odd << 4)).tobytes()

    if bits == 3:
        rb = row_bytes(m, 3)
        bit_cols = np.unpackbits(codes[:, :, None], axis=2,
                                 bitorder="little", count=3)  # (oc, m, 3)
        stream = bit_cols.reshape(oc, 3 * m)
        pad = 8 * rb - 3 * m
        if pad:
            stream = np.concatenate(
                [stream, np.zeros((oc, pad), dtype=np.uint8)], axis=1)
        return np.packbits(stream, axis=1, bitorder="little").tobytes()

    raise ShapeError(f"unsupported bit width {bits}")


def unpack_codes(data: bytes, oc: int, m: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes; returns (oc, m) uint8."""
    rb = row_bytes(m, bits)
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != oc * rb:
        raise ShapeError(
            f"packed payload holds {raw.size} bytes, expected {oc * rb}")
    raw = raw.reshape(oc, rb)

    if bits == 4:
        out = np.empty((oc, 2 * rb), dtype=np.uint8)
        out[:, 0::2] = raw & 0x0F
        out[:, 1::2] = raw >> 4
        return np.ascontiguousarray(out[:, :m])

    bits_stream = np.unpackbits(raw, axis=1, bitorder="little")[:, :3 * m]
    tri = bits_stream.reshape(oc, m, 3)
    return (tri[:, :, 0] | (tri[:, :, 1] << 1) | (tri[:, :, 2] << 2)).astype(np.uint8)
