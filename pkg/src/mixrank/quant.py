"""Round-to-nearest per-channel weight quantization.

Two scale/zero conventions:

* ``affine_minmax`` (default): s = (max−min)/(2^N−1), z = round(−min/s).
  Guarantees per-entry reconstruction error <= s/2.
* ``paper_literal``: s = max/(2^N−1), z = −min/(2^N−1), kept verbatim for
  comparison even though it carries no error bound for channels with
  negative entries. The two coincide when min = 0.

Constant channels are stored with scale 1 and an offset that reconstructs
them exactly, in either mode.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix

MODES = ("affine_minmax", "paper_literal")


@dataclass(frozen=True)
class QuantizedMatrix:
    codes: np.ndarray   # unsigned integers in [0, 2^bits − 1]
    scales: np.ndarray  # one per channel, all > 0
    zeros: np.ndarray   # one per channel
    bits: int
    channel_axis: str   # "row" or "column"

    @property
    def shape(self):
        return self.codes.shape


def quantize(m, bits, mode="affine_minmax", channel_axis="column"):
    """Quantize per channel to `bits`-wide codes."""
    if not 2 <= bits <= 8:
        raise ValidationError(f"bits must lie in [2, 8], got {bits}")
    if mode not in MODES:
        raise ValidationError(f"unknown mode '{mode}'")
    if channel_axis not in ("row", "column"):
        raise ValidationError(f"channel_axis must be 'row' or 'column', got '{channel_axis}'")
    m = as_matrix(m)
    work = m.T if channel_axis == "row" else m  # channels along columns from here on
    levels = (1 << bits) - 1

    mn = work.min(axis=0)
    mx = work.max(axis=0)
    flat = mx == mn
    scales = np.empty(work.shape[1])
    zeros = np.empty(work.shape[1])
    if mode == "affine_minmax":
        span = np.where(flat, 1.0, mx - mn)
        scales[:] = np.where(flat, 1.0, span / levels)
        zeros[:] = np.where(flat, -mn, np.rint(-mn / scales))
    else:
        bad = ~flat & (mx <= 0.0)
        if bad.any():
            which = int(np.argmax(bad))
            raise ValidationError(
                f"paper_literal mode: channel {which} has max {mx[which]:.6g} <= 0, "
                "scale would not be positive"
            )
        scales[:] = np.where(flat, 1.0, mx / levels)
        zeros[:] = np.where(flat, -mn, -mn / levels)

    codes = np.clip(np.rint(work / scales + zeros), 0, levels).astype(np.uint8)
    if channel_axis == "row":
        codes = codes.T
    return QuantizedMatrix(codes=codes, scales=scales, zeros=zeros, bits=bits, channel_axis=channel_axis)


def dequantize(q):
    """Reconstruct per channel: s·(codes − z)."""
    codes = q.codes.astype(np.float64)
    if q.channel_axis == "row":
        return ((codes.T - q.zeros) * q.scales).T
    return (codes - q.zeros) * q.scales
